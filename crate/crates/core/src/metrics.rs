//! Evaluation: Hungarian label mapping, reliable-label mask, NMI, EER and the
//! reliable/unreliable loss-curve split.
//!
//! These are the only functions that consume ground-truth speaker ids.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, TrialPair};
use crate::error::{domain, numeric, Result};
use crate::math::{dot, Matrix};

/// Minimum-cost injective matching between rows and columns of a cost matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// Column matched to each row, `None` for unmatched rows.
    pub row_to_col: Vec<Option<usize>>,
    pub total_cost: f64,
}

impl Assignment {
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.row_to_col
            .iter()
            .enumerate()
            .filter_map(|(r, c)| c.map(|c| (r, c)))
    }
}

/// Hungarian algorithm (shortest augmenting paths with potentials), O(n^2 m).
/// Matches `min(rows, cols)` pairs.
pub fn hungarian(cost: &Matrix) -> Result<Assignment> {
    if !cost.is_finite() {
        return Err(domain("hungarian: cost matrix has non-finite entries"));
    }
    let (r, c) = cost.shape();
    if r == 0 || c == 0 {
        return Ok(Assignment {
            row_to_col: vec![None; r],
            total_cost: 0.0,
        });
    }
    let transposed = r > c;
    let at = |i: usize, j: usize| if transposed { cost.get(j, i) } else { cost.get(i, j) };
    let (n, m) = if transposed { (c, r) } else { (r, c) };

    // 1-based potentials; column 0 is a virtual source.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![None; r];
    let mut total = 0.0;
    for j in 1..=m {
        if p[j] != 0 {
            let (row, col) = if transposed { (j - 1, p[j] - 1) } else { (p[j] - 1, j - 1) };
            row_to_col[row] = Some(col);
            total += cost.get(row, col);
        }
    }
    Ok(Assignment {
        row_to_col,
        total_cost: total,
    })
}

/// Dense relabeling of arbitrary ids to `0..k`, in increasing id order.
fn densify(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map = BTreeMap::new();
    for &l in labels {
        let next = map.len();
        map.entry(l).or_insert(next);
    }
    // Re-number in sorted order so the result does not depend on first-seen order.
    for (i, v) in map.values_mut().enumerate() {
        *v = i;
    }
    let k = map.len();
    (labels.iter().map(|l| map[l]).collect(), k)
}

/// Counts `table[a][b]` of co-occurring labels.
struct Contingency {
    table: Vec<Vec<usize>>,
    a_ids: Vec<usize>,
    b_ids: Vec<usize>,
}

fn contingency(a: &[usize], b: &[usize]) -> Contingency {
    let (da, ka) = densify(a);
    let (db, kb) = densify(b);
    let mut table = vec![vec![0usize; kb]; ka];
    for (&x, &y) in da.iter().zip(&db) {
        table[x][y] += 1;
    }
    let mut a_ids: Vec<usize> = a.to_vec();
    a_ids.sort_unstable();
    a_ids.dedup();
    let mut b_ids: Vec<usize> = b.to_vec();
    b_ids.sort_unstable();
    b_ids.dedup();
    Contingency { table, a_ids, b_ids }
}

fn check_coverage(a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() {
        return Err(domain(format!(
            "labelings cover different utterance counts: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Utterances whose pseudo label maps to their true speaker under the
/// agreement-maximizing one-to-one cluster -> speaker mapping.
pub fn reliable_mask(truth: &[usize], pseudo: &[usize]) -> Result<Vec<bool>> {
    check_coverage(truth, pseudo)?;
    if truth.is_empty() {
        return Ok(Vec::new());
    }
    let ct = contingency(pseudo, truth);
    let rows = ct.table.len();
    let cols = ct.table[0].len();
    let mut cost = Matrix::zeros(rows, cols);
    for (i, row) in ct.table.iter().enumerate() {
        for (j, &count) in row.iter().enumerate() {
            cost.set(i, j, -(count as f64));
        }
    }
    let assignment = hungarian(&cost)?;
    // cluster id -> speaker id
    let mapping: BTreeMap<usize, usize> = assignment
        .pairs()
        .map(|(r, c)| (ct.a_ids[r], ct.b_ids[c]))
        .collect();
    Ok(truth
        .iter()
        .zip(pseudo)
        .map(|(t, p)| mapping.get(p) == Some(t))
        .collect())
}

pub fn cluster_accuracy(truth: &[usize], pseudo: &[usize]) -> Result<f64> {
    let mask = reliable_mask(truth, pseudo)?;
    if mask.is_empty() {
        return Err(domain("cluster accuracy of an empty labeling"));
    }
    Ok(mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64)
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// NMI with natural-log entropies normalized by their geometric mean.
///
/// When either labeling has zero entropy the result is 1 if the two are the
/// same partition and 0 otherwise.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    check_coverage(a, b)?;
    if a.is_empty() {
        return Err(domain("nmi of empty labelings"));
    }
    let n = a.len() as f64;
    let ct = contingency(a, b);
    let ka = ct.table.len();
    let kb = ct.table[0].len();
    let row_sums: Vec<usize> = ct.table.iter().map(|r| r.iter().sum()).collect();
    let col_sums: Vec<usize> = (0..kb).map(|j| ct.table.iter().map(|r| r[j]).sum()).collect();
    let ha = entropy(row_sums.iter().copied(), n);
    let hb = entropy(col_sums.iter().copied(), n);
    if ha == 0.0 || hb == 0.0 {
        let same = ka == kb && ct.table.iter().all(|r| r.iter().filter(|&&c| c > 0).count() == 1);
        return Ok(if same { 1.0 } else { 0.0 });
    }
    let mut mi = 0.0;
    for i in 0..ka {
        for j in 0..kb {
            let c = ct.table[i][j];
            if c > 0 {
                let pij = c as f64 / n;
                mi += pij * (c as f64 * n / (row_sums[i] as f64 * col_sums[j] as f64)).ln();
            }
        }
    }
    Ok((mi / (ha * hb).sqrt()).clamp(0.0, 1.0))
}

/// Equal error rate and the threshold where it occurs.
///
/// Thresholds sweep the distinct scores in increasing order, followed by a
/// final point above every score. At threshold `t`, FAR is the fraction of
/// nontargets scoring `>= t` and FRR the fraction of targets scoring `< t`.
/// The EER is read where the two curves meet, linearly interpolating between
/// the bracketing sweep points.
pub fn eer(scores: &[f64], is_target: &[bool]) -> Result<(f64, f64)> {
    if scores.len() != is_target.len() {
        return Err(domain("eer: scores and labels differ in length"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(numeric("eer: non-finite score"));
    }
    let n_t = is_target.iter().filter(|&&t| t).count();
    let n_n = is_target.len() - n_t;
    if n_t == 0 || n_n == 0 {
        return Err(domain("eer needs at least one target and one nontarget trial"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Walk thresholds upward. Before threshold t_k, everything below it has been consumed.
    let mut below_t = 0usize; // targets with score < t
    let mut below_n = 0usize; // nontargets with score < t
    let mut prev: Option<(f64, f64, f64)> = None; // (threshold, far, frr)
    let mut pos = 0;
    loop {
        let threshold = if pos < idx.len() { scores[idx[pos]] } else { f64::INFINITY };
        let far = (n_n - below_n) as f64 / n_n as f64;
        let frr = below_t as f64 / n_t as f64;
        if frr >= far {
            return Ok(match prev {
                Some((t0, far0, frr0)) if frr > far => {
                    let d0 = far0 - frr0;
                    let d1 = far - frr;
                    let alpha = d0 / (d0 - d1);
                    let rate = far0 + alpha * (far - far0);
                    let t = if threshold.is_finite() { t0 + alpha * (threshold - t0) } else { t0 };
                    (rate, t)
                }
                _ => (far, threshold),
            });
        }
        prev = Some((threshold, far, frr));
        if pos >= idx.len() {
            unreachable!("frr reaches 1 and far reaches 0 past the last score");
        }
        // consume every trial with this score
        while pos < idx.len() && scores[idx[pos]] == threshold {
            if is_target[idx[pos]] {
                below_t += 1;
            } else {
                below_n += 1;
            }
            pos += 1;
        }
    }
}

/// Cosine score of each trial given unit-norm embeddings (one row per utterance).
pub fn score_trials(embeddings: &Matrix, trials: &[TrialPair]) -> Result<Vec<f64>> {
    trials
        .iter()
        .map(|t| {
            if t.utt_a >= embeddings.rows() || t.utt_b >= embeddings.rows() {
                return Err(domain(format!("trial ({}, {}) references a missing utterance", t.utt_a, t.utt_b)));
            }
            Ok(dot(embeddings.row(t.utt_a), embeddings.row(t.utt_b)).clamp(-1.0, 1.0))
        })
        .collect()
}

/// Text lines `<utt_a> <utt_b> <score>`.
pub fn write_scores<W: Write>(trials: &[TrialPair], scores: &[f64], mut w: W) -> Result<()> {
    for (t, s) in trials.iter().zip(scores) {
        writeln!(w, "{} {} {}", t.utt_a, t.utt_b, s)?;
    }
    Ok(())
}

/// Per-epoch mean loss over reliable and unreliable samples. A subset with no
/// members yields `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSplit {
    pub reliable: Option<Vec<f64>>,
    pub unreliable: Option<Vec<f64>>,
}

/// `traces[sample][epoch]` -> mean curves per subset.
pub fn toy_loss_split(traces: &[Vec<f64>], reliable: &[bool]) -> Result<LossSplit> {
    if traces.len() != reliable.len() {
        return Err(domain(format!(
            "{} traced samples but mask covers {}",
            traces.len(),
            reliable.len()
        )));
    }
    let epochs = traces.first().map_or(0, Vec::len);
    if traces.iter().any(|t| t.len() != epochs) {
        return Err(domain("loss traces have different lengths"));
    }
    let curve = |want: bool| -> Option<Vec<f64>> {
        let members: Vec<&Vec<f64>> = traces
            .iter()
            .zip(reliable)
            .filter(|(_, &r)| r == want)
            .map(|(t, _)| t)
            .collect();
        if members.is_empty() {
            return None;
        }
        let inv = 1.0 / members.len() as f64;
        Some(
            (0..epochs)
                .map(|e| members.iter().map(|t| t[e]).sum::<f64>() * inv)
                .collect(),
        )
    };
    Ok(LossSplit {
        reliable: curve(true),
        unreliable: curve(false),
    })
}

/// Metrics for one Stage II iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub iteration: usize,
    /// EER of the encoder at the end of the iteration.
    pub eer: f64,
    /// NMI of this iteration's pseudo labels against the truth.
    pub nmi: f64,
    pub cluster_accuracy: f64,
    /// NMI restricted to samples selected by the last gated epoch.
    pub selected_nmi: Option<f64>,
    /// Fraction of selected samples whose pseudo label is reliable.
    pub selected_cluster_accuracy: Option<f64>,
    pub selection_fraction: Option<f64>,
    pub num_selected: Option<usize>,
    pub wcss: f64,
}

/// Holds the ground truth and trial list; everything that needs them goes through here.
#[derive(Clone, Debug)]
pub struct Evaluator {
    truth: Vec<usize>,
    trials: Vec<TrialPair>,
}

/// Agreement of a labeling with the truth on a subset of utterances.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetAgreement {
    pub nmi: f64,
    pub cluster_accuracy: f64,
    pub count: usize,
}

impl Evaluator {
    pub fn new(corpus: &Corpus, trials: Vec<TrialPair>) -> Self {
        Self {
            truth: corpus.truth_labels(),
            trials,
        }
    }

    pub fn truth(&self) -> &[usize] {
        &self.truth
    }

    pub fn trials(&self) -> &[TrialPair] {
        &self.trials
    }

    pub fn eer(&self, embeddings: &Matrix) -> Result<(f64, f64)> {
        let scores = score_trials(embeddings, &self.trials)?;
        let labels: Vec<bool> = self.trials.iter().map(|t| t.is_target).collect();
        eer(&scores, &labels)
    }

    pub fn agreement(&self, pseudo: &[usize]) -> Result<SubsetAgreement> {
        Ok(SubsetAgreement {
            nmi: nmi(&self.truth, pseudo)?,
            cluster_accuracy: cluster_accuracy(&self.truth, pseudo)?,
            count: pseudo.len(),
        })
    }

    /// Agreement on the utterances where `selected` is true. Reliability uses
    /// the mapping computed on all utterances. `None` if nothing is selected.
    pub fn selected_agreement(&self, pseudo: &[usize], selected: &[bool]) -> Result<Option<SubsetAgreement>> {
        check_coverage(pseudo, &self.truth)?;
        if selected.len() != pseudo.len() {
            return Err(domain("selection mask does not cover every utterance"));
        }
        let reliable = reliable_mask(&self.truth, pseudo)?;
        let (mut t, mut p) = (Vec::new(), Vec::new());
        let mut hits = 0usize;
        for i in (0..pseudo.len()).filter(|&i| selected[i]) {
            t.push(self.truth[i]);
            p.push(pseudo[i]);
            hits += usize::from(reliable[i]);
        }
        if t.is_empty() {
            return Ok(None);
        }
        Ok(Some(SubsetAgreement {
            nmi: nmi(&t, &p)?,
            cluster_accuracy: hits as f64 / t.len() as f64,
            count: t.len(),
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn hungarian_identity_fixture() {
        let mut c = Matrix::zeros(4, 4);
        for i in 0..4 {
            for j in 0..4 {
                c.set(i, j, if i == j { 0.0 } else { 1.0 });
            }
        }
        let a = hungarian(&c).unwrap();
        assert_eq!(a.total_cost, 0.0);
        assert_eq!(a.row_to_col, (0..4).map(Some).collect::<Vec<_>>());
    }

    #[test]
    fn hungarian_two_by_two() {
        let c = Matrix::from_rows(&[vec![4.0, 1.0], vec![2.0, 3.0]]).unwrap();
        let a = hungarian(&c).unwrap();
        assert_eq!(a.row_to_col, vec![Some(1), Some(0)]);
        assert_eq!(a.total_cost, 3.0);
    }

    #[test]
    fn hungarian_rectangular_and_errors() {
        let c = Matrix::from_rows(&[vec![5.0, 1.0, 9.0], vec![1.0, 5.0, 0.5]]).unwrap();
        let a = hungarian(&c).unwrap();
        assert_eq!(a.total_cost, 1.5);
        let t = Matrix::from_rows(&[vec![5.0, 1.0], vec![1.0, 5.0], vec![9.0, 0.5]]).unwrap();
        let a = hungarian(&t).unwrap();
        assert_eq!(a.total_cost, 1.5);
        assert_eq!(a.row_to_col.iter().filter(|c| c.is_none()).count(), 1);
        let mut bad = Matrix::zeros(2, 2);
        bad.as_mut_slice()[1] = f64::INFINITY;
        assert!(hungarian(&bad).is_err());
    }

    #[test]
    fn hungarian_matches_brute_force_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in 1..=6 {
            let perms = permutations(n);
            for _ in 0..10 {
                let c = Matrix::from_vec(n, n, (0..n * n).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap();
                let best = perms
                    .iter()
                    .map(|p| p.iter().enumerate().map(|(i, &j)| c.get(i, j)).sum::<f64>())
                    .fold(f64::INFINITY, f64::min);
                let a = hungarian(&c).unwrap();
                assert!((a.total_cost - best).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn reliable_mask_fixtures() {
        let truth = vec![0, 0, 1, 1, 2, 2];
        let relabeled = vec![2, 2, 0, 0, 1, 1];
        assert!(reliable_mask(&truth, &relabeled).unwrap().iter().all(|&r| r));
        let one = vec![7; 6];
        let mask = reliable_mask(&truth, &one).unwrap();
        assert_eq!(mask.iter().filter(|&&m| m).count(), 2);
        assert!(reliable_mask(&truth, &[0, 1]).is_err());
    }

    #[test]
    fn extra_clusters_are_unreliable() {
        let truth = vec![0, 0, 0, 1, 1, 1];
        let pseudo = vec![0, 0, 5, 1, 1, 1];
        let mask = reliable_mask(&truth, &pseudo).unwrap();
        assert_eq!(mask, vec![true, true, false, true, true, true]);
        assert!((cluster_accuracy(&truth, &pseudo).unwrap() - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn nmi_fixtures() {
        assert_eq!(nmi(&[0, 0, 1, 1], &[5, 5, 3, 3]).unwrap(), 1.0);
        assert_eq!(nmi(&[0, 0, 0, 0], &[0, 1, 0, 1]).unwrap(), 0.0);
        assert_eq!(nmi(&[0, 0, 0], &[4, 4, 4]).unwrap(), 1.0);
        assert!(nmi(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap().abs() < 1e-15);
        assert!(nmi(&[], &[]).is_err());
        assert!(nmi(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn nmi_hand_value() {
        // a = (0,0,1,1), b = (0,0,0,1): H(a) = ln 2,
        // H(b) = -(3/4 ln 3/4 + 1/4 ln 1/4), I = H(b) - H(b|a) = H(b) - 1/2 ln 2.
        let ha = 2f64.ln();
        let hb = -(0.75 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        let i = hb - 0.5 * 2f64.ln();
        let want = i / (ha * hb).sqrt();
        assert!((nmi(&[0, 0, 1, 1], &[0, 0, 0, 1]).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn eer_fixtures() {
        let labels = [true, true, false, false];
        assert_eq!(eer(&[1.0, 1.0, 0.0, 0.0], &labels).unwrap().0, 0.0);
        assert_eq!(eer(&[0.0, 0.0, 1.0, 1.0], &labels).unwrap().0, 1.0);
        assert!(eer(&[0.1, 0.2], &[true, true]).is_err());
        // one target below one nontarget out of two each: curves cross at 0.5
        let (r, _) = eer(&[0.9, 0.2, 0.5, 0.1], &labels).unwrap();
        assert!((r - 0.5).abs() < 1e-15);
    }

    #[test]
    fn toy_split_fixtures() {
        let traces = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        let s = toy_loss_split(&traces, &[true, true]).unwrap();
        assert_eq!(s.reliable, Some(vec![2.0, 3.0]));
        assert_eq!(s.unreliable, None);
        let c = toy_loss_split(&[vec![0.7; 3], vec![0.2; 3]], &[true, false]).unwrap();
        assert_eq!(c.reliable, Some(vec![0.7; 3]));
        assert_eq!(c.unreliable, Some(vec![0.2; 3]));
        assert!(toy_loss_split(&traces, &[true]).is_err());
    }

    proptest! {
        #[test]
        fn nmi_symmetric_and_relabel_invariant(
            a in proptest::collection::vec(0usize..4, 12),
            b in proptest::collection::vec(0usize..5, 12),
        ) {
            let ab = nmi(&a, &b).unwrap();
            let ba = nmi(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
            let relabeled: Vec<usize> = b.iter().map(|x| 10 - x).collect();
            prop_assert!((nmi(&a, &relabeled).unwrap() - ab).abs() < 1e-12);
        }

        #[test]
        fn reliable_mask_relabel_invariant(
            truth in proptest::collection::vec(0usize..3, 15),
            pseudo in proptest::collection::vec(0usize..4, 15),
        ) {
            let a = reliable_mask(&truth, &pseudo).unwrap();
            let relabeled: Vec<usize> = pseudo.iter().map(|p| (p + 2) % 4 + 100).collect();
            let b = reliable_mask(&truth, &relabeled).unwrap();
            // Ties in the optimal mapping may pick different clusters, but the
            // number of reliable utterances is the optimum either way.
            prop_assert_eq!(a.iter().filter(|&&x| x).count(), b.iter().filter(|&&x| x).count());
        }

        #[test]
        fn eer_in_unit_interval_and_perfect_target_does_not_hurt(
            t in proptest::collection::vec(-1.0f64..1.0, 1..20),
            n in proptest::collection::vec(-1.0f64..1.0, 1..20),
        ) {
            let mut scores = t.clone();
            scores.extend(&n);
            let mut labels = vec![true; t.len()];
            labels.extend(vec![false; n.len()]);
            let (r, _) = eer(&scores, &labels).unwrap();
            prop_assert!((0.0..=1.0).contains(&r));
            scores.push(2.0);
            labels.push(true);
            let (r2, _) = eer(&scores, &labels).unwrap();
            prop_assert!(r2 <= r + 1e-12);
        }
    }
}
