//! Stage I: contrastive pretraining on pairs of augmented segments.
//!
//! For a batch of `N` utterances, two non-overlapping segments are cut from each
//! and augmented independently; the two embeddings of utterance `i` form the
//! positive pair. The loss for anchor `e(i, j)` is
//!
//! ```text
//! l(i, j) = -log( exp(cos(e(i,0), e(i,1))) / D )
//! D       = exp(cos(e(i,0), e(i,1))) + sum_{k != i, l in {0,1}} exp(cos(e(i,j), e(k,l)))
//! ```
//!
//! with no temperature, and the batch loss is the mean over all `2N` anchors.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{augment, sample_segments, UnlabeledCorpus};
use crate::encoder::{EncoderGrads, EncoderOptimizer, EncoderParams, EncoderTrace};
use crate::error::{config, domain, Result};
use crate::math::{dot, norm, softmax_into, Matrix};
use crate::seed;

/// `2N` unit-norm embeddings; row `2i + j` is view `j` of utterance `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchEmbeddings {
    n: usize,
    rows: Matrix,
}

impl BatchEmbeddings {
    /// Wrap `2N x d` rows that must already be unit norm (within 1e-9).
    pub fn new(rows: Matrix) -> Result<Self> {
        if !rows.rows().is_multiple_of(2) {
            return Err(domain(format!("batch needs an even number of rows, got {}", rows.rows())));
        }
        for (r, row) in rows.iter_rows().enumerate() {
            let n = norm(row);
            if (n - 1.0).abs() > 1e-9 {
                return Err(domain(format!("batch row {r} has norm {n}, expected 1")));
            }
        }
        Ok(Self {
            n: rows.rows() / 2,
            rows,
        })
    }

    /// Normalize each row, then wrap.
    pub fn from_unnormalized(mut rows: Matrix) -> Result<Self> {
        for r in 0..rows.rows() {
            let row = rows.row_mut(r);
            let n = norm(row);
            if n == 0.0 {
                return Err(domain(format!("batch row {r} has zero norm")));
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
        Self::new(rows)
    }

    pub fn num_utterances(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn embedding(&self, i: usize, j: usize) -> &[f64] {
        self.rows.row(2 * i + j)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.rows
    }

    fn check(&self) -> Result<()> {
        if self.n < 2 {
            return Err(domain(format!(
                "contrastive loss needs at least 2 utterances per batch, got {}",
                self.n
            )));
        }
        Ok(())
    }

    /// Logits for anchor (i, j): index 0 is the positive pair, then the
    /// `2(N-1)` cross-utterance similarities in (k, l) order, k != i.
    fn logits(&self, i: usize, j: usize, out: &mut Vec<f64>) {
        out.clear();
        let anchor = self.embedding(i, j);
        out.push(dot(self.embedding(i, 0), self.embedding(i, 1)).clamp(-1.0, 1.0));
        for k in (0..self.n).filter(|&k| k != i) {
            for l in 0..2 {
                out.push(dot(anchor, self.embedding(k, l)).clamp(-1.0, 1.0));
            }
        }
    }
}

/// Loss of anchor `(i, j)`, 0-based, `j` in {0, 1}.
pub fn scl_pair_loss(batch: &BatchEmbeddings, i: usize, j: usize) -> Result<f64> {
    batch.check()?;
    if i >= batch.n || j > 1 {
        return Err(domain(format!("anchor ({i}, {j}) out of range for N = {}", batch.n)));
    }
    let mut z = Vec::with_capacity(2 * batch.n - 1);
    batch.logits(i, j, &mut z);
    Ok(crate::math::log_sum_exp(&z)? - z[0])
}

/// Mean of all `2N` pair losses.
pub fn scl_batch_loss(batch: &BatchEmbeddings) -> Result<f64> {
    batch.check()?;
    let mut total = 0.0;
    for i in 0..batch.n {
        for j in 0..2 {
            total += scl_pair_loss(batch, i, j)?;
        }
    }
    Ok(total / (2 * batch.n) as f64)
}

/// Batch loss and its gradient with respect to the `2N` embeddings.
///
/// The gradient is that of the cosine-based loss, so it is tangent to the unit
/// sphere at every row.
pub fn scl_backward(batch: &BatchEmbeddings) -> Result<(f64, Matrix)> {
    batch.check()?;
    let n = batch.n;
    let d = batch.dim();
    let scale = 1.0 / (2 * n) as f64;
    // Gradient w.r.t. the raw dot products, accumulated as weights on pairs.
    let mut g = Matrix::zeros(2 * n, d);
    let mut z = Vec::with_capacity(2 * n - 1);
    let mut p = vec![0.0; 2 * n - 1];
    let mut total = 0.0;
    // coefficient on each (row a, row b) similarity
    let mut coef = Matrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        for j in 0..2 {
            batch.logits(i, j, &mut z);
            let lse = softmax_into(&z, &mut p[..z.len()]);
            total += lse - z[0];
            let anchor = 2 * i + j;
            let pos_coef = (p[0] - 1.0) * scale;
            coef.set(2 * i, 2 * i + 1, coef.get(2 * i, 2 * i + 1) + pos_coef);
            let mut idx = 1;
            for k in (0..n).filter(|&k| k != i) {
                for l in 0..2 {
                    let other = 2 * k + l;
                    coef.set(anchor, other, coef.get(anchor, other) + p[idx] * scale);
                    idx += 1;
                }
            }
        }
    }
    // d cos(a, b) / da = b - cos(a, b) a   for unit a, b
    for a in 0..2 * n {
        for b in 0..2 * n {
            let c = coef.get(a, b);
            if c == 0.0 {
                continue;
            }
            let ea = batch.rows.row(a);
            let eb = batch.rows.row(b);
            let cos = dot(ea, eb);
            for t in 0..d {
                let ga = c * (eb[t] - cos * ea[t]);
                let gb = c * (ea[t] - cos * eb[t]);
                g.as_mut_slice()[a * d + t] += ga;
                g.as_mut_slice()[b * d + t] += gb;
            }
        }
    }
    Ok((total * scale, g))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    /// Utterances per batch.
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Multiplicative decay applied every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    /// Segment length in frames.
    pub segment_len: usize,
    pub noise_scale: f64,
    pub gain_range: (f64, f64),
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 20,
            lr: 0.001,
            lr_decay: 0.95,
            decay_every: 5,
            segment_len: 20,
            noise_scale: 0.5,
            gain_range: (0.8, 1.2),
            seed: 0,
        }
    }
}

impl Stage1Config {
    /// Learning rate used during the 0-based epoch `epoch`: decayed once after
    /// each completed block of `decay_every` epochs.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = epoch.checked_div(self.decay_every).unwrap_or(0);
        self.lr * self.lr_decay.powi(steps as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(config("stage1 batch_size must be at least 2"));
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0) {
            return Err(config("stage1 lr and lr_decay must be positive"));
        }
        if self.segment_len == 0 {
            return Err(config("stage1 segment_len must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Epoch {
    /// 0-based.
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

/// Minibatch Adam on the contrastive batch loss.
pub fn train_stage1(
    corpus: UnlabeledCorpus<'_>,
    init: &EncoderParams,
    cfg: &Stage1Config,
) -> Result<(EncoderParams, Vec<Stage1Epoch>)> {
    cfg.validate()?;
    if corpus.len() < cfg.batch_size {
        return Err(config(format!(
            "corpus has {} utterances, smaller than one stage1 batch of {}",
            corpus.len(),
            cfg.batch_size
        )));
    }
    let mut params = init.clone();
    let mut opt = EncoderOptimizer::new(&params);
    let mut grads = EncoderGrads::zeros_for(&params);
    let mut rng = seed::rng(cfg.seed, seed::streams::STAGE1);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let d = params.embedding_dim();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut traces: Vec<EncoderTrace> = Vec::with_capacity(2 * chunk.len());
            for &id in chunk {
                let (a, b) = sample_segments(id, corpus.frames(id), cfg.segment_len, &mut rng)?;
                for seg in [a, b] {
                    let aug = augment(&seg, cfg.noise_scale, cfg.gain_range, &mut rng)?;
                    traces.push(params.forward(&aug)?);
                }
            }
            let mut rows = Matrix::zeros(traces.len(), d);
            for (r, t) in traces.iter().enumerate() {
                rows.row_mut(r).copy_from_slice(t.embedding.as_slice());
            }
            let batch = BatchEmbeddings::new(rows)?;
            let (loss, g_emb) = scl_backward(&batch)?;
            grads.clear();
            for (r, t) in traces.iter().enumerate() {
                t.backward(&params, g_emb.row(r), &mut grads)?;
            }
            opt.step(&mut params, &grads, lr)?;
            loss_sum += loss;
            batches += 1;
        }
        history.push(Stage1Epoch {
            epoch,
            mean_loss: loss_sum / batches.max(1) as f64,
            lr,
        });
    }
    Ok((params, history))
}

/// CSV with header `epoch,mean_loss,lr`.
pub fn write_history_csv<W: std::io::Write>(history: &[Stage1Epoch], mut w: W) -> Result<()> {
    writeln!(w, "epoch,mean_loss,lr")?;
    for h in history {
        writeln!(w, "{},{},{}", h.epoch, h.mean_loss, h.lr)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig};
    use crate::encoder::Architecture;
    use crate::math::{finite_diff_grad, max_relative_error};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(n: usize, d: usize, seed: u64) -> BatchEmbeddings {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Matrix::from_vec(2 * n, d, (0..2 * n * d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap();
        BatchEmbeddings::from_unnormalized(m).unwrap()
    }

    fn orthogonal_fixture() -> BatchEmbeddings {
        // Utterance 0 -> e0 (both views), utterance 1 -> e1 (both views).
        BatchEmbeddings::new(
            Matrix::from_rows(&[
                vec![1.0, 0.0],
                vec![1.0, 0.0],
                vec![0.0, 1.0],
                vec![0.0, 1.0],
            ])
            .unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn orthogonal_negatives_fixture() {
        let e = std::f64::consts::E;
        let want = -(e / (e + 2.0)).ln();
        assert!((want - 0.55144).abs() < 1e-5);
        let b = orthogonal_fixture();
        for i in 0..2 {
            for j in 0..2 {
                assert!((scl_pair_loss(&b, i, j).unwrap() - want).abs() < 1e-12);
            }
        }
        assert!((scl_batch_loss(&b).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn identical_embeddings_fixture() {
        for n in [2usize, 3, 5] {
            let m = Matrix::from_vec(2 * n, 3, [0.6, 0.0, 0.8].repeat(2 * n)).unwrap();
            let b = BatchEmbeddings::new(m).unwrap();
            let want = ((2 * n - 1) as f64).ln();
            assert!((scl_batch_loss(&b).unwrap() - want).abs() < 1e-12);
        }
        assert!((3f64.ln() - 1.09861).abs() < 1e-5);
    }

    #[test]
    fn needs_two_utterances() {
        let b = BatchEmbeddings::new(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()).unwrap();
        assert!(scl_batch_loss(&b).is_err());
        assert!(scl_backward(&b).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        for s in 0..10 {
            let b = random_batch(3, 4, s);
            let (loss, g) = scl_backward(&b).unwrap();
            assert!((loss - scl_batch_loss(&b).unwrap()).abs() < 1e-12);
            let fd = finite_diff_grad(
                |m| scl_batch_loss(&BatchEmbeddings::from_unnormalized(m.clone())?),
                b.as_matrix(),
                1e-5,
            )
            .unwrap();
            let err = max_relative_error(&g, &fd, 1e-5);
            assert!(err < 1e-4, "seed {s}: {err}");
        }
    }

    #[test]
    fn gradient_is_tangent() {
        let b = random_batch(4, 5, 77);
        let (_, g) = scl_backward(&b).unwrap();
        let radial: f64 = (0..8).map(|r| dot(g.row(r), b.as_matrix().row(r))).sum();
        assert!(radial.abs() < 1e-12);
        for r in 0..8 {
            assert!(dot(g.row(r), b.as_matrix().row(r)).abs() < 1e-12);
        }
    }

    #[test]
    fn pair_gradient_flows_only_through_anchor_similarity() {
        // Under the adopted convention every row enters every pair loss, but a
        // row e(k,l) with k != i enters l(i,j) only through cos(e(i,j), e(k,l)).
        // Its gradient must therefore lie along the tangent part of the anchor.
        let b = random_batch(3, 4, 9);
        let fd = finite_diff_grad(
            |m| scl_pair_loss(&BatchEmbeddings::from_unnormalized(m.clone())?, 0, 0),
            b.as_matrix(),
            1e-5,
        )
        .unwrap();
        let anchor = b.embedding(0, 0);
        for row in [2usize, 3, 4, 5] {
            let e = b.as_matrix().row(row);
            let c = dot(anchor, e);
            let dir: Vec<f64> = anchor.iter().zip(e).map(|(a, x)| a - c * x).collect();
            let g = fd.row(row);
            let coef = dot(g, &dir) / dot(&dir, &dir);
            let resid: f64 = g.iter().zip(&dir).map(|(gi, di)| (gi - coef * di).abs()).fold(0.0, f64::max);
            assert!(resid < 1e-8, "row {row}: {resid}");
            assert!(coef > 0.0);
        }
    }

    #[test]
    fn schedule_decays_every_five_epochs() {
        let cfg = Stage1Config::default();
        assert_eq!(cfg.lr_at(0), 0.001);
        assert_eq!(cfg.lr_at(4), 0.001);
        assert!((cfg.lr_at(5) - 0.00095).abs() < 1e-15);
        assert!((cfg.lr_at(10) - 0.001 * 0.95 * 0.95).abs() < 1e-15);
        assert!((cfg.lr_at(10) - 0.00090).abs() < 1e-5);
    }

    fn tiny_corpus(intra: f64, seed: u64) -> crate::corpus::Corpus {
        generate_corpus(&CorpusConfig {
            num_speakers: 6,
            utts_per_speaker: 6,
            frames_per_utt: 24,
            feature_dim: 4,
            intra_spread: intra,
            inter_spread: 1.0,
            session_dim: 0,
            session_spread: 0.0,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn zero_epochs_returns_init() {
        let c = tiny_corpus(0.5, 1);
        let p = EncoderParams::init(&Architecture::new(vec![4, 8, 4]).unwrap(), 1).unwrap();
        let cfg = Stage1Config { epochs: 0, segment_len: 8, ..Stage1Config::default() };
        let (q, h) = train_stage1(c.unlabeled(), &p, &cfg).unwrap();
        assert_eq!(p, q);
        assert!(h.is_empty());
    }

    #[test]
    fn too_small_corpus_is_config_error() {
        let c = tiny_corpus(0.5, 1);
        let p = EncoderParams::init(&Architecture::new(vec![4, 8, 4]).unwrap(), 1).unwrap();
        let cfg = Stage1Config { batch_size: 64, segment_len: 8, ..Stage1Config::default() };
        assert!(matches!(train_stage1(c.unlabeled(), &p, &cfg), Err(crate::Error::Config(_))));
    }

    #[test]
    fn training_reduces_loss_on_separable_corpus() {
        let mut wins = 0;
        for s in 0..5 {
            let c = tiny_corpus(0.01, 10 + s);
            let p = EncoderParams::init(&Architecture::new(vec![4, 16, 8]).unwrap(), s).unwrap();
            let cfg = Stage1Config {
                batch_size: 8,
                epochs: 15,
                lr: 0.01,
                segment_len: 8,
                noise_scale: 0.05,
                seed: s,
                ..Stage1Config::default()
            };
            let (_, h) = train_stage1(c.unlabeled(), &p, &cfg).unwrap();
            if h.last().unwrap().mean_loss < h[0].mean_loss {
                wins += 1;
            }
        }
        assert!(wins >= 3, "{wins}/5");
    }

    #[test]
    fn training_is_deterministic() {
        let c = tiny_corpus(0.5, 3);
        let p = EncoderParams::init(&Architecture::new(vec![4, 8, 4]).unwrap(), 2).unwrap();
        let cfg = Stage1Config { epochs: 3, segment_len: 8, batch_size: 6, ..Stage1Config::default() };
        let a = train_stage1(c.unlabeled(), &p, &cfg).unwrap();
        let b = train_stage1(c.unlabeled(), &p, &cfg).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn loss_nonnegative_and_permutation_invariant(seed in 0u64..500, n in 2usize..6) {
            let b = random_batch(n, 4, seed);
            let loss = scl_batch_loss(&b).unwrap();
            prop_assert!(loss >= 0.0);
            // reverse utterance order
            let m = b.as_matrix();
            let mut rows = Vec::new();
            for i in (0..n).rev() {
                rows.push(m.row(2 * i).to_vec());
                rows.push(m.row(2 * i + 1).to_vec());
            }
            let p = BatchEmbeddings::new(Matrix::from_rows(&rows).unwrap()).unwrap();
            let lp = scl_batch_loss(&p).unwrap();
            prop_assert!((loss - lp).abs() <= 1e-12 * loss.max(1.0));
            let mut a: Vec<f64> = (0..n).flat_map(|i| (0..2).map(move |j| (i, j)))
                .map(|(i, j)| scl_pair_loss(&b, i, j).unwrap()).collect();
            let mut c: Vec<f64> = (0..n).flat_map(|i| (0..2).map(move |j| (i, j)))
                .map(|(i, j)| scl_pair_loss(&p, i, j).unwrap()).collect();
            a.sort_by(f64::total_cmp);
            c.sort_by(f64::total_cmp);
            for (x, y) in a.iter().zip(&c) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
