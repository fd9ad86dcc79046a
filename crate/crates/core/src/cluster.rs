//! k-means pseudo labeling and the WCSS elbow scan.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::math::{squared_distance, Matrix};
use crate::seed::{self, Rng as SeedRng};

/// Cluster assignment for every utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub labels: Vec<usize>,
    pub k: usize,
    pub wcss: f64,
    pub iteration_index: usize,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Text lines `<utt_id> <cluster_id>`.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        for (id, c) in self.labels.iter().enumerate() {
            writeln!(w, "{id} {c}")?;
        }
        Ok(())
    }

    /// Parse the text format; `k` is taken as one more than the largest id.
    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut labels = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = || Error::Format(format!("label line {}: expected '<utt_id> <cluster_id>'", lineno + 1));
            let mut it = line.split_whitespace();
            let id: usize = it.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            let c: usize = it.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            if it.next().is_some() || id != labels.len() {
                return Err(bad());
            }
            labels.push(c);
        }
        let k = labels.iter().max().map_or(0, |m| m + 1);
        Ok(Self {
            labels,
            k,
            wcss: f64::NAN,
            iteration_index: 0,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iters: usize,
    /// Independent k-means++ restarts; the lowest WCSS wins.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 40,
            max_iters: 100,
            restarts: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub labels: PseudoLabelSet,
    /// `k x d`.
    pub centroids: Matrix,
    /// WCSS after each centroid update of the winning run.
    pub wcss_trace: Vec<f64>,
    /// Lloyd iterations of the winning run.
    pub iterations: usize,
    /// True if the winning run reached an assignment fixpoint.
    pub converged: bool,
}

pub fn kmeans(points: &Matrix, cfg: &KMeansConfig) -> Result<KMeansResult> {
    validate(points, cfg.k, cfg.max_iters)?;
    let mut best: Option<KMeansResult> = None;
    for r in 0..cfg.restarts.max(1) {
        let mut rng = seed::rng_indexed(cfg.seed, seed::streams::CLUSTER, r as u64);
        let init = kmeans_pp(points, cfg.k, &[], &mut rng);
        let run = lloyd(points, init, cfg.max_iters);
        if best.as_ref().is_none_or(|b| run.labels.wcss < b.labels.wcss) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn validate(points: &Matrix, k: usize, max_iters: usize) -> Result<()> {
    let n = points.rows();
    if k == 0 || k > n {
        return Err(config(format!("k-means needs 1 <= k <= n, got k = {k}, n = {n}")));
    }
    if max_iters == 0 {
        return Err(config("k-means max_iters must be at least 1"));
    }
    Ok(())
}

/// k-means++ seeding, extending `existing` centroids up to `k` rows.
fn kmeans_pp(points: &Matrix, k: usize, existing: &[Vec<f64>], rng: &mut SeedRng) -> Matrix {
    let n = points.rows();
    let d = points.cols();
    let mut centroids: Vec<Vec<f64>> = existing.to_vec();
    if centroids.is_empty() {
        centroids.push(points.row(rng.random_range(0..n)).to_vec());
    }
    let mut dist: Vec<f64> = (0..n)
        .map(|i| {
            centroids
                .iter()
                .map(|c| squared_distance(points.row(i), c))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = points.row(pick).to_vec();
        for (i, di) in dist.iter_mut().enumerate() {
            *di = di.min(squared_distance(points.row(i), &c));
        }
        centroids.push(c);
    }
    let mut m = Matrix::zeros(k, d);
    for (r, c) in centroids.iter().enumerate() {
        m.row_mut(r).copy_from_slice(c);
    }
    m
}

fn nearest(points: &Matrix, centroids: &Matrix, labels: &mut [usize]) {
    for (i, label) in labels.iter_mut().enumerate() {
        let x = points.row(i);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for c in 0..centroids.rows() {
            let dd = squared_distance(x, centroids.row(c));
            if dd < best_d {
                best_d = dd;
                best = c;
            }
        }
        *label = best;
    }
}

/// Give every empty cluster the point farthest from its own centroid.
fn repair_empty(points: &Matrix, centroids: &Matrix, labels: &mut [usize], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        labels.iter().for_each(|&l| counts[l] += 1);
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let far = (0..labels.len())
            .filter(|&i| counts[labels[i]] > 1)
            .max_by(|&a, &b| {
                let da = squared_distance(points.row(a), centroids.row(labels[a]));
                let db = squared_distance(points.row(b), centroids.row(labels[b]));
                da.total_cmp(&db).then(b.cmp(&a))
            });
        match far {
            Some(i) => labels[i] = empty,
            None => return,
        }
    }
}

fn update_centroids(points: &Matrix, labels: &[usize], centroids: &mut Matrix) {
    let k = centroids.rows();
    let mut counts = vec![0usize; k];
    let mut sums = Matrix::zeros(k, points.cols());
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        crate::math::axpy(1.0, points.row(i), sums.row_mut(l));
    }
    for c in 0..k {
        if counts[c] > 0 {
            let inv = 1.0 / counts[c] as f64;
            for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                *dst = s * inv;
            }
        }
    }
}

pub fn wcss(points: &Matrix, labels: &[usize], centroids: &Matrix) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| squared_distance(points.row(i), centroids.row(l)))
        .sum()
}

fn lloyd(points: &Matrix, mut centroids: Matrix, max_iters: usize) -> KMeansResult {
    let k = centroids.rows();
    let mut labels = vec![0usize; points.rows()];
    nearest(points, &centroids, &mut labels);
    repair_empty(points, &centroids, &mut labels, k);
    let mut next = labels.clone();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        update_centroids(points, &labels, &mut centroids);
        trace.push(wcss(points, &labels, &centroids));
        nearest(points, &centroids, &mut next);
        repair_empty(points, &centroids, &mut next, k);
        if next == labels {
            converged = true;
            break;
        }
        std::mem::swap(&mut labels, &mut next);
    }
    if !converged {
        update_centroids(points, &labels, &mut centroids);
    }
    let total = wcss(points, &labels, &centroids);
    KMeansResult {
        labels: PseudoLabelSet {
            labels,
            k,
            wcss: total,
            iteration_index: 0,
        },
        centroids,
        wcss_trace: trace,
        iterations,
        converged,
    }
}

/// WCSS for each candidate k.
///
/// Each candidate gets the best of `cfg.restarts` fresh k-means++ runs plus
/// one run warm-started from the next smaller candidate's centroids. The warm
/// start can only lower WCSS, so the reported curve is non-increasing in k.
pub fn elbow_scan(points: &Matrix, candidates: &[usize], cfg: &KMeansConfig) -> Result<Vec<(usize, f64)>> {
    for &k in candidates {
        validate(points, k, cfg.max_iters)?;
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by_key(|&i| candidates[i]);
    let mut out = vec![(0usize, 0.0f64); candidates.len()];
    let mut prev: Option<KMeansResult> = None;
    for &i in &order {
        let k = candidates[i];
        let mut best = kmeans(points, &KMeansConfig { k, ..cfg.clone() })?;
        if let Some(p) = prev.as_ref().filter(|p| p.labels.k <= k) {
            let existing: Vec<Vec<f64>> = p.centroids.iter_rows().map(<[f64]>::to_vec).collect();
            let mut rng = seed::rng_indexed(cfg.seed, "elbow-warm", k as u64);
            let init = kmeans_pp(points, k, &existing, &mut rng);
            let warm = lloyd(points, init, cfg.max_iters);
            if warm.labels.wcss < best.labels.wcss {
                best = warm;
            }
        }
        out[i] = (k, best.labels.wcss);
        prev = Some(best);
    }
    Ok(out)
}

/// CSV with header `k,wcss`.
pub fn write_scan_csv<W: Write>(scan: &[(usize, f64)], mut w: W) -> Result<()> {
    writeln!(w, "k,wcss")?;
    for (k, v) in scan {
        writeln!(w, "{k},{v}")?;
    }
    Ok(())
}
