//! Synthetic multi-speaker corpus, segment sampling, augmentation, trial
//! lists and controlled label noise.
//!
//! Each speaker has a mean feature vector. Each utterance adds a session
//! offset drawn from a low-rank "channel" subspace shared by the corpus, and
//! each frame adds isotropic noise on top. The session offset is constant
//! within an utterance, so two segments of one utterance share it: a
//! contrastive objective alone cannot tell it apart from speaker identity.
//!
//! Ground-truth speaker ids live in a private field. Training code works on an
//! [`UnlabeledCorpus`] view that only exposes frames; evaluation code asks the
//! [`Corpus`] for [`Corpus::truth_labels`].
//!
//! # Corpus file layout
//!
//! All integers little-endian, all reals IEEE-754 `f64` little-endian.
//!
//! ```text
//! magic            8 bytes  "LGLCORP\0"
//! version          u32      1
//! seed             u64
//! num_speakers     u32
//! feature_dim      u32
//! num_utterances   u32
//! repeated num_utterances times:
//!   id             u32
//!   truth_speaker  u32
//!   num_frames     u32
//!   frames         num_frames * feature_dim f64, row-major
//! ```

use std::collections::HashSet;
use std::io::{BufRead, Read, Write};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config, domain, Error, Result};
use crate::math::{axpy, norm, Matrix};
use crate::seed;

const CORPUS_MAGIC: &[u8; 8] = b"LGLCORP\0";
const CORPUS_VERSION: u32 = 1;

/// Parameters of the synthetic corpus generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub num_speakers: usize,
    pub utts_per_speaker: usize,
    pub frames_per_utt: usize,
    pub feature_dim: usize,
    /// Per-frame noise scale.
    pub intra_spread: f64,
    /// Scale of the speaker means.
    pub inter_spread: f64,
    /// Rank of the session (channel) subspace. Zero disables session offsets.
    pub session_dim: usize,
    /// Scale of the per-utterance session offset.
    pub session_spread: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            num_speakers: 40,
            utts_per_speaker: 50,
            frames_per_utt: 64,
            feature_dim: 16,
            intra_spread: 0.9,
            inter_spread: 1.0,
            session_dim: 3,
            session_spread: 1.75,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("num_speakers", self.num_speakers),
            ("utts_per_speaker", self.utts_per_speaker),
            ("frames_per_utt", self.frames_per_utt),
            ("feature_dim", self.feature_dim),
        ] {
            if v == 0 {
                return Err(config(format!("corpus {name} must be at least 1")));
            }
        }
        if !(self.inter_spread > 0.0) {
            return Err(config("corpus inter_spread must be positive"));
        }
        if !(self.intra_spread >= 0.0) || !(self.session_spread >= 0.0) {
            return Err(config("corpus intra_spread and session_spread must be non-negative"));
        }
        if self.session_dim > self.feature_dim {
            return Err(config("corpus session_dim cannot exceed feature_dim"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    id: usize,
    truth_speaker: usize,
    frames: Matrix,
}

impl Utterance {
    pub fn id(&self) -> usize {
        self.id
    }

    /// `T x F` frame matrix.
    pub fn frames(&self) -> &Matrix {
        &self.frames
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    utterances: Vec<Utterance>,
    num_speakers: usize,
    feature_dim: usize,
    seed: u64,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn num_speakers(&self) -> usize {
        self.num_speakers
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    /// Ground-truth speaker per utterance id. Evaluation only.
    pub fn truth_labels(&self) -> Vec<usize> {
        self.utterances.iter().map(|u| u.truth_speaker).collect()
    }

    /// Training view; carries frames only.
    pub fn unlabeled(&self) -> UnlabeledCorpus<'_> {
        UnlabeledCorpus {
            utterances: &self.utterances,
            feature_dim: self.feature_dim,
        }
    }

    /// Keep the utterances at `ids` (in that order), renumbered densely.
    pub fn subset(&self, ids: &[usize]) -> Result<Corpus> {
        let mut utterances = Vec::with_capacity(ids.len());
        for (new_id, &id) in ids.iter().enumerate() {
            let u = self
                .utterances
                .get(id)
                .ok_or_else(|| domain(format!("utterance id {id} out of range")))?;
            utterances.push(Utterance {
                id: new_id,
                truth_speaker: u.truth_speaker,
                frames: u.frames.clone(),
            });
        }
        Ok(Corpus {
            utterances,
            num_speakers: self.num_speakers,
            feature_dim: self.feature_dim,
            seed: self.seed,
        })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CORPUS_MAGIC)?;
        w.write_all(&CORPUS_VERSION.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&to_u32(self.num_speakers)?.to_le_bytes())?;
        w.write_all(&to_u32(self.feature_dim)?.to_le_bytes())?;
        w.write_all(&to_u32(self.utterances.len())?.to_le_bytes())?;
        for u in &self.utterances {
            w.write_all(&to_u32(u.id)?.to_le_bytes())?;
            w.write_all(&to_u32(u.truth_speaker)?.to_le_bytes())?;
            w.write_all(&to_u32(u.frames.rows())?.to_le_bytes())?;
            for v in u.frames.as_slice() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Corpus> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CORPUS_MAGIC {
            return Err(Error::Format("not a corpus file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CORPUS_VERSION {
            return Err(Error::Format(format!("unsupported corpus version {version}")));
        }
        let seed = read_u64(&mut r)?;
        let num_speakers = read_u32(&mut r)? as usize;
        let feature_dim = read_u32(&mut r)? as usize;
        let n = read_u32(&mut r)? as usize;
        let mut utterances = Vec::with_capacity(n);
        for expected_id in 0..n {
            let id = read_u32(&mut r)? as usize;
            if id != expected_id {
                return Err(Error::Format(format!(
                    "utterance ids must be dense: found {id} at position {expected_id}"
                )));
            }
            let truth_speaker = read_u32(&mut r)? as usize;
            if truth_speaker >= num_speakers {
                return Err(Error::Format(format!(
                    "utterance {id} has speaker {truth_speaker} >= {num_speakers}"
                )));
            }
            let rows = read_u32(&mut r)? as usize;
            let mut data = vec![0.0; rows * feature_dim];
            let mut buf = [0u8; 8];
            for v in data.iter_mut() {
                r.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
            let frames = Matrix::from_vec(rows, feature_dim, data)
                .map_err(|e| Error::Format(format!("utterance {id}: {e}")))?;
            utterances.push(Utterance {
                id,
                truth_speaker,
                frames,
            });
        }
        Ok(Corpus {
            utterances,
            num_speakers,
            feature_dim,
            seed,
        })
    }
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("value {v} does not fit in u32")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Frames-only view of a corpus handed to training code.
#[derive(Clone, Copy, Debug)]
pub struct UnlabeledCorpus<'a> {
    utterances: &'a [Utterance],
    feature_dim: usize,
}

impl<'a> UnlabeledCorpus<'a> {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn frames(&self, id: usize) -> &'a Matrix {
        &self.utterances[id].frames
    }
}

pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = seed::rng(cfg.seed, seed::streams::CORPUS);
    let f = cfg.feature_dim;

    let means: Vec<Vec<f64>> = (0..cfg.num_speakers)
        .map(|_| gaussian_vec(&mut rng, f, cfg.inter_spread))
        .collect();
    let basis: Vec<Vec<f64>> = (0..cfg.session_dim)
        .map(|_| {
            let mut b = gaussian_vec(&mut rng, f, 1.0);
            let n = norm(&b).max(f64::MIN_POSITIVE);
            b.iter_mut().for_each(|v| *v /= n);
            b
        })
        .collect();

    let mut utterances = Vec::with_capacity(cfg.num_speakers * cfg.utts_per_speaker);
    for (speaker, mean) in means.iter().enumerate() {
        for _ in 0..cfg.utts_per_speaker {
            let mut center = mean.clone();
            if cfg.session_spread > 0.0 {
                for b in &basis {
                    let z: f64 = rng.sample::<f64, _>(StandardNormal) * cfg.session_spread;
                    axpy(z, b, &mut center);
                }
            }
            let mut data = Vec::with_capacity(cfg.frames_per_utt * f);
            for _ in 0..cfg.frames_per_utt {
                if cfg.intra_spread > 0.0 {
                    for &c in &center {
                        let z: f64 = rng.sample(StandardNormal);
                        data.push(c + cfg.intra_spread * z);
                    }
                } else {
                    data.extend_from_slice(&center);
                }
            }
            utterances.push(Utterance {
                id: utterances.len(),
                truth_speaker: speaker,
                frames: Matrix::from_vec(cfg.frames_per_utt, f, data)?,
            });
        }
    }
    Ok(Corpus {
        utterances,
        num_speakers: cfg.num_speakers,
        feature_dim: f,
        seed: cfg.seed,
    })
}

fn gaussian_vec<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
        .collect()
}

/// Two non-overlapping windows of `seg_len` frames, returned in random order.
pub fn sample_segments<R: Rng>(
    utt_id: usize,
    frames: &Matrix,
    seg_len: usize,
    rng: &mut R,
) -> Result<(Matrix, Matrix)> {
    let (a, b) = segment_starts(utt_id, frames.rows(), seg_len, rng)?;
    Ok((
        frames.slice_rows(a, a + seg_len),
        frames.slice_rows(b, b + seg_len),
    ))
}

/// Start rows of the two windows drawn by [`sample_segments`].
pub fn segment_starts<R: Rng>(
    utt_id: usize,
    num_frames: usize,
    seg_len: usize,
    rng: &mut R,
) -> Result<(usize, usize)> {
    if seg_len == 0 {
        return Err(domain("segment length must be at least 1"));
    }
    if num_frames < 2 * seg_len {
        return Err(domain(format!(
            "utterance {utt_id} has {num_frames} frames, need at least {} for two segments of {seg_len}",
            2 * seg_len
        )));
    }
    // Split the slack into three gaps: before, between and after the windows.
    let slack = num_frames - 2 * seg_len;
    let x = rng.random_range(0..=slack);
    let y = rng.random_range(0..=slack);
    let (lo, hi) = (x.min(y), x.max(y));
    let first = lo;
    let second = hi + seg_len;
    if rng.random_bool(0.5) {
        Ok((first, second))
    } else {
        Ok((second, first))
    }
}

/// One window of `len` frames at a uniform random offset.
pub fn random_crop<R: Rng>(utt_id: usize, frames: &Matrix, len: usize, rng: &mut R) -> Result<Matrix> {
    if len == 0 || frames.rows() < len {
        return Err(domain(format!(
            "utterance {utt_id} has {} frames, cannot crop {len}",
            frames.rows()
        )));
    }
    let start = rng.random_range(0..=frames.rows() - len);
    Ok(frames.slice_rows(start, start + len))
}

/// `gain * (segment + noise)`, gain uniform in `gain_range`, noise Gaussian with
/// standard deviation `noise_scale`.
pub fn augment<R: Rng>(
    segment: &Matrix,
    noise_scale: f64,
    gain_range: (f64, f64),
    rng: &mut R,
) -> Result<Matrix> {
    let (lo, hi) = gain_range;
    if !(noise_scale >= 0.0) {
        return Err(domain(format!("noise scale must be non-negative, got {noise_scale}")));
    }
    if !(lo > 0.0 && lo <= hi) {
        return Err(domain(format!("gain range must satisfy 0 < lo <= hi, got ({lo}, {hi})")));
    }
    let gain = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let mut out = segment.clone();
    if noise_scale > 0.0 {
        let normal = Normal::new(0.0, noise_scale).map_err(|e| domain(e.to_string()))?;
        for v in out.as_mut_slice() {
            *v += normal.sample(rng);
        }
    }
    if gain != 1.0 {
        out.scale(gain);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrialPair {
    pub utt_a: usize,
    pub utt_b: usize,
    pub is_target: bool,
}

/// Balanced trial list: `ceil(n/2)` same-speaker and `floor(n/2)`
/// different-speaker pairs, all distinct, in shuffled order.
pub fn make_trials(corpus: &Corpus, num_pairs: usize, seed: u64) -> Result<Vec<TrialPair>> {
    let truth = corpus.truth_labels();
    let n = truth.len();
    if corpus.num_speakers < 2 {
        return Err(config("trial list needs at least 2 speakers"));
    }
    let n_target = num_pairs.div_ceil(2);
    let n_nontarget = num_pairs / 2;

    let mut by_speaker: Vec<Vec<usize>> = vec![Vec::new(); corpus.num_speakers];
    for (id, &s) in truth.iter().enumerate() {
        by_speaker[s].push(id);
    }
    let available_target: usize = by_speaker.iter().map(|u| u.len() * u.len().saturating_sub(1) / 2).sum();
    let available_all = n * n.saturating_sub(1) / 2;
    let available_nontarget = available_all - available_target;
    if n_target > available_target || n_nontarget > available_nontarget {
        return Err(config(format!(
            "requested {n_target} target / {n_nontarget} nontarget trials, corpus has only {available_target} / {available_nontarget} distinct pairs"
        )));
    }

    let mut rng = seed::rng(seed, seed::streams::TRIALS);
    let mut trials = Vec::with_capacity(num_pairs);
    let mut seen = HashSet::with_capacity(num_pairs);

    let targets = sample_pairs(
        &mut rng,
        n_target,
        available_target,
        |rng| {
            let a = rng.random_range(0..n);
            let peers = &by_speaker[truth[a]];
            if peers.len() < 2 {
                return None;
            }
            let b = peers[rng.random_range(0..peers.len())];
            (a != b).then_some((a, b))
        },
        || {
            by_speaker
                .iter()
                .flat_map(|u| {
                    u.iter()
                        .enumerate()
                        .flat_map(move |(i, &a)| u[i + 1..].iter().map(move |&b| (a, b)))
                })
                .collect()
        },
        &mut seen,
    );
    trials.extend(targets.into_iter().map(|(a, b)| TrialPair {
        utt_a: a,
        utt_b: b,
        is_target: true,
    }));

    let nontargets = sample_pairs(
        &mut rng,
        n_nontarget,
        available_nontarget,
        |rng| {
            let a = rng.random_range(0..n);
            let b = rng.random_range(0..n);
            (truth[a] != truth[b]).then_some((a, b))
        },
        || {
            (0..n)
                .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
                .filter(|&(a, b)| truth[a] != truth[b])
                .collect()
        },
        &mut seen,
    );
    trials.extend(nontargets.into_iter().map(|(a, b)| TrialPair {
        utt_a: a,
        utt_b: b,
        is_target: false,
    }));

    trials.shuffle(&mut rng);
    Ok(trials)
}

/// Draw `want` distinct unordered pairs: rejection sampling when the pool is
/// large relative to the request, otherwise enumerate and subsample.
fn sample_pairs<R, D, E>(
    rng: &mut R,
    want: usize,
    available: usize,
    mut draw: D,
    enumerate: E,
    seen: &mut HashSet<(usize, usize)>,
) -> Vec<(usize, usize)>
where
    R: Rng,
    D: FnMut(&mut R) -> Option<(usize, usize)>,
    E: FnOnce() -> Vec<(usize, usize)>,
{
    let mut out = Vec::with_capacity(want);
    if want == 0 {
        return out;
    }
    if available >= 4 * want {
        while out.len() < want {
            if let Some((a, b)) = draw(rng) {
                let key = (a.min(b), a.max(b));
                if seen.insert(key) {
                    out.push(key);
                }
            }
        }
    } else {
        let pool = enumerate();
        for i in index::sample(rng, pool.len(), want) {
            seen.insert(pool[i]);
            out.push(pool[i]);
        }
    }
    out
}

pub fn write_trials<W: Write>(trials: &[TrialPair], mut w: W) -> Result<()> {
    for t in trials {
        writeln!(w, "{} {} {}", t.utt_a, t.utt_b, u8::from(t.is_target))?;
    }
    Ok(())
}

pub fn read_trials<R: BufRead>(r: R) -> Result<Vec<TrialPair>> {
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::Format(format!("trial line {}: expected '<utt_a> <utt_b> <0|1>'", lineno + 1));
        if fields.len() != 3 {
            return Err(bad());
        }
        let utt_a = fields[0].parse().map_err(|_| bad())?;
        let utt_b = fields[1].parse().map_err(|_| bad())?;
        let is_target = match fields[2] {
            "0" => false,
            "1" => true,
            _ => return Err(bad()),
        };
        out.push(TrialPair {
            utt_a,
            utt_b,
            is_target,
        });
    }
    Ok(out)
}

/// Reassign exactly `round(corrupt_fraction * n)` labels to a uniformly random
/// different class. Returns the new labels and the corruption mask.
pub fn inject_label_noise<R: Rng>(
    labels: &[usize],
    corrupt_fraction: f64,
    num_classes: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<bool>)> {
    if !(0.0..=1.0).contains(&corrupt_fraction) {
        return Err(config(format!(
            "corrupt_fraction must be in [0, 1], got {corrupt_fraction}"
        )));
    }
    let n = labels.len();
    let count = (corrupt_fraction * n as f64).round() as usize;
    if count > 0 && num_classes < 2 {
        return Err(config("label noise needs at least 2 classes"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(domain(format!("label {bad} out of range for {num_classes} classes")));
    }
    let mut out = labels.to_vec();
    let mut mask = vec![false; n];
    for i in index::sample(rng, n, count).into_vec() {
        let r = rng.random_range(0..num_classes - 1);
        out[i] = if r >= labels[i] { r + 1 } else { r };
        mask[i] = true;
    }
    Ok((out, mask))
}
