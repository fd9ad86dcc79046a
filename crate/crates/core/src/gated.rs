//! Stage II: AAM-softmax classification on k-means pseudo labels, the
//! per-sample loss gate, and the iteration controller.
//!
//! In a gated epoch each minibatch computes every sample's AAM loss, keeps the
//! samples whose loss is strictly below the threshold, and backpropagates the
//! mean loss over the kept samples only. A batch with nothing kept makes no
//! update.
//!
//! Each iteration embeds the corpus with the current encoder, clusters it,
//! starts a fresh classifier (cluster ids are not comparable across
//! iterations), trains ungated for `epochs_plain` epochs and then gated for
//! `epochs_gated` epochs with the same classifier. The encoder carries over to
//! the next iteration. Optimizer state is reset at the start of each iteration.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cluster::{kmeans, KMeansConfig, PseudoLabelSet};
use crate::corpus::{random_crop, UnlabeledCorpus};
use crate::encoder::{EncoderGrads, EncoderOptimizer, EncoderParams};
use crate::error::{config, domain, Result};
use crate::math::{axpy, dot, log_sum_exp, norm, softmax_into, AdamState, Matrix};
use crate::metrics::{Evaluator, RunReport};
use crate::seed::{self, Rng as SeedRng};

/// Default thresholds for five iterations.
pub const DEFAULT_TAUS: [f64; 5] = [1.0, 3.0, 3.0, 5.0, 6.0];
pub const DEFAULT_MARGIN: f64 = 0.2;
pub const DEFAULT_SCALE: f64 = 30.0;

/// Floor on `sin(theta)` in the margin derivative, away from theta in {0, pi}.
const MIN_SIN: f64 = 1e-8;

/// Unit-norm class anchors, one row per pseudo class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    anchors: Matrix,
}

impl ClassifierParams {
    /// Rows must have unit norm within 1e-9.
    pub fn new(anchors: Matrix) -> Result<Self> {
        for (r, row) in anchors.iter_rows().enumerate() {
            let n = norm(row);
            if (n - 1.0).abs() > 1e-9 {
                return Err(domain(format!("classifier anchor {r} has norm {n}")));
            }
        }
        Ok(Self { anchors })
    }

    /// Random directions, uniform on the sphere.
    pub fn init(num_classes: usize, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if num_classes == 0 || dim == 0 {
            return Err(config("classifier needs at least one class and one dimension"));
        }
        let mut anchors = Matrix::zeros(num_classes, dim);
        for r in 0..num_classes {
            let row = anchors.row_mut(r);
            loop {
                row.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
                if norm(row) > 1e-6 {
                    break;
                }
            }
        }
        renormalize_rows(&mut anchors);
        Ok(Self { anchors })
    }

    pub fn num_classes(&self) -> usize {
        self.anchors.rows()
    }

    pub fn dim(&self) -> usize {
        self.anchors.cols()
    }

    pub fn anchors(&self) -> &Matrix {
        &self.anchors
    }
}

fn renormalize_rows(m: &mut Matrix) {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let n = norm(row);
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
}

/// AAM loss of one sample with gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct AamOutput {
    pub loss: f64,
    /// Gradient with respect to the embedding, tangent to the sphere.
    pub grad_embedding: Vec<f64>,
    /// `dloss / dcos(theta_c)` for each class; the anchor gradient of class c
    /// is `coef[c] * (e - cos_c * w_c)`.
    pub cos_coef: Vec<f64>,
    pub cosines: Vec<f64>,
}

fn check_aam(embedding: &[f64], label: usize, classifier: &ClassifierParams, margin: f64, scale: f64) -> Result<()> {
    if label >= classifier.num_classes() {
        return Err(domain(format!(
            "label {label} out of range for {} classes",
            classifier.num_classes()
        )));
    }
    if embedding.len() != classifier.dim() {
        return Err(domain(format!(
            "embedding dim {} does not match classifier dim {}",
            embedding.len(),
            classifier.dim()
        )));
    }
    if !(0.0..std::f64::consts::FRAC_PI_2).contains(&margin) {
        return Err(domain(format!("AAM margin must be in [0, pi/2), got {margin}")));
    }
    if !(scale > 0.0) {
        return Err(domain(format!("AAM scale must be positive, got {scale}")));
    }
    Ok(())
}

/// `-log( exp(s cos(theta_y + m)) / (exp(s cos(theta_y + m)) + sum_{c != y} exp(s cos theta_c)) )`
pub fn aam_loss(embedding: &[f64], label: usize, classifier: &ClassifierParams, margin: f64, scale: f64) -> Result<f64> {
    check_aam(embedding, label, classifier, margin, scale)?;
    let logits: Vec<f64> = (0..classifier.num_classes())
        .map(|c| {
            let cos = dot(embedding, classifier.anchors.row(c)).clamp(-1.0, 1.0);
            if c == label {
                scale * (cos.acos() + margin).cos()
            } else {
                scale * cos
            }
        })
        .collect();
    cross_entropy(&logits, label)
}

/// `lse(logits) - logits[label]`, accurate when the loss is near zero.
fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    let ly = logits[label];
    if logits.iter().all(|&l| l <= ly) {
        let rest: f64 = logits
            .iter()
            .enumerate()
            .filter(|&(c, _)| c != label)
            .map(|(_, &l)| (l - ly).exp())
            .sum();
        return Ok(rest.ln_1p());
    }
    Ok(log_sum_exp(logits)? - ly)
}

pub fn aam_forward_backward(
    embedding: &[f64],
    label: usize,
    classifier: &ClassifierParams,
    margin: f64,
    scale: f64,
) -> Result<AamOutput> {
    check_aam(embedding, label, classifier, margin, scale)?;
    let c_count = classifier.num_classes();
    let d = classifier.dim();
    let mut cosines = Vec::with_capacity(c_count);
    let mut inside = Vec::with_capacity(c_count);
    for c in 0..c_count {
        let raw = dot(embedding, classifier.anchors.row(c));
        inside.push((-1.0..=1.0).contains(&raw));
        cosines.push(raw.clamp(-1.0, 1.0));
    }
    let mut logits: Vec<f64> = cosines.iter().map(|c| scale * c).collect();
    let cos_y = cosines[label];
    let theta = cos_y.acos();
    logits[label] = scale * (theta + margin).cos();

    let mut p = vec![0.0; c_count];
    softmax_into(&logits, &mut p);
    let loss = cross_entropy(&logits, label)?;
    // 1 - p_y summed from the other classes keeps precision when p_y is near 1.
    let rest: f64 = p.iter().enumerate().filter(|&(c, _)| c != label).map(|(_, v)| v).sum();

    // dlogit_y / dcos_y = s * sin(theta + m) / sin(theta)
    let sin_theta = theta.sin().max(MIN_SIN);
    let dy = scale * (theta + margin).sin() / sin_theta;
    let mut cos_coef = Vec::with_capacity(c_count);
    for c in 0..c_count {
        let dl_dlogit = if c == label { -rest } else { p[c] };
        let dlogit_dcos = if c == label { dy } else { scale };
        cos_coef.push(if inside[c] { dl_dlogit * dlogit_dcos } else { 0.0 });
    }
    let mut grad = vec![0.0; d];
    for (c, &k) in cos_coef.iter().enumerate() {
        if k != 0.0 {
            axpy(k, classifier.anchors.row(c), &mut grad);
        }
    }
    let radial = dot(&grad, embedding);
    axpy(-radial, embedding, &mut grad);
    Ok(AamOutput {
        loss,
        grad_embedding: grad,
        cos_coef,
        cosines,
    })
}

/// Sum of losses strictly below `tau`, and the selection mask.
pub fn gated_batch_loss(losses: &[f64], tau: f64) -> (f64, Vec<bool>) {
    let mask: Vec<bool> = losses.iter().map(|&l| l < tau).collect();
    let sum = losses.iter().zip(&mask).filter(|(_, &m)| m).map(|(l, _)| l).sum();
    (sum, mask)
}

/// Whether a training epoch gates samples by loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Gate {
    /// Every sample contributes.
    Disabled,
    /// Samples with loss `< tau` contribute. `tau` may be `f64::INFINITY`.
    Threshold(f64),
}

impl Gate {
    /// `None` for +infinity, which JSON cannot represent.
    pub fn tau(&self) -> Option<f64> {
        match self {
            Gate::Disabled => None,
            Gate::Threshold(t) if t.is_infinite() => None,
            Gate::Threshold(t) => Some(*t),
        }
    }
}

/// Per-sample outcome of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub epoch: usize,
    pub gated: bool,
    /// Threshold, `None` when ungated or infinite.
    pub tau: Option<f64>,
    /// Loss of each utterance (indexed by id) at its forward pass in this epoch.
    pub losses: Vec<f64>,
    pub selected: Vec<bool>,
    pub num_selected: usize,
    pub selection_fraction: f64,
    pub mean_loss: f64,
    /// Minibatches in which no sample passed the gate.
    pub empty_batches: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Config {
    pub batch_size: usize,
    /// Random crop length in frames.
    pub crop_len: usize,
    pub lr: f64,
    pub margin: f64,
    pub scale: f64,
    pub kmeans_max_iters: usize,
    pub kmeans_restarts: usize,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            batch_size: 32,
            crop_len: 30,
            lr: 0.001,
            margin: DEFAULT_MARGIN,
            scale: DEFAULT_SCALE,
            kmeans_max_iters: 100,
            kmeans_restarts: 5,
            seed: 0,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.crop_len == 0 {
            return Err(config("stage2 batch_size and crop_len must be positive"));
        }
        if !(self.lr > 0.0) || !(self.scale > 0.0) {
            return Err(config("stage2 lr and scale must be positive"));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(config("stage2 margin must be in [0, pi/2)"));
        }
        Ok(())
    }
}

/// Encoder, classifier and their optimizer state for one iteration.
#[derive(Clone, Debug)]
pub struct Stage2Trainer {
    pub encoder: EncoderParams,
    pub classifier: ClassifierParams,
    encoder_opt: EncoderOptimizer,
    classifier_opt: AdamState,
    epochs_done: usize,
}

impl Stage2Trainer {
    pub fn new(encoder: EncoderParams, classifier: ClassifierParams) -> Self {
        let encoder_opt = EncoderOptimizer::new(&encoder);
        let classifier_opt = AdamState::for_param(&classifier.anchors);
        Self {
            encoder,
            classifier,
            encoder_opt,
            classifier_opt,
            epochs_done: 0,
        }
    }

    /// One pass over the corpus in random order, one random crop per utterance.
    pub fn train_epoch(
        &mut self,
        corpus: UnlabeledCorpus<'_>,
        labels: &[usize],
        gate: Gate,
        cfg: &Stage2Config,
        rng: &mut SeedRng,
    ) -> Result<GateReport> {
        cfg.validate()?;
        let n = corpus.len();
        if labels.len() != n {
            return Err(domain(format!("{} pseudo labels for {n} utterances", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.classifier.num_classes()) {
            return Err(domain(format!(
                "pseudo label {bad} but the classifier has {} classes",
                self.classifier.num_classes()
            )));
        }
        let d = self.encoder.embedding_dim();
        if d != self.classifier.dim() {
            return Err(domain("encoder and classifier dimensions differ"));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);

        let mut losses = vec![0.0; n];
        let mut selected = vec![false; n];
        let mut enc_grads = EncoderGrads::zeros_for(&self.encoder);
        let mut cls_grad = Matrix::zeros(self.classifier.num_classes(), d);
        let mut empty_batches = 0;

        for chunk in order.chunks(cfg.batch_size) {
            let mut items = Vec::with_capacity(chunk.len());
            for &id in chunk {
                let crop = random_crop(id, corpus.frames(id), cfg.crop_len, rng)?;
                let trace = self.encoder.forward(&crop)?;
                let out = aam_forward_backward(
                    trace.embedding.as_slice(),
                    labels[id],
                    &self.classifier,
                    cfg.margin,
                    cfg.scale,
                )?;
                losses[id] = out.loss;
                items.push((id, trace, out));
            }
            let keep: Vec<bool> = match gate {
                Gate::Disabled => vec![true; items.len()],
                Gate::Threshold(tau) => items.iter().map(|(_, _, o)| o.loss < tau).collect(),
            };
            let count = keep.iter().filter(|&&k| k).count();
            if count == 0 {
                empty_batches += 1;
                continue;
            }
            let w = 1.0 / count as f64;
            enc_grads.clear();
            cls_grad.fill(0.0);
            for ((id, trace, out), &k) in items.iter().zip(&keep) {
                if !k {
                    continue;
                }
                selected[*id] = true;
                let upstream: Vec<f64> = out.grad_embedding.iter().map(|g| g * w).collect();
                trace.backward(&self.encoder, &upstream, &mut enc_grads)?;
                let e = trace.embedding.as_slice();
                for (c, &coef) in out.cos_coef.iter().enumerate() {
                    if coef == 0.0 {
                        continue;
                    }
                    let cos = out.cosines[c];
                    let anchor = self.classifier.anchors.row(c);
                    let g = cls_grad.row_mut(c);
                    for t in 0..d {
                        g[t] += w * coef * (e[t] - cos * anchor[t]);
                    }
                }
            }
            self.encoder_opt.step(&mut self.encoder, &enc_grads, cfg.lr)?;
            self.classifier_opt.step(&mut self.classifier.anchors, &cls_grad, cfg.lr)?;
            renormalize_rows(&mut self.classifier.anchors);
        }

        let num_selected = selected.iter().filter(|&&s| s).count();
        let report = GateReport {
            epoch: self.epochs_done,
            gated: !matches!(gate, Gate::Disabled),
            tau: gate.tau(),
            mean_loss: losses.iter().sum::<f64>() / n.max(1) as f64,
            losses,
            selected,
            num_selected,
            selection_fraction: num_selected as f64 / n.max(1) as f64,
            empty_batches,
        };
        self.epochs_done += 1;
        Ok(report)
    }
}

/// One Stage II iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationSpec {
    /// `None` means +infinity.
    pub tau: Option<f64>,
    pub epochs_plain: usize,
    pub epochs_gated: usize,
    pub cluster_k: usize,
}

impl IterationSpec {
    pub fn gate(&self) -> Gate {
        Gate::Threshold(self.tau.unwrap_or(f64::INFINITY))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationSchedule {
    pub iterations: Vec<IterationSpec>,
}

impl IterationSchedule {
    /// One iteration per threshold, all sharing epoch budgets and cluster count.
    pub fn from_taus(taus: &[f64], epochs_plain: usize, epochs_gated: usize, cluster_k: usize) -> Self {
        Self {
            iterations: taus
                .iter()
                .map(|&t| IterationSpec {
                    tau: (!t.is_infinite()).then_some(t),
                    epochs_plain,
                    epochs_gated,
                    cluster_k,
                })
                .collect(),
        }
    }

    /// The five default thresholds.
    pub fn default_for(cluster_k: usize, epochs_plain: usize, epochs_gated: usize) -> Self {
        Self::from_taus(&DEFAULT_TAUS, epochs_plain, epochs_gated, cluster_k)
    }

    /// Same schedule with the gated phase removed.
    pub fn without_gating(&self) -> Self {
        Self {
            iterations: self
                .iterations
                .iter()
                .map(|s| IterationSpec { epochs_gated: 0, ..s.clone() })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations.is_empty() {
            return Err(config("stage2 schedule has no iterations"));
        }
        for (i, s) in self.iterations.iter().enumerate() {
            if let Some(t) = s.tau {
                if !(t > 0.0) {
                    return Err(config(format!("iteration {i}: tau must be positive, got {t}")));
                }
            }
            if s.cluster_k == 0 {
                return Err(config(format!("iteration {i}: cluster_k must be at least 1")));
            }
        }
        Ok(())
    }
}

/// Whether each transition grows the selected count by at least 10%.
/// A zero base always counts as satisfied.
pub fn check_selection_growth(counts: &[usize]) -> Vec<bool> {
    counts
        .windows(2)
        .map(|w| w[0] == 0 || 10 * w[1] >= 11 * w[0])
        .collect()
}

#[derive(Clone, Debug)]
pub struct IterationOutcome {
    pub index: usize,
    pub spec: IterationSpec,
    pub labels: PseudoLabelSet,
    pub plain_reports: Vec<GateReport>,
    pub gated_reports: Vec<GateReport>,
    /// Encoder at the end of the iteration.
    pub encoder: EncoderParams,
    pub report: Option<RunReport>,
}

impl IterationOutcome {
    pub fn last_gate(&self) -> Option<&GateReport> {
        self.gated_reports.last()
    }
}

#[derive(Clone, Debug)]
pub struct Stage2Outcome {
    pub encoder: EncoderParams,
    pub iterations: Vec<IterationOutcome>,
    /// Selection-growth shortfalls and empty-selection notices.
    pub warnings: Vec<String>,
}

/// One iteration: embed, cluster, train plain then gated.
pub fn run_iteration(
    corpus: UnlabeledCorpus<'_>,
    encoder: &EncoderParams,
    index: usize,
    spec: &IterationSpec,
    cfg: &Stage2Config,
) -> Result<IterationOutcome> {
    let (trainer, labels, plain_reports) = run_plain_phase(corpus, encoder, index, spec, cfg)?;
    finish_iteration(corpus, trainer, labels, plain_reports, index, spec, cfg)
}

/// Embed, cluster, and train ungated. Split out so that several gated
/// continuations can share one plain phase.
pub fn run_plain_phase(
    corpus: UnlabeledCorpus<'_>,
    encoder: &EncoderParams,
    index: usize,
    spec: &IterationSpec,
    cfg: &Stage2Config,
) -> Result<(Stage2Trainer, PseudoLabelSet, Vec<GateReport>)> {
    cfg.validate()?;
    let embeddings = encoder.embed_corpus(corpus)?;
    let km = kmeans(
        &embeddings,
        &KMeansConfig {
            k: spec.cluster_k,
            max_iters: cfg.kmeans_max_iters,
            restarts: cfg.kmeans_restarts,
            seed: seed::derive_indexed(cfg.seed, seed::streams::CLUSTER, index as u64),
        },
    )?;
    let mut labels = km.labels;
    labels.iteration_index = index;

    let mut rng = seed::rng_indexed(cfg.seed, seed::streams::STAGE2, index as u64);
    let classifier = ClassifierParams::init(spec.cluster_k, encoder.embedding_dim(), &mut rng)?;
    let mut trainer = Stage2Trainer::new(encoder.clone(), classifier);
    let mut plain = Vec::with_capacity(spec.epochs_plain);
    for _ in 0..spec.epochs_plain {
        plain.push(trainer.train_epoch(corpus, &labels.labels, Gate::Disabled, cfg, &mut rng)?);
    }
    Ok((trainer, labels, plain))
}

/// Gated epochs continuing from the plain phase.
pub fn finish_iteration(
    corpus: UnlabeledCorpus<'_>,
    mut trainer: Stage2Trainer,
    labels: PseudoLabelSet,
    plain_reports: Vec<GateReport>,
    index: usize,
    spec: &IterationSpec,
    cfg: &Stage2Config,
) -> Result<IterationOutcome> {
    let mut rng = seed::rng_indexed(cfg.seed, "stage2-gated", index as u64);
    let mut gated = Vec::with_capacity(spec.epochs_gated);
    for _ in 0..spec.epochs_gated {
        gated.push(trainer.train_epoch(corpus, &labels.labels, spec.gate(), cfg, &mut rng)?);
    }
    Ok(IterationOutcome {
        index,
        spec: spec.clone(),
        labels,
        plain_reports,
        gated_reports: gated,
        encoder: trainer.encoder,
        report: None,
    })
}

/// Run the whole schedule. When an evaluator is given, each iteration gets a
/// [`RunReport`]; the evaluator never feeds back into training.
pub fn run_stage2(
    corpus: UnlabeledCorpus<'_>,
    initial_encoder: &EncoderParams,
    schedule: &IterationSchedule,
    cfg: &Stage2Config,
    evaluator: Option<&Evaluator>,
) -> Result<Stage2Outcome> {
    schedule.validate()?;
    let mut encoder = initial_encoder.clone();
    let mut iterations = Vec::with_capacity(schedule.iterations.len());
    let mut warnings = Vec::new();
    for (index, spec) in schedule.iterations.iter().enumerate() {
        let mut outcome = run_iteration(corpus, &encoder, index, spec, cfg)?;
        for r in &outcome.gated_reports {
            if r.empty_batches > 0 {
                warnings.push(format!(
                    "iteration {index} epoch {}: {} minibatches had no sample below the threshold",
                    r.epoch, r.empty_batches
                ));
            }
        }
        if let Some(ev) = evaluator {
            outcome.report = Some(iteration_report(ev, corpus, &outcome)?);
        }
        encoder = outcome.encoder.clone();
        iterations.push(outcome);
    }
    let counts: Vec<usize> = iterations
        .iter()
        .filter_map(|it| it.last_gate().map(|g| g.num_selected))
        .collect();
    for (t, ok) in check_selection_growth(&counts).into_iter().enumerate() {
        if !ok {
            warnings.push(format!(
                "selected count grew from {} to {} between gated iterations {} and {}, less than 10%",
                counts[t],
                counts[t + 1],
                t,
                t + 1
            ));
        }
    }
    Ok(Stage2Outcome {
        encoder,
        iterations,
        warnings,
    })
}

pub fn iteration_report(ev: &Evaluator, corpus: UnlabeledCorpus<'_>, outcome: &IterationOutcome) -> Result<RunReport> {
    let embeddings = outcome.encoder.embed_corpus(corpus)?;
    let (eer, _) = ev.eer(&embeddings)?;
    let all = ev.agreement(&outcome.labels.labels)?;
    let last = outcome.last_gate();
    let sel = match last {
        Some(g) => ev.selected_agreement(&outcome.labels.labels, &g.selected)?,
        None => None,
    };
    Ok(RunReport {
        iteration: outcome.index,
        eer,
        nmi: all.nmi,
        cluster_accuracy: all.cluster_accuracy,
        selected_nmi: sel.map(|s| s.nmi),
        selected_cluster_accuracy: sel.map(|s| s.cluster_accuracy),
        selection_fraction: last.map(|g| g.selection_fraction),
        num_selected: last.map(|g| g.num_selected),
        wcss: outcome.labels.wcss,
    })
}

/// CSV `utt_id,epoch,loss,selected` over the given reports.
pub fn write_loss_traces<'a, W: Write>(reports: impl IntoIterator<Item = &'a GateReport>, mut w: W) -> Result<()> {
    writeln!(w, "utt_id,epoch,loss,selected")?;
    for r in reports {
        for (id, (loss, sel)) in r.losses.iter().zip(&r.selected).enumerate() {
            writeln!(w, "{id},{},{loss},{}", r.epoch, u8::from(*sel))?;
        }
    }
    Ok(())
}
