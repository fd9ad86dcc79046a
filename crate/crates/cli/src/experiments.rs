//! Experiment drivers shared by the subcommands and the acceptance suite.
//! Nothing here writes files; see [`crate::commands`] for artifacts.

use lgl_core::cluster::{kmeans, KMeansConfig, PseudoLabelSet};
use lgl_core::contrastive::{train_stage1, Stage1Epoch};
use lgl_core::corpus::{generate_corpus, inject_label_noise, make_trials, Corpus, CorpusConfig, TrialPair};
use lgl_core::encoder::EncoderParams;
use lgl_core::gated::{
    finish_iteration, iteration_report, run_plain_phase, run_stage2, ClassifierParams, Gate, GateReport,
    IterationSpec, Stage2Outcome, Stage2Trainer,
};
use lgl_core::metrics::{reliable_mask, toy_loss_split, Evaluator, LossSplit, RunReport, SubsetAgreement};
use lgl_core::{seed, Error, Result};
use serde::Serialize;

use crate::config::RunConfig;

/// Corpus with its trial list and the evaluator built from them.
pub struct Prepared {
    pub corpus: Corpus,
    pub trials: Vec<TrialPair>,
    pub evaluator: Evaluator,
}

impl Prepared {
    pub fn new(corpus: Corpus, trials: Vec<TrialPair>) -> Self {
        let evaluator = Evaluator::new(&corpus, trials.clone());
        Self {
            corpus,
            trials,
            evaluator,
        }
    }
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let corpus = generate_corpus(&cfg.corpus_config())?;
    let trials = make_trials(&corpus, cfg.num_trials, cfg.trials_seed())?;
    Ok(Prepared::new(corpus, trials))
}

pub fn stage1(cfg: &RunConfig, corpus: &Corpus) -> Result<(EncoderParams, Vec<Stage1Epoch>)> {
    let init = EncoderParams::init(&cfg.architecture()?, cfg.encoder_seed())?;
    train_stage1(corpus.unlabeled(), &init, &cfg.stage1_config())
}

pub fn encoder_eer(ev: &Evaluator, corpus: &Corpus, encoder: &EncoderParams) -> Result<f64> {
    Ok(ev.eer(&encoder.embed_corpus(corpus.unlabeled())?)?.0)
}

/// Cluster the encoder's embeddings once more and score the clustering.
pub fn final_agreement(
    cfg: &RunConfig,
    prep: &Prepared,
    encoder: &EncoderParams,
) -> Result<(PseudoLabelSet, SubsetAgreement)> {
    let emb = encoder.embed_corpus(prep.corpus.unlabeled())?;
    let km = kmeans(
        &emb,
        &KMeansConfig {
            k: cfg.effective_k(),
            max_iters: cfg.cluster_max_iters,
            restarts: cfg.cluster_restarts,
            seed: seed::derive(cfg.seed, "final-cluster"),
        },
    )?;
    let agreement = prep.evaluator.agreement(&km.labels.labels)?;
    Ok((km.labels, agreement))
}

/// Final metrics of one pipeline run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PipelineSummary {
    pub lgl: bool,
    pub stage1_eer: f64,
    pub final_eer: f64,
    pub final_nmi: f64,
    pub final_cluster_accuracy: f64,
}

pub struct PipelineOutcome {
    pub stage2: Stage2Outcome,
    pub reports: Vec<RunReport>,
    pub final_labels: PseudoLabelSet,
    pub summary: PipelineSummary,
}

/// Stage II from a given Stage I encoder, with evaluation after every iteration.
pub fn pipeline_from(
    cfg: &RunConfig,
    prep: &Prepared,
    stage1_encoder: &EncoderParams,
    no_lgl: bool,
) -> Result<PipelineOutcome> {
    let stage1_eer = encoder_eer(&prep.evaluator, &prep.corpus, stage1_encoder)?;
    let outcome = run_stage2(
        prep.corpus.unlabeled(),
        stage1_encoder,
        &cfg.schedule(no_lgl),
        &cfg.stage2_config(),
        Some(&prep.evaluator),
    )?;
    let reports: Vec<RunReport> = outcome.iterations.iter().filter_map(|it| it.report.clone()).collect();
    let final_eer = reports.last().map_or(stage1_eer, |r| r.eer);
    let (final_labels, agreement) = final_agreement(cfg, prep, &outcome.encoder)?;
    Ok(PipelineOutcome {
        stage2: outcome,
        reports,
        final_labels,
        summary: PipelineSummary {
            lgl: !no_lgl,
            stage1_eer,
            final_eer,
            final_nmi: agreement.nmi,
            final_cluster_accuracy: agreement.cluster_accuracy,
        },
    })
}

/// Agreement of every gated epoch's selection with the truth next to the
/// agreement of all samples, per iteration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PurityRow {
    pub iteration: usize,
    pub epoch: usize,
    pub num_selected: usize,
    pub all_nmi: f64,
    pub all_cluster_accuracy: f64,
    pub selected_nmi: Option<f64>,
    pub selected_cluster_accuracy: Option<f64>,
}

pub fn selection_purity(ev: &Evaluator, outcome: &Stage2Outcome) -> Result<Vec<PurityRow>> {
    let mut rows = Vec::new();
    for it in &outcome.iterations {
        let all = ev.agreement(&it.labels.labels)?;
        for g in &it.gated_reports {
            let sel = ev.selected_agreement(&it.labels.labels, &g.selected)?;
            rows.push(PurityRow {
                iteration: it.index,
                epoch: g.epoch,
                num_selected: g.num_selected,
                all_nmi: all.nmi,
                all_cluster_accuracy: all.cluster_accuracy,
                selected_nmi: sel.map(|s| s.nmi),
                selected_cluster_accuracy: sel.map(|s| s.cluster_accuracy),
            });
        }
    }
    Ok(rows)
}

/// Result of the toy loss-separation run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ToyOutcome {
    pub split: LossSplit,
    pub num_reliable: usize,
    pub num_unreliable: usize,
    pub warmup_epochs: usize,
    /// Reliable curve strictly below the unreliable one at every epoch after warmup.
    pub separated_after_warmup: bool,
    /// `mean_unreliable - mean_reliable` at the last epoch.
    pub final_gap: Option<f64>,
}

pub fn toy_corpus_config(cfg: &RunConfig) -> CorpusConfig {
    CorpusConfig {
        num_speakers: cfg.toy.num_speakers,
        utts_per_speaker: cfg.toy.utts_per_speaker,
        seed: seed::derive(cfg.seed, "toy-corpus"),
        ..cfg.corpus.clone()
    }
}

/// Train a classifier on fixed labels and split the per-sample loss curves by
/// label reliability. With injected noise the labels are the truth with a
/// corrupted fraction; without, they come from clustering the pretrained
/// embeddings.
pub fn toy(cfg: &RunConfig) -> Result<ToyOutcome> {
    cfg.validate()?;
    let corpus = generate_corpus(&toy_corpus_config(cfg))?;
    let init = EncoderParams::init(&cfg.architecture()?, cfg.encoder_seed())?;
    let s1 = lgl_core::Stage1Config {
        epochs: cfg.toy.stage1_epochs,
        ..cfg.stage1_config()
    };
    let (encoder, _) = train_stage1(corpus.unlabeled(), &init, &s1)?;
    let truth = corpus.truth_labels();
    let k = corpus.num_speakers();

    let (labels, reliable) = if cfg.toy.noise_fraction > 0.0 {
        let mut rng = seed::rng(cfg.seed, seed::streams::NOISE);
        let (labels, corrupted) = inject_label_noise(&truth, cfg.toy.noise_fraction, k, &mut rng)?;
        (labels, corrupted.iter().map(|c| !c).collect::<Vec<bool>>())
    } else {
        let emb = encoder.embed_corpus(corpus.unlabeled())?;
        let km = kmeans(
            &emb,
            &KMeansConfig {
                k,
                max_iters: cfg.cluster_max_iters,
                restarts: cfg.cluster_restarts,
                seed: seed::derive(cfg.seed, seed::streams::CLUSTER),
            },
        )?;
        let mask = reliable_mask(&truth, &km.labels.labels)?;
        (km.labels.labels, mask)
    };

    let s2 = cfg.stage2_config();
    let mut rng = seed::rng(cfg.seed, "toy-train");
    let classifier = ClassifierParams::init(k, encoder.embedding_dim(), &mut rng)?;
    let mut trainer = Stage2Trainer::new(encoder, classifier);
    let mut reports: Vec<GateReport> = Vec::with_capacity(cfg.toy.epochs);
    for _ in 0..cfg.toy.epochs {
        reports.push(trainer.train_epoch(corpus.unlabeled(), &labels, Gate::Disabled, &s2, &mut rng)?);
    }
    let traces: Vec<Vec<f64>> = (0..corpus.len())
        .map(|i| reports.iter().map(|r| r.losses[i]).collect())
        .collect();
    let split = toy_loss_split(&traces, &reliable)?;
    let num_reliable = reliable.iter().filter(|&&r| r).count();
    let (separated, gap) = match (&split.reliable, &split.unreliable) {
        (Some(r), Some(u)) => (
            (cfg.toy.warmup_epochs..r.len()).all(|e| r[e] < u[e]),
            Some(u[u.len() - 1] - r[r.len() - 1]),
        ),
        _ => (false, None),
    };
    Ok(ToyOutcome {
        split,
        num_reliable,
        num_unreliable: reliable.len() - num_reliable,
        warmup_epochs: cfg.toy.warmup_epochs,
        separated_after_warmup: separated,
        final_gap: gap,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum AblationAxis {
    Tau,
    K,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tau" => Ok(Self::Tau),
            "k" => Ok(Self::K),
            _ => Err(Error::Config(format!("unknown ablation axis `{s}`, expected tau or k"))),
        }
    }
}

/// Iteration-1 metrics for one setting.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    /// `None` is +infinity.
    pub tau: Option<f64>,
    pub k: usize,
    pub eer: f64,
    pub nmi: f64,
    pub cluster_accuracy: f64,
    pub selection_fraction: Option<f64>,
}

fn row_from(report: &RunReport, spec: &IterationSpec) -> AblationRow {
    AblationRow {
        tau: spec.tau,
        k: spec.cluster_k,
        eer: report.eer,
        nmi: report.nmi,
        cluster_accuracy: report.cluster_accuracy,
        selection_fraction: report.selection_fraction,
    }
}

/// Iteration 1 for each setting on the chosen axis. Settings on the tau axis
/// share one clustering and plain phase and differ only in the gated phase.
pub fn ablate(cfg: &RunConfig, prep: &Prepared, encoder: &EncoderParams, axis: AblationAxis) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let s2 = cfg.stage2_config();
    let unlabeled = prep.corpus.unlabeled();
    let base = cfg.schedule(false).iterations[0].clone();
    let mut rows = Vec::new();
    match axis {
        AblationAxis::Tau => {
            let (trainer, labels, plain) = run_plain_phase(unlabeled, encoder, 0, &base, &s2)?;
            for &tau in &cfg.ablate_taus {
                let spec = IterationSpec {
                    tau: (!tau.is_infinite()).then_some(tau),
                    ..base.clone()
                };
                let outcome =
                    finish_iteration(unlabeled, trainer.clone(), labels.clone(), plain.clone(), 0, &spec, &s2)?;
                rows.push(row_from(&iteration_report(&prep.evaluator, unlabeled, &outcome)?, &spec));
            }
        }
        AblationAxis::K => {
            let n = prep.corpus.num_speakers() as f64;
            for &f in &cfg.ablate_k_factors {
                let k = ((f * n).round() as usize).clamp(1, prep.corpus.len());
                let spec = IterationSpec {
                    cluster_k: k,
                    ..base.clone()
                };
                let (trainer, labels, plain) = run_plain_phase(unlabeled, encoder, 0, &spec, &s2)?;
                let outcome = finish_iteration(unlabeled, trainer, labels, plain, 0, &spec, &s2)?;
                rows.push(row_from(&iteration_report(&prep.evaluator, unlabeled, &outcome)?, &spec));
            }
        }
    }
    Ok(rows)
}
