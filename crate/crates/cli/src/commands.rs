//! Subcommand bodies. Each writes its artifacts under the configured output
//! directory and returns a short human-readable summary.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use lgl_core::cluster::{elbow_scan, kmeans, write_scan_csv, KMeansConfig};
use lgl_core::contrastive::write_history_csv;
use lgl_core::corpus::{read_trials, write_trials, Corpus};
use lgl_core::encoder::EncoderParams;
use lgl_core::gated::write_loss_traces;
use lgl_core::metrics::{score_trials, write_scores};
use lgl_core::{seed, Error, Result};
use serde::Serialize;

use crate::config::RunConfig;
use crate::experiments::{self, AblationAxis, PipelineOutcome, Prepared};

/// Optional inputs that replace generated or previously written artifacts.
#[derive(Clone, Debug, Default)]
pub struct Inputs {
    pub corpus: Option<PathBuf>,
    pub trials: Option<PathBuf>,
    pub encoder: Option<PathBuf>,
}

pub const CORPUS_FILE: &str = "corpus.bin";
pub const TRIALS_FILE: &str = "trials.txt";
pub const STAGE1_ENCODER: &str = "stage1.enc";

/// Write through a temporary sibling and rename, so a failed run leaves no
/// partial file behind.
fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let tmp = path.with_extension("partial");
    let result = (|| {
        let mut w = BufWriter::new(File::create(&tmp)?);
        f(&mut w)?;
        w.flush()?;
        Ok(())
    })();
    match result {
        Ok(()) => Ok(fs::rename(&tmp, path)?),
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w)?;
        Ok(())
    })
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.out)?;
    Ok(&cfg.out)
}

fn write_config(cfg: &RunConfig) -> Result<()> {
    let text = cfg.to_text();
    write_file(&out_dir(cfg)?.join("config.txt"), |w| Ok(w.write_all(text.as_bytes())?))
}

fn write_corpus_and_trials(dir: &Path, prep: &Prepared) -> Result<()> {
    write_file(&dir.join(CORPUS_FILE), |w| prep.corpus.write_to(w))?;
    write_file(&dir.join(TRIALS_FILE), |w| write_trials(&prep.trials, w))
}

/// Load the corpus and trials if given, else generate them from the config.
fn load_prepared(cfg: &RunConfig, inputs: &Inputs) -> Result<Prepared> {
    match &inputs.corpus {
        None => experiments::prepare(cfg),
        Some(path) => {
            cfg.validate()?;
            let corpus = Corpus::read_from(BufReader::new(File::open(path)?))?;
            let trials = match &inputs.trials {
                Some(t) => read_trials(BufReader::new(File::open(t)?))?,
                None => lgl_core::corpus::make_trials(&corpus, cfg.num_trials, cfg.trials_seed())?,
            };
            Ok(Prepared::new(corpus, trials))
        }
    }
}

fn load_encoder(path: &Path) -> Result<EncoderParams> {
    EncoderParams::read_from(BufReader::new(File::open(path)?))
}

/// The `--encoder` checkpoint, else the Stage I checkpoint in the output
/// directory, else a fresh Stage I run.
fn stage1_encoder(cfg: &RunConfig, inputs: &Inputs, prep: &Prepared) -> Result<EncoderParams> {
    if let Some(p) = &inputs.encoder {
        return load_encoder(p);
    }
    let default = cfg.out.join(STAGE1_ENCODER);
    if default.exists() {
        return load_encoder(&default);
    }
    run_stage1(cfg, prep)
}

fn run_stage1(cfg: &RunConfig, prep: &Prepared) -> Result<EncoderParams> {
    let dir = out_dir(cfg)?;
    let (encoder, history) = experiments::stage1(cfg, &prep.corpus)?;
    write_file(&dir.join(STAGE1_ENCODER), |w| encoder.write_to(w))?;
    write_file(&dir.join("stage1_history.csv"), |w| write_history_csv(&history, w))?;
    Ok(encoder)
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<String> {
    let prep = experiments::prepare(cfg)?;
    let dir = out_dir(cfg)?;
    write_config(cfg)?;
    write_corpus_and_trials(dir, &prep)?;
    Ok(format!(
        "wrote {} utterances and {} trials to {}",
        prep.corpus.len(),
        prep.trials.len(),
        dir.display()
    ))
}

#[derive(Serialize)]
struct Stage1Report {
    epochs: usize,
    final_loss: Option<f64>,
    eer: f64,
}

pub fn cmd_stage1(cfg: &RunConfig, inputs: &Inputs) -> Result<String> {
    let prep = load_prepared(cfg, inputs)?;
    write_config(cfg)?;
    let (encoder, history) = experiments::stage1(cfg, &prep.corpus)?;
    let dir = out_dir(cfg)?;
    write_file(&dir.join(STAGE1_ENCODER), |w| encoder.write_to(w))?;
    write_file(&dir.join("stage1_history.csv"), |w| write_history_csv(&history, w))?;
    let eer = experiments::encoder_eer(&prep.evaluator, &prep.corpus, &encoder)?;
    write_json(
        &dir.join("stage1_report.json"),
        &Stage1Report {
            epochs: history.len(),
            final_loss: history.last().map(|h| h.mean_loss),
            eer,
        },
    )?;
    Ok(format!("stage1: {} epochs, EER {:.4}", history.len(), eer))
}

#[derive(Serialize)]
struct ClusterReport {
    k: usize,
    wcss: f64,
    iterations: usize,
    converged: bool,
    nmi: f64,
    cluster_accuracy: f64,
}

pub fn cmd_cluster(cfg: &RunConfig, inputs: &Inputs) -> Result<String> {
    let prep = load_prepared(cfg, inputs)?;
    write_config(cfg)?;
    let encoder = stage1_encoder(cfg, inputs, &prep)?;
    let emb = encoder.embed_corpus(prep.corpus.unlabeled())?;
    let kcfg = KMeansConfig {
        k: cfg.effective_k(),
        max_iters: cfg.cluster_max_iters,
        restarts: cfg.cluster_restarts,
        seed: seed::derive(cfg.seed, seed::streams::CLUSTER),
    };
    let km = kmeans(&emb, &kcfg)?;
    let n = prep.corpus.num_speakers() as f64;
    let mut candidates: Vec<usize> = cfg
        .ablate_k_factors
        .iter()
        .map(|f| ((f * n).round() as usize).clamp(1, prep.corpus.len()))
        .collect();
    candidates.sort_unstable();
    candidates.dedup();
    let scan = elbow_scan(&emb, &candidates, &kcfg)?;
    let agreement = prep.evaluator.agreement(&km.labels.labels)?;
    let dir = out_dir(cfg)?;
    write_file(&dir.join("labels.txt"), |w| km.labels.write_to(w))?;
    write_file(&dir.join("elbow.csv"), |w| write_scan_csv(&scan, w))?;
    write_json(
        &dir.join("cluster_report.json"),
        &ClusterReport {
            k: kcfg.k,
            wcss: km.labels.wcss,
            iterations: km.iterations,
            converged: km.converged,
            nmi: agreement.nmi,
            cluster_accuracy: agreement.cluster_accuracy,
        },
    )?;
    Ok(format!(
        "cluster: k={} NMI {:.4} accuracy {:.4}",
        kcfg.k, agreement.nmi, agreement.cluster_accuracy
    ))
}

fn write_stage2(dir: &Path, outcome: &PipelineOutcome) -> Result<()> {
    for it in &outcome.stage2.iterations {
        let i = it.index;
        write_file(&dir.join(format!("iter{i}_labels.txt")), |w| it.labels.write_to(w))?;
        write_file(&dir.join(format!("iter{i}_encoder.enc")), |w| it.encoder.write_to(w))?;
        write_file(&dir.join(format!("iter{i}_losses.csv")), |w| {
            write_loss_traces(it.plain_reports.iter().chain(&it.gated_reports), w)
        })?;
    }
    write_file(&dir.join("final_encoder.enc"), |w| outcome.stage2.encoder.write_to(w))?;
    write_file(&dir.join("final_labels.txt"), |w| outcome.final_labels.write_to(w))?;
    write_json(&dir.join("reports.json"), &outcome.reports)?;
    write_json(&dir.join("summary.json"), &outcome.summary)?;
    write_json(&dir.join("warnings.json"), &outcome.stage2.warnings)?;
    write_file(&dir.join("curves.csv"), |w| {
        writeln!(w, "iteration,eer,nmi,cluster_accuracy,selection_fraction")?;
        for r in &outcome.reports {
            let sel = r.selection_fraction.map_or(String::new(), |v| v.to_string());
            writeln!(w, "{},{},{},{},{sel}", r.iteration, r.eer, r.nmi, r.cluster_accuracy)?;
        }
        Ok(())
    })
}

fn summary_table(outcome: &PipelineOutcome) -> String {
    let mut s = format!("stage1 EER {:.4}\niter  EER     NMI     acc     selected\n", outcome.summary.stage1_eer);
    for r in &outcome.reports {
        let sel = r.selection_fraction.map_or("-".to_string(), |v| format!("{v:.3}"));
        s.push_str(&format!(
            "{:<5} {:.4}  {:.4}  {:.4}  {sel}\n",
            r.iteration, r.eer, r.nmi, r.cluster_accuracy
        ));
    }
    s.push_str(&format!(
        "final EER {:.4}  NMI {:.4}  accuracy {:.4}  (LGL {})",
        outcome.summary.final_eer,
        outcome.summary.final_nmi,
        outcome.summary.final_cluster_accuracy,
        if outcome.summary.lgl { "on" } else { "off" }
    ));
    s
}

pub fn cmd_stage2(cfg: &RunConfig, inputs: &Inputs, no_lgl: bool) -> Result<String> {
    let prep = load_prepared(cfg, inputs)?;
    write_config(cfg)?;
    let encoder = stage1_encoder(cfg, inputs, &prep)?;
    let outcome = experiments::pipeline_from(cfg, &prep, &encoder, no_lgl)?;
    write_stage2(out_dir(cfg)?, &outcome)?;
    Ok(summary_table(&outcome))
}

pub fn cmd_pipeline(cfg: &RunConfig, inputs: &Inputs, no_lgl: bool) -> Result<String> {
    let prep = load_prepared(cfg, inputs)?;
    write_config(cfg)?;
    let dir = out_dir(cfg)?;
    write_corpus_and_trials(dir, &prep)?;
    let encoder = match &inputs.encoder {
        Some(p) => load_encoder(p)?,
        None => run_stage1(cfg, &prep)?,
    };
    let outcome = experiments::pipeline_from(cfg, &prep, &encoder, no_lgl)?;
    write_stage2(dir, &outcome)?;
    Ok(summary_table(&outcome))
}

pub fn cmd_toy(cfg: &RunConfig) -> Result<String> {
    let toy = experiments::toy(cfg)?;
    write_config(cfg)?;
    let dir = out_dir(cfg)?;
    write_file(&dir.join("toy.csv"), |w| {
        writeln!(w, "epoch,mean_reliable,mean_unreliable")?;
        let epochs = cfg.toy.epochs;
        let cell = |c: &Option<Vec<f64>>, e: usize| c.as_ref().map_or(String::new(), |v| v[e].to_string());
        for e in 0..epochs {
            writeln!(w, "{e},{},{}", cell(&toy.split.reliable, e), cell(&toy.split.unreliable, e))?;
        }
        Ok(())
    })?;
    write_json(&dir.join("toy.json"), &toy)?;
    Ok(format!(
        "toy: {} reliable, {} unreliable, separated after warmup: {}, final gap {}",
        toy.num_reliable,
        toy.num_unreliable,
        toy.separated_after_warmup,
        toy.final_gap.map_or("n/a".to_string(), |g| format!("{g:.4}"))
    ))
}

pub fn cmd_ablate(cfg: &RunConfig, inputs: &Inputs, axis: AblationAxis) -> Result<String> {
    let prep = load_prepared(cfg, inputs)?;
    write_config(cfg)?;
    let encoder = stage1_encoder(cfg, inputs, &prep)?;
    let rows = experiments::ablate(cfg, &prep, &encoder, axis)?;
    let name = match axis {
        AblationAxis::Tau => "tau",
        AblationAxis::K => "k",
    };
    let dir = out_dir(cfg)?;
    let mut table = String::from("tau,k,eer,nmi,cluster_accuracy,selection_fraction\n");
    for r in &rows {
        table.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.tau.map_or("inf".to_string(), |t| t.to_string()),
            r.k,
            r.eer,
            r.nmi,
            r.cluster_accuracy,
            r.selection_fraction.map_or(String::new(), |v| v.to_string())
        ));
    }
    write_file(&dir.join(format!("ablation_{name}.csv")), |w| Ok(w.write_all(table.as_bytes())?))?;
    Ok(table.trim_end().to_string())
}

#[derive(Serialize)]
struct EvalReport {
    eer: f64,
    threshold: f64,
    num_trials: usize,
}

pub fn cmd_eval(cfg: &RunConfig, inputs: &Inputs) -> Result<String> {
    let prep = load_prepared(cfg, inputs)?;
    let path = inputs
        .encoder
        .clone()
        .unwrap_or_else(|| cfg.out.join("final_encoder.enc"));
    let encoder = load_encoder(&path)?;
    let emb = encoder.embed_corpus(prep.corpus.unlabeled())?;
    let scores = score_trials(&emb, &prep.trials)?;
    let (eer, threshold) = prep.evaluator.eer(&emb)?;
    let dir = out_dir(cfg)?;
    write_file(&dir.join("scores.txt"), |w| write_scores(&prep.trials, &scores, w))?;
    write_json(
        &dir.join("eval.json"),
        &EvalReport {
            eer,
            threshold,
            num_trials: prep.trials.len(),
        },
    )?;
    Ok(format!("eval: EER {eer:.4} at threshold {threshold:.4} over {} trials", prep.trials.len()))
}
