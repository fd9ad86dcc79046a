//! Flat `key = value` run configuration.
//!
//! One setting per line; `#` starts a comment; blank lines are ignored. Keys
//! not present keep their defaults, so an empty file is a valid config.
//! Unknown keys and malformed values are config errors. Lists are comma
//! separated; `inf` denotes +infinity in threshold lists.
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `seed` | 0 | global seed; every random stream derives from it |
//! | `out` | `lgl-out` | output directory |
//! | `corpus.num_speakers` | 40 | |
//! | `corpus.utts_per_speaker` | 50 | |
//! | `corpus.frames_per_utt` | 64 | |
//! | `corpus.feature_dim` | 16 | |
//! | `corpus.intra_spread` | 0.9 | per-frame noise |
//! | `corpus.inter_spread` | 1.0 | speaker-mean scale |
//! | `corpus.session_dim` | 3 | rank of the per-utterance channel offset |
//! | `corpus.session_spread` | 1.75 | channel offset scale |
//! | `encoder.hidden` | `64,64` | hidden layer widths |
//! | `encoder.embedding_dim` | 32 | |
//! | `stage1.batch_size` | 16 | utterances per contrastive batch |
//! | `stage1.epochs` | 20 | |
//! | `stage1.lr` | 0.001 | |
//! | `stage1.lr_decay` | 0.95 | |
//! | `stage1.decay_every` | 5 | epochs between decays |
//! | `stage1.segment_len` | 20 | frames per segment |
//! | `stage1.noise_scale` | 0.5 | augmentation noise |
//! | `stage1.gain_range` | `0.8,1.2` | augmentation gain |
//! | `stage2.batch_size` | 32 | |
//! | `stage2.crop_len` | 30 | |
//! | `stage2.lr` | 0.001 | |
//! | `stage2.margin` | 0.2 | AAM margin |
//! | `stage2.scale` | 30 | AAM scale |
//! | `stage2.tau_schedule` | `1,3,3,5,6` | one threshold per iteration |
//! | `stage2.epochs_plain` | 4 | ungated epochs per iteration |
//! | `stage2.epochs_gated` | 4 | gated epochs per iteration |
//! | `cluster.k` | 0 | clusters; 0 means the speaker count |
//! | `cluster.restarts` | 5 | |
//! | `cluster.max_iters` | 100 | |
//! | `metrics.num_trials` | 4000 | |
//! | `toy.num_speakers` | 10 | |
//! | `toy.utts_per_speaker` | 100 | |
//! | `toy.noise_fraction` | 0.2 | injected label corruption; 0 clusters instead |
//! | `toy.stage1_epochs` | 5 | contrastive pretraining before the toy run |
//! | `toy.epochs` | 15 | |
//! | `toy.warmup_epochs` | 5 | |
//! | `ablate.taus` | `1,2,3,4,5,inf` | |
//! | `ablate.k_factors` | `0.5,0.75,1,1.25,1.5` | multiples of the speaker count |

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use lgl_core::contrastive::Stage1Config;
use lgl_core::corpus::CorpusConfig;
use lgl_core::encoder::Architecture;
use lgl_core::gated::{IterationSchedule, Stage2Config, DEFAULT_TAUS};
use lgl_core::{seed, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    pub num_speakers: usize,
    pub utts_per_speaker: usize,
    pub noise_fraction: f64,
    pub stage1_epochs: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            num_speakers: 10,
            utts_per_speaker: 100,
            noise_fraction: 0.2,
            stage1_epochs: 5,
            epochs: 15,
            warmup_epochs: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// `seed` is ignored; the corpus seed derives from the global seed.
    pub corpus: CorpusConfig,
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    /// `seed` is ignored.
    pub stage1: Stage1Config,
    /// `seed` and the k-means fields are filled in by [`RunConfig::stage2_config`].
    pub stage2: Stage2Config,
    pub taus: Vec<f64>,
    pub epochs_plain: usize,
    pub epochs_gated: usize,
    pub cluster_k: usize,
    pub cluster_restarts: usize,
    pub cluster_max_iters: usize,
    pub num_trials: usize,
    pub toy: ToyConfig,
    pub ablate_taus: Vec<f64>,
    pub ablate_k_factors: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("lgl-out"),
            corpus: CorpusConfig::default(),
            hidden: vec![64, 64],
            embedding_dim: 32,
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            taus: DEFAULT_TAUS.to_vec(),
            epochs_plain: 4,
            epochs_gated: 4,
            cluster_k: 0,
            cluster_restarts: 5,
            cluster_max_iters: 100,
            num_trials: 4000,
            toy: ToyConfig::default(),
            ablate_taus: vec![1.0, 2.0, 3.0, 4.0, 5.0, f64::INFINITY],
            ablate_k_factors: vec![0.5, 0.75, 1.0, 1.25, 1.5],
        }
    }
}

fn bad(key: &str, value: &str, what: impl Display) -> Error {
    Error::Config(format!("{key} = {value}: {what}"))
}

fn scalar<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.trim().parse().map_err(|e| bad(key, value, e))
}

fn float(key: &str, value: &str) -> Result<f64> {
    match value.trim() {
        "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
        v => scalar(key, v),
    }
}

fn list<T>(key: &str, value: &str, parse: impl Fn(&str, &str) -> Result<T>) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v)).collect()
}

fn fmt_float(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        v.to_string()
    }
}

fn fmt_list<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    items.iter().map(f).collect::<Vec<_>>().join(",")
}

/// Parse a comma list of thresholds, accepting `inf`.
pub fn parse_taus(value: &str) -> Result<Vec<f64>> {
    list("stage2.tau_schedule", value, float)
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected `key = value`", n + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = scalar(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "corpus.num_speakers" => self.corpus.num_speakers = scalar(key, v)?,
            "corpus.utts_per_speaker" => self.corpus.utts_per_speaker = scalar(key, v)?,
            "corpus.frames_per_utt" => self.corpus.frames_per_utt = scalar(key, v)?,
            "corpus.feature_dim" => self.corpus.feature_dim = scalar(key, v)?,
            "corpus.intra_spread" => self.corpus.intra_spread = float(key, v)?,
            "corpus.inter_spread" => self.corpus.inter_spread = float(key, v)?,
            "corpus.session_dim" => self.corpus.session_dim = scalar(key, v)?,
            "corpus.session_spread" => self.corpus.session_spread = float(key, v)?,
            "encoder.hidden" => self.hidden = list(key, v, scalar)?,
            "encoder.embedding_dim" => self.embedding_dim = scalar(key, v)?,
            "stage1.batch_size" => self.stage1.batch_size = scalar(key, v)?,
            "stage1.epochs" => self.stage1.epochs = scalar(key, v)?,
            "stage1.lr" => self.stage1.lr = float(key, v)?,
            "stage1.lr_decay" => self.stage1.lr_decay = float(key, v)?,
            "stage1.decay_every" => self.stage1.decay_every = scalar(key, v)?,
            "stage1.segment_len" => self.stage1.segment_len = scalar(key, v)?,
            "stage1.noise_scale" => self.stage1.noise_scale = float(key, v)?,
            "stage1.gain_range" => match list(key, v, float)?.as_slice() {
                [lo, hi] => self.stage1.gain_range = (*lo, *hi),
                _ => return Err(bad(key, v, "expected two values")),
            },
            "stage2.batch_size" => self.stage2.batch_size = scalar(key, v)?,
            "stage2.crop_len" => self.stage2.crop_len = scalar(key, v)?,
            "stage2.lr" => self.stage2.lr = float(key, v)?,
            "stage2.margin" => self.stage2.margin = float(key, v)?,
            "stage2.scale" => self.stage2.scale = float(key, v)?,
            "stage2.tau_schedule" => self.taus = parse_taus(v)?,
            "stage2.epochs_plain" => self.epochs_plain = scalar(key, v)?,
            "stage2.epochs_gated" => self.epochs_gated = scalar(key, v)?,
            "cluster.k" => self.cluster_k = scalar(key, v)?,
            "cluster.restarts" => self.cluster_restarts = scalar(key, v)?,
            "cluster.max_iters" => self.cluster_max_iters = scalar(key, v)?,
            "metrics.num_trials" => self.num_trials = scalar(key, v)?,
            "toy.num_speakers" => self.toy.num_speakers = scalar(key, v)?,
            "toy.utts_per_speaker" => self.toy.utts_per_speaker = scalar(key, v)?,
            "toy.noise_fraction" => self.toy.noise_fraction = float(key, v)?,
            "toy.stage1_epochs" => self.toy.stage1_epochs = scalar(key, v)?,
            "toy.epochs" => self.toy.epochs = scalar(key, v)?,
            "toy.warmup_epochs" => self.toy.warmup_epochs = scalar(key, v)?,
            "ablate.taus" => self.ablate_taus = list(key, v, float)?,
            "ablate.k_factors" => self.ablate_k_factors = list(key, v, float)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a form [`RunConfig::parse`] reads back.
    pub fn to_text(&self) -> String {
        let c = &self.corpus;
        let s1 = &self.stage1;
        let s2 = &self.stage2;
        let entries: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
            ("corpus.num_speakers", c.num_speakers.to_string()),
            ("corpus.utts_per_speaker", c.utts_per_speaker.to_string()),
            ("corpus.frames_per_utt", c.frames_per_utt.to_string()),
            ("corpus.feature_dim", c.feature_dim.to_string()),
            ("corpus.intra_spread", fmt_float(c.intra_spread)),
            ("corpus.inter_spread", fmt_float(c.inter_spread)),
            ("corpus.session_dim", c.session_dim.to_string()),
            ("corpus.session_spread", fmt_float(c.session_spread)),
            ("encoder.hidden", fmt_list(&self.hidden, |v| v.to_string())),
            ("encoder.embedding_dim", self.embedding_dim.to_string()),
            ("stage1.batch_size", s1.batch_size.to_string()),
            ("stage1.epochs", s1.epochs.to_string()),
            ("stage1.lr", fmt_float(s1.lr)),
            ("stage1.lr_decay", fmt_float(s1.lr_decay)),
            ("stage1.decay_every", s1.decay_every.to_string()),
            ("stage1.segment_len", s1.segment_len.to_string()),
            ("stage1.noise_scale", fmt_float(s1.noise_scale)),
            ("stage1.gain_range", format!("{},{}", fmt_float(s1.gain_range.0), fmt_float(s1.gain_range.1))),
            ("stage2.batch_size", s2.batch_size.to_string()),
            ("stage2.crop_len", s2.crop_len.to_string()),
            ("stage2.lr", fmt_float(s2.lr)),
            ("stage2.margin", fmt_float(s2.margin)),
            ("stage2.scale", fmt_float(s2.scale)),
            ("stage2.tau_schedule", fmt_list(&self.taus, |v| fmt_float(*v))),
            ("stage2.epochs_plain", self.epochs_plain.to_string()),
            ("stage2.epochs_gated", self.epochs_gated.to_string()),
            ("cluster.k", self.cluster_k.to_string()),
            ("cluster.restarts", self.cluster_restarts.to_string()),
            ("cluster.max_iters", self.cluster_max_iters.to_string()),
            ("metrics.num_trials", self.num_trials.to_string()),
            ("toy.num_speakers", self.toy.num_speakers.to_string()),
            ("toy.utts_per_speaker", self.toy.utts_per_speaker.to_string()),
            ("toy.noise_fraction", fmt_float(self.toy.noise_fraction)),
            ("toy.stage1_epochs", self.toy.stage1_epochs.to_string()),
            ("toy.epochs", self.toy.epochs.to_string()),
            ("toy.warmup_epochs", self.toy.warmup_epochs.to_string()),
            ("ablate.taus", fmt_list(&self.ablate_taus, |v| fmt_float(*v))),
            ("ablate.k_factors", fmt_list(&self.ablate_k_factors, |v| fmt_float(*v))),
        ];
        entries.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Checks every field that no module validates on its own, plus the
    /// module configs, before anything runs.
    pub fn validate(&self) -> Result<()> {
        self.corpus_config().validate()?;
        self.architecture()?;
        self.stage1_config().validate()?;
        self.stage2_config().validate()?;
        self.schedule(false).validate()?;
        let c = &self.corpus;
        if c.frames_per_utt < 2 * self.stage1.segment_len {
            return Err(Error::Config(format!(
                "corpus.frames_per_utt ({}) must hold two stage1 segments of {}",
                c.frames_per_utt, self.stage1.segment_len
            )));
        }
        if c.frames_per_utt < self.stage2.crop_len {
            return Err(Error::Config("stage2.crop_len exceeds corpus.frames_per_utt".into()));
        }
        if self.cluster_k > c.num_speakers * c.utts_per_speaker {
            return Err(Error::Config("cluster.k exceeds the number of utterances".into()));
        }
        if self.cluster_restarts == 0 || self.cluster_max_iters == 0 {
            return Err(Error::Config("cluster.restarts and cluster.max_iters must be positive".into()));
        }
        if self.num_trials == 0 {
            return Err(Error::Config("metrics.num_trials must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.toy.noise_fraction) {
            return Err(Error::Config("toy.noise_fraction must be in [0, 1)".into()));
        }
        if self.toy.num_speakers < 2 || self.toy.utts_per_speaker == 0 {
            return Err(Error::Config("toy corpus needs at least two speakers".into()));
        }
        if self.toy.warmup_epochs >= self.toy.epochs {
            return Err(Error::Config("toy.warmup_epochs must be less than toy.epochs".into()));
        }
        if self.ablate_taus.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::Config("ablate.taus must be positive".into()));
        }
        if self.ablate_k_factors.iter().any(|f| !(*f > 0.0)) {
            return Err(Error::Config("ablate.k_factors must be positive".into()));
        }
        Ok(())
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            seed: seed::derive(self.seed, seed::streams::CORPUS),
            ..self.corpus.clone()
        }
    }

    pub fn architecture(&self) -> Result<Architecture> {
        let mut sizes = vec![self.corpus.feature_dim];
        sizes.extend(&self.hidden);
        sizes.push(self.embedding_dim);
        Architecture::new(sizes).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn encoder_seed(&self) -> u64 {
        seed::derive(self.seed, "encoder")
    }

    pub fn trials_seed(&self) -> u64 {
        seed::derive(self.seed, seed::streams::TRIALS)
    }

    pub fn stage1_config(&self) -> Stage1Config {
        Stage1Config {
            seed: seed::derive(self.seed, seed::streams::STAGE1),
            ..self.stage1.clone()
        }
    }

    pub fn stage2_config(&self) -> Stage2Config {
        Stage2Config {
            seed: seed::derive(self.seed, seed::streams::STAGE2),
            kmeans_restarts: self.cluster_restarts,
            kmeans_max_iters: self.cluster_max_iters,
            ..self.stage2.clone()
        }
    }

    pub fn effective_k(&self) -> usize {
        if self.cluster_k == 0 {
            self.corpus.num_speakers
        } else {
            self.cluster_k
        }
    }

    /// The configured schedule; `no_lgl` removes every gated epoch.
    pub fn schedule(&self, no_lgl: bool) -> IterationSchedule {
        let s = IterationSchedule::from_taus(&self.taus, self.epochs_plain, self.epochs_gated, self.effective_k());
        if no_lgl {
            s.without_gating()
        } else {
            s
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let cfg = RunConfig::parse("# nothing\n\n").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.taus, vec![1.0, 3.0, 3.0, 5.0, 6.0]);
        assert_eq!(cfg.stage2.margin, 0.2);
        assert_eq!(cfg.stage2.scale, 30.0);
        assert_eq!(cfg.stage1.lr, 0.001);
        assert_eq!(cfg.stage2.lr, 0.001);
        cfg.validate().unwrap();
    }

    #[test]
    fn text_roundtrip() {
        let mut cfg = RunConfig {
            seed: 17,
            taus: vec![2.5, f64::INFINITY],
            hidden: vec![8],
            ..RunConfig::default()
        };
        cfg.stage1.gain_range = (0.5, 2.0);
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn parses_values_and_comments() {
        let cfg = RunConfig::parse("seed = 9 # trailing\nstage2.tau_schedule = 1, inf\ncluster.k=12\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.taus, vec![1.0, f64::INFINITY]);
        assert_eq!(cfg.effective_k(), 12);
        assert_eq!(RunConfig::default().effective_k(), 40);
    }

    #[test]
    fn rejects_bad_input() {
        for text in ["nonsense", "no.such.key = 1", "seed = -1", "stage1.gain_range = 1", "corpus.feature_dim = x"] {
            assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
        let cfg = RunConfig::parse("corpus.feature_dim = 0").unwrap();
        assert!(cfg.validate().is_err());
        let cfg = RunConfig::parse("stage2.tau_schedule = 1,-2").unwrap();
        assert!(cfg.validate().is_err());
        let cfg = RunConfig::parse("corpus.frames_per_utt = 30").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn no_lgl_drops_gated_epochs() {
        let cfg = RunConfig::default();
        assert!(cfg.schedule(true).iterations.iter().all(|s| s.epochs_gated == 0));
        assert!(cfg.schedule(false).iterations.iter().all(|s| s.epochs_gated == 4));
    }

    #[test]
    fn streams_differ() {
        let cfg = RunConfig::default();
        let seeds = [cfg.corpus_config().seed, cfg.stage1_config().seed, cfg.stage2_config().seed, cfg.encoder_seed()];
        for i in 0..seeds.len() {
            for j in 0..i {
                assert_ne!(seeds[i], seeds[j]);
            }
        }
    }
}
