use lgl_core::corpus::{generate_corpus, make_trials, read_trials, write_trials};
use lgl_core::gated::{check_selection_growth, IterationSchedule};
use lgl_core::{
    kmeans, run_stage2, train_stage1, Architecture, Corpus, CorpusConfig, EncoderParams, Evaluator, KMeansConfig,
    PseudoLabelSet, Stage1Config, Stage2Config,
};

fn corpus() -> Corpus {
    generate_corpus(&CorpusConfig {
        num_speakers: 6,
        utts_per_speaker: 24,
        frames_per_utt: 40,
        feature_dim: 24,
        intra_spread: 0.9,
        inter_spread: 1.0,
        session_dim: 3,
        session_spread: 1.0,
        seed: 5,
    })
    .unwrap()
}

fn stage1(c: &Corpus) -> EncoderParams {
    let init = EncoderParams::init(&Architecture::new(vec![24, 32, 4]).unwrap(), 1).unwrap();
    let cfg = Stage1Config {
        epochs: 15,
        segment_len: 15,
        seed: 2,
        ..Stage1Config::default()
    };
    train_stage1(c.unlabeled(), &init, &cfg).unwrap().0
}

#[test]
fn stage1_beats_random_encoder() {
    // a random projection into a narrow embedding loses most speaker directions
    let c = corpus();
    let trials = make_trials(&c, 400, 3).unwrap();
    let ev = Evaluator::new(&c, trials);
    let random = EncoderParams::init(&Architecture::new(vec![24, 32, 4]).unwrap(), 1).unwrap();
    let e0 = ev.eer(&random.embed_corpus(c.unlabeled()).unwrap()).unwrap().0;
    let e1 = ev.eer(&stage1(&c).embed_corpus(c.unlabeled()).unwrap()).unwrap().0;
    assert!(e1 < 0.5 * e0, "stage1 {e1} vs random {e0}");
}

#[test]
fn stage2_reports_every_iteration() {
    let c = corpus();
    let ev = Evaluator::new(&c, make_trials(&c, 400, 3).unwrap());
    let enc = stage1(&c);
    let sched = IterationSchedule::from_taus(&[1.0, 3.0], 2, 2, 6);
    let cfg = Stage2Config {
        batch_size: 16,
        crop_len: 20,
        seed: 4,
        ..Stage2Config::default()
    };
    let out = run_stage2(c.unlabeled(), &enc, &sched, &cfg, Some(&ev)).unwrap();
    assert_eq!(out.iterations.len(), 2);
    for (i, it) in out.iterations.iter().enumerate() {
        assert_eq!(it.labels.iteration_index, i);
        assert_eq!(it.labels.k, 6);
        assert_eq!(it.plain_reports.len(), 2);
        assert_eq!(it.gated_reports.len(), 2);
        let r = it.report.as_ref().unwrap();
        assert!((0.0..=1.0).contains(&r.eer));
        assert!((0.0..=1.0).contains(&r.nmi));
        assert_eq!(r.num_selected, Some(it.last_gate().unwrap().num_selected));
    }
    assert_eq!(out.encoder, out.iterations[1].encoder);
    let counts: Vec<usize> = out.iterations.iter().map(|it| it.last_gate().unwrap().num_selected).collect();
    let shortfalls = check_selection_growth(&counts).iter().filter(|ok| !**ok).count();
    assert_eq!(out.warnings.iter().filter(|w| w.contains("less than 10%")).count(), shortfalls);

    // evaluation is read-only: the same run without an evaluator trains identically
    let blind = run_stage2(c.unlabeled(), &enc, &sched, &cfg, None).unwrap();
    assert_eq!(blind.encoder, out.encoder);
    assert!(blind.iterations.iter().all(|it| it.report.is_none()));
}

#[test]
fn artifacts_roundtrip_through_files() {
    let c = corpus();
    let dir = tempfile::tempdir().unwrap();

    let path = dir.path().join("corpus.bin");
    c.write_to(std::fs::File::create(&path).unwrap()).unwrap();
    let back = Corpus::read_from(std::fs::File::open(&path).unwrap()).unwrap();
    assert_eq!(back, c);

    let trials = make_trials(&c, 100, 1).unwrap();
    let mut buf = Vec::new();
    write_trials(&trials, &mut buf).unwrap();
    assert_eq!(read_trials(buf.as_slice()).unwrap(), trials);

    let enc = stage1(&c);
    let mut buf = Vec::new();
    enc.write_to(&mut buf).unwrap();
    assert_eq!(EncoderParams::read_from(buf.as_slice()).unwrap(), enc);

    let emb = enc.embed_corpus(c.unlabeled()).unwrap();
    let labels = kmeans(&emb, &KMeansConfig { k: 6, seed: 1, ..KMeansConfig::default() }).unwrap().labels;
    let mut buf = Vec::new();
    labels.write_to(&mut buf).unwrap();
    let read = PseudoLabelSet::read_from(buf.as_slice()).unwrap();
    assert_eq!(read.labels, labels.labels);
}
