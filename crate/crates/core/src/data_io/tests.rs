use super::*;
use crate::alignment::dtw;
use crate::network::ModelConfig;
use crate::network::ModelParams;

fn small_cfg() -> SyntheticConfig {
    SyntheticConfig {
        writers: 4,
        train_writers: 3,
        genuine_per_writer: 3,
        skilled_per_writer: 2,
        ..SyntheticConfig::default()
    }
}

fn to_string(ds: &Dataset<f64>) -> String {
    let mut buf = Vec::new();
    write_dataset(ds, &mut buf).unwrap();
    String::from_utf8(buf).unwrap()
}

#[test]
fn empty_input_is_an_empty_dataset() {
    let ds: Dataset<f64> = read_dataset("".as_bytes()).unwrap();
    assert!(ds.samples.is_empty() && ds.split.is_empty());
    let ds: Dataset<f64> = read_dataset("\n  \n".as_bytes()).unwrap();
    assert!(ds.samples.is_empty());
}

#[test]
fn round_trip_is_exact() {
    let ds = generate_synthetic::<f64>(&small_cfg(), 5).unwrap();
    let text = to_string(&ds);
    let back: Dataset<f64> = read_dataset(text.as_bytes()).unwrap();
    assert_eq!(back, ds);
    assert_eq!(to_string(&back), text);
}

#[test]
fn decreasing_timestamps_are_reported_with_their_line() {
    let good = r#"{"writer_id":"a","session":1,"kind":"genuine","hz":100,"points":[[0,0,1,0],[1,1,1,0.01]]}"#;
    let bad = r#"{"writer_id":"a","session":1,"kind":"genuine","hz":100,"points":[[0,0,1,0.02],[1,1,1,0.01]]}"#;
    let text = format!("{good}\n{good}\n{bad}\n");
    match read_dataset::<f64, _>(text.as_bytes()) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a parse error, got {other:?}"),
    }
    match read_dataset::<f64, _>(format!("{good}\n{{not json\n").as_bytes()) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn overlapping_splits_name_the_writers() {
    let line = |w: &str, s: &str| {
        format!(r#"{{"writer_id":"{w}","session":1,"kind":"genuine","hz":100,"points":[[0,0,1,0],[1,1,1,0.01]],"split":"{s}"}}"#)
    };
    let text = [line("b", "train"), line("a", "train"), line("b", "test"), line("a", "test"), line("c", "test")].join("\n");
    match read_dataset::<f64, _>(text.as_bytes()) {
        Err(Error::SplitOverlap(w)) => assert_eq!(w, vec!["a".to_string(), "b".to_string()]),
        other => panic!("expected a split overlap, got {other:?}"),
    }
}

#[test]
fn feature_files_round_trip_and_are_detected() {
    let ds = generate_synthetic::<f64>(&small_cfg(), 6).unwrap();
    let feats = preprocess_dataset(&ds, &PreprocessConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let fpath = dir.path().join("f.jsonl");
    let mut buf = Vec::new();
    write_features(&feats, 120.0, &mut buf).unwrap();
    std::fs::write(&fpath, &buf).unwrap();
    let back: Vec<LabeledFeatures<f64>> = read_features(buf.as_slice()).unwrap();
    assert_eq!(back, feats);
    assert!(is_feature_file(&fpath).unwrap());
    let rpath = dir.path().join("r.jsonl");
    save_dataset(&ds, &rpath).unwrap();
    assert!(!is_feature_file(&rpath).unwrap());
    let via_raw: Vec<LabeledFeatures<f64>> = load_labeled_features(&rpath, &PreprocessConfig::default()).unwrap();
    assert_eq!(via_raw, feats);
}

#[test]
fn grouping_keeps_file_order_and_respects_splits() {
    let ds = generate_synthetic::<f64>(&small_cfg(), 7).unwrap();
    let feats = preprocess_dataset(&ds, &PreprocessConfig::default()).unwrap();
    let train = group_writers(&feats, Some(Split::Train));
    let test = group_writers(&feats, Some(Split::Test));
    assert_eq!(train.iter().map(|w| w.id.as_str()).collect::<Vec<_>>(), ["w000", "w001", "w002"]);
    assert_eq!(test.len(), 1);
    assert_eq!(test[0].genuine.len(), 3);
    assert_eq!(test[0].skilled.len(), 2);
    let first_genuine = feats.iter().find(|f| f.writer_id == "w003" && f.kind == SampleKind::Genuine).unwrap();
    assert_eq!(test[0].genuine[0], first_genuine.features);
    assert_eq!(group_writers(&feats, None).len(), 4);
}

#[test]
fn generator_is_deterministic_and_writers_differ() {
    let cfg = small_cfg();
    let a = to_string(&generate_synthetic::<f64>(&cfg, 11).unwrap());
    let b = to_string(&generate_synthetic::<f64>(&cfg, 11).unwrap());
    assert_eq!(a, b);
    assert_ne!(a, to_string(&generate_synthetic::<f64>(&cfg, 12).unwrap()));
    let freqs: Vec<f64> = (0..cfg.writers).map(|i| writer_params(&cfg, 11, i).x[0].freq).collect();
    for i in 0..freqs.len() {
        for j in i + 1..freqs.len() {
            assert_ne!(freqs[i], freqs[j]);
        }
    }
}

#[test]
fn generated_shapes_follow_the_config() {
    let cfg = small_cfg();
    let ds = generate_synthetic::<f64>(&cfg, 3).unwrap();
    assert_eq!(ds.samples.len(), 4 * 5);
    assert_eq!(ds.writers_in(Split::Train).len(), 3);
    assert_eq!(ds.writers_in(Split::Test), vec!["w003".to_string()]);
    let nominal = cfg.duration * cfg.rate;
    for s in &ds.samples {
        let n = s.points.len() as f64;
        assert!(n >= (nominal * 0.8).floor() && n <= (nominal * 1.2).ceil(), "{n}");
        assert!(s.points.iter().all(|p| p.p >= 0.0));
    }
    ds.validate().unwrap();
}

#[test]
fn nyquist_and_other_bad_configs_are_rejected() {
    let nyq = SyntheticConfig {
        freq_max: 40.0,
        ..small_cfg()
    };
    assert!(matches!(generate_synthetic::<f64>(&nyq, 0), Err(Error::Generator(m)) if m.contains("Nyquist")));
    let one = SyntheticConfig {
        writers: 1,
        train_writers: 1,
        ..small_cfg()
    };
    assert!(generate_synthetic::<f64>(&one, 0).is_err());
}

#[test]
fn zero_forgery_spread_makes_forgeries_look_genuine() {
    // With σ_f = 0 the imitator is the writer, so genuine-to-genuine and
    // genuine-to-skilled distances come from one distribution.
    let cfg = SyntheticConfig {
        writers: 6,
        train_writers: 6,
        genuine_per_writer: 6,
        skilled_per_writer: 6,
        sigma_forgery: 0.0,
        ..SyntheticConfig::default()
    };
    let (gg, gs) = separation(&cfg, 21);
    assert!((gg / gs - 1.0).abs() < 0.25, "{gg} vs {gs}");
}

#[test]
fn default_forgeries_are_farther_than_genuines() {
    let cfg = SyntheticConfig {
        writers: 6,
        train_writers: 6,
        genuine_per_writer: 6,
        skilled_per_writer: 6,
        ..SyntheticConfig::default()
    };
    let (gg, gs) = separation(&cfg, 21);
    assert!(gg < gs, "{gg} vs {gs}");
}

/// Mean DTW on preprocessed features: genuine vs genuine of the same
/// writer, and genuine vs that writer's skilled forgeries.
fn separation(cfg: &SyntheticConfig, seed: u64) -> (f64, f64) {
    let ds = generate_synthetic::<f64>(cfg, seed).unwrap();
    let feats = preprocess_dataset(&ds, &PreprocessConfig::default()).unwrap();
    let (mut gg, mut ngg, mut gs, mut ngs) = (0.0, 0, 0.0, 0);
    for w in group_writers(&feats, None) {
        for (i, a) in w.genuine.iter().enumerate() {
            for b in &w.genuine[i + 1..] {
                gg += dtw(&a.values, &b.values).unwrap();
                ngg += 1;
            }
            for s in &w.skilled {
                gs += dtw(&a.values, &s.values).unwrap();
                ngs += 1;
            }
        }
    }
    (gg / ngg as f64, gs / ngs as f64)
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let cfg = ModelConfig {
        width: 8,
        heads: 2,
        scales: vec![2, 3],
        temporal_dim: 4,
        ..ModelConfig::default()
    };
    let p = ModelParams::<f64>::init(cfg, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&p, &path).unwrap();
    let q: ModelParams<f64> = load_checkpoint(&path).unwrap();
    assert_eq!(q.config(), p.config());
    assert_eq!(q.names(), p.names());
    for (a, b) in p.tensors().iter().zip(q.tensors()) {
        assert!(a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], CHECKPOINT_MAGIC);
    assert_eq!(write_checkpoint(&q).unwrap(), bytes);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let cfg = ModelConfig {
        width: 8,
        heads: 2,
        scales: vec![2],
        temporal_dim: 4,
        ..ModelConfig::default()
    };
    let bytes = write_checkpoint(&ModelParams::<f64>::init(cfg, 1).unwrap()).unwrap();
    for cut in [0, 3, 7, 20, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(read_checkpoint::<f64>(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut {cut}");
    }
    let mut v2 = bytes.clone();
    v2[4..8].copy_from_slice(&2u32.to_le_bytes());
    match read_checkpoint::<f64>(&v2) {
        Err(Error::VersionMismatch { expected, found }) => assert_eq!((expected, found), (1, 2)),
        other => panic!("expected a version mismatch, got {:?}", other.map(|_| ())),
    }
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(read_checkpoint::<f64>(&magic).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(read_checkpoint::<f64>(&extra).is_err());
}

#[test]
fn checkpoint_config_must_match_the_arrays() {
    // Splice a wider config into a narrow model's file.
    let narrow = ModelConfig {
        width: 8,
        heads: 2,
        scales: vec![2],
        temporal_dim: 4,
        ..ModelConfig::default()
    };
    let wide = ModelConfig { width: 16, ..narrow.clone() };
    let bytes = write_checkpoint(&ModelParams::<f64>::init(narrow.clone(), 1).unwrap()).unwrap();
    let old_cfg = serde_json::to_vec(&narrow).unwrap();
    let new_cfg = serde_json::to_vec(&wide).unwrap();
    let mut spliced = bytes[..8].to_vec();
    spliced.extend_from_slice(&(new_cfg.len() as u32).to_le_bytes());
    spliced.extend_from_slice(&new_cfg);
    spliced.extend_from_slice(&bytes[12 + old_cfg.len()..]);
    assert!(matches!(read_checkpoint::<f64>(&spliced), Err(Error::ConfigMismatch(_))));
}
