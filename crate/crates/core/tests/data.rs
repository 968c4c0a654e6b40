mod common;

use std::path::Path;

use common::{random, rng};
use proptest::prelude::*;
use srf_core::ctc::required_frames;
use srf_core::data::{
    format_features, format_transcripts, generate_synthetic, load_corpus, load_features, normalize_corpus,
    normalize_utterance, parse_features, parse_transcripts, save_features, synthetic_alphabet, Normalization,
    SyntheticConfig, Utterance,
};
use srf_core::{Error, Tensor};

fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn hand_written_feature_file() {
    let utts = load_features(&fixture("two_frames.csv")).unwrap();
    assert_eq!(utts.len(), 2);
    assert_eq!(utts[0].id, "utt_a");
    assert_eq!(utts[0].features.shape(), &[2, 3]);
    assert_eq!(utts[0].features.data(), &[0.5, -1.25, 3.0, 0.001, 250.0, 0.0]);
    assert_eq!(utts[1].id, "spk1_b");
    assert_eq!(utts[1].features.data(), &[7.0, 8.0, 9.0]);
    assert!(utts.iter().all(|u| u.labels.is_empty()));
}

#[test]
fn empty_file_has_no_utterances() {
    assert!(parse_features("").unwrap().is_empty());
    assert!(parse_features("\n\n").unwrap().is_empty());
}

#[test]
fn malformed_files_are_rejected() {
    for text in [
        "a,2\n1,2\n",
        "a,2,2\n1,2\n",
        "a,1,2\n1,2,3\n",
        "a,1,2\n1,x\n",
        "a,1,2\n1,2\na,1,2\n3,4\n",
        "a,1,2\n1,inf\n",
        "a,0,2\n",
    ] {
        assert!(matches!(parse_features(text), Err(Error::Format { .. })), "{text:?}");
    }
}

#[test]
fn feature_round_trip_is_exact() {
    let mut r = rng(1);
    let mut utts = Vec::new();
    for i in 0..5 {
        let mut f = random(&[3 + i, 4], 1e3, &mut r);
        f.data_mut()[0] = 1e-300;
        f.data_mut()[1] = -123456789.123456789;
        f.data_mut()[2] = 0.1 + 0.2;
        utts.push(Utterance { id: format!("u{i}"), features: f, labels: vec![] });
    }
    assert_eq!(parse_features(&format_features(&utts)).unwrap(), utts);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.csv");
    save_features(&path, &utts).unwrap();
    assert_eq!(load_features(&path).unwrap(), utts);
}

#[test]
fn transcripts_attach_labels() {
    let alphabet = synthetic_alphabet(3);
    let text = "utt_a\tg1 g3\nspk1_b\tg2\n";
    let map = parse_transcripts(text, &alphabet).unwrap();
    assert_eq!(map["utt_a"], vec![1, 3]);
    let rendered = format_transcripts(map.iter().map(|(k, v)| (k.as_str(), v.as_slice())), &alphabet);
    assert_eq!(parse_transcripts(&rendered, &alphabet).unwrap(), map);

    let dir = tempfile::tempdir().unwrap();
    let tr = dir.path().join("t.txt");
    std::fs::write(&tr, text).unwrap();
    let corpus = load_corpus(&fixture("two_frames.csv"), &tr, &alphabet).unwrap();
    assert_eq!(corpus[0].labels, vec![1, 3]);
    assert_eq!(corpus[1].labels, vec![2]);

    std::fs::write(&tr, "utt_a\tg1\n").unwrap();
    assert!(load_corpus(&fixture("two_frames.csv"), &tr, &alphabet).is_err());
    assert!(parse_transcripts("a\tg9\n", &alphabet).is_err());
    assert!(parse_transcripts("a g1\n", &alphabet).is_err());
    assert!(parse_transcripts("a\tg1\na\tg2\n", &alphabet).is_err());
}

fn column_stats(t: &Tensor) -> Vec<(f64, f64)> {
    let (n, d) = (t.dim(0), t.dim(1));
    (0..d)
        .map(|j| {
            let m = (0..n).map(|i| t.at(&[i, j])).sum::<f64>() / n as f64;
            let v = (0..n).map(|i| (t.at(&[i, j]) - m).powi(2)).sum::<f64>() / n as f64;
            (m, v)
        })
        .collect()
}

#[test]
fn normalization_statistics() {
    let mut r = rng(2);
    let mut x = random(&[50, 6], 4.0, &mut r);
    x.data_mut().iter_mut().for_each(|v| *v += 3.0);
    let y = normalize_utterance(&x).unwrap();
    for (m, v) in column_stats(&y) {
        assert!(m.abs() < 1e-9);
        assert!((v - 1.0).abs() < 1e-9);
    }
    let again = normalize_utterance(&y).unwrap();
    assert!(again.max_abs_diff(&y) < 1e-9);

    let c = Tensor::new(vec![4, 2], vec![5.0, 1.0, 5.0, 2.0, 5.0, 3.0, 5.0, 4.0]).unwrap();
    let n = normalize_utterance(&c).unwrap();
    assert!((0..4).all(|i| n.at(&[i, 0]) == 0.0));

    assert!(matches!(normalize_utterance(&Tensor::zeros(&[1, 3])), Err(Error::SequenceTooShort { .. })));
}

#[test]
fn speaker_normalization_pools_by_prefix() {
    let mut r = rng(3);
    let mk = |id: &str, r: &mut _| Utterance { id: id.into(), features: random(&[5, 2], 2.0, r), labels: vec![] };
    let mut utts = vec![mk("s1_a", &mut r), mk("s1_b", &mut r), mk("s2_a", &mut r)];
    let original = utts.clone();
    normalize_corpus(&mut utts, Normalization::Speaker).unwrap();
    let pooled = Tensor::new(
        vec![10, 2],
        [original[0].features.data(), original[1].features.data()].concat(),
    )
    .unwrap();
    let expected = normalize_utterance(&pooled).unwrap();
    let got = [utts[0].features.data(), utts[1].features.data()].concat();
    for (a, b) in got.iter().zip(expected.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(utts[2].features.max_abs_diff(&normalize_utterance(&original[2].features).unwrap()) < 1e-12);

    let mut same = original.clone();
    normalize_corpus(&mut same, Normalization::None).unwrap();
    assert_eq!(same, original);
}

#[test]
fn synthetic_corpus_is_reproducible() {
    let cfg = SyntheticConfig::new(6, 16, 7);
    let a = generate_synthetic(&cfg, 40).unwrap();
    let b = generate_synthetic(&cfg, 40).unwrap();
    assert_eq!(a, b);
    assert_eq!(generate_synthetic(&cfg, 10).unwrap(), a[..10]);
    let other = generate_synthetic(&SyntheticConfig::new(6, 16, 8), 40).unwrap();
    assert_ne!(a, other);

    for u in &a {
        assert!(!u.labels.is_empty() && u.labels.len() <= 5);
        assert!(u.labels.iter().all(|&l| (1..=6).contains(&l)));
        assert!(required_frames(&u.labels) <= u.frames().div_ceil(4));
        assert_eq!(u.features.dim(1), 16);
    }
    assert_eq!(a[3].id, "syn00003");
}

#[test]
fn templates_are_distinct() {
    let cfg = SyntheticConfig::new(9, 16, 1);
    let t = cfg.templates();
    assert_eq!(t.len(), 9);
    for i in 0..9 {
        for j in i + 1..9 {
            assert!(t[i].max_abs_diff(&t[j]) > 0.1, "glyphs {i} and {j}");
        }
    }
}

#[test]
fn noiseless_single_glyph_is_embedded_in_silence() {
    let mut cfg = SyntheticConfig::new(4, 8, 3);
    cfg.noise = 0.0;
    cfg.glyphs = [1, 1];
    let templates = cfg.templates();
    for u in generate_synthetic(&cfg, 10).unwrap() {
        let g = templates[u.labels[0] - 1].data();
        let data = u.features.data();
        let start = data.iter().position(|&v| v != 0.0).unwrap() / 8;
        assert_eq!(&data[start * 8..][..g.len()], g);
        assert!(data[..start * 8].iter().all(|&v| v == 0.0));
        assert!(data[start * 8 + g.len()..].iter().all(|&v| v == 0.0));
        assert!((3..=8).contains(&start));
    }
}

#[test]
fn synthetic_config_validation() {
    let mut cfg = SyntheticConfig::new(4, 8, 3);
    cfg.noise = -1.0;
    assert!(generate_synthetic(&cfg, 1).is_err());
    let mut cfg = SyntheticConfig::new(4, 8, 3);
    cfg.glyphs = [3, 2];
    assert!(generate_synthetic(&cfg, 1).is_err());
    let mut cfg = SyntheticConfig::new(4, 8, 3);
    cfg.glyph_frames = 1;
    cfg.silence = [0, 0];
    cfg.glyphs = [5, 5];
    assert!(matches!(generate_synthetic(&cfg, 20), Err(Error::Unreachable { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn normalized_columns_have_zero_mean(seed in any::<u64>(), t in 2usize..40, d in 1usize..8) {
        let x = random(&[t, d], 10.0, &mut rng(seed));
        let y = normalize_utterance(&x).unwrap();
        for (m, _) in column_stats(&y) {
            prop_assert!(m.abs() < 1e-9);
        }
    }
}
