mod common;

use std::path::Path;

use common::tiny_config;
use serde_json::{json, Value};
use srf_cli::config::{apply_override, DataConfig, RunConfig, SeedPurpose};
use srf_cli::CliError;

#[test]
fn overrides_reach_nested_scalars() {
    let mut v = json!({ "a": { "b": [ { "c": 1 }, { "c": 2 } ] }, "name": "x" });
    apply_override(&mut v, "a.b.1.c=5").unwrap();
    apply_override(&mut v, "name=hello world").unwrap();
    apply_override(&mut v, "a.flag=true").unwrap();
    apply_override(&mut v, "a.ratio=0.25").unwrap();
    assert_eq!(v, json!({ "a": { "b": [ { "c": 1 }, { "c": 5 } ], "flag": true, "ratio": 0.25 }, "name": "hello world" }));

    for bad in ["a.b.7.c=1", "a.b.x=1", "a.missing.c=1", "name.x=1", "a={}", "novalue"] {
        assert!(apply_override(&mut v, bad).is_err(), "{bad}");
    }
}

#[test]
fn config_round_trips_and_resolves_paths() {
    let text = tiny_config(Path::new("out"), "sdr").to_string();
    let cfg = RunConfig::from_json(&text, &[], Path::new("/base")).unwrap();
    assert_eq!(cfg.output_dir, Path::new("/base/out"));
    assert_eq!(cfg.beam, 100);
    assert_eq!(cfg.timing.hop_ms, 10.0);
    let again = RunConfig::from_json(&cfg.to_json(), &[], Path::new("/elsewhere")).unwrap();
    assert_eq!(again, cfg);

    let mut files = tiny_config(Path::new("/abs/out"), "sdr");
    files["data"] = json!({ "files": {
        "train": { "features": "tr.csv", "transcripts": "tr.txt" },
        "test": { "features": "/data/te.csv", "transcripts": "te.txt" }
    }});
    let cfg = RunConfig::from_json(&files.to_string(), &[], Path::new("/cfg")).unwrap();
    assert_eq!(cfg.output_dir, Path::new("/abs/out"));
    let DataConfig::Files(f) = &cfg.data else { panic!() };
    assert_eq!(f.train.features, Path::new("/cfg/tr.csv"));
    assert_eq!(f.test.as_ref().unwrap().features, Path::new("/data/te.csv"));
    assert!(f.valid.is_none());
}

#[test]
fn derived_seeds_are_distinct_and_stable() {
    let text = tiny_config(Path::new("out"), "sdr").to_string();
    let cfg = RunConfig::from_json(&text, &[], Path::new(".")).unwrap();
    let seeds = [SeedPurpose::Corpus, SeedPurpose::Init, SeedPurpose::Train].map(|p| cfg.derived_seed(p));
    assert!(seeds[0] != seeds[1] && seeds[1] != seeds[2] && seeds[0] != seeds[2]);
    let other = RunConfig::from_json(&text, &["seed=10".into()], Path::new(".")).unwrap();
    assert_ne!(other.derived_seed(SeedPurpose::Init), seeds[1]);
    assert_eq!(cfg.derived_seed(SeedPurpose::Init), seeds[1]);
}

#[test]
fn validation_names_the_field() {
    let base = tiny_config(Path::new("out"), "sdr");
    let check = |edit: &dyn Fn(&mut Value), field: &str| {
        let mut v = base.clone();
        edit(&mut v);
        match RunConfig::from_json(&v.to_string(), &[], Path::new(".")) {
            Err(e @ CliError::Core(_)) | Err(e @ CliError::Config { .. }) => {
                assert!(e.to_string().contains(field), "{e} lacks {field}");
                assert_eq!(e.exit_code(), 1);
            }
            other => panic!("{field}: {other:?}"),
        }
    };
    check(&|v| v["model"]["layers"][0]["in_depth"] = json!(2), "model.layers[0].in_depth");
    check(&|v| v["alphabet"]["blank"] = json!(9), "blank");
    check(&|v| v["data"]["synthetic"]["generator"]["symbols"] = json!(4), "alphabet");
    check(&|v| v["data"]["synthetic"]["train"] = json!(0), "data.synthetic.train");
    check(&|v| v["beam"] = json!(0), "beam");
    check(&|v| v["timing"] = json!({ "hop_ms": 0.0 }), "timing");
    check(&|v| v["data"]["synthetic"]["generator"]["seed"] = json!(3), "unknown field");
}
