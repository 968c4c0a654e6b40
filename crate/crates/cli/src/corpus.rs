use std::path::Path;

use clap::ValueEnum;
use srf_core::ctc::LabelAlphabet;
use srf_core::data::{generate_synthetic, load_corpus, load_features, normalize_corpus, Utterance};

use crate::config::{DataConfig, FileSplit, RunConfig, SeedPurpose};
use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub train: Vec<Utterance>,
    pub valid: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Utterance] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

fn load_split(split: &FileSplit, alphabet: &LabelAlphabet) -> Result<Vec<Utterance>> {
    Ok(load_corpus(&split.features, &split.transcripts, alphabet)?)
}

/// Loads or generates every split and normalizes it.
pub fn load(cfg: &RunConfig) -> Result<Corpus> {
    let alphabet = cfg.alphabet.build()?;
    let mut corpus = match &cfg.data {
        DataConfig::Synthetic(s) => {
            let mut generator = s.generator.clone();
            generator.seed = cfg.derived_seed(SeedPurpose::Corpus);
            let mut all = generate_synthetic(&generator, s.train + s.valid + s.test)?;
            let test = all.split_off(s.train + s.valid);
            let valid = all.split_off(s.train);
            Corpus { train: all, valid, test }
        }
        DataConfig::Files(f) => Corpus {
            train: load_split(&f.train, &alphabet)?,
            valid: f.valid.as_ref().map(|s| load_split(s, &alphabet)).transpose()?.unwrap_or_default(),
            test: f.test.as_ref().map(|s| load_split(s, &alphabet)).transpose()?.unwrap_or_default(),
        },
    };
    for part in [&mut corpus.train, &mut corpus.valid, &mut corpus.test] {
        normalize_corpus(part, cfg.normalization)?;
    }
    Ok(corpus)
}

/// Utterances named on the command line, or one split of the configured
/// data. Without a transcript file the labels are empty.
pub fn select(cfg: &RunConfig, split: Split, features: Option<&Path>, transcripts: Option<&Path>) -> Result<Vec<Utterance>> {
    let mut utts = match (features, transcripts) {
        (Some(f), Some(t)) => load_corpus(f, t, &cfg.alphabet.build()?)?,
        (Some(f), None) => load_features(f)?,
        (None, Some(_)) => return Err(CliError::Usage("--transcripts requires --features".into())),
        (None, None) => {
            let utts = load(cfg)?.split(split).to_vec();
            if utts.is_empty() {
                return Err(CliError::Usage(format!("the {split:?} split is empty").to_lowercase()));
            }
            return Ok(utts);
        }
    };
    normalize_corpus(&mut utts, cfg.normalization)?;
    Ok(utts)
}
