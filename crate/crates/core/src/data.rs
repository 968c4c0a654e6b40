//! Feature and transcript files, feature normalization and the synthetic
//! glyph corpus.
//!
//! Feature files hold utterances back to back. Each starts with a header
//! line `id,frames,dim` followed by `frames` lines of `dim` comma-separated
//! decimals. Transcripts hold one `id<TAB>symbols` line per utterance with
//! space-separated symbols.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctc::{required_frames, LabelAlphabet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `[T′, F′]`.
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.dim(0)
    }
}

fn parse_err(line: usize, detail: impl std::fmt::Display) -> Error {
    Error::format("feature file", format!("line {line}: {detail}"))
}

/// Parses the feature format. Labels are left empty.
pub fn parse_features(text: &str) -> Result<Vec<Utterance>> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    let mut lines = text.lines().enumerate().map(|(n, l)| (n + 1, l));
    while let Some((n, header)) = lines.next() {
        if header.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = header.split(',').collect();
        let [id, frames, dim] = fields[..] else {
            return Err(parse_err(n, "expected header `id,frames,dim`"));
        };
        let frames: usize = frames.trim().parse().map_err(|e| parse_err(n, e))?;
        let dim: usize = dim.trim().parse().map_err(|e| parse_err(n, e))?;
        if id.is_empty() || frames == 0 || dim == 0 {
            return Err(parse_err(n, "empty id or zero-sized utterance"));
        }
        if !ids.insert(id.to_owned()) {
            return Err(parse_err(n, format!("duplicate id {id:?}")));
        }
        let mut data = Vec::with_capacity(frames * dim);
        for _ in 0..frames {
            let (n, row) = lines.next().ok_or_else(|| parse_err(n, format!("utterance {id:?} truncated")))?;
            let before = data.len();
            for cell in row.split(',') {
                let v: f64 = cell.trim().parse().map_err(|e| parse_err(n, e))?;
                if !v.is_finite() {
                    return Err(parse_err(n, "non-finite value"));
                }
                data.push(v);
            }
            if data.len() - before != dim {
                return Err(parse_err(n, format!("expected {dim} values, got {}", data.len() - before)));
            }
        }
        out.push(Utterance {
            id: id.to_owned(),
            features: Tensor::new(vec![frames, dim], data)?,
            labels: Vec::new(),
        });
    }
    Ok(out)
}

pub fn load_features(path: &Path) -> Result<Vec<Utterance>> {
    parse_features(&fs::read_to_string(path)?)
}

/// Renders utterances in the feature format with round-trip precision.
pub fn format_features(utterances: &[Utterance]) -> String {
    let mut s = String::new();
    for u in utterances {
        let (frames, dim) = (u.features.dim(0), u.features.dim(1));
        writeln!(s, "{},{},{}", u.id, frames, dim).expect("writing to a string");
        for row in u.features.data().chunks(dim) {
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    s.push(',');
                }
                write!(s, "{v}").expect("writing to a string");
            }
            s.push('\n');
        }
    }
    s
}

pub fn save_features(path: &Path, utterances: &[Utterance]) -> Result<()> {
    Ok(fs::write(path, format_features(utterances))?)
}

/// Parses `id<TAB>symbols` lines into label sequences keyed by id.
pub fn parse_transcripts(text: &str, alphabet: &LabelAlphabet) -> Result<BTreeMap<String, Vec<usize>>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, symbols) = line
            .split_once('\t')
            .ok_or_else(|| Error::format("transcript", format!("line {}: missing tab", n + 1)))?;
        let labels = alphabet.encode(symbols.split_whitespace())?;
        if out.insert(id.to_owned(), labels).is_some() {
            return Err(Error::format("transcript", format!("line {}: duplicate id {id:?}", n + 1)));
        }
    }
    Ok(out)
}

pub fn format_transcripts<'a>(
    entries: impl IntoIterator<Item = (&'a str, &'a [usize])>,
    alphabet: &LabelAlphabet,
) -> String {
    let mut s = String::new();
    for (id, labels) in entries {
        writeln!(s, "{id}\t{}", alphabet.render(labels)).expect("writing to a string");
    }
    s
}

/// Loads features and attaches the labels of a transcript file.
pub fn load_corpus(features: &Path, transcripts: &Path, alphabet: &LabelAlphabet) -> Result<Vec<Utterance>> {
    let mut utts = load_features(features)?;
    let mut labels = parse_transcripts(&fs::read_to_string(transcripts)?, alphabet)?;
    for u in &mut utts {
        u.labels = labels
            .remove(&u.id)
            .ok_or_else(|| Error::format("transcript", format!("no transcript for {:?}", u.id)))?;
        alphabet.check_target(&u.labels)?;
    }
    Ok(utts)
}

/// Variance floor of feature normalization.
pub const VARIANCE_FLOOR: f64 = 1e-8;

fn normalize_with(features: &Tensor, mean: &[f64], var: &[f64]) -> Tensor {
    let dim = mean.len();
    let data = features
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| (v - mean[i % dim]) / var[i % dim].max(VARIANCE_FLOOR).sqrt())
        .collect();
    Tensor::new(features.shape().to_vec(), data).expect("same shape")
}

fn moments<'a>(blocks: impl Iterator<Item = &'a Tensor> + Clone, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; dim];
    let mut count = 0usize;
    for b in blocks.clone() {
        for row in b.data().chunks(dim) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
            count += 1;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut var = vec![0.0; dim];
    for b in blocks {
        for row in b.data().chunks(dim) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
    }
    var.iter_mut().for_each(|s| *s /= count as f64);
    (mean, var)
}

/// Gives every coefficient zero mean and unit variance over the utterance.
pub fn normalize_utterance(features: &Tensor) -> Result<Tensor> {
    if features.rank() != 2 || features.dim(0) < 2 {
        return Err(Error::SequenceTooShort {
            len: features.shape().first().copied().unwrap_or(0),
            required: 2,
        });
    }
    let (mean, var) = moments(std::iter::once(features), features.dim(1));
    Ok(normalize_with(features, &mean, &var))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    None,
    /// Statistics of each utterance.
    #[default]
    Utterance,
    /// Statistics pooled over utterances sharing an id prefix up to the
    /// first `_`.
    Speaker,
}

pub fn normalize_corpus(utterances: &mut [Utterance], mode: Normalization) -> Result<()> {
    match mode {
        Normalization::None => {}
        Normalization::Utterance => {
            for u in utterances.iter_mut() {
                u.features = normalize_utterance(&u.features)?;
            }
        }
        Normalization::Speaker => {
            let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, u) in utterances.iter().enumerate() {
                let speaker = u.id.split('_').next().unwrap_or(&u.id);
                groups.entry(speaker).or_default().push(i);
            }
            let mut stats = vec![None; utterances.len()];
            for members in groups.values() {
                let dim = utterances[members[0]].features.dim(1);
                let m = moments(members.iter().map(|&i| &utterances[i].features), dim);
                for &i in members {
                    stats[i] = Some(m.clone());
                }
            }
            for (u, s) in utterances.iter_mut().zip(stats) {
                let (mean, var) = s.expect("every utterance has a group");
                u.features = normalize_with(&u.features, &mean, &var);
            }
        }
    }
    Ok(())
}

fn default_glyph_frames() -> usize {
    12
}

fn default_glyph_range() -> [usize; 2] {
    [2, 5]
}

fn default_silence_range() -> [usize; 2] {
    [3, 8]
}

fn default_noise() -> f64 {
    0.3
}

fn default_amplitude() -> f64 {
    1.5
}

fn default_stride() -> usize {
    4
}

/// Synthetic corpus of noisy 2-D glyphs separated by silence.
///
/// Glyph `k` is a Gaussian ridge across frequency whose center moves in a
/// straight line over the glyph duration; start and end bands differ
/// between glyphs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    /// Number of distinct glyphs.
    pub symbols: usize,
    pub feature_dim: usize,
    #[serde(default = "default_glyph_frames")]
    pub glyph_frames: usize,
    /// Inclusive range of glyphs per utterance.
    #[serde(default = "default_glyph_range")]
    pub glyphs: [usize; 2],
    /// Inclusive range of silence frames before, between and after glyphs.
    #[serde(default = "default_silence_range")]
    pub silence: [usize; 2],
    /// Standard deviation of additive Gaussian noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    /// Input frames per model output frame, for the reachability check.
    #[serde(default = "default_stride")]
    pub time_stride: usize,
    /// Supplied by the caller rather than read from configuration files.
    #[serde(skip)]
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn new(symbols: usize, feature_dim: usize, seed: u64) -> Self {
        Self {
            symbols,
            feature_dim,
            glyph_frames: default_glyph_frames(),
            glyphs: default_glyph_range(),
            silence: default_silence_range(),
            noise: default_noise(),
            amplitude: default_amplitude(),
            time_stride: default_stride(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = |name: &str| format!("synthetic.{name}");
        if self.symbols == 0 || self.feature_dim < 2 || self.glyph_frames == 0 {
            return Err(Error::config(f("symbols"), "symbols, feature_dim >= 2 and glyph_frames required"));
        }
        if self.glyphs[0] == 0 || self.glyphs[0] > self.glyphs[1] {
            return Err(Error::config(f("glyphs"), "range must be non-empty and start at 1 or more"));
        }
        if self.silence[0] > self.silence[1] {
            return Err(Error::config(f("silence"), "range must be non-empty"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config(f("noise"), "must be non-negative"));
        }
        if self.time_stride == 0 {
            return Err(Error::config(f("time_stride"), "must be at least 1"));
        }
        let bands = band_count(self.symbols);
        if bands * bands < self.symbols {
            return Err(Error::config(f("symbols"), "too many symbols"));
        }
        Ok(())
    }

    /// The `[glyph_frames, feature_dim]` template of every glyph.
    pub fn templates(&self) -> Vec<Tensor> {
        let bands = band_count(self.symbols);
        let mut pairs: Vec<(usize, usize)> = (0..bands).flat_map(|s| (0..bands).map(move |e| (s, e))).collect();
        pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
        let dim = self.feature_dim as f64;
        let center = |b: usize| (b as f64 + 0.5) * dim / bands as f64;
        let width = (dim / (2.0 * bands as f64)).max(0.75);
        pairs[..self.symbols]
            .iter()
            .map(|&(s, e)| {
                let mut t = Tensor::zeros(&[self.glyph_frames, self.feature_dim]);
                for tau in 0..self.glyph_frames {
                    let frac = if self.glyph_frames > 1 {
                        tau as f64 / (self.glyph_frames - 1) as f64
                    } else {
                        0.5
                    };
                    let c = center(s) + frac * (center(e) - center(s));
                    for f in 0..self.feature_dim {
                        let z = (f as f64 + 0.5 - c) / width;
                        t.set(&[tau, f], self.amplitude * (-0.5 * z * z).exp());
                    }
                }
                t
            })
            .collect()
    }
}

fn band_count(symbols: usize) -> usize {
    ((symbols as f64).sqrt().ceil() as usize).max(2)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller on (0, 1] to avoid ln(0).
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Generates `count` utterances. Utterance `i` depends only on the config
/// and `i`, never on `count`. Labels are `1..=symbols`, leaving 0 for blank.
pub fn generate_synthetic(cfg: &SyntheticConfig, count: usize) -> Result<Vec<Utterance>> {
    cfg.validate()?;
    let templates = cfg.templates();
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64 + 1);
        let n = rng.random_range(cfg.glyphs[0]..=cfg.glyphs[1]);
        let glyphs: Vec<usize> = (0..n).map(|_| rng.random_range(0..cfg.symbols)).collect();
        let gaps: Vec<usize> = (0..=n).map(|_| rng.random_range(cfg.silence[0]..=cfg.silence[1])).collect();
        let frames = gaps.iter().sum::<usize>() + n * cfg.glyph_frames;
        let mut x = Tensor::zeros(&[frames, cfg.feature_dim]);
        let mut t = gaps[0];
        for (k, &g) in glyphs.iter().enumerate() {
            let span = cfg.glyph_frames * cfg.feature_dim;
            x.data_mut()[t * cfg.feature_dim..][..span].copy_from_slice(templates[g].data());
            t += cfg.glyph_frames + gaps[k + 1];
        }
        if cfg.noise > 0.0 {
            for v in x.data_mut() {
                *v += cfg.noise * gaussian(&mut rng);
            }
        }
        let labels: Vec<usize> = glyphs.iter().map(|g| g + 1).collect();
        let available = frames.div_ceil(cfg.time_stride);
        let required = required_frames(&labels);
        if required > available {
            return Err(Error::Unreachable { labels: labels.len(), required, frames: available });
        }
        out.push(Utterance {
            id: format!("syn{i:05}"),
            features: x,
            labels,
        });
    }
    Ok(out)
}

/// Alphabet of the synthetic corpus: blank `_` followed by glyphs `g1`,
/// `g2`, ...
pub fn synthetic_alphabet(symbols: usize) -> LabelAlphabet {
    let mut names = vec!["_".to_owned()];
    names.extend((1..=symbols).map(|k| format!("g{k}")));
    LabelAlphabet::new(names, 0, None, None).expect("distinct generated symbols")
}
