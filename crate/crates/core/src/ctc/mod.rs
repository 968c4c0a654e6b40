//! Connectionist temporal classification: the collapse map, the loss with
//! exact gradients from a log-space forward-backward pass, an enumeration
//! oracle for tiny instances, and decoders.

mod decode;

use std::collections::{BTreeMap, HashSet};

pub use decode::{greedy_decode, greedy_path, prefix_beam_decode};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Ordered output labels with a distinguished blank.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelAlphabet {
    symbols: Vec<String>,
    blank: usize,
    eos: Option<usize>,
    padding: Option<usize>,
}

impl LabelAlphabet {
    pub fn new(symbols: Vec<String>, blank: usize, eos: Option<usize>, padding: Option<usize>) -> Result<Self> {
        let size = symbols.len();
        let mut seen = HashSet::new();
        for s in &symbols {
            if s.is_empty() || s.contains(char::is_whitespace) {
                return Err(Error::config("alphabet.symbols", format!("invalid symbol {s:?}")));
            }
            if !seen.insert(s) {
                return Err(Error::config("alphabet.symbols", format!("duplicate symbol {s:?}")));
            }
        }
        for (field, idx) in [("alphabet.blank", Some(blank)), ("alphabet.eos", eos), ("alphabet.padding", padding)] {
            if let Some(i) = idx {
                if i >= size {
                    return Err(Error::config(field, format!("index {i} outside 0..{size}")));
                }
            }
        }
        if eos == Some(blank) || padding == Some(blank) || (eos.is_some() && eos == padding) {
            return Err(Error::config("alphabet", "blank, eos and padding must be distinct"));
        }
        Ok(Self { symbols, blank, eos, padding })
    }

    /// Number of output classes, including blank and padding.
    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn blank(&self) -> usize {
        self.blank
    }

    pub fn eos(&self) -> Option<usize> {
        self.eos
    }

    pub fn padding(&self) -> Option<usize> {
        self.padding
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn symbol(&self, label: usize) -> Option<&str> {
        self.symbols.get(label).map(String::as_str)
    }

    pub fn index(&self, symbol: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s == symbol)
    }

    /// Maps symbols to labels.
    pub fn encode<'a>(&self, tokens: impl IntoIterator<Item = &'a str>) -> Result<Vec<usize>> {
        tokens
            .into_iter()
            .map(|t| {
                self.index(t)
                    .ok_or_else(|| Error::format("label sequence", format!("unknown symbol {t:?}")))
            })
            .collect()
    }

    /// Space-separated symbols of `labels`.
    pub fn render(&self, labels: &[usize]) -> String {
        labels
            .iter()
            .map(|&l| self.symbol(l).unwrap_or("?"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Checks that `labels` can be a CTC target: in range and neither blank
    /// nor padding.
    pub fn check_target(&self, labels: &[usize]) -> Result<()> {
        for &l in labels {
            if l >= self.size() {
                return Err(Error::LabelOutOfRange { label: l, size: self.size() });
            }
            if l == self.blank || Some(l) == self.padding {
                return Err(Error::format("label sequence", format!("reserved label {l} in target")));
            }
        }
        Ok(())
    }

    /// Collapse map with a range check on every path symbol.
    pub fn collapse(&self, path: &[usize]) -> Result<Vec<usize>> {
        if let Some(&l) = path.iter().find(|&&l| l >= self.size()) {
            return Err(Error::LabelOutOfRange { label: l, size: self.size() });
        }
        Ok(collapse(path, self.blank))
    }
}

/// Merges runs of repeated symbols, then drops blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != blank {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// Fewest frames that can emit `labels`: one per label plus a blank between
/// every pair of equal neighbours.
pub fn required_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Forward and backward tables over the blank-interleaved target.
///
/// Both tables include the emission of their own frame, so
/// `alpha[t][s] + beta[t][s] - log_probs[t][l'(s)]` is the log-probability
/// mass of all paths through state `s` at frame `t`.
#[derive(Clone, Debug)]
pub struct CtcLattice {
    /// `[T, 2U + 1]`.
    pub log_alpha: Tensor,
    /// `[T, 2U + 1]`.
    pub log_beta: Tensor,
    /// `log p(y | x)`.
    pub log_likelihood: f64,
    extended: Vec<usize>,
}

fn check_inputs(log_probs: &Tensor, labels: &[usize], blank: usize) -> Result<(usize, usize)> {
    if log_probs.rank() != 2 {
        return Err(Error::shape("ctc", format!("log-probabilities must be [T, V], got {:?}", log_probs.shape())));
    }
    let (frames, classes) = (log_probs.dim(0), log_probs.dim(1));
    if blank >= classes {
        return Err(Error::LabelOutOfRange { label: blank, size: classes });
    }
    for &l in labels {
        if l >= classes {
            return Err(Error::LabelOutOfRange { label: l, size: classes });
        }
        if l == blank {
            return Err(Error::format("label sequence", "blank inside target"));
        }
    }
    let required = required_frames(labels);
    if required > frames {
        return Err(Error::Unreachable { labels: labels.len(), required, frames });
    }
    Ok((frames, classes))
}

impl CtcLattice {
    pub fn new(log_probs: &Tensor, labels: &[usize], blank: usize) -> Result<Self> {
        let (frames, _) = check_inputs(log_probs, labels, blank)?;
        let mut extended = Vec::with_capacity(2 * labels.len() + 1);
        extended.push(blank);
        for &l in labels {
            extended.push(l);
            extended.push(blank);
        }
        let states = extended.len();
        let lp = |t: usize, s: usize| log_probs.data()[t * log_probs.dim(1) + extended[s]];
        // A state may be entered from two back when it is a label differing
        // from the label two positions earlier.
        let skip = |s: usize| s >= 2 && extended[s] != blank && extended[s] != extended[s - 2];
        let ninf = f64::NEG_INFINITY;

        let mut alpha = vec![ninf; frames * states];
        alpha[0] = lp(0, 0);
        if states > 1 {
            alpha[1] = lp(0, 1);
        }
        for t in 1..frames {
            for s in 0..states {
                let prev = &alpha[(t - 1) * states..t * states];
                let mut acc = prev[s];
                if s >= 1 {
                    acc = log_add(acc, prev[s - 1]);
                }
                if skip(s) {
                    acc = log_add(acc, prev[s - 2]);
                }
                alpha[t * states + s] = if acc == ninf { ninf } else { acc + lp(t, s) };
            }
        }

        let mut beta = vec![ninf; frames * states];
        let last = (frames - 1) * states;
        beta[last + states - 1] = lp(frames - 1, states - 1);
        if states > 1 {
            beta[last + states - 2] = lp(frames - 1, states - 2);
        }
        for t in (0..frames - 1).rev() {
            for s in 0..states {
                let next = &beta[(t + 1) * states..(t + 2) * states];
                let mut acc = next[s];
                if s + 1 < states {
                    acc = log_add(acc, next[s + 1]);
                }
                if s + 2 < states && skip(s + 2) {
                    acc = log_add(acc, next[s + 2]);
                }
                beta[t * states + s] = if acc == ninf { ninf } else { acc + lp(t, s) };
            }
        }

        let end = &alpha[last..];
        let mut ll = end[states - 1];
        if states > 1 {
            ll = log_add(ll, end[states - 2]);
        }
        Ok(Self {
            log_alpha: Tensor::new(vec![frames, states], alpha)?,
            log_beta: Tensor::new(vec![frames, states], beta)?,
            log_likelihood: ll,
            extended,
        })
    }

    /// Log-probability recovered from the alpha-beta product at frame `t`.
    pub fn log_likelihood_at(&self, log_probs: &Tensor, t: usize) -> f64 {
        let states = self.extended.len();
        (0..states).fold(f64::NEG_INFINITY, |acc, s| {
            let through = self.log_alpha.data()[t * states + s] + self.log_beta.data()[t * states + s]
                - log_probs.data()[t * log_probs.dim(1) + self.extended[s]];
            if through.is_nan() {
                acc
            } else {
                log_add(acc, through)
            }
        })
    }

    /// Posterior occupancy `[T, V]`: the probability that frame `t` emits
    /// class `k` given the target.
    pub fn occupancy(&self, log_probs: &Tensor) -> Tensor {
        let (frames, classes) = (log_probs.dim(0), log_probs.dim(1));
        let states = self.extended.len();
        let mut acc = vec![f64::NEG_INFINITY; frames * classes];
        for t in 0..frames {
            for s in 0..states {
                let k = self.extended[s];
                let a = self.log_alpha.data()[t * states + s];
                let b = self.log_beta.data()[t * states + s];
                if a == f64::NEG_INFINITY || b == f64::NEG_INFINITY {
                    continue;
                }
                let through = a + b - log_probs.data()[t * classes + k];
                acc[t * classes + k] = log_add(acc[t * classes + k], through);
            }
        }
        let data = acc
            .into_iter()
            .map(|v| (v - self.log_likelihood).exp())
            .collect();
        Tensor::new(vec![frames, classes], data).expect("sized above")
    }
}

/// `-log p(labels | x)` for per-frame log-probabilities `[T, V]`.
pub fn ctc_loss_value(log_probs: &Tensor, labels: &[usize], blank: usize) -> Result<f64> {
    Ok(-CtcLattice::new(log_probs, labels, blank)?.log_likelihood)
}

/// Records the CTC loss of `log_probs: [T, V]` on the tape. The gradient
/// with respect to each log-probability is minus the posterior occupancy.
pub fn ctc_loss(tape: &mut Tape, log_probs: Var, labels: &[usize], blank: usize) -> Result<Var> {
    let lp = tape.value(log_probs);
    let lattice = CtcLattice::new(lp, labels, blank)?;
    let grad = lattice.occupancy(lp).into_data().into_iter().map(|g| -g).collect();
    tape.custom_scalar(log_probs, "ctc_loss", -lattice.log_likelihood, grad)
}

const ENUMERATION_LIMIT: f64 = 1e7;

fn enumerate_paths(log_probs: &Tensor, mut visit: impl FnMut(&[usize], f64)) -> Result<()> {
    let (frames, classes) = (log_probs.dim(0), log_probs.dim(1));
    if (classes as f64).powi(frames as i32) > ENUMERATION_LIMIT {
        return Err(Error::TooLarge(format!("{classes}^{frames} paths")));
    }
    let mut path = vec![0usize; frames];
    loop {
        let lp: f64 = path
            .iter()
            .enumerate()
            .map(|(t, &k)| log_probs.data()[t * classes + k])
            .sum();
        visit(&path, lp);
        let mut t = frames;
        loop {
            if t == 0 {
                return Ok(());
            }
            t -= 1;
            path[t] += 1;
            if path[t] < classes {
                break;
            }
            path[t] = 0;
        }
    }
}

/// Loss by summing the probability of every path that collapses to
/// `labels`. Exponential in `T`; meant as a reference for tiny instances.
pub fn brute_force_loss(log_probs: &Tensor, labels: &[usize], blank: usize) -> Result<f64> {
    check_inputs(log_probs, labels, blank)?;
    let mut total = 0.0;
    enumerate_paths(log_probs, |path, lp| {
        if collapse(path, blank) == labels {
            total += lp.exp();
        }
    })?;
    Ok(-total.ln())
}

/// Label sequence of highest total probability, found by enumerating every
/// path. Ties go to the lexicographically smallest sequence.
pub fn brute_force_decode(log_probs: &Tensor, blank: usize) -> Result<Vec<usize>> {
    if log_probs.rank() != 2 || log_probs.dim(0) == 0 {
        return Err(Error::shape("brute_force_decode", format!("{:?}", log_probs.shape())));
    }
    let mut mass: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    enumerate_paths(log_probs, |path, lp| {
        *mass.entry(collapse(path, blank)).or_insert(0.0) += lp.exp();
    })?;
    let mut best: Option<(&Vec<usize>, f64)> = None;
    for (labels, &p) in &mass {
        if best.is_none_or(|(_, q)| p > q) {
            best = Some((labels, p));
        }
    }
    Ok(best.map(|(l, _)| l.clone()).unwrap_or_default())
}

/// Total log-probability of `labels`, or `-inf` when unreachable.
pub fn sequence_log_prob(log_probs: &Tensor, labels: &[usize], blank: usize) -> f64 {
    CtcLattice::new(log_probs, labels, blank).map_or(f64::NEG_INFINITY, |l| l.log_likelihood)
}
