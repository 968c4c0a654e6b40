use std::collections::BTreeMap;

use super::{collapse, log_add};
use crate::tensor::Tensor;

/// Most likely class of every frame; ties go to the lower index.
pub fn greedy_path(log_probs: &Tensor) -> Vec<usize> {
    let classes = log_probs.dim(1);
    log_probs
        .data()
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Per-frame argmax followed by the collapse map.
pub fn greedy_decode(log_probs: &Tensor, blank: usize) -> Vec<usize> {
    collapse(&greedy_path(log_probs), blank)
}

#[derive(Clone, Copy)]
struct Score {
    blank: f64,
    label: f64,
}

impl Score {
    const EMPTY: Score = Score {
        blank: f64::NEG_INFINITY,
        label: f64::NEG_INFINITY,
    };

    fn total(self) -> f64 {
        log_add(self.blank, self.label)
    }
}

/// Keeps the `width` best prefixes; equal scores prefer the
/// lexicographically smaller prefix.
fn prune(beams: BTreeMap<Vec<usize>, Score>, width: usize) -> Vec<(Vec<usize>, Score)> {
    let mut ranked: Vec<_> = beams.into_iter().collect();
    ranked.sort_by(|(pa, a), (pb, b)| b.total().total_cmp(&a.total()).then_with(|| pa.cmp(pb)));
    ranked.truncate(width);
    ranked
}

/// Prefix beam search over per-frame log-probabilities `[T, V]`.
///
/// Every prefix tracks the mass of paths ending in blank and ending in its
/// last label separately, so the score of a prefix sums over all paths that
/// collapse to it. A width of at least the number of reachable prefixes makes
/// the search exact.
pub fn prefix_beam_decode(log_probs: &Tensor, blank: usize, width: usize) -> Vec<usize> {
    let width = width.max(1);
    let classes = log_probs.dim(1);
    let mut beam = vec![(Vec::new(), Score { blank: 0.0, label: f64::NEG_INFINITY })];
    for row in log_probs.data().chunks(classes) {
        let mut next: BTreeMap<Vec<usize>, Score> = BTreeMap::new();
        for (prefix, score) in &beam {
            let total = score.total();
            let stay = next.entry(prefix.clone()).or_insert(Score::EMPTY);
            stay.blank = log_add(stay.blank, total + row[blank]);
            let last = prefix.last().copied();
            if let Some(l) = last {
                stay.label = log_add(stay.label, score.label + row[l]);
            }
            for (k, &lp) in row.iter().enumerate() {
                if k == blank {
                    continue;
                }
                let mut extended = prefix.clone();
                extended.push(k);
                let entry = next.entry(extended).or_insert(Score::EMPTY);
                // Repeating the last label only extends the prefix after a blank.
                let from = if Some(k) == last { score.blank } else { total };
                entry.label = log_add(entry.label, from + lp);
            }
        }
        beam = prune(next, width);
    }
    beam.into_iter().next().map(|(p, _)| p).unwrap_or_default()
}
