//! Error rates, end-of-sentence detection, the frame-wise coupling agreement
//! rate and coupling heatmap export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Edit operations of a minimum-cost alignment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AlignmentResult {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub hits: usize,
}

impl AlignmentResult {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    pub fn reference_len(&self) -> usize {
        self.substitutions + self.deletions + self.hits
    }

    pub fn hypothesis_len(&self) -> usize {
        self.substitutions + self.insertions + self.hits
    }

    /// `(S + I + D) / N`; zero for two empty sequences, infinite for an
    /// empty reference with a non-empty hypothesis.
    pub fn error_rate(&self) -> f64 {
        match (self.errors(), self.reference_len()) {
            (0, _) => 0.0,
            (_, 0) => f64::INFINITY,
            (e, n) => e as f64 / n as f64,
        }
    }
}

impl std::ops::AddAssign for AlignmentResult {
    fn add_assign(&mut self, o: Self) {
        self.substitutions += o.substitutions;
        self.insertions += o.insertions;
        self.deletions += o.deletions;
        self.hits += o.hits;
    }
}

/// Levenshtein alignment with unit costs. Among equal-cost alignments the
/// backtrace prefers a substitution, then an insertion, then a deletion.
pub fn align<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> AlignmentResult {
    let (n, m) = (reference.len(), hypothesis.len());
    let width = m + 1;
    let mut d = vec![0usize; (n + 1) * width];
    for i in 0..=n {
        d[i * width] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[(i - 1) * width + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let ins = d[i * width + j - 1] + 1;
            let del = d[(i - 1) * width + j] + 1;
            d[i * width + j] = diag.min(ins).min(del);
        }
    }
    let mut r = AlignmentResult::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * width + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hypothesis[j - 1];
            if d[(i - 1) * width + j - 1] + usize::from(!same) == here {
                if same {
                    r.hits += 1;
                } else {
                    r.substitutions += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && d[i * width + j - 1] + 1 == here {
            r.insertions += 1;
            j -= 1;
        } else {
            r.deletions += 1;
            i -= 1;
        }
    }
    r
}

/// Token-level alignment of two label sequences.
pub fn token_error_rate(reference: &[usize], hypothesis: &[usize]) -> AlignmentResult {
    align(reference, hypothesis)
}

/// Word-level alignment, where words are runs of labels between `space`.
pub fn word_error_rate(reference: &[usize], hypothesis: &[usize], space: usize) -> AlignmentResult {
    let words = |s: &[usize]| -> Vec<Vec<usize>> {
        s.split(|&l| l == space)
            .filter(|w| !w.is_empty())
            .map(<[usize]>::to_vec)
            .collect()
    };
    align(&words(reference), &words(hypothesis))
}

/// Percentage of hypotheses that are non-empty and end with `eos`.
pub fn eos_detection_rate(decoded: &[Vec<usize>], eos: usize) -> f64 {
    if decoded.is_empty() {
        return 0.0;
    }
    let hits = decoded.iter().filter(|d| d.last() == Some(&eos)).count();
    100.0 * hits as f64 / decoded.len() as f64
}

/// Percentage of frames whose labels differ between two per-frame sequences.
pub fn framewise_substitution_rate(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("framewise_substitution_rate", format!("{} vs {} frames", a.len(), b.len())));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let diff = a.iter().zip(b).filter(|(x, y)| x != y).count();
    Ok(100.0 * diff as f64 / a.len() as f64)
}

/// Sum over lower capsules of a coupling matrix `[N, O_H]`.
pub fn column_sums(c: &Tensor) -> Vec<f64> {
    let cols = c.dim(1);
    let mut sums = vec![0.0; cols];
    for row in c.data().chunks(cols) {
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v;
        }
    }
    sums
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Display range of the heatmap image.
pub const HEATMAP_RANGE: (f64, f64) = (0.01, 0.05);

#[derive(Clone, Debug)]
pub struct HeatmapFiles {
    pub csv: PathBuf,
    pub image: PathBuf,
    pub sums: PathBuf,
}

fn csv_row<'a>(cells: impl IntoIterator<Item = &'a f64>) -> String {
    let mut line = String::new();
    for (i, v) in cells.into_iter().enumerate() {
        if i > 0 {
            line.push(',');
        }
        // Shortest representation that parses back to the same value.
        write!(line, "{v}").expect("writing to a string");
    }
    line
}

/// Writes a coupling matrix `[N, O_H]` as `<stem>.csv` (one row per lower
/// capsule, a header of class symbols), `<stem>.pgm` (binary graymap mapping
/// [`HEATMAP_RANGE`] onto 0..=255) and `<stem>.sums.csv` (column sums).
pub fn export_coupling_heatmap(c: &Tensor, symbols: &[String], dir: &Path, stem: &str) -> Result<HeatmapFiles> {
    if c.rank() != 2 || c.dim(1) != symbols.len() {
        return Err(Error::shape(
            "export_coupling_heatmap",
            format!("{:?} with {} class symbols", c.shape(), symbols.len()),
        ));
    }
    let cols = c.dim(1);
    let header = symbols.join(",");

    let mut csv = format!("{header}\n");
    for row in c.data().chunks(cols) {
        csv.push_str(&csv_row(row));
        csv.push('\n');
    }

    let (lo, hi) = HEATMAP_RANGE;
    let mut pgm = format!("P5\n{} {}\n255\n", cols, c.dim(0)).into_bytes();
    pgm.extend(c.data().iter().map(|&v| (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8));

    let sums = format!("{header}\n{}\n", csv_row(&column_sums(c)));

    let files = HeatmapFiles {
        csv: dir.join(format!("{stem}.csv")),
        image: dir.join(format!("{stem}.pgm")),
        sums: dir.join(format!("{stem}.sums.csv")),
    };
    fs::write(&files.csv, csv)?;
    fs::write(&files.image, pgm)?;
    fs::write(&files.sums, sums)?;
    Ok(files)
}

/// Parses a heatmap CSV written by [`export_coupling_heatmap`].
pub fn read_heatmap_csv(path: &Path) -> Result<(Vec<String>, Tensor)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::format("heatmap", "missing header"))?
        .split(',')
        .map(str::to_owned)
        .collect();
    let mut data = Vec::new();
    let mut rows = 0;
    for (n, line) in lines.enumerate() {
        let cells: Vec<f64> = line
            .split(',')
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format("heatmap", format!("line {}: {e}", n + 2)))?;
        if cells.len() != header.len() {
            return Err(Error::format("heatmap", format!("line {}: {} cells", n + 2, cells.len())));
        }
        data.extend(cells);
        rows += 1;
    }
    Ok((header.clone(), Tensor::new(vec![rows, header.len()], data)?))
}
