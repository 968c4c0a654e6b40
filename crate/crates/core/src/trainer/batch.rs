use crate::error::{Error, Result};

/// Groups utterance indices so that every batch, padded to its longest
/// member, holds at most `budget` frames.
///
/// Utterances are sorted by length (ties by index) and packed greedily, so
/// similar lengths share a batch. Every index appears exactly once.
pub fn batch_by_frames(lengths: &[usize], budget: usize) -> Result<Vec<Vec<usize>>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| (lengths[i], i));
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    for i in order {
        let len = lengths[i];
        if len > budget {
            return Err(Error::config(
                "train.batch_frames",
                format!("utterance {i} has {len} frames, more than the budget of {budget}"),
            ));
        }
        // Sorted ascending, so `len` is the new padded length.
        if !current.is_empty() && len * (current.len() + 1) > budget {
            batches.push(std::mem::take(&mut current));
        }
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    Ok(batches)
}
