//! Evaluation of independent per-utterance work items.
//!
//! Results always come back in input order, so any reduction over them is
//! the same whether the items ran on one thread or many.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    /// Spread items over the rayon thread pool when the `parallel` feature
    /// is enabled; otherwise identical to `Sequential`.
    #[default]
    Parallel,
    Sequential,
}

impl Execution {
    /// Applies `f` to every `(index, item)` and returns the results in order.
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &T) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
            }
            _ => items.iter().enumerate().map(|(i, x)| f(i, x)).collect(),
        }
    }
}
