//! Token-budget batching.
//!
//! The budget counts padded tokens: a batch costs `rows * longest_row`.
//! Sequences are sorted by length and packed greedily into contiguous runs, so
//! each batch holds sequences of similar length.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::Label;
use crate::error::{Error, Result};
use crate::textproc::TokenSeq;

/// Padded-token budget and maximum input length for the two dataset families
/// in the reference setup (essays/posts and comments/tweets).
pub const BUDGET_ESSAYS: (usize, usize) = (5000, 224);
pub const BUDGET_TWEETS: (usize, usize) = (5400, 324);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub groups: Vec<Vec<usize>>,
    pub max_tokens: usize,
}

impl BatchPlan {
    /// `|group| * longest` for each group.
    pub fn padded_costs(&self, lengths: &[usize]) -> Vec<usize> {
        self.groups
            .iter()
            .map(|g| g.len() * g.iter().map(|&i| lengths[i]).max().unwrap_or(0))
            .collect()
    }
}

pub fn plan_batches(lengths: &[usize], max_tokens: usize, seed: u64, shuffle: bool) -> Result<BatchPlan> {
    if max_tokens < 1 {
        return Err(Error::invalid("max_tokens must be at least 1"));
    }
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| (lengths[i], i));

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut run: Vec<usize> = Vec::new();
    for idx in order {
        // sorted ascending, so the candidate is the longest in the extended run
        if !run.is_empty() && (run.len() + 1) * lengths[idx] > max_tokens {
            groups.push(std::mem::take(&mut run));
        }
        run.push(idx);
    }
    if !run.is_empty() {
        groups.push(run);
    }
    if shuffle {
        groups.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(BatchPlan { groups, max_tokens })
}

/// Padded id matrix with row-major `[rows x width]` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<u32>,
    pub mask: Vec<u8>,
    pub rows: usize,
    pub width: usize,
    pub labels: Vec<Label>,
}

impl Batch {
    pub fn row(&self, r: usize) -> &[u32] {
        &self.ids[r * self.width..(r + 1) * self.width]
    }

    pub fn row_mask(&self, r: usize) -> &[u8] {
        &self.mask[r * self.width..(r + 1) * self.width]
    }

    /// Strips padding from every row.
    pub fn unpad(&self) -> Vec<Vec<u32>> {
        (0..self.rows)
            .map(|r| {
                self.row(r)
                    .iter()
                    .zip(self.row_mask(r))
                    .filter(|(_, &m)| m == 1)
                    .map(|(&id, _)| id)
                    .collect()
            })
            .collect()
    }

    /// Same batch padded out to `width` columns.
    pub fn widen(&self, width: usize, pad_id: u32) -> Batch {
        assert!(width >= self.width);
        let mut ids = Vec::with_capacity(self.rows * width);
        let mut mask = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            ids.extend_from_slice(self.row(r));
            ids.extend(std::iter::repeat_n(pad_id, width - self.width));
            mask.extend_from_slice(self.row_mask(r));
            mask.extend(std::iter::repeat_n(0, width - self.width));
        }
        Batch {
            ids,
            mask,
            rows: self.rows,
            width,
            labels: self.labels.clone(),
        }
    }
}

/// Pads the sequences selected by `group` into one batch. `labels` may be
/// empty when the batch is for inference.
pub fn collate(seqs: &[TokenSeq], labels: &[Label], group: &[usize], pad_id: u32) -> Result<Batch> {
    if group.is_empty() {
        return Err(Error::invalid("cannot collate an empty group"));
    }
    if let Some(&bad) = group.iter().find(|&&i| i >= seqs.len()) {
        return Err(Error::invalid(format!("index {bad} out of range for {} sequences", seqs.len())));
    }
    if !labels.is_empty() && labels.len() != seqs.len() {
        return Err(Error::shape(format!("{} labels for {} sequences", labels.len(), seqs.len())));
    }
    let width = group.iter().map(|&i| seqs[i].len()).max().unwrap_or(0);
    let mut ids = Vec::with_capacity(group.len() * width);
    let mut mask = Vec::with_capacity(group.len() * width);
    for &i in group {
        let s = &seqs[i].ids;
        ids.extend_from_slice(s);
        ids.extend(std::iter::repeat_n(pad_id, width - s.len()));
        mask.extend(std::iter::repeat_n(1u8, s.len()));
        mask.extend(std::iter::repeat_n(0u8, width - s.len()));
    }
    let labels = if labels.is_empty() {
        Vec::new()
    } else {
        group.iter().map(|&i| labels[i].clone()).collect()
    };
    Ok(Batch {
        ids,
        mask,
        rows: group.len(),
        width,
        labels,
    })
}
