use crate::error::{Error, Result};
use crate::nn::AttentionMask;
use crate::tokenizer::{CLS, EOW, PAD};

/// Padded per-word grid for hierarchical models. Each word row is
/// `[CLS; n_cls] ++ units ++ [EOW] ++ [PAD; ..]`, `n_cls + max_word_len + 1`
/// wide; sequences hold `max_words` rows, unused rows are all PAD.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentedBatch {
    n_cls: usize,
    max_word_len: usize,
    max_words: usize,
    grid: Vec<u32>,
    word_count: Vec<usize>,
}

impl SegmentedBatch {
    /// Builds the grid from per-sequence word lists (unit ids without
    /// separators). Words must already be split to `max_word_len`.
    pub fn new(seqs: &[Vec<Vec<u32>>], n_cls: usize, max_word_len: usize) -> Result<Self> {
        let max_words = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let width = n_cls + max_word_len + 1;
        let mut grid = vec![PAD; seqs.len() * max_words * width];
        for (b, seq) in seqs.iter().enumerate() {
            for (w, word) in seq.iter().enumerate() {
                if word.len() > max_word_len {
                    return Err(Error::Shape(format!(
                        "word of {} units exceeds max_word_len {max_word_len}",
                        word.len()
                    )));
                }
                if let Some(&bad) = word.iter().find(|&&id| id == PAD || id == CLS || id == EOW) {
                    return Err(Error::Shape(format!("word contains reserved id {bad}")));
                }
                let row = &mut grid[(b * max_words + w) * width..][..width];
                row[..n_cls].fill(CLS);
                row[n_cls..n_cls + word.len()].copy_from_slice(word);
                row[n_cls + word.len()] = EOW;
            }
        }
        Ok(SegmentedBatch {
            n_cls,
            max_word_len,
            max_words,
            grid,
            word_count: seqs.iter().map(Vec::len).collect(),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.word_count.len()
    }

    pub fn max_words(&self) -> usize {
        self.max_words
    }

    pub fn n_cls(&self) -> usize {
        self.n_cls
    }

    pub fn max_word_len(&self) -> usize {
        self.max_word_len
    }

    pub fn width(&self) -> usize {
        self.n_cls + self.max_word_len + 1
    }

    pub fn word_count(&self) -> &[usize] {
        &self.word_count
    }

    pub fn grid(&self) -> &[u32] {
        &self.grid
    }

    /// The padded row of word `w` in sequence `b`.
    pub fn row(&self, b: usize, w: usize) -> &[u32] {
        &self.grid[(b * self.max_words + w) * self.width()..][..self.width()]
    }

    /// Units of word `w` in sequence `b` (between the CLS prefix and EOW).
    pub fn word(&self, b: usize, w: usize) -> &[u32] {
        let units = &self.row(b, w)[self.n_cls..];
        let end = units.iter().position(|&id| id == EOW || id == PAD).unwrap_or(units.len());
        &units[..end]
    }

    pub fn words(&self, b: usize) -> Vec<&[u32]> {
        (0..self.word_count[b]).map(|w| self.word(b, w)).collect()
    }

    /// Next-token targets of every word of sequence `b`: its units then EOW.
    pub fn flat_targets(&self, b: usize) -> Vec<Vec<u32>> {
        self.words(b)
            .into_iter()
            .map(|w| w.iter().copied().chain([EOW]).collect())
            .collect()
    }

    /// Units per sequence, counting one separator per word.
    pub fn chars(&self, b: usize) -> usize {
        self.words(b).iter().map(|w| w.len() + 1).sum()
    }

    /// Checks the grid invariants: CLS prefix on every used row, PAD only
    /// after EOW, unused rows all PAD.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Shape(m));
        for b in 0..self.batch_size() {
            for w in 0..self.max_words {
                let row = self.row(b, w);
                if w >= self.word_count[b] {
                    if row.iter().any(|&id| id != PAD) {
                        return bad(format!("unused row {w} of sequence {b} is not padding"));
                    }
                    continue;
                }
                if row[..self.n_cls].iter().any(|&id| id != CLS) {
                    return bad(format!("row {w} of sequence {b} lacks its CLS prefix"));
                }
                let Some(eow) = row[self.n_cls..].iter().position(|&id| id == EOW) else {
                    return bad(format!("row {w} of sequence {b} has no EOW"));
                };
                let tail = &row[self.n_cls + eow + 1..];
                let body = &row[self.n_cls..self.n_cls + eow];
                if tail.iter().any(|&id| id != PAD) || body.iter().any(|&id| id == PAD || id == CLS) {
                    return bad(format!("row {w} of sequence {b} has misplaced padding"));
                }
            }
        }
        Ok(())
    }
}

/// Next-token blocks for a flat decoder: `inputs[i]` is `targets[i]`
/// shifted right behind BOS.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlatBatch {
    pub inputs: Vec<Vec<u32>>,
    pub targets: Vec<Vec<u32>>,
}

impl FlatBatch {
    pub fn from_blocks(blocks: &[Vec<u32>]) -> Self {
        let inputs = blocks
            .iter()
            .map(|b| std::iter::once(crate::tokenizer::BOS).chain(b[..b.len().saturating_sub(1)].iter().copied()).collect())
            .collect();
        FlatBatch {
            inputs,
            targets: blocks.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Batch {
    Flat(FlatBatch),
    Hier(SegmentedBatch),
}

impl Batch {
    pub fn len(&self) -> usize {
        match self {
            Batch::Flat(b) => b.inputs.len(),
            Batch::Hier(b) => b.batch_size(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of predicted tokens, the denominator of the mean loss.
    pub fn target_count(&self) -> usize {
        match self {
            Batch::Flat(b) => b.targets.iter().map(Vec::len).sum(),
            Batch::Hier(b) => (0..b.batch_size()).map(|i| b.chars(i)).sum(),
        }
    }
}

/// Splits a word into consecutive pseudo-words of at most `max_word_len`
/// units. An empty word stays a single empty word.
pub fn split_long_word(units: &[u32], max_word_len: usize) -> Vec<Vec<u32>> {
    if units.is_empty() {
        return vec![Vec::new()];
    }
    units.chunks(max_word_len.max(1)).map(<[u32]>::to_vec).collect()
}

/// Block-diagonal bidirectional mask over words laid out back to back, each
/// occupying `n_cls + len` positions.
pub fn build_encoder_mask(word_lens: &[usize], n_cls: usize) -> Result<AttentionMask> {
    let sizes: Vec<usize> = word_lens.iter().map(|&l| l + n_cls).collect();
    AttentionMask::block_diagonal(&sizes)
}

/// Word-granular causal mask over `groups` groups of `n_cls` positions:
/// a position sees every position of its own group and of earlier groups.
pub fn build_word_causal_mask(groups: usize, n_cls: usize) -> Result<AttentionMask> {
    let n = groups * n_cls;
    AttentionMask::from_fn(n, n, |q, k| k / n_cls <= q / n_cls)
}

/// Causal mask over a padded row of `width` positions of which the first
/// `used` are real.
pub(crate) fn padded_causal_mask(width: usize, used: usize) -> AttentionMask {
    AttentionMask::from_fn(width, width, |q, k| k <= q.min(used - 1)).expect("row 0 always allowed")
}

/// Bidirectional mask over a padded row of `width` positions whose first
/// `used` are real; padding rows still see the real keys.
pub(crate) fn padded_full_mask(width: usize, used: usize) -> AttentionMask {
    AttentionMask::from_fn(width, width, |_, k| k < used).expect("used >= 1")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_layout_and_validation() {
        let seqs = vec![vec![vec![10, 11], vec![12]], vec![vec![13, 14, 15]]];
        let b = SegmentedBatch::new(&seqs, 2, 4).unwrap();
        assert_eq!(b.width(), 7);
        assert_eq!(b.row(0, 0), &[CLS, CLS, 10, 11, EOW, PAD, PAD]);
        assert_eq!(b.row(1, 1), &[PAD; 7]);
        assert_eq!(b.word(1, 0), &[13, 14, 15]);
        assert_eq!(b.flat_targets(0), vec![vec![10, 11, EOW], vec![12, EOW]]);
        assert_eq!(b.chars(0), 5);
        b.validate().unwrap();
        assert!(SegmentedBatch::new(&[vec![vec![1; 5]]], 2, 4).is_err());
    }

    #[test]
    fn encoder_mask_examples() {
        assert_eq!(build_encoder_mask(&[2, 3], 1).unwrap().count_allowed(), 25);
        let one = build_encoder_mask(&[1], 1).unwrap();
        assert_eq!(one.count_allowed(), 4);
    }

    #[test]
    fn pseudo_words() {
        assert_eq!(split_long_word(&[1, 2, 3, 4, 5], 2), vec![vec![1, 2], vec![3, 4], vec![5]]);
        assert_eq!(split_long_word(&[], 2), vec![Vec::<u32>::new()]);
    }
}
