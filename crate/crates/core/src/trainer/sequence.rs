use crate::encoder::{concat_summaries, SummaryEmbeddings};
use crate::error::{Error, Result};
use crate::model::{tokenize, EmbeddingSequence, TokenId};

pub const QUESTION_PREFIX: &str = "Q: ";
pub const ANSWER_DELIMITER: &str = "\nA: ";
/// Byte closing every answer, so greedy decoding learns where to stop.
pub const ANSWER_END: u8 = b'\n';

/// Tokens of the question template up to and including the answer delimiter.
pub fn prompt_tokens(question: &str) -> Vec<TokenId> {
    tokenize(&format!("{QUESTION_PREFIX}{question}{ANSWER_DELIMITER}"))
}

/// Per-token flag: does predicting this token contribute to the loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LossMask(pub Vec<bool>);

impl LossMask {
    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSequence {
    pub prefix: EmbeddingSequence,
    pub tokens: Vec<TokenId>,
    pub mask: LossMask,
}

impl TrainingSequence {
    /// `(row, target)` pairs over the whole input: the hidden state at `row`
    /// predicts token `target`.
    pub(crate) fn targets(&self) -> Vec<(usize, TokenId)> {
        let p = self.prefix.len();
        self.mask
            .0
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| (p + i - 1, self.tokens[i]))
            .collect()
    }
}

/// `[summaries in chunk order; Q: question \nA: answer \n]`, with the loss
/// on the answer bytes and the closing newline. An empty answer has nothing
/// to learn and gets an all-false mask.
pub fn build_training_sequence(
    summaries: &[SummaryEmbeddings],
    question: &str,
    answer: &str,
    d_model: usize,
    window: usize,
) -> Result<TrainingSequence> {
    let mut ordered: Vec<&SummaryEmbeddings> = summaries.iter().collect();
    ordered.sort_by_key(|s| s.chunk_index);
    if let Some(bad) = ordered.iter().find(|s| s.rows.ncols() != d_model) {
        return Err(Error::ShapeMismatch(format!(
            "summary rows of chunk {} are {} wide, model width is {d_model}",
            bad.chunk_index,
            bad.rows.ncols()
        )));
    }
    let prefix = concat_summaries(d_model, ordered);
    let mut tokens = prompt_tokens(question);
    let answer_start = tokens.len();
    let mut mask = vec![false; answer_start];
    if !answer.is_empty() {
        tokens.extend(tokenize(answer));
        tokens.push(ANSWER_END as TokenId);
        mask.resize(tokens.len(), true);
    }
    let len = prefix.len() + tokens.len();
    if len > window {
        return Err(Error::LengthOverflow { len, window });
    }
    Ok(TrainingSequence {
        prefix,
        tokens,
        mask: LossMask(mask),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn summaries(n: usize, k: usize, d: usize) -> Vec<SummaryEmbeddings> {
        (0..n)
            .map(|i| SummaryEmbeddings {
                chunk_index: i,
                rows: Array2::from_elem((k, d), i as f64),
                source_doc: "d".into(),
                source_token_range: i * 120..(i + 1) * 120,
            })
            .collect()
    }

    #[test]
    fn empty_answer_has_no_loss() {
        let s = build_training_sequence(&[], "why?", "", 8, 256).unwrap();
        assert_eq!(s.mask.count(), 0);
        assert!(s.targets().is_empty());
    }

    #[test]
    fn two_chunks_give_eight_prefix_rows_in_order() {
        let mut sums = summaries(2, 4, 8);
        sums.swap(0, 1);
        let s = build_training_sequence(&sums, "q", "a", 8, 256).unwrap();
        assert_eq!(s.prefix.len(), 8);
        assert_eq!(s.prefix.row(0)[0], 0.0);
        assert_eq!(s.prefix.row(7)[0], 1.0);
    }

    #[test]
    fn mask_covers_answer_and_end_marker() {
        for answer in ["7", "417", "Coco Chanel"] {
            let s = build_training_sequence(&summaries(1, 4, 8), "what is the code for kx?", answer, 8, 256).unwrap();
            assert_eq!(s.mask.count(), tokenize(answer).len() + 1);
            let flagged: Vec<TokenId> = s.targets().iter().map(|t| t.1).collect();
            let mut expected = tokenize(answer);
            expected.push(ANSWER_END as TokenId);
            assert_eq!(flagged, expected);
            // Every target row is the position just before its token.
            for (row, _) in s.targets() {
                assert!(row >= s.prefix.len() + prompt_tokens("what is the code for kx?").len() - 1);
            }
        }
    }

    #[test]
    fn overflow_is_reported() {
        let err = build_training_sequence(&summaries(3, 4, 8), &"x".repeat(40), "y", 8, 50).unwrap_err();
        assert!(matches!(err, Error::LengthOverflow { .. }));
    }
}
