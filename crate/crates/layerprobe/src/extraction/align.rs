//! Word/subword alignment by character-span overlap.

use super::tokenizer::CharSpan;
use super::ExtractionError;

/// Maps each word to the ordered indices of subwords overlapping it.
///
/// Subword spans must be ordered and non-overlapping (the tokenizer
/// contract). Words with no overlapping subword — typically words beyond the
/// truncation horizon — map to the empty list.
pub fn align_subwords(
    word_boundaries: &[CharSpan],
    subword_spans: &[CharSpan],
) -> Result<Vec<Vec<usize>>, ExtractionError> {
    for span in subword_spans {
        if span.start > span.end {
            return Err(ExtractionError::TokenizerContract(format!(
                "subword span {span} is inverted"
            )));
        }
    }
    for window in subword_spans.windows(2) {
        let (a, b) = (window[0], window[1]);
        if b.start < a.end {
            return Err(ExtractionError::TokenizerContract(format!(
                "subword spans {a} and {b} are out of order or overlapping"
            )));
        }
    }

    let mut alignment = Vec::with_capacity(word_boundaries.len());
    let mut cursor = 0;
    for word in word_boundaries {
        // Subword spans are ordered, so the scan never moves backwards past a
        // span that ended before this word started.
        while cursor < subword_spans.len() && subword_spans[cursor].end <= word.start {
            cursor += 1;
        }
        let mut indices = Vec::new();
        let mut probe = cursor;
        while probe < subword_spans.len() && subword_spans[probe].start < word.end {
            if subword_spans[probe].overlaps(word) {
                indices.push(probe);
            }
            probe += 1;
        }
        alignment.push(indices);
    }
    Ok(alignment)
}
