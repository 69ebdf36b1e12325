//! Edit-distance error rates.

use crate::error::{Error, Result};

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(hyp: &[T], reference: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=reference.len()).collect();
    let mut cur = vec![0; reference.len() + 1];
    for (i, h) in hyp.iter().enumerate() {
        cur[0] = i + 1;
        for (j, r) in reference.iter().enumerate() {
            let sub = prev[j] + usize::from(h != r);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[reference.len()]
}

/// Corpus error rate in percent: total edits over total reference length.
pub fn corpus_error_rate<T: PartialEq>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument(
            "no hypothesis/reference pairs".into(),
        ));
    }
    let (edits, total) = pairs.iter().fold((0, 0), |(e, n), (h, r)| {
        (e + edit_distance(h, r), n + r.len())
    });
    if total == 0 {
        return Err(Error::InvalidArgument(
            "total reference length is zero".into(),
        ));
    }
    Ok(100.0 * edits as f64 / total as f64)
}
