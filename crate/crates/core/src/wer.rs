//! Word error rate by unit-cost Levenshtein alignment.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub reference_len: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    pub fn wer(&self) -> f64 {
        self.errors() as f64 / self.reference_len as f64
    }

    pub fn add(&mut self, other: &EditCounts) {
        self.substitutions += other.substitutions;
        self.insertions += other.insertions;
        self.deletions += other.deletions;
        self.reference_len += other.reference_len;
    }
}

/// Minimum-edit alignment of `hyp` against `reference`. Among alignments
/// with the fewest errors, substitutions are preferred over
/// insertion/deletion pairs.
pub fn align<T: PartialEq>(hyp: &[T], reference: &[T]) -> Result<EditCounts> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    let (n, m) = (reference.len(), hyp.len());
    // cell = (errors, substitutions, insertions, deletions)
    type Cell = (usize, usize, usize, usize);
    let mut prev: Vec<Cell> = (0..=m).map(|j| (j, 0, j, 0)).collect();
    let mut cur: Vec<Cell> = vec![(0, 0, 0, 0); m + 1];
    for i in 1..=n {
        cur[0] = (i, 0, 0, i);
        for j in 1..=m {
            let same = reference[i - 1] == hyp[j - 1];
            let d = prev[j - 1];
            let diag = if same { d } else { (d.0 + 1, d.1 + 1, d.2, d.3) };
            let u = prev[j];
            let del = (u.0 + 1, u.1, u.2, u.3 + 1);
            let l = cur[j - 1];
            let ins = (l.0 + 1, l.1, l.2 + 1, l.3);
            cur[j] = [diag, del, ins]
                .into_iter()
                .min_by_key(|c| (c.0, usize::MAX - c.1))
                .expect("three candidates");
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let (_, s, ins, del) = prev[m];
    Ok(EditCounts {
        substitutions: s,
        insertions: ins,
        deletions: del,
        reference_len: n,
    })
}

/// `(wer, substitutions, insertions, deletions)`.
pub fn word_error_rate<T: PartialEq>(hyp: &[T], reference: &[T]) -> Result<(f64, usize, usize, usize)> {
    let c = align(hyp, reference)?;
    Ok((c.wer(), c.substitutions, c.insertions, c.deletions))
}

/// Corpus-level WER: total errors over total reference length.
pub fn corpus_wer<T: PartialEq>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<EditCounts> {
    let mut total = EditCounts::default();
    for (hyp, reference) in pairs {
        total.add(&align(hyp, reference)?);
    }
    Ok(total)
}
