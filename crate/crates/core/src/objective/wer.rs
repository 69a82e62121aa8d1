/// Levenshtein distance with unit substitution, insertion and deletion costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Word error rate of one hypothesis. An empty reference gives 0 for an
/// empty hypothesis and 1 otherwise.
pub fn wer<T: PartialEq>(hypothesis: &[T], reference: &[T]) -> f64 {
    if reference.is_empty() {
        return if hypothesis.is_empty() { 0.0 } else { 1.0 };
    }
    edit_distance(hypothesis, reference) as f64 / reference.len() as f64
}

/// Corpus-level WER: total edits over total reference tokens.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WerAccumulator {
    pub edits: usize,
    pub reference_tokens: usize,
}

impl WerAccumulator {
    pub fn add<T: PartialEq>(&mut self, hypothesis: &[T], reference: &[T]) {
        self.edits += edit_distance(hypothesis, reference);
        self.reference_tokens += reference.len();
    }

    pub fn merge(&mut self, other: &WerAccumulator) {
        self.edits += other.edits;
        self.reference_tokens += other.reference_tokens;
    }

    pub fn rate(&self) -> f64 {
        if self.reference_tokens == 0 {
            0.0
        } else {
            self.edits as f64 / self.reference_tokens as f64
        }
    }
}
