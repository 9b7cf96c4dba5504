use std::collections::BTreeSet;

use crate::error::{Error, Result};

/// A character-level corpus: sorted vocabulary plus contiguous train and
/// validation token streams.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocab: Vec<char>,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
}

/// Inputs and next-token targets, both indexed `[step][batch]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
}

impl Corpus {
    /// The last `valid_fraction` of the text becomes validation data.
    pub fn from_text(text: &str, valid_fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&valid_fraction) {
            return Err(Error::Parameter(format!("validation fraction {valid_fraction} outside [0, 1)")));
        }
        let chars: Vec<char> = text.chars().collect();
        if chars.len() < 4 {
            return Err(Error::Parameter("corpus needs at least four characters".into()));
        }
        let vocab: Vec<char> = chars.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        let ids: Vec<usize> = chars.iter().map(|c| vocab.binary_search(c).expect("in vocabulary")).collect();
        let split = ids.len() - ((ids.len() as f64 * valid_fraction).round() as usize);
        Ok(Self { vocab, train: ids[..split].to_vec(), valid: ids[split..].to_vec() })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.vocab.binary_search(&c).map_err(|_| Error::Parameter(format!("character {c:?} not in vocabulary")))
            })
            .collect()
    }

    /// Perplexity of the corpus under its own unigram distribution,
    /// `exp(−Σ p log p)`.
    pub fn unigram_perplexity(&self) -> f64 {
        let mut counts = vec![0usize; self.vocab.len()];
        for &t in self.train.iter().chain(&self.valid) {
            counts[t] += 1;
        }
        let n = (self.train.len() + self.valid.len()) as f64;
        let h: f64 = counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum();
        h.exp()
    }
}

/// Splits `tokens` into `batch` contiguous streams and cuts them into
/// windows of at most `unroll` steps. Every stream position except the last
/// is predicted exactly once.
pub fn batchify(tokens: &[usize], batch: usize, unroll: usize) -> Result<Vec<Window>> {
    if batch == 0 || unroll == 0 {
        return Err(Error::Parameter("batch size and unroll length must be positive".into()));
    }
    let stream = tokens.len() / batch;
    if stream < 2 {
        return Err(Error::Parameter(format!("{} tokens cannot fill {batch} streams", tokens.len())));
    }
    let mut windows = Vec::new();
    let mut pos = 0;
    while pos + 1 < stream {
        let steps = unroll.min(stream - 1 - pos);
        let inputs = (0..steps).map(|t| (0..batch).map(|b| tokens[b * stream + pos + t]).collect()).collect();
        let targets = (0..steps).map(|t| (0..batch).map(|b| tokens[b * stream + pos + t + 1]).collect()).collect();
        windows.push(Window { inputs, targets });
        pos += steps;
    }
    Ok(windows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_and_vocabulary() {
        let c = Corpus::from_text("abcabcabca", 0.2).unwrap();
        assert_eq!(c.vocab, vec!['a', 'b', 'c']);
        assert_eq!(c.train, vec![0, 1, 2, 0, 1, 2, 0, 1]);
        assert_eq!(c.valid, vec![2, 0]);
        assert!(c.encode("d").is_err());
    }

    #[test]
    fn unigram_perplexity_of_uniform_text_is_vocab_size() {
        let c = Corpus::from_text("abcdabcdabcd", 0.25).unwrap();
        assert!((c.unigram_perplexity() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn windows_cover_each_stream_once() {
        let tokens: Vec<usize> = (0..23).collect();
        let w = batchify(&tokens, 2, 4).unwrap();
        // streams 0..11 and 11..22, 10 predictions each
        assert_eq!(w.iter().map(|x| x.inputs.len()).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(w[0].inputs[0], vec![0, 11]);
        assert_eq!(w[2].targets[1], vec![10, 21]);
        assert!(batchify(&tokens, 20, 4).is_err());
    }
}
