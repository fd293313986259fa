//! Multiview feature space: TF-IDF word unigrams, TF-IDF phrase n-grams
//! (bigrams and trigrams) and the structural block.
//!
//! Column layout is `[word block | phrase block | structural block]`. Each
//! TF-IDF block is L2-normalized on its own; structural values are raw.

mod structural;

use std::collections::HashMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::corpus::{Message, Preprocessor};
use crate::error::{Error, Result};
use crate::sparse::SparseVec;

pub use structural::{structural_features, N_STRUCTURAL, STRUCTURAL_NAMES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Word,
    Phrase,
    Structural,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Word, Family::Phrase, Family::Structural];

    pub fn index(self) -> usize {
        match self {
            Family::Word => 0,
            Family::Phrase => 1,
            Family::Structural => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VocabQuotas {
    pub word: usize,
    pub phrase: usize,
}

impl Default for VocabQuotas {
    fn default() -> Self {
        VocabQuotas {
            word: 7000,
            phrase: 3000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub id: u64,
    pub values: SparseVec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureSpace {
    pub preprocessor: Preprocessor,
    pub quotas: VocabQuotas,
    /// Word terms in column order (lexicographic).
    pub word_vocab: Vec<String>,
    /// Phrase terms (space-joined) in column order (lexicographic).
    pub phrase_vocab: Vec<String>,
    pub structural_names: Vec<String>,
    /// One entry per TF-IDF column (word block then phrase block).
    pub idf: Vec<f64>,
    pub family: Vec<Family>,
    /// Per-column training mean; the attribution background for linear models.
    pub mean: Vec<f64>,
    /// Per-column training standard deviation (population).
    pub std: Vec<f64>,
    #[serde(skip)]
    word_index: HashMap<String, usize>,
    #[serde(skip)]
    phrase_index: HashMap<String, usize>,
}

impl PartialEq for FeatureSpace {
    fn eq(&self, other: &Self) -> bool {
        self.preprocessor == other.preprocessor
            && self.quotas == other.quotas
            && self.word_vocab == other.word_vocab
            && self.phrase_vocab == other.phrase_vocab
            && self.structural_names == other.structural_names
            && self.idf == other.idf
            && self.family == other.family
            && self.mean == other.mean
            && self.std == other.std
    }
}

/// Bigrams and trigrams over a token sequence, space-joined.
pub fn phrase_ngrams(tokens: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    for n in 2..=3 {
        out.extend(tokens.windows(n).map(|w| w.join(" ")));
    }
    out
}

/// Top `quota` terms by document frequency, ties broken lexicographically.
/// Returns the chosen terms sorted lexicographically with their df.
fn top_by_df(df: HashMap<String, usize>, quota: usize, min_df: usize) -> Vec<(String, usize)> {
    let mut ranked: Vec<(String, usize)> = df.into_iter().filter(|(_, d)| *d >= min_df).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(quota);
    ranked.sort_by(|a, b| a.0.cmp(&b.0));
    ranked
}

fn doc_freq<I: IntoIterator<Item = String>>(docs: impl Iterator<Item = I>) -> (HashMap<String, usize>, usize) {
    let mut df: HashMap<String, usize> = HashMap::new();
    let mut n = 0;
    for doc in docs {
        n += 1;
        let mut terms: Vec<String> = doc.into_iter().collect();
        terms.sort();
        terms.dedup();
        for t in terms {
            *df.entry(t).or_insert(0) += 1;
        }
    }
    (df, n)
}

pub fn idf(n_docs: usize, df: usize) -> f64 {
    ((1.0 + n_docs as f64) / (1.0 + df as f64)).ln() + 1.0
}

impl FeatureSpace {
    /// Fits vocabularies, idf weights and column statistics on the training
    /// split. Quotas shrink (with a warning) when there are too few candidates.
    pub fn fit(train: &[Message], preprocessor: Preprocessor, quotas: VocabQuotas) -> FeatureSpace {
        let token_lists: Vec<Vec<String>> = train.iter().map(|m| preprocessor.tokens(&m.text)).collect();
        let (word_df, n_docs) = doc_freq(token_lists.iter().map(|t| t.iter().cloned()));
        let (phrase_df, _) = doc_freq(token_lists.iter().map(|t| phrase_ngrams(t)));

        // unigrams were already filtered by min_df in the preprocessor
        let words = top_by_df(word_df, quotas.word, 1);
        let phrases = top_by_df(phrase_df, quotas.phrase, preprocessor.min_df());
        if words.len() < quotas.word {
            warn!("word vocabulary shrunk to {} (quota {})", words.len(), quotas.word);
        }
        if phrases.len() < quotas.phrase {
            warn!("phrase vocabulary shrunk to {} (quota {})", phrases.len(), quotas.phrase);
        }

        let mut family = Vec::new();
        family.extend(std::iter::repeat_n(Family::Word, words.len()));
        family.extend(std::iter::repeat_n(Family::Phrase, phrases.len()));
        family.extend(std::iter::repeat_n(Family::Structural, N_STRUCTURAL));
        let idf_w: Vec<f64> = words
            .iter()
            .chain(phrases.iter())
            .map(|(_, d)| idf(n_docs, *d))
            .collect();

        let mut space = FeatureSpace {
            preprocessor,
            quotas,
            word_vocab: words.into_iter().map(|(t, _)| t).collect(),
            phrase_vocab: phrases.into_iter().map(|(t, _)| t).collect(),
            structural_names: STRUCTURAL_NAMES.iter().map(|s| s.to_string()).collect(),
            idf: idf_w,
            family,
            mean: Vec::new(),
            std: Vec::new(),
            word_index: HashMap::new(),
            phrase_index: HashMap::new(),
        };
        space.rebuild_index();

        let dim = space.dim();
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for (m, tokens) in train.iter().zip(&token_lists) {
            for (c, v) in space.vectorize_tokens(tokens, &m.text).iter() {
                sum[c] += v;
                sq[c] += v * v;
            }
        }
        let n = n_docs.max(1) as f64;
        space.mean = sum.iter().map(|s| s / n).collect();
        space.std = sq
            .iter()
            .zip(&space.mean)
            .map(|(q, mu)| (q / n - mu * mu).max(0.0).sqrt())
            .collect();
        space
    }

    /// Must be called after deserializing.
    pub fn rebuild_index(&mut self) {
        self.word_index = self
            .word_vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        self.phrase_index = self
            .phrase_vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), self.word_vocab.len() + i))
            .collect();
    }

    pub fn dim(&self) -> usize {
        self.word_vocab.len() + self.phrase_vocab.len() + self.structural_names.len()
    }

    pub fn n_tfidf(&self) -> usize {
        self.word_vocab.len() + self.phrase_vocab.len()
    }

    pub fn structural_offset(&self) -> usize {
        self.n_tfidf()
    }

    pub fn word_column(&self, term: &str) -> Option<usize> {
        self.word_index.get(term).copied()
    }

    pub fn phrase_column(&self, term: &str) -> Option<usize> {
        self.phrase_index.get(term).copied()
    }

    pub fn column_name(&self, col: usize) -> String {
        let nw = self.word_vocab.len();
        let nt = self.n_tfidf();
        if col < nw {
            format!("word:{}", self.word_vocab[col])
        } else if col < nt {
            format!("phrase:{}", self.phrase_vocab[col - nw])
        } else {
            format!("struct:{}", self.structural_names[col - nt])
        }
    }

    pub fn vectorize(&self, msg: &Message) -> FeatureVector {
        let tokens = self.preprocessor.tokens(&msg.text);
        FeatureVector {
            id: msg.id,
            values: self.vectorize_tokens(&tokens, &msg.text),
        }
    }

    /// TF-IDF blocks from preprocessed tokens plus structural values from raw text.
    pub fn vectorize_tokens(&self, tokens: &[String], raw: &str) -> SparseVec {
        let mut counts: HashMap<usize, f64> = HashMap::new();
        for t in tokens {
            if let Some(c) = self.word_column(t) {
                *counts.entry(c).or_insert(0.0) += 1.0;
            }
        }
        for p in phrase_ngrams(tokens) {
            if let Some(c) = self.phrase_column(&p) {
                *counts.entry(c).or_insert(0.0) += 1.0;
            }
        }
        let nw = self.word_vocab.len();
        let mut pairs: Vec<(usize, f64)> = counts.into_iter().map(|(c, n)| (c, n * self.idf[c])).collect();
        pairs.sort_by_key(|p| p.0);
        let norm = |block: &mut dyn Iterator<Item = &mut (usize, f64)>| {
            let items: Vec<&mut (usize, f64)> = block.collect();
            let n2: f64 = items.iter().map(|p| p.1 * p.1).sum::<f64>().sqrt();
            if n2 > 0.0 {
                for p in items {
                    p.1 /= n2;
                }
            }
        };
        norm(&mut pairs.iter_mut().filter(|p| p.0 < nw));
        norm(&mut pairs.iter_mut().filter(|p| p.0 >= nw));

        let off = self.structural_offset();
        pairs.extend(
            structural_features(raw)
                .iter()
                .enumerate()
                .map(|(i, &v)| (off + i, v)),
        );
        SparseVec::from_pairs(pairs)
    }

    /// Column ids of one family.
    pub fn columns_of(&self, family: Family) -> impl Iterator<Item = usize> + '_ {
        self.family
            .iter()
            .enumerate()
            .filter(move |(_, f)| **f == family)
            .map(|(i, _)| i)
    }

    pub fn check(&self) -> Result<()> {
        if self.family.len() != self.dim() || self.idf.len() != self.n_tfidf() {
            return Err(Error::invalid("feature space tables have inconsistent lengths"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Label;

    fn msgs(texts: &[&str]) -> Vec<Message> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| Message {
                id: i as u64,
                text: t.to_string(),
                label: Label::Negative,
                split: None,
            })
            .collect()
    }

    fn space(texts: &[&str], quotas: VocabQuotas) -> FeatureSpace {
        let train = msgs(texts);
        let pre = Preprocessor::fit(train.iter().map(|m| m.text.as_str()), Vec::new(), 1);
        FeatureSpace::fit(&train, pre, quotas)
    }

    #[test]
    fn word_vocab_by_df_then_lexicographic() {
        let s = space(&["a b", "a c"], VocabQuotas { word: 2, phrase: 10 });
        assert_eq!(s.word_vocab, vec!["a", "b"]);
    }

    #[test]
    fn idf_of_ubiquitous_term_is_one() {
        assert_eq!(idf(5, 5), 1.0);
        let s = space(&["x y", "x z", "x"], VocabQuotas { word: 10, phrase: 10 });
        assert_eq!(s.idf[s.word_column("x").unwrap()], 1.0);
    }

    #[test]
    fn quota_shrinks_to_available() {
        let s = space(&["a b c"], VocabQuotas::default());
        assert_eq!(s.word_vocab.len(), 3);
        // min_df = 1 here so the single bigram pair and trigram survive
        assert_eq!(s.phrase_vocab, vec!["a b", "a b c", "b c"]);
        assert_eq!(s.dim(), 3 + 3 + N_STRUCTURAL);
    }

    #[test]
    fn families_partition_columns() {
        let s = space(&["a b c", "b c d"], VocabQuotas::default());
        let total: usize = Family::ALL.iter().map(|f| s.columns_of(*f).count()).sum();
        assert_eq!(total, s.dim());
        assert_eq!(s.columns_of(Family::Structural).count(), N_STRUCTURAL);
    }

    #[test]
    fn single_token_gives_unit_word_block() {
        let s = space(&["hello world", "other words"], VocabQuotas::default());
        let v = s.vectorize_tokens(&["hello".to_string()], "hello");
        let c = s.word_column("hello").unwrap();
        assert_eq!(v.get(c), 1.0);
        let word_entries: Vec<_> = v.iter().filter(|(c, _)| *c < s.word_vocab.len()).collect();
        assert_eq!(word_entries.len(), 1);
    }

    #[test]
    fn empty_message_has_no_tfidf_entries() {
        let s = space(&["hello world"], VocabQuotas::default());
        let v = s.vectorize_tokens(&[], "");
        assert!(v.is_empty());
    }

    #[test]
    fn tfidf_blocks_are_unit_norm() {
        let s = space(&["free prize call now", "call me later now", "prize draw"], VocabQuotas::default());
        let toks: Vec<String> = ["free", "prize", "call", "now"].iter().map(|t| t.to_string()).collect();
        let v = s.vectorize_tokens(&toks, "free prize call now");
        let nw = s.word_vocab.len();
        let w: f64 = v.iter().filter(|(c, _)| *c < nw).map(|(_, x)| x * x).sum();
        let p: f64 = v
            .iter()
            .filter(|(c, _)| *c >= nw && *c < s.n_tfidf())
            .map(|(_, x)| x * x)
            .sum();
        assert!((w - 1.0).abs() < 1e-9);
        assert!((p - 1.0).abs() < 1e-9);
    }

    #[test]
    fn serde_roundtrip_keeps_lookup() {
        let s = space(&["a b c", "b c d"], VocabQuotas::default());
        let json = serde_json::to_string(&s).unwrap();
        let mut back: FeatureSpace = serde_json::from_str(&json).unwrap();
        back.rebuild_index();
        assert_eq!(back, s);
        assert_eq!(back.word_column("d"), s.word_column("d"));
        assert_eq!(back.phrase_column("b c"), s.phrase_column("b c"));
    }
}
