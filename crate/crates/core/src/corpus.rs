//! Dataset ingestion, tokenization and stratified splitting.
//!
//! Two input formats are supported: the UCI SMS layout (`<label>\t<text>`,
//! one message per line) and a generic CSV with header-named label and text
//! columns. Labels are mapped to `0` (legitimate) and `1` (spam/phishing).

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DEFAULT_STOPLIST: &str = include_str!("../assets/stopwords_en.txt");

/// Binary gold label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn from_positive(positive: bool) -> Self {
        if positive {
            Label::Positive
        } else {
            Label::Negative
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        match l {
            Label::Negative => 0,
            Label::Positive => 1,
        }
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(Label::Negative),
            1 => Ok(Label::Positive),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub id: u64,
    pub text: String,
    pub label: Label,
    /// `None` until [`split`] assigns the message to a partition.
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedMessage {
    pub id: u64,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetFormat {
    SmsTsv,
    GenericCsv {
        label_column: String,
        text_column: String,
    },
}

fn parse_label(token: &str, row: usize) -> Result<Label> {
    match token.trim().to_ascii_lowercase().as_str() {
        "ham" | "0" | "legit" | "legitimate" | "negative" => Ok(Label::Negative),
        "spam" | "1" | "phishing" | "positive" => Ok(Label::Positive),
        _ => Err(Error::UnknownLabel {
            row,
            token: token.to_string(),
        }),
    }
}

/// Loads a labeled dataset. Row numbers in errors are 1-based; ids follow row order.
pub fn load_dataset(path: &Path, format: &DatasetFormat) -> Result<Vec<Message>> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match format {
        DatasetFormat::SmsTsv => parse_sms_tsv(&raw),
        DatasetFormat::GenericCsv {
            label_column,
            text_column,
        } => parse_generic_csv(&raw, label_column, text_column),
    }
}

pub fn parse_sms_tsv(raw: &str) -> Result<Vec<Message>> {
    let mut out = Vec::new();
    for (idx, line) in raw.lines().enumerate() {
        let row = idx + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let (label, text) = line.split_once('\t').ok_or_else(|| Error::MalformedRow {
            row,
            reason: "missing tab separator".into(),
        })?;
        let label = match label.trim() {
            "ham" => Label::Negative,
            "spam" => Label::Positive,
            other => {
                return Err(Error::UnknownLabel {
                    row,
                    token: other.to_string(),
                })
            }
        };
        push_message(&mut out, row, label, text)?;
    }
    Ok(out)
}

pub fn parse_generic_csv(raw: &str, label_column: &str, text_column: &str) -> Result<Vec<Message>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(raw.as_bytes());
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::invalid(format!("csv has no column named {name:?}")))
    };
    let label_idx = find(label_column)?;
    let text_idx = find(text_column)?;

    let mut out = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        // header is row 1
        let row = idx + 2;
        let record = record.map_err(|e| Error::MalformedRow {
            row,
            reason: e.to_string(),
        })?;
        let (Some(label), Some(text)) = (record.get(label_idx), record.get(text_idx)) else {
            return Err(Error::MalformedRow {
                row,
                reason: "missing label or text field".into(),
            });
        };
        let label = parse_label(label, row)?;
        push_message(&mut out, row, label, text)?;
    }
    Ok(out)
}

fn push_message(out: &mut Vec<Message>, row: usize, label: Label, text: &str) -> Result<()> {
    if text.trim().is_empty() {
        return Err(Error::MalformedRow {
            row,
            reason: "empty text".into(),
        });
    }
    out.push(Message {
        id: out.len() as u64,
        text: text.to_string(),
        label,
        split: None,
    });
    Ok(())
}

pub fn default_stoplist() -> BTreeSet<String> {
    DEFAULT_STOPLIST
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

/// Lowercases and splits on every non-alphanumeric character.
/// Pure-digit tokens are kept.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Stopword and rare-token filter. Document frequencies come from the
/// training split only; only the surviving token set is kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    stoplist: BTreeSet<String>,
    min_df: usize,
    retained: BTreeSet<String>,
}

impl Preprocessor {
    pub fn fit<'a, I>(train_texts: I, stoplist: impl IntoIterator<Item = String>, min_df: usize) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let stoplist: BTreeSet<String> = stoplist.into_iter().collect();
        let mut doc_freq: HashMap<String, usize> = HashMap::new();
        for text in train_texts {
            let unique: HashSet<String> = tokenize(text)
                .into_iter()
                .filter(|t| !stoplist.contains(t))
                .collect();
            for t in unique {
                *doc_freq.entry(t).or_insert(0) += 1;
            }
        }
        let retained = doc_freq
            .into_iter()
            .filter(|(_, df)| *df >= min_df)
            .map(|(t, _)| t)
            .collect();
        Preprocessor {
            stoplist,
            min_df,
            retained,
        }
    }

    pub fn min_df(&self) -> usize {
        self.min_df
    }

    pub fn retained(&self) -> &BTreeSet<String> {
        &self.retained
    }

    pub fn preprocess(&self, msg: &Message) -> TokenizedMessage {
        TokenizedMessage {
            id: msg.id,
            tokens: self.tokens(&msg.text),
        }
    }

    pub fn tokens(&self, text: &str) -> Vec<String> {
        tokenize(text)
            .into_iter()
            .filter(|t| self.retained.contains(t))
            .collect()
    }
}

/// Stratified split. Returns `(train, test)`, each sorted by id, with the
/// `split` field set.
///
/// The train set holds exactly `ceil(ratio * n)` messages; per-class counts
/// use largest-remainder allocation so each class is within one message of
/// `ratio * n_class`.
pub fn split(messages: &[Message], ratio: f64, seed: u64) -> Result<(Vec<Message>, Vec<Message>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("split ratio must be in (0, 1), got {ratio}")));
    }
    let mut by_class: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
    for (i, m) in messages.iter().enumerate() {
        by_class.entry(m.label).or_default().push(i);
    }
    for label in [Label::Negative, Label::Positive] {
        let n = by_class.get(&label).map_or(0, Vec::len);
        if n < 2 {
            return Err(Error::invalid(format!(
                "class {} has {n} member(s); at least 2 are needed to stratify",
                u8::from(label)
            )));
        }
    }

    let n = messages.len();
    let target = ((ratio * n as f64) - 1e-9).ceil() as usize;
    let mut alloc: Vec<(Label, usize, f64)> = by_class
        .iter()
        .map(|(&label, idx)| {
            let exact = ratio * idx.len() as f64;
            let floor = (exact + 1e-9).floor() as usize;
            (label, floor, exact - floor as f64)
        })
        .collect();
    let mut remaining = target.saturating_sub(alloc.iter().map(|a| a.1).sum());
    let mut order: Vec<usize> = (0..alloc.len()).collect();
    order.sort_by(|&a, &b| alloc[b].2.total_cmp(&alloc[a].2).then(a.cmp(&b)));
    for &i in order.iter().cycle().take(order.len() * 2) {
        if remaining == 0 {
            break;
        }
        if alloc[i].1 < by_class[&alloc[i].0].len() {
            alloc[i].1 += 1;
            remaining -= 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_train = vec![false; n];
    for (label, n_train, _) in alloc {
        let mut idx = by_class[&label].clone();
        idx.shuffle(&mut rng);
        for &i in &idx[..n_train] {
            is_train[i] = true;
        }
    }

    let mut train = Vec::with_capacity(target);
    let mut test = Vec::with_capacity(n - target);
    for (m, &t) in messages.iter().zip(&is_train) {
        let mut m = m.clone();
        if t {
            m.split = Some(Split::Train);
            train.push(m);
        } else {
            m.split = Some(Split::Test);
            test.push(m);
        }
    }
    train.sort_by_key(|m| m.id);
    test.sort_by_key(|m| m.id);
    Ok((train, test))
}

/// Drops majority-class training messages until the majority/minority ratio
/// is at most `max_ratio`. Deterministic for a fixed seed.
pub fn subsample_majority(train: &[Message], max_ratio: f64, seed: u64) -> Result<Vec<Message>> {
    if !(max_ratio >= 1.0) {
        return Err(Error::invalid(format!("max_ratio must be >= 1, got {max_ratio}")));
    }
    let pos = train.iter().filter(|m| m.label.is_positive()).count();
    let neg = train.len() - pos;
    let (majority, n_major, n_minor) = if pos > neg {
        (Label::Positive, pos, neg)
    } else {
        (Label::Negative, neg, pos)
    };
    let keep = ((n_minor as f64 * max_ratio).floor() as usize).min(n_major);
    if keep == n_major {
        return Ok(train.to_vec());
    }
    let mut major_idx: Vec<usize> = (0..train.len())
        .filter(|&i| train[i].label == majority)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    major_idx.shuffle(&mut rng);
    let dropped: HashSet<usize> = major_idx[keep..].iter().copied().collect();
    Ok(train
        .iter()
        .enumerate()
        .filter(|(i, _)| !dropped.contains(i))
        .map(|(_, m)| m.clone())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(id: u64, label: Label) -> Message {
        Message {
            id,
            text: format!("message {id}"),
            label,
            split: None,
        }
    }

    #[test]
    fn sms_labels_map_to_binary() {
        let m = parse_sms_tsv("ham\tOk lar...\nspam\tWINNER!!\n").unwrap();
        assert_eq!(m[0].label, Label::Negative);
        assert_eq!(m[0].text, "Ok lar...");
        assert_eq!(m[1].label, Label::Positive);
        assert_eq!((m[0].id, m[1].id), (0, 1));
    }

    #[test]
    fn missing_tab_reports_row() {
        let err = parse_sms_tsv("ham\tfine\nspam no tab here\n").unwrap_err();
        assert!(matches!(err, Error::MalformedRow { row: 2, .. }), "{err}");
    }

    #[test]
    fn unknown_label_names_token() {
        let err = parse_sms_tsv("eggs\thello\n").unwrap_err();
        match err {
            Error::UnknownLabel { row, token } => {
                assert_eq!(row, 1);
                assert_eq!(token, "eggs");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn duplicate_texts_are_kept() {
        let m = parse_sms_tsv("ham\tsame\nham\tsame\n").unwrap();
        assert_eq!(m.len(), 2);
    }

    #[test]
    fn generic_csv_uses_named_columns() {
        let raw = "body,is_phish\n\"hello, friend\",0\nverify your account,phishing\n";
        let m = parse_generic_csv(raw, "is_phish", "body").unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].text, "hello, friend");
        assert_eq!(m[1].label, Label::Positive);
        let err = parse_generic_csv(raw, "label", "body").unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn stopwords_removed_and_lowercased() {
        let stop = ["the", "to"].iter().map(|s| s.to_string());
        let texts = ["Go to THE shop", "go shop"];
        let pre = Preprocessor::fit(texts.iter().copied(), stop, 1);
        assert_eq!(pre.tokens("Go to THE shop"), vec!["go", "shop"]);
        assert!(pre.tokens("").is_empty());
    }

    #[test]
    fn rare_tokens_removed() {
        let pre = Preprocessor::fit(["alpha beta", "alpha gamma"].iter().copied(), Vec::new(), 2);
        assert_eq!(pre.tokens("alpha beta gamma delta"), vec!["alpha"]);
    }

    #[test]
    fn tokenize_strips_punctuation_keeps_digits() {
        assert_eq!(tokenize("Call 0800-123 now!!"), vec!["call", "0800", "123", "now"]);
    }

    #[test]
    fn stratified_split_arithmetic() {
        let mut ms: Vec<Message> = (0..60).map(|i| msg(i, Label::Negative)).collect();
        ms.extend((60..100).map(|i| msg(i, Label::Positive)));
        let (train, test) = split(&ms, 0.5, 7).unwrap();
        let pos = train.iter().filter(|m| m.label.is_positive()).count();
        assert_eq!(train.len() - pos, 30);
        assert_eq!(pos, 20);
        assert_eq!(test.len(), 50);
        assert_eq!(split(&ms, 0.5, 7).unwrap(), (train, test));
    }

    #[test]
    fn split_train_size_is_ceil() {
        // both classes odd: per-class rounding would overshoot
        let mut ms: Vec<Message> = (0..7).map(|i| msg(i, Label::Negative)).collect();
        ms.extend((7..12).map(|i| msg(i, Label::Positive)));
        let (train, test) = split(&ms, 0.5, 1).unwrap();
        assert_eq!(train.len(), 6);
        assert_eq!(test.len(), 6);
    }

    #[test]
    fn split_rejects_tiny_class() {
        let ms = vec![
            msg(0, Label::Negative),
            msg(1, Label::Negative),
            msg(2, Label::Positive),
        ];
        assert!(split(&ms, 0.5, 0).is_err());
        assert!(split(&ms, 1.0, 0).is_err());
    }

    #[test]
    fn subsampling_caps_majority() {
        let mut ms: Vec<Message> = (0..30).map(|i| msg(i, Label::Negative)).collect();
        ms.extend((30..35).map(|i| msg(i, Label::Positive)));
        let out = subsample_majority(&ms, 2.0, 3).unwrap();
        assert_eq!(out.iter().filter(|m| !m.label.is_positive()).count(), 10);
        assert_eq!(out.iter().filter(|m| m.label.is_positive()).count(), 5);
        assert_eq!(out, subsample_majority(&ms, 2.0, 3).unwrap());
    }

    #[test]
    fn label_serializes_as_integer() {
        let m = msg(3, Label::Positive);
        let s = serde_json::to_string(&m).unwrap();
        assert!(s.contains("\"label\":1"), "{s}");
        let back: Message = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
    }
}
