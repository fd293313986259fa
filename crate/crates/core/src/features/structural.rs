//! Handcrafted surface features computed on raw message text.
//!
//! Words are whitespace-delimited. Every ratio is 0 when its denominator is 0.

use std::collections::HashSet;
use std::sync::LazyLock;

use regex::Regex;

pub const N_STRUCTURAL: usize = 17;

pub const STRUCTURAL_NAMES: [&str; N_STRUCTURAL] = [
    "char_count",
    "word_count",
    "avg_word_length",
    "digit_count",
    "digit_ratio",
    "uppercase_char_count",
    "uppercase_ratio",
    "punctuation_count",
    "exclamation_count",
    "question_count",
    "currency_symbol_count",
    "url_count",
    "email_address_count",
    "phone_like_number_count",
    "special_char_count",
    "unique_word_ratio",
    "longest_word_length",
];

const CURRENCY: &[char] = &['$', '£', '€', '¥', '₹', '¢', '₩', '₽', '₤'];

static URL: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b(?:https?://|www\.)\S+|\b[a-z0-9][a-z0-9-]*\.(?:com|net|org|biz|info|co\.uk|uk)\b")
        .unwrap()
});
static EMAIL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"[A-Za-z0-9._%+-]+@[A-Za-z0-9-]+(?:\.[A-Za-z0-9-]+)+").unwrap());
// at least 7 digits, optionally separated by single spaces or dashes
static PHONE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\+?\d(?:[ -]?\d){6,}").unwrap());

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

pub fn structural_features(text: &str) -> [f64; N_STRUCTURAL] {
    let chars: Vec<char> = text.chars().collect();
    let words: Vec<&str> = text.split_whitespace().collect();

    let char_count = chars.len() as f64;
    let word_count = words.len() as f64;
    let word_lengths: Vec<usize> = words.iter().map(|w| w.chars().count()).collect();
    let total_word_len: usize = word_lengths.iter().sum();
    let longest = word_lengths.iter().copied().max().unwrap_or(0);

    let digits = chars.iter().filter(|c| c.is_ascii_digit()).count() as f64;
    let upper = chars.iter().filter(|c| c.is_uppercase()).count() as f64;
    let alpha = chars.iter().filter(|c| c.is_alphabetic()).count() as f64;
    let punct = chars.iter().filter(|c| c.is_ascii_punctuation()).count() as f64;
    let excl = chars.iter().filter(|&&c| c == '!').count() as f64;
    let quest = chars.iter().filter(|&&c| c == '?').count() as f64;
    let currency = chars.iter().filter(|c| CURRENCY.contains(c)).count() as f64;
    let special = chars
        .iter()
        .filter(|c| !c.is_alphanumeric() && !c.is_whitespace() && !c.is_ascii_punctuation())
        .count() as f64;
    let unique: HashSet<String> = words.iter().map(|w| w.to_lowercase()).collect();

    [
        char_count,
        word_count,
        ratio(total_word_len as f64, word_count),
        digits,
        ratio(digits, char_count),
        upper,
        ratio(upper, alpha),
        punct,
        excl,
        quest,
        currency,
        URL.find_iter(text)
            .filter(|m| !text[..m.start()].ends_with('@'))
            .count() as f64,
        EMAIL.find_iter(text).count() as f64,
        PHONE.find_iter(text).count() as f64,
        special,
        ratio(unique.len() as f64, word_count),
        longest as f64,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feature(f: &[f64; N_STRUCTURAL], name: &str) -> f64 {
        f[STRUCTURAL_NAMES.iter().position(|n| *n == name).unwrap()]
    }

    #[test]
    fn simple_counts() {
        let f = structural_features("ab cd");
        assert_eq!(feature(&f, "char_count"), 5.0);
        assert_eq!(feature(&f, "word_count"), 2.0);
        assert_eq!(feature(&f, "avg_word_length"), 2.0);
        assert_eq!(feature(&f, "unique_word_ratio"), 1.0);
        assert_eq!(feature(&f, "longest_word_length"), 2.0);
    }

    #[test]
    fn empty_text_is_all_zero() {
        assert!(structural_features("").iter().all(|&v| v == 0.0));
    }

    #[test]
    fn currency_and_uppercase() {
        let f = structural_features("WIN £500");
        assert_eq!(feature(&f, "uppercase_char_count"), 3.0);
        assert_eq!(feature(&f, "currency_symbol_count"), 1.0);
        assert_eq!(feature(&f, "digit_count"), 3.0);
        assert_eq!(feature(&f, "uppercase_ratio"), 1.0);
        assert_eq!(feature(&f, "special_char_count"), 1.0);
    }

    #[test]
    fn digits_and_exclamations() {
        let f = structural_features("Call 0800 now!!");
        assert_eq!(feature(&f, "digit_count"), 4.0);
        assert_eq!(feature(&f, "exclamation_count"), 2.0);
        assert_eq!(feature(&f, "punctuation_count"), 2.0);
        assert_eq!(feature(&f, "phone_like_number_count"), 0.0);
    }

    #[test]
    fn urls_emails_phones() {
        let f = structural_features(
            "Visit www.win.com or http://x.co/a, mail me@site.org, call 09061 701 461 or 87121",
        );
        assert_eq!(feature(&f, "url_count"), 2.0);
        assert_eq!(feature(&f, "email_address_count"), 1.0);
        assert_eq!(feature(&f, "phone_like_number_count"), 1.0);
    }

    #[test]
    fn never_nan() {
        for t in ["", " ", "!!!", "\t\n", "£", "ÄÖÜ äöü"] {
            assert!(structural_features(t).iter().all(|v| v.is_finite()), "{t:?}");
        }
    }
}
