//! Edit-distance evaluation: character error rate, word error rate, and
//! sequence error rate, with per-sample operation breakdowns.
//!
//! All text is NFC-normalized before comparison so that composed and
//! decomposed Cyrillic forms compare equal. Corpus rates are micro-averaged:
//! total edit operations over total reference length.

use std::io::Write;

use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

/// Minimal edit-script operation counts for one sequence pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EditOps {
    pub sub: usize,
    pub ins: usize,
    pub del: usize,
}

impl EditOps {
    pub fn total(&self) -> usize {
        self.sub + self.ins + self.del
    }
}

/// Character- and word-level breakdown for one (reference, hypothesis) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EditCounts {
    pub chars: EditOps,
    pub words: EditOps,
    /// Reference length in characters (N of the CER denominator).
    pub ref_chars: usize,
    /// Reference length in whitespace-separated words (N of the WER denominator).
    pub ref_words: usize,
}

/// Unit-cost Levenshtein distance with an operation breakdown recovered by
/// traceback. Ties resolve substitution > deletion > insertion, so the
/// breakdown is deterministic.
pub fn levenshtein<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditOps {
    let n = reference.len();
    let m = hypothesis.len();
    let mut dp = vec![0usize; (n + 1) * (m + 1)];
    let idx = |i: usize, j: usize| i * (m + 1) + j;
    for i in 0..=n {
        dp[idx(i, 0)] = i;
    }
    for j in 0..=m {
        dp[idx(0, j)] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            dp[idx(i, j)] = (dp[idx(i - 1, j - 1)] + cost)
                .min(dp[idx(i - 1, j)] + 1)
                .min(dp[idx(i, j - 1)] + 1);
        }
    }

    let mut ops = EditOps::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && reference[i - 1] == hypothesis[j - 1] && dp[idx(i, j)] == dp[idx(i - 1, j - 1)]
        {
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && dp[idx(i, j)] == dp[idx(i - 1, j - 1)] + 1 {
            ops.sub += 1;
            i -= 1;
            j -= 1;
        } else if i > 0 && dp[idx(i, j)] == dp[idx(i - 1, j)] + 1 {
            ops.del += 1;
            i -= 1;
        } else {
            ops.ins += 1;
            j -= 1;
        }
    }
    debug_assert_eq!(ops.total(), dp[idx(n, m)]);
    ops
}

pub fn nfc(text: &str) -> String {
    text.nfc().collect()
}

/// Character- and word-level edit counts for one pair, after NFC.
pub fn edit_counts(reference: &str, hypothesis: &str) -> EditCounts {
    let r = nfc(reference);
    let h = nfc(hypothesis);
    let rc: Vec<char> = r.chars().collect();
    let hc: Vec<char> = h.chars().collect();
    let rw: Vec<&str> = r.split_whitespace().collect();
    let hw: Vec<&str> = h.split_whitespace().collect();
    EditCounts {
        chars: levenshtein(&rc, &hc),
        words: levenshtein(&rw, &hw),
        ref_chars: rc.len(),
        ref_words: rw.len(),
    }
}

/// Character error rate for one pair: (S+I+D)/N. The reference must be
/// non-empty; empty references only aggregate at corpus level.
pub fn cer(reference: &str, hypothesis: &str) -> Result<f64> {
    let c = edit_counts(reference, hypothesis);
    if c.ref_chars == 0 {
        return Err(Error::UndefinedRate("CER with empty reference".into()));
    }
    Ok(c.chars.total() as f64 / c.ref_chars as f64)
}

/// Word error rate for one pair: (Sw+Iw+Dw)/Nw over whitespace-split tokens.
pub fn wer(reference: &str, hypothesis: &str) -> Result<f64> {
    let c = edit_counts(reference, hypothesis);
    if c.ref_words == 0 {
        return Err(Error::UndefinedRate("WER with empty reference".into()));
    }
    Ok(c.words.total() as f64 / c.ref_words as f64)
}

fn ser_key(text: &str) -> String {
    nfc(text).trim_end().to_string()
}

/// Sequence error rate: fraction of samples whose hypothesis differs from
/// the reference after NFC normalization and trailing-whitespace strip.
pub fn ser<S: AsRef<str>, H: AsRef<str>>(samples: &[(S, H)]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Usage("SER over an empty sample list".into()));
    }
    let wrong = samples
        .iter()
        .filter(|(r, h)| ser_key(r.as_ref()) != ser_key(h.as_ref()))
        .count();
    Ok(wrong as f64 / samples.len() as f64)
}

/// One evaluated sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleEval {
    pub id: String,
    pub reference: String,
    pub hypothesis: String,
    pub counts: EditCounts,
}

/// Corpus-level evaluation: micro-averaged CER/WER plus SER, with the
/// per-sample rows that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub samples: Vec<SampleEval>,
    pub cer: f64,
    pub wer: f64,
    pub ser: f64,
}

impl EvalReport {
    pub fn from_triples<I, S1, S2, S3>(triples: I) -> Result<EvalReport>
    where
        I: IntoIterator<Item = (S1, S2, S3)>,
        S1: Into<String>,
        S2: Into<String>,
        S3: Into<String>,
    {
        let samples: Vec<SampleEval> = triples
            .into_iter()
            .map(|(id, r, h)| {
                let reference = r.into();
                let hypothesis = h.into();
                let counts = edit_counts(&reference, &hypothesis);
                SampleEval {
                    id: id.into(),
                    reference,
                    hypothesis,
                    counts,
                }
            })
            .collect();
        if samples.is_empty() {
            return Err(Error::Usage("evaluation over an empty sample list".into()));
        }
        let tot_char_edits: usize = samples.iter().map(|s| s.counts.chars.total()).sum();
        let tot_chars: usize = samples.iter().map(|s| s.counts.ref_chars).sum();
        let tot_word_edits: usize = samples.iter().map(|s| s.counts.words.total()).sum();
        let tot_words: usize = samples.iter().map(|s| s.counts.ref_words).sum();
        if tot_chars == 0 {
            return Err(Error::UndefinedRate("corpus CER with no reference characters".into()));
        }
        if tot_words == 0 {
            return Err(Error::UndefinedRate("corpus WER with no reference words".into()));
        }
        let pairs: Vec<(&str, &str)> = samples
            .iter()
            .map(|s| (s.reference.as_str(), s.hypothesis.as_str()))
            .collect();
        Ok(EvalReport {
            cer: tot_char_edits as f64 / tot_chars as f64,
            wer: tot_word_edits as f64 / tot_words as f64,
            ser: ser(&pairs)?,
            samples,
        })
    }

    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }

    /// Tab-separated report: header, one row per sample, aggregate footer.
    pub fn write_tsv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "id\tref\thyp\tS\tI\tD\tcer")?;
        for s in &self.samples {
            let rate = if s.counts.ref_chars > 0 {
                format!("{:.6}", s.counts.chars.total() as f64 / s.counts.ref_chars as f64)
            } else {
                "-".to_string()
            };
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                s.id, s.reference, s.hypothesis, s.counts.chars.sub, s.counts.chars.ins, s.counts.chars.del, rate
            )?;
        }
        writeln!(w, "#summary\tcer={:.6}\twer={:.6}\tser={:.6}", self.cer, self.wer, self.ser)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn chars(s: &str) -> Vec<char> {
        s.chars().collect()
    }

    #[test]
    fn identical_sequences_have_no_edits() {
        let ops = levenshtein(&chars("same"), &chars("same"));
        assert_eq!(ops, EditOps::default());
    }

    #[test]
    fn single_substitution_hand_table() {
        // abcd vs abed: only the DP diagonal carries cost, S=1.
        let ops = levenshtein(&chars("abcd"), &chars("abed"));
        assert_eq!(ops, EditOps { sub: 1, ins: 0, del: 0 });
    }

    #[test]
    fn empty_reference_counts_insertions() {
        let ops = levenshtein(&chars(""), &chars("ab"));
        assert_eq!(ops, EditOps { sub: 0, ins: 2, del: 0 });
    }

    #[test]
    fn cer_examples() {
        assert_eq!(cer("abcd", "abcd").unwrap(), 0.0);
        assert_eq!(cer("abcd", "abed").unwrap(), 0.25);
        assert_eq!(cer("a", "abc").unwrap(), 2.0);
        assert!(matches!(cer("", "x"), Err(Error::UndefinedRate(_))));
    }

    #[test]
    fn wer_examples() {
        assert_eq!(wer("a b c d", "a b c d").unwrap(), 0.0);
        assert_eq!(wer("a b c d", "a x c d").unwrap(), 0.25);
        assert_eq!(wer("a b", "x y").unwrap(), 1.0);
        assert!(matches!(wer("  ", "x"), Err(Error::UndefinedRate(_))));
    }

    #[test]
    fn ser_examples() {
        let all_right = [("a", "a"), ("b", "b")];
        assert_eq!(ser(&all_right).unwrap(), 0.0);
        let all_wrong = [("a", "x"), ("b", "y")];
        assert_eq!(ser(&all_wrong).unwrap(), 1.0);
        let one_of_four = [("a", "a"), ("b", "b"), ("c", "c"), ("d", "x")];
        assert_eq!(ser(&one_of_four).unwrap(), 0.25);
        assert!(ser::<&str, &str>(&[]).is_err());
    }

    #[test]
    fn ser_ignores_trailing_whitespace_and_nfc() {
        // "ё" composed vs "е" + combining diaeresis
        let pairs = [("ё", "\u{0435}\u{0308}"), ("x", "x ")];
        assert_eq!(ser(&pairs).unwrap(), 0.0);
    }

    #[test]
    fn nfc_applies_before_char_comparison() {
        assert_eq!(cer("ё", "\u{0435}\u{0308}").unwrap(), 0.0);
    }

    #[test]
    fn report_micro_average_and_tsv_footer() {
        let report = EvalReport::from_triples(vec![
            ("s0", "abcd", "abcd"),
            ("s1", "abcd", "abed"),
            ("s2", "ab", "ab"),
        ])
        .unwrap();
        // 1 edit over 10 reference chars.
        assert!((report.cer - 0.1).abs() < 1e-12);
        assert!((report.ser - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(report.sample_count(), 3);

        let mut buf = Vec::new();
        report.write_tsv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 3 + 1);
        assert!(text.lines().last().unwrap().starts_with("#summary"));
    }

    /// Exhaustive minimal edit distance by recursion; independent of the DP.
    fn brute_distance(a: &[char], b: &[char]) -> usize {
        if a.is_empty() {
            return b.len();
        }
        if b.is_empty() {
            return a.len();
        }
        let sub = brute_distance(&a[1..], &b[1..]) + usize::from(a[0] != b[0]);
        let del = brute_distance(&a[1..], b) + 1;
        let ins = brute_distance(a, &b[1..]) + 1;
        sub.min(del).min(ins)
    }

    proptest! {
        #[test]
        fn distance_matches_exhaustive_search(a in "[ab c]{0,6}", b in "[ab c]{0,6}") {
            let (ac, bc) = (chars(&a), chars(&b));
            prop_assert_eq!(levenshtein(&ac, &bc).total(), brute_distance(&ac, &bc));
        }

        #[test]
        fn distance_is_symmetric(a in "[abcd]{0,8}", b in "[abcd]{0,8}") {
            let (ac, bc) = (chars(&a), chars(&b));
            prop_assert_eq!(levenshtein(&ac, &bc).total(), levenshtein(&bc, &ac).total());
        }

        #[test]
        fn triangle_inequality(a in "[abc]{0,6}", b in "[abc]{0,6}", c in "[abc]{0,6}") {
            let (ac, bc, cc) = (chars(&a), chars(&b), chars(&c));
            let ab = levenshtein(&ac, &bc).total();
            let bc_d = levenshtein(&bc, &cc).total();
            let ac_d = levenshtein(&ac, &cc).total();
            prop_assert!(ac_d <= ab + bc_d);
        }
    }
}
