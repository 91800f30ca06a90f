//! Bilingual dictionary: TSV loading, source-length filtering and exact
//! normalized-key lookup.
//!
//! Keys are normalized with Unicode NFC, lowercasing, trimming and collapsing
//! internal whitespace runs. Accents are preserved.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

/// Default filter threshold on the number of source-side words.
pub const DEFAULT_MAX_SOURCE_WORDS: usize = 5;
/// Default number of matches returned per lookup.
pub const DEFAULT_MAX_MATCHES: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DictionaryEntry {
    pub source_text: String,
    pub target_text: String,
    /// 0-based position of the entry in the file it was read from.
    pub ordinal: usize,
}

/// Canonical lookup key: NFC, lowercase, whitespace trimmed and collapsed.
pub fn normalize(text: &str) -> String {
    let composed: String = text.nfc().collect();
    let lowered = composed.to_lowercase();
    lowered.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Number of whitespace-separated words after normalization.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Reads a `source<TAB>target` file. Blank lines and lines starting with `#`
/// are skipped; ordinals count kept entries in file order.
pub fn load_raw(path: impl AsRef<Path>) -> Result<Vec<DictionaryEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_raw(&text).map_err(|(line, message)| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    })
}

/// Parses dictionary TSV text. Errors carry the 1-based line number.
pub fn parse_raw(text: &str) -> std::result::Result<Vec<DictionaryEntry>, (usize, String)> {
    let mut entries = Vec::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line = raw_line.strip_suffix('\r').unwrap_or(raw_line);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err((
                idx + 1,
                format!("expected 2 tab-separated fields, found {}", fields.len()),
            ));
        }
        let (source, target) = (fields[0].trim(), fields[1].trim());
        if source.is_empty() || target.is_empty() {
            return Err((idx + 1, "empty source or target field".to_string()));
        }
        entries.push(DictionaryEntry {
            source_text: source.to_string(),
            target_text: target.to_string(),
            ordinal: entries.len(),
        });
    }
    Ok(entries)
}

/// An immutable filtered lexicon with a normalized-key index.
#[derive(Debug, Clone, Default)]
pub struct Dictionary {
    entries: Vec<DictionaryEntry>,
    index: HashMap<String, Vec<usize>>,
    max_source_words: usize,
}

impl Dictionary {
    pub fn entries(&self) -> &[DictionaryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_source_words(&self) -> usize {
        self.max_source_words
    }

    /// Entries whose normalized source equals `normalize(query)`, in ordinal
    /// order, at most `max_matches` of them.
    pub fn lookup(&self, query: &str, max_matches: usize) -> Vec<DictionaryEntry> {
        self.lookup_refs(query, max_matches).into_iter().cloned().collect()
    }

    pub fn lookup_refs(&self, query: &str, max_matches: usize) -> Vec<&DictionaryEntry> {
        match self.index.get(&normalize(query)) {
            Some(positions) => positions
                .iter()
                .take(max_matches)
                .map(|&p| &self.entries[p])
                .collect(),
            None => Vec::new(),
        }
    }

    /// True when at least one entry matches `query`.
    pub fn contains(&self, query: &str) -> bool {
        self.index.contains_key(&normalize(query))
    }

    /// Writes the kept entries back out as `source<TAB>target` lines.
    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        for e in &self.entries {
            writeln!(out, "{}\t{}", e.source_text, e.target_text).expect("write to Vec");
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Keeps entries whose source has at most `max_source_words` words and builds
/// the lookup index. Ordinals of kept entries are preserved.
pub fn filter_entries(raw: &[DictionaryEntry], max_source_words: usize) -> Dictionary {
    assert!(max_source_words >= 1, "max_source_words must be at least 1");
    let entries: Vec<DictionaryEntry> = raw
        .iter()
        .filter(|e| word_count(&normalize(&e.source_text)) <= max_source_words)
        .cloned()
        .collect();
    let mut index: HashMap<String, Vec<usize>> = HashMap::new();
    for (pos, e) in entries.iter().enumerate() {
        index.entry(normalize(&e.source_text)).or_default().push(pos);
    }
    // positions were pushed in entry order, which is ordinal order
    Dictionary {
        entries,
        index,
        max_source_words,
    }
}

/// Free-function form of [`Dictionary::lookup`].
pub fn lookup(dict: &Dictionary, query: &str, max_matches: usize) -> Vec<DictionaryEntry> {
    dict.lookup(query, max_matches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn entry(s: &str, t: &str, ordinal: usize) -> DictionaryEntry {
        DictionaryEntry {
            source_text: s.into(),
            target_text: t.into(),
            ordinal,
        }
    }

    #[test]
    fn parses_pairs_in_file_order() {
        let got = parse_raw("casa\tmiichi\nperro\terü\n").unwrap();
        assert_eq!(got, vec![entry("casa", "miichi", 0), entry("perro", "erü", 1)]);
    }

    #[test]
    fn empty_text_gives_no_entries() {
        assert!(parse_raw("").unwrap().is_empty());
    }

    #[test]
    fn missing_tab_reports_line_number() {
        assert_eq!(parse_raw("casa").unwrap_err().0, 1);
        assert_eq!(parse_raw("a\tb\n\nc\td\te\n").unwrap_err().0, 3);
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let got = parse_raw("# header\n\ncasa\tmiichi\r\n").unwrap();
        assert_eq!(got, vec![entry("casa", "miichi", 0)]);
    }

    #[test]
    fn load_raw_reports_io_error() {
        assert!(matches!(load_raw("/nonexistent/dict.tsv"), Err(Error::Io { .. })));
    }

    #[test]
    fn long_sources_are_filtered_out() {
        let raw = vec![entry("el perro grande y feroz que ladra", "x", 0), entry("casa", "miichi", 1)];
        let d = filter_entries(&raw, 5);
        assert_eq!(d.len(), 1);
        assert_eq!(d.entries()[0].ordinal, 1);
    }

    #[test]
    fn threshold_one_keeps_single_words() {
        let raw = vec![entry("casa", "a", 0), entry("perro negro", "b", 1)];
        let d = filter_entries(&raw, 1);
        assert_eq!(d.entries().iter().map(|e| e.source_text.as_str()).collect::<Vec<_>>(), ["casa"]);
    }

    #[test]
    fn lookup_returns_first_matches_by_ordinal() {
        let raw: Vec<_> = (0..7).map(|i| entry("agua", &format!("t{i}"), i)).collect();
        let d = filter_entries(&raw, 5);
        let got = d.lookup("agua", 5);
        assert_eq!(got.iter().map(|e| e.ordinal).collect::<Vec<_>>(), [0, 1, 2, 3, 4]);
        assert_eq!(d.lookup("agua", 1).len(), 1);
        assert!(d.lookup("fuego", 5).is_empty());
    }

    #[test]
    fn lookup_is_case_and_space_insensitive_but_accent_sensitive() {
        let d = filter_entries(&[entry("casa", "miichi", 0), entry("está", "x", 1)], 5);
        assert_eq!(d.lookup("CASA", 5).len(), 1);
        assert_eq!(d.lookup("  casa ", 5).len(), 1);
        assert!(d.lookup("esta", 5).is_empty());
        // decomposed "está" normalizes to the composed form
        assert_eq!(d.lookup("esta\u{301}", 5).len(), 1);
    }

    #[test]
    fn normalize_collapses_internal_whitespace() {
        assert_eq!(normalize("  Perro \t  Negro "), "perro negro");
    }

    fn arb_entries() -> impl Strategy<Value = Vec<DictionaryEntry>> {
        prop::collection::vec(("[a-cA-C]{1,3}( [a-c]{1,3}){0,7}", "[x-z]{1,4}"), 0..40).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (s, t))| entry(&s, &t, i))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn filter_is_idempotent_and_bounded(raw in arb_entries(), k in 1usize..7) {
            let once = filter_entries(&raw, k);
            let twice = filter_entries(once.entries(), k);
            prop_assert_eq!(once.entries(), twice.entries());
            for e in once.entries() {
                prop_assert!(word_count(&e.source_text) <= k);
            }
        }

        #[test]
        fn every_kept_entry_is_reachable(raw in arb_entries(), m in 1usize..6, q in "[a-cA-C]{1,3}") {
            let d = filter_entries(&raw, 5);
            for e in d.entries() {
                prop_assert!(d.lookup(&e.source_text, usize::MAX).contains(e));
            }
            let got = d.lookup(&q, m);
            prop_assert!(got.len() <= m);
            prop_assert_eq!(&got, &d.lookup(&q, m));
            prop_assert!(got.windows(2).all(|w| w[0].ordinal < w[1].ordinal));
        }
    }
}
