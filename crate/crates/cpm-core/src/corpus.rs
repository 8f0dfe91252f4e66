//! Corpus loading, delexicalization, vocabulary construction and the
//! sum-normalized term-utterance matrix.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::{CpmError, Result};

/// Input layout of a corpus file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    /// One utterance per line, whitespace tokenized.
    Plain,
    /// CoNLL-style blocks: `token<TAB>tag` lines, a final `#intent<TAB>NAME`
    /// line, blank line between utterances.
    Labeled,
}

impl std::str::FromStr for CorpusFormat {
    type Err = CpmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(CorpusFormat::Plain),
            "labeled" => Ok(CorpusFormat::Labeled),
            other => Err(CpmError::Config(format!(
                "unknown corpus format {other:?}, expected \"plain\" or \"labeled\""
            ))),
        }
    }
}

/// Per-utterance annotation carried along for evaluation only.
/// Labels never participate in fitting.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CorpusLabels {
    /// IOB slot tag per token, aligned with the token sequence.
    pub slot_tags: Vec<Vec<String>>,
    /// One intent tag per utterance.
    pub intents: Vec<String>,
}

/// A tokenized utterance corpus. Tokens are lowercased; order is the file order.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Corpus {
    pub utterances: Vec<Vec<String>>,
    pub raw_lines: Vec<String>,
    pub labels: Option<CorpusLabels>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

/// Load a corpus file in the given format.
pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Corpus> {
    let text = fs::read_to_string(path).map_err(|e| CpmError::io(path, e))?;
    parse_corpus(&text, format)
}

/// Parse corpus text. Split out from [`load_corpus`] so in-memory inputs can
/// use the same code path.
pub fn parse_corpus(text: &str, format: CorpusFormat) -> Result<Corpus> {
    match format {
        CorpusFormat::Plain => parse_plain(text),
        CorpusFormat::Labeled => parse_labeled(text),
    }
}

fn parse_plain(text: &str) -> Result<Corpus> {
    let mut utterances = Vec::new();
    let mut raw_lines = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let tokens: Vec<String> = line.split_whitespace().map(|t| t.to_lowercase()).collect();
        utterances.push(tokens);
        raw_lines.push(line.to_string());
    }
    Ok(Corpus {
        utterances,
        raw_lines,
        labels: None,
    })
}

fn parse_labeled(text: &str) -> Result<Corpus> {
    let mut utterances = Vec::new();
    let mut raw_lines = Vec::new();
    let mut slot_tags = Vec::new();
    let mut intents = Vec::new();

    let mut tokens: Vec<String> = Vec::new();
    let mut raw_tokens: Vec<String> = Vec::new();
    let mut tags: Vec<String> = Vec::new();
    let mut intent: Option<String> = None;
    let mut block_start_line = 0usize;

    let mut flush = |tokens: &mut Vec<String>,
                     raw_tokens: &mut Vec<String>,
                     tags: &mut Vec<String>,
                     intent: &mut Option<String>,
                     start: usize|
     -> Result<()> {
        if tokens.is_empty() && intent.is_none() {
            return Ok(());
        }
        if tokens.is_empty() {
            return Err(CpmError::Format {
                line: start,
                message: "labeled block has an intent but no tokens".into(),
            });
        }
        let it = intent.take().ok_or_else(|| CpmError::Format {
            line: start,
            message: "labeled block is missing its #intent line".into(),
        })?;
        utterances.push(std::mem::take(tokens));
        raw_lines.push(raw_tokens.join(" "));
        raw_tokens.clear();
        slot_tags.push(std::mem::take(tags));
        intents.push(it);
        Ok(())
    };

    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            flush(
                &mut tokens,
                &mut raw_tokens,
                &mut tags,
                &mut intent,
                block_start_line,
            )?;
            continue;
        }
        if tokens.is_empty() && intent.is_none() {
            block_start_line = lineno;
        }
        let mut parts = line.splitn(2, '\t');
        let first = parts.next().unwrap_or("");
        let second = parts.next();
        match second {
            None => {
                return Err(CpmError::Format {
                    line: lineno,
                    message: format!("expected token<TAB>tag, got {line:?}"),
                });
            }
            Some(rest) if rest.contains('\t') => {
                return Err(CpmError::Format {
                    line: lineno,
                    message: format!("more than one tag on line {line:?}"),
                });
            }
            Some(rest) => {
                if first == "#intent" {
                    if intent.is_some() {
                        return Err(CpmError::Format {
                            line: lineno,
                            message: "duplicate #intent line in block".into(),
                        });
                    }
                    intent = Some(rest.to_string());
                } else if intent.is_some() {
                    return Err(CpmError::Format {
                        line: lineno,
                        message: "token line after #intent line".into(),
                    });
                } else if rest.trim().is_empty() {
                    return Err(CpmError::Format {
                        line: lineno,
                        message: format!("token {first:?} has an empty tag"),
                    });
                } else {
                    tokens.push(first.to_lowercase());
                    raw_tokens.push(first.to_string());
                    tags.push(rest.to_string());
                }
            }
        }
    }
    flush(
        &mut tokens,
        &mut raw_tokens,
        &mut tags,
        &mut intent,
        block_start_line,
    )?;

    Ok(Corpus {
        labels: Some(CorpusLabels { slot_tags, intents }),
        utterances,
        raw_lines,
    })
}

/// Maps surface phrases (possibly multi-token, lowercase) to placeholder tokens.
#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    /// phrase tokens -> placeholder, grouped by phrase length for longest-match scans.
    entries: HashMap<Vec<String>, String>,
    max_len: usize,
}

impl Lexicon {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, phrase: &str, placeholder: &str) {
        let tokens: Vec<String> = phrase.split_whitespace().map(|t| t.to_lowercase()).collect();
        if tokens.is_empty() {
            return;
        }
        self.max_len = self.max_len.max(tokens.len());
        self.entries.insert(tokens, placeholder.to_string());
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Load a `phrase<TAB>placeholder` file, one entry per line.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CpmError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lex = Lexicon::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.splitn(2, '\t');
            let phrase = parts.next().unwrap_or("");
            let placeholder = parts.next().ok_or_else(|| CpmError::Format {
                line: idx + 1,
                message: format!("expected phrase<TAB>placeholder, got {line:?}"),
            })?;
            lex.insert(phrase, placeholder.trim());
        }
        Ok(lex)
    }
}

/// Replace lexicon phrases with their category placeholders.
///
/// Deterministic left-to-right scan; at each position the longest matching
/// phrase wins. A collapsed multi-token phrase keeps the tag of its first
/// token so slot tags stay aligned with the token sequence.
pub fn delexicalize(corpus: &Corpus, lexicon: &Lexicon) -> Corpus {
    if lexicon.is_empty() {
        return corpus.clone();
    }
    let mut utterances = Vec::with_capacity(corpus.len());
    let mut slot_tags: Vec<Vec<String>> = Vec::new();

    for (u, tokens) in corpus.utterances.iter().enumerate() {
        let tags = corpus.labels.as_ref().map(|l| &l.slot_tags[u]);
        let mut out_tokens = Vec::with_capacity(tokens.len());
        let mut out_tags = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            let longest = (1..=lexicon.max_len.min(tokens.len() - i))
                .rev()
                .find_map(|len| {
                    lexicon
                        .entries
                        .get(&tokens[i..i + len])
                        .map(|ph| (len, ph.clone()))
                });
            match longest {
                Some((len, placeholder)) => {
                    out_tokens.push(placeholder);
                    if let Some(tags) = tags {
                        out_tags.push(tags[i].clone());
                    }
                    i += len;
                }
                None => {
                    out_tokens.push(tokens[i].clone());
                    if let Some(tags) = tags {
                        out_tags.push(tags[i].clone());
                    }
                    i += 1;
                }
            }
        }
        utterances.push(out_tokens);
        if tags.is_some() {
            slot_tags.push(out_tags);
        }
    }

    Corpus {
        utterances,
        raw_lines: corpus.raw_lines.clone(),
        labels: corpus.labels.as_ref().map(|l| CorpusLabels {
            slot_tags,
            intents: l.intents.clone(),
        }),
    }
}

/// Apply the same delexicalization to a single token sequence (inference path).
pub fn delexicalize_tokens(tokens: &[String], lexicon: &Lexicon) -> Vec<String> {
    if lexicon.is_empty() {
        return tokens.to_vec();
    }
    let mut out = Vec::with_capacity(tokens.len());
    let mut i = 0;
    while i < tokens.len() {
        let longest = (1..=lexicon.max_len.min(tokens.len() - i))
            .rev()
            .find_map(|len| {
                lexicon
                    .entries
                    .get(&tokens[i..i + len])
                    .map(|ph| (len, ph.clone()))
            });
        match longest {
            Some((len, placeholder)) => {
                out.push(placeholder);
                i += len;
            }
            None => {
                out.push(tokens[i].clone());
                i += 1;
            }
        }
    }
    out
}

/// Ordered vocabulary of terms that clear the frequency threshold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    /// Distinct terms in first-occurrence order.
    pub terms: Vec<String>,
    /// term -> row id, a bijection onto 0..N-1.
    pub index: HashMap<String, usize>,
    pub min_frequency: usize,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn id(&self, term: &str) -> Option<usize> {
        self.index.get(term).copied()
    }
}

/// Build the vocabulary: terms with corpus-wide count below `min_frequency`
/// are excluded, the rest keep first-occurrence order.
pub fn build_vocabulary(corpus: &Corpus, min_frequency: usize) -> Result<Vocabulary> {
    build_vocabulary_filtered(corpus, min_frequency, None)
}

/// Vocabulary construction with an optional stopword set removed up front.
pub fn build_vocabulary_filtered(
    corpus: &Corpus,
    min_frequency: usize,
    stopwords: Option<&HashSet<String>>,
) -> Result<Vocabulary> {
    if min_frequency < 1 {
        return Err(CpmError::Config(
            "min_frequency must be at least 1".into(),
        ));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut first_seen: Vec<&str> = Vec::new();
    for utt in &corpus.utterances {
        for tok in utt {
            if let Some(sw) = stopwords {
                if sw.contains(tok.as_str()) {
                    continue;
                }
            }
            let entry = counts.entry(tok.as_str()).or_insert(0);
            if *entry == 0 {
                first_seen.push(tok.as_str());
            }
            *entry += 1;
        }
    }
    let mut terms = Vec::new();
    let mut index = HashMap::new();
    for term in first_seen {
        if counts[term] >= min_frequency {
            index.insert(term.to_string(), terms.len());
            terms.push(term.to_string());
        }
    }
    if terms.is_empty() {
        return Err(CpmError::Config(format!(
            "vocabulary is empty at min_frequency={min_frequency}; lower the threshold"
        )));
    }
    Ok(Vocabulary {
        terms,
        index,
        min_frequency,
    })
}

/// Sum-normalized term-utterance matrix: N terms x M kept utterances.
#[derive(Debug, Clone, PartialEq)]
pub struct TermUtteranceMatrix {
    /// Every kept column sums to 1 and is entry-wise non-negative.
    pub x: DMatrix<f64>,
    /// Column -> original corpus index; utterances emptied by vocabulary
    /// filtering are dropped and absent from this map.
    pub kept_utterance_ids: Vec<usize>,
}

impl TermUtteranceMatrix {
    pub fn n_terms(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_utterances(&self) -> usize {
        self.x.ncols()
    }

    /// Original corpus ids that were dropped (no in-vocabulary tokens).
    pub fn dropped_utterance_ids(&self, corpus_len: usize) -> Vec<usize> {
        let kept: HashSet<usize> = self.kept_utterance_ids.iter().copied().collect();
        (0..corpus_len).filter(|i| !kept.contains(i)).collect()
    }
}

/// Build the term-utterance matrix X: entry (i, j) is the count of term i in
/// utterance j divided by the utterance's in-vocabulary token total.
pub fn build_matrix(corpus: &Corpus, vocab: &Vocabulary) -> Result<TermUtteranceMatrix> {
    if vocab.is_empty() {
        return Err(CpmError::Config("vocabulary is empty".into()));
    }
    let n = vocab.len();
    let mut columns: Vec<f64> = Vec::new();
    let mut kept = Vec::new();

    let mut counts = vec![0usize; n];
    for (j, utt) in corpus.utterances.iter().enumerate() {
        counts.iter_mut().for_each(|c| *c = 0);
        let mut total = 0usize;
        for tok in utt {
            if let Some(i) = vocab.id(tok) {
                counts[i] += 1;
                total += 1;
            }
        }
        if total == 0 {
            continue;
        }
        let denom = total as f64;
        columns.extend(counts.iter().map(|&c| c as f64 / denom));
        kept.push(j);
    }

    if kept.is_empty() {
        return Err(CpmError::Config(
            "every utterance was dropped: no in-vocabulary tokens anywhere".into(),
        ));
    }
    let m = kept.len();
    let x = DMatrix::from_vec(n, m, columns);
    Ok(TermUtteranceMatrix {
        x,
        kept_utterance_ids: kept,
    })
}

/// Load a stopword file: one term per line, lowercased.
pub fn load_stopwords(path: &Path) -> Result<HashSet<String>> {
    let text = fs::read_to_string(path).map_err(|e| CpmError::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.trim().to_lowercase())
        .filter(|l| !l.is_empty())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain(text: &str) -> Corpus {
        parse_corpus(text, CorpusFormat::Plain).unwrap()
    }

    #[test]
    fn plain_lowercases_and_splits() {
        let c = plain("What is EWR\n");
        assert_eq!(c.len(), 1);
        assert_eq!(c.utterances[0], vec!["what", "is", "ewr"]);
        assert_eq!(c.raw_lines[0], "What is EWR");
    }

    #[test]
    fn labeled_mismatched_counts_reports_line() {
        // three tokens, one missing its tag
        let text = "show\tO\nme\tO\nflights\n#intent\tflight\n";
        let err = parse_corpus(text, CorpusFormat::Labeled).unwrap_err();
        match err {
            CpmError::Format { line, .. } => assert_eq!(line, 3),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn labeled_blocks_parse_tokens_tags_and_intent() {
        let text = "Show\tO\nme\tO\nEWR\tB-code\n#intent\tabbreviation\n\nhi\tO\n#intent\tgreeting\n";
        let c = parse_corpus(text, CorpusFormat::Labeled).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.utterances[0], vec!["show", "me", "ewr"]);
        let labels = c.labels.as_ref().unwrap();
        assert_eq!(labels.slot_tags[0], vec!["O", "O", "B-code"]);
        assert_eq!(labels.intents, vec!["abbreviation", "greeting"]);
        assert_eq!(c.raw_lines[0], "Show me EWR");
    }

    #[test]
    fn labeled_block_missing_intent_is_an_error() {
        let text = "show\tO\nme\tO\n";
        assert!(matches!(
            parse_corpus(text, CorpusFormat::Labeled),
            Err(CpmError::Format { .. })
        ));
    }

    #[test]
    fn mini_corpus_has_120_utterances() {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/mini_corpus.txt");
        let c = load_corpus(Path::new(path), CorpusFormat::Plain).unwrap();
        assert_eq!(c.len(), 120);
    }

    #[test]
    fn labeled_mini_corpus_matches_plain_tokens() {
        let plain_path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/mini_corpus.txt");
        let labeled_path = concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/../../data/mini_corpus_labeled.txt"
        );
        let p = load_corpus(Path::new(plain_path), CorpusFormat::Plain).unwrap();
        let l = load_corpus(Path::new(labeled_path), CorpusFormat::Labeled).unwrap();
        assert_eq!(p.utterances, l.utterances);
        let labels = l.labels.unwrap();
        for (tags, toks) in labels.slot_tags.iter().zip(&l.utterances) {
            assert_eq!(tags.len(), toks.len());
        }
    }

    #[test]
    fn delexicalize_multi_token_phrase() {
        let c = plain("from san francisco\n");
        let mut lex = Lexicon::new();
        lex.insert("san francisco", "city-name");
        let d = delexicalize(&c, &lex);
        assert_eq!(d.utterances[0], vec!["from", "city-name"]);
    }

    #[test]
    fn delexicalize_empty_lexicon_is_noop() {
        let c = plain("to new york\n");
        let d = delexicalize(&c, &Lexicon::new());
        assert_eq!(d, c);
    }

    #[test]
    fn delexicalize_longest_match_left_to_right() {
        let c = plain("to new york from new york\n");
        let mut lex = Lexicon::new();
        lex.insert("new york", "city-name");
        let d = delexicalize(&c, &lex);
        assert_eq!(
            d.utterances[0],
            vec!["to", "city-name", "from", "city-name"]
        );
    }

    #[test]
    fn delexicalize_prefers_longer_phrase() {
        let c = plain("salt lake city\n");
        let mut lex = Lexicon::new();
        lex.insert("salt lake city", "city-name");
        lex.insert("salt lake", "lake-name");
        let d = delexicalize(&c, &lex);
        assert_eq!(d.utterances[0], vec!["city-name"]);
    }

    #[test]
    fn delexicalize_is_idempotent() {
        let c = plain("from san francisco to denver\n");
        let mut lex = Lexicon::new();
        lex.insert("san francisco", "city-name");
        lex.insert("denver", "city-name");
        let once = delexicalize(&c, &lex);
        let twice = delexicalize(&once, &lex);
        assert_eq!(once, twice);
    }

    #[test]
    fn vocabulary_threshold_and_order() {
        let c = plain("a b a\nb c\n");
        let v = build_vocabulary(&c, 2).unwrap();
        assert_eq!(v.terms, vec!["a", "b"]);
        assert_eq!(v.id("a"), Some(0));
        assert_eq!(v.id("c"), None);
    }

    #[test]
    fn vocabulary_min_frequency_one_keeps_everything() {
        let c = plain("a b a\nb c\n");
        let v = build_vocabulary(&c, 1).unwrap();
        assert_eq!(v.terms, vec!["a", "b", "c"]);
    }

    #[test]
    fn vocabulary_empty_result_is_config_error() {
        let c = plain("a b c\n");
        assert!(matches!(
            build_vocabulary(&c, 2),
            Err(CpmError::Config(_))
        ));
    }

    #[test]
    fn matrix_column_is_normalized_counts() {
        let c = plain("a a b\n");
        let v = build_vocabulary(&c, 1).unwrap();
        let m = build_matrix(&c, &v).unwrap();
        assert_eq!(m.x.nrows(), 2);
        assert!((m.x[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.x[(1, 0)] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn matrix_drops_out_of_vocabulary_columns() {
        let c = plain("a b\nc\na a\n");
        // vocab built with threshold 2 keeps only "a"
        let v = build_vocabulary(&c, 2).unwrap();
        assert_eq!(v.terms, vec!["a"]);
        let m = build_matrix(&c, &v).unwrap();
        assert_eq!(m.kept_utterance_ids, vec![0, 2]);
        assert_eq!(m.dropped_utterance_ids(c.len()), vec![1]);
    }

    #[test]
    fn mini_corpus_columns_sum_to_one() {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/mini_corpus.txt");
        let c = load_corpus(Path::new(path), CorpusFormat::Plain).unwrap();
        let v = build_vocabulary(&c, 2).unwrap();
        let m = build_matrix(&c, &v).unwrap();
        assert_eq!(m.n_utterances(), 120);
        for j in 0..m.n_utterances() {
            let s: f64 = m.x.column(j).sum();
            assert!((s - 1.0).abs() <= 1e-12, "column {j} sums to {s}");
            assert!(m.x.column(j).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn identical_token_multisets_share_a_column() {
        let c = plain("b a a\na a b\na b\n");
        let v = build_vocabulary(&c, 1).unwrap();
        let m = build_matrix(&c, &v).unwrap();
        let d01 = (m.x.column(0) - m.x.column(1)).norm();
        let d02 = (m.x.column(0) - m.x.column(2)).norm();
        assert_eq!(d01, 0.0);
        assert!(d02 > 0.0);
    }

    #[test]
    fn construction_is_deterministic() {
        let text = "show me flights\nwhat is ewr\nshow me fares\n";
        let c1 = plain(text);
        let c2 = plain(text);
        let v1 = build_vocabulary(&c1, 1).unwrap();
        let v2 = build_vocabulary(&c2, 1).unwrap();
        assert_eq!(v1.terms, v2.terms);
        let m1 = build_matrix(&c1, &v1).unwrap();
        let m2 = build_matrix(&c2, &v2).unwrap();
        assert_eq!(m1.x, m2.x);
    }

    #[test]
    fn stopword_filtering_removes_terms() {
        let c = plain("the cat the dog\nthe bird the cat\n");
        let mut sw = HashSet::new();
        sw.insert("the".to_string());
        let v = build_vocabulary_filtered(&c, 1, Some(&sw)).unwrap();
        assert_eq!(v.terms, vec!["cat", "dog", "bird"]);
    }
}
