//! Human-readable artifacts derived from a fitted simplex: per-vertex top
//! terms, nearest utterances, mined term combinations, intent-vertex
//! frequency tables and radar series of convex coefficients.

use std::collections::{BTreeMap, HashMap, HashSet};

use nalgebra::DMatrix;
use serde::Serialize;

use crate::corpus::{Corpus, Vocabulary};
use crate::mvsa::{SimplexModel, UtteranceDecomposition};
use crate::{CpmError, Result};

/// Mined term combinations never exceed this subset size.
const PATTERN_MAX_SIZE: usize = 4;
/// Combinations below this support are dropped.
const PATTERN_MIN_SUPPORT: usize = 2;

/// How vertex coordinates are ranked into top terms. Lifted vertices can have
/// negative coordinates; the default ranks by signed value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TermRanking {
    #[default]
    Signed,
    Absolute,
}

#[derive(Debug, Clone, Serialize)]
pub struct TermWeight {
    pub term: String,
    pub term_id: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct VertexTopTerms {
    pub vertex_id: usize,
    pub terms: Vec<TermWeight>,
}

/// Rank terms per vertex by the vertex's original-coordinate values,
/// descending, ties toward the lower vocabulary index. `k` larger than the
/// vocabulary is truncated.
pub fn top_terms(
    model: &SimplexModel,
    vocab: &Vocabulary,
    k: usize,
    ranking: TermRanking,
) -> Result<Vec<VertexTopTerms>> {
    if model.v.nrows() != vocab.len() {
        return Err(CpmError::Shape(format!(
            "vertex matrix has {} term rows but the vocabulary has {}",
            model.v.nrows(),
            vocab.len()
        )));
    }
    let k = k.min(vocab.len());
    let mut out = Vec::with_capacity(model.vertex_count());
    for j in 0..model.vertex_count() {
        let mut ranked: Vec<(usize, f64)> = model
            .v
            .column(j)
            .iter()
            .enumerate()
            .map(|(i, &w)| (i, w))
            .collect();
        ranked.sort_by(|a, b| {
            let (wa, wb) = match ranking {
                TermRanking::Signed => (a.1, b.1),
                TermRanking::Absolute => (a.1.abs(), b.1.abs()),
            };
            wb.total_cmp(&wa).then(a.0.cmp(&b.0))
        });
        out.push(VertexTopTerms {
            vertex_id: j,
            terms: ranked
                .into_iter()
                .take(k)
                .map(|(i, w)| TermWeight {
                    term: vocab.terms[i].clone(),
                    term_id: i,
                    weight: w,
                })
                .collect(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct NearestUtterance {
    /// Column index into the kept point set.
    pub column: usize,
    /// Original corpus index of the utterance.
    pub utterance_id: usize,
    pub distance: f64,
}

/// Rank utterances by Euclidean distance to a vertex in subspace coordinates.
/// Stable: ties resolve toward the lower column index.
pub fn nearest_utterances(
    model: &SimplexModel,
    p_tilde: &DMatrix<f64>,
    kept_utterance_ids: &[usize],
    vertex_id: usize,
    n: usize,
) -> Result<Vec<NearestUtterance>> {
    if vertex_id >= model.vertex_count() {
        return Err(CpmError::Config(format!(
            "vertex id {vertex_id} out of range, model has {} vertices",
            model.vertex_count()
        )));
    }
    if p_tilde.ncols() != kept_utterance_ids.len() {
        return Err(CpmError::Shape(format!(
            "{} point columns vs {} utterance ids",
            p_tilde.ncols(),
            kept_utterance_ids.len()
        )));
    }
    let vertex = model.v_tilde.column(vertex_id);
    let mut dists: Vec<(usize, f64)> = (0..p_tilde.ncols())
        .map(|j| (j, (p_tilde.column(j) - vertex).norm()))
        .collect();
    dists.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    Ok(dists
        .into_iter()
        .take(n.min(kept_utterance_ids.len()))
        .map(|(j, d)| NearestUtterance {
            column: j,
            utterance_id: kept_utterance_ids[j],
            distance: d,
        })
        .collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct MinedPattern {
    /// Member terms, lexicographic order.
    pub terms: Vec<String>,
    /// Number of neighbouring utterances containing the combination.
    pub support: usize,
    /// Utterance-order rendering from the most frequent neighbour realization.
    pub rendering: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct VertexPatterns {
    pub vertex_id: usize,
    pub patterns: Vec<MinedPattern>,
}

/// Search the top-term list of a vertex for popular term combinations among
/// its nearest neighbouring utterances.
///
/// Each neighbour contributes the intersection of its token set with the
/// vertex's top terms; every subset of that intersection with 2 to
/// [`PATTERN_MAX_SIZE`] members counts once per neighbour. Combinations are
/// ranked by support, then subset size (descending), then lexicographically.
#[allow(clippy::too_many_arguments)]
pub fn mine_patterns(
    model: &SimplexModel,
    p_tilde: &DMatrix<f64>,
    kept_utterance_ids: &[usize],
    corpus: &Corpus,
    vocab: &Vocabulary,
    vertex_id: usize,
    neighbors: usize,
    terms_per_utterance: usize,
    ranking: TermRanking,
) -> Result<Vec<MinedPattern>> {
    let nearest = nearest_utterances(model, p_tilde, kept_utterance_ids, vertex_id, neighbors)?;
    let top = top_terms(model, vocab, terms_per_utterance, ranking)?;
    let top_ids: HashSet<usize> = top[vertex_id].terms.iter().map(|t| t.term_id).collect();

    let mut support: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    let mut renderings: BTreeMap<Vec<usize>, BTreeMap<String, usize>> = BTreeMap::new();

    for nb in &nearest {
        let tokens = &corpus.utterances[nb.utterance_id];
        let token_ids: HashSet<usize> =
            tokens.iter().filter_map(|t| vocab.id(t)).collect();
        let mut overlap: Vec<usize> = token_ids.intersection(&top_ids).copied().collect();
        overlap.sort_unstable();
        if overlap.len() < 2 {
            continue;
        }
        let mut subsets = Vec::new();
        enumerate_subsets(&overlap, PATTERN_MAX_SIZE, &mut subsets);
        for subset in subsets {
            let rendering: Vec<&str> = tokens
                .iter()
                .filter(|t| vocab.id(t).is_some_and(|id| subset.contains(&id)))
                .map(|t| t.as_str())
                .collect();
            *support.entry(subset.clone()).or_insert(0) += 1;
            *renderings
                .entry(subset)
                .or_default()
                .entry(rendering.join(" "))
                .or_insert(0) += 1;
        }
    }

    let mut patterns: Vec<MinedPattern> = support
        .into_iter()
        .filter(|(_, s)| *s >= PATTERN_MIN_SUPPORT)
        .map(|(ids, s)| {
            let terms: Vec<String> = {
                let mut t: Vec<String> =
                    ids.iter().map(|&i| vocab.terms[i].clone()).collect();
                t.sort();
                t
            };
            let rendering = renderings[&ids]
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(r, _)| r.clone())
                .unwrap_or_default();
            MinedPattern {
                terms,
                support: s,
                rendering,
            }
        })
        .collect();
    patterns.sort_by(|a, b| {
        b.support
            .cmp(&a.support)
            .then(b.terms.len().cmp(&a.terms.len()))
            .then(a.terms.cmp(&b.terms))
    });
    Ok(patterns)
}

/// All subsets of `items` (sorted, distinct) with 2..=max_size members.
fn enumerate_subsets(items: &[usize], max_size: usize, out: &mut Vec<Vec<usize>>) {
    fn rec(items: &[usize], start: usize, cur: &mut Vec<usize>, max: usize, out: &mut Vec<Vec<usize>>) {
        if cur.len() >= 2 {
            out.push(cur.clone());
        }
        if cur.len() == max {
            return;
        }
        for i in start..items.len() {
            cur.push(items[i]);
            rec(items, i + 1, cur, max, out);
            cur.pop();
        }
    }
    let mut cur = Vec::new();
    rec(items, 0, &mut cur, max_size, out);
}

#[derive(Debug, Clone, Serialize)]
pub struct IntentVertexRow {
    pub intent: String,
    /// Number of decomposed utterances carrying this intent.
    pub size: usize,
    /// (vertex_id, fraction of the intent's utterances where the vertex ranks
    /// in the top coefficients), descending by fraction.
    pub vertices: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct IntentVertexTable {
    pub top_coeff: usize,
    pub rows: Vec<IntentVertexRow>,
}

/// Per-intent frequency of the vertices that rank among each utterance's
/// `top_coeff` largest coefficients. Intents keep first-occurrence order.
pub fn intent_vertex_table(
    decompositions: &[UtteranceDecomposition],
    corpus: &Corpus,
    top_coeff: usize,
    report_vertices: usize,
) -> Result<IntentVertexTable> {
    let labels = corpus.labels.as_ref().ok_or_else(|| {
        CpmError::LabelsRequired("intent-vertex table needs a labeled corpus".into())
    })?;
    let mut order: Vec<String> = Vec::new();
    let mut counts: HashMap<String, (usize, HashMap<usize, usize>)> = HashMap::new();

    for dec in decompositions {
        let intent = labels
            .intents
            .get(dec.utterance_id)
            .ok_or(CpmError::UnknownUtterance(dec.utterance_id))?;
        if !counts.contains_key(intent) {
            order.push(intent.clone());
        }
        let entry = counts.entry(intent.clone()).or_insert((0, HashMap::new()));
        entry.0 += 1;
        let mut ranked: Vec<(usize, f64)> = dec
            .coefficients
            .iter()
            .enumerate()
            .map(|(v, &c)| (v, c))
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for &(v, _) in ranked.iter().take(top_coeff) {
            *entry.1.entry(v).or_insert(0) += 1;
        }
    }

    let rows = order
        .into_iter()
        .map(|intent| {
            let (size, marks) = &counts[&intent];
            let mut vertices: Vec<(usize, f64)> = marks
                .iter()
                .map(|(&v, &c)| (v, c as f64 / *size as f64))
                .collect();
            vertices.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            vertices.truncate(report_vertices);
            IntentVertexRow {
                intent,
                size: *size,
                vertices,
            }
        })
        .collect();
    Ok(IntentVertexTable {
        top_coeff,
        rows,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RadarSeries {
    pub utterance_id: usize,
    /// Full K-length coefficient vector, vertex id order (plotted anticlockwise).
    pub coefficients: Vec<f64>,
}

/// Plot-ready coefficient series for the requested original utterance ids.
pub fn radar_export(
    decompositions: &[UtteranceDecomposition],
    utterance_ids: &[usize],
) -> Result<Vec<RadarSeries>> {
    let by_id: HashMap<usize, &UtteranceDecomposition> = decompositions
        .iter()
        .map(|d| (d.utterance_id, d))
        .collect();
    utterance_ids
        .iter()
        .map(|&id| {
            let dec = by_id.get(&id).ok_or(CpmError::UnknownUtterance(id))?;
            Ok(RadarSeries {
                utterance_id: id,
                coefficients: dec.coefficients.iter().copied().collect(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_corpus, CorpusFormat};
    use crate::mvsa::{MvsaConfig, SolveDiagnostics};
    use nalgebra::{DVector, RowDVector};

    /// Model with hand-set matrices; only the fields the interpret ops read
    /// need to be meaningful.
    fn toy_model(v: DMatrix<f64>, v_tilde: DMatrix<f64>) -> SimplexModel {
        let k = v_tilde.ncols();
        SimplexModel {
            q: DMatrix::identity(k, k),
            v_tilde,
            v,
            a: DMatrix::zeros(k, 0),
            c: RowDVector::zeros(k),
            objective_trace: vec![0.0],
            config: MvsaConfig::new(k),
            diagnostics: SolveDiagnostics {
                vca_indices: vec![],
                repair_doublings: 0,
                start_expansion: 0.0,
                discarded_count: 0,
                iterations: 0,
                converged: true,
                min_coefficient_retained: 0.0,
                min_coefficient_discarded: None,
                clamped_entries: 0,
                negative_beyond_tolerance: 0,
            },
        }
    }

    fn toy_vocab(terms: &[&str]) -> Vocabulary {
        Vocabulary {
            terms: terms.iter().map(|s| s.to_string()).collect(),
            index: terms
                .iter()
                .enumerate()
                .map(|(i, s)| (s.to_string(), i))
                .collect(),
            min_frequency: 1,
        }
    }

    #[test]
    fn one_hot_vertex_ranks_its_term_first() {
        // vertex 0 is the axis of term "show"
        let v = DMatrix::from_column_slice(3, 2, &[1.0, 0.0, 0.0, 0.0, 0.6, 0.4]);
        let model = toy_model(v, DMatrix::identity(2, 2));
        let vocab = toy_vocab(&["show", "me", "flights"]);
        let tt = top_terms(&model, &vocab, 2, TermRanking::Signed).unwrap();
        assert_eq!(tt[0].terms[0].term, "show");
        assert!((tt[0].terms[0].weight - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_k_means_empty_lists() {
        let v = DMatrix::from_column_slice(2, 2, &[0.3, 0.7, 0.6, 0.4]);
        let model = toy_model(v, DMatrix::identity(2, 2));
        let vocab = toy_vocab(&["a", "b"]);
        let tt = top_terms(&model, &vocab, 0, TermRanking::Signed).unwrap();
        assert!(tt.iter().all(|t| t.terms.is_empty()));
    }

    #[test]
    fn oversized_k_truncates_to_vocab() {
        let v = DMatrix::from_column_slice(2, 2, &[0.3, 0.7, 0.6, 0.4]);
        let model = toy_model(v, DMatrix::identity(2, 2));
        let vocab = toy_vocab(&["a", "b"]);
        let tt = top_terms(&model, &vocab, 10, TermRanking::Signed).unwrap();
        assert_eq!(tt[0].terms.len(), 2);
    }

    #[test]
    fn ranking_ties_break_by_vocab_index() {
        let v = DMatrix::from_column_slice(3, 1, &[0.4, 0.4, 0.2]);
        let model = toy_model(v, DMatrix::identity(1, 1));
        let vocab = toy_vocab(&["b-term", "a-term", "c-term"]);
        let tt = top_terms(&model, &vocab, 3, TermRanking::Signed).unwrap();
        assert_eq!(tt[0].terms[0].term, "b-term"); // index 0 wins the tie
    }

    #[test]
    fn nearest_finds_coinciding_point_first() {
        let v_tilde = DMatrix::from_column_slice(2, 2, &[0.0, 1.0, 2.0, 1.0]);
        let model = toy_model(DMatrix::zeros(2, 2), v_tilde);
        let p = DMatrix::from_column_slice(2, 3, &[2.0, 1.0, 0.5, 1.0, 0.0, 1.0]);
        let kept = vec![10, 11, 12];
        let near = nearest_utterances(&model, &p, &kept, 1, 3).unwrap();
        assert_eq!(near[0].utterance_id, 10);
        assert!(near[0].distance <= 1e-10);
        // distances non-decreasing
        assert!(near.windows(2).all(|w| w[0].distance <= w[1].distance));
    }

    #[test]
    fn nearest_full_n_is_a_permutation() {
        let v_tilde = DMatrix::from_column_slice(2, 2, &[0.0, 1.0, 2.0, 1.0]);
        let model = toy_model(DMatrix::zeros(2, 2), v_tilde);
        let p = DMatrix::from_column_slice(2, 4, &[2.0, 1.0, 0.5, 1.0, 0.0, 1.0, 1.5, 1.0]);
        let kept = vec![0, 1, 2, 3];
        let near = nearest_utterances(&model, &p, &kept, 0, 99).unwrap();
        let mut ids: Vec<usize> = near.iter().map(|n| n.utterance_id).collect();
        ids.sort_unstable();
        assert_eq!(ids, kept);
    }

    #[test]
    fn pattern_mining_counts_shared_combinations() {
        // 6 utterances near vertex 0; four contain {alpha, beta}
        let text = "alpha beta gamma\nalpha beta\nbeta alpha delta\nalpha noise beta\ngamma delta\nepsilon zeta\n";
        let corpus = parse_corpus(text, CorpusFormat::Plain).unwrap();
        let vocab = toy_vocab(&["alpha", "beta", "gamma", "delta", "noise", "epsilon", "zeta"]);
        // vertex 0 weighs alpha/beta/gamma/delta high
        let mut v = DMatrix::zeros(7, 2);
        v[(0, 0)] = 0.9;
        v[(1, 0)] = 0.8;
        v[(2, 0)] = 0.3;
        v[(3, 0)] = 0.2;
        v[(6, 1)] = 1.0;
        let v_tilde = DMatrix::from_column_slice(2, 2, &[0.0, 1.0, 5.0, 1.0]);
        let model = toy_model(v, v_tilde);
        // all six utterances sit at distinct distances from vertex 0
        let p = DMatrix::from_column_slice(
            2,
            6,
            &[0.0, 1.0, 0.1, 1.0, 0.2, 1.0, 0.3, 1.0, 0.4, 1.0, 4.9, 1.0],
        );
        let kept = vec![0, 1, 2, 3, 4, 5];
        let got = mine_patterns(
            &model,
            &p,
            &kept,
            &corpus,
            &vocab,
            0,
            6,
            4,
            TermRanking::Signed,
        )
        .unwrap();
        assert_eq!(got[0].terms, vec!["alpha", "beta"]);
        assert_eq!(got[0].support, 4);
        assert!(got.iter().all(|p| p.support <= 6));
        // the most frequent realization keeps utterance order
        assert_eq!(got[0].rendering, "alpha beta");
    }

    #[test]
    fn pattern_mining_empty_when_no_overlap() {
        let text = "epsilon zeta\nzeta epsilon\n";
        let corpus = parse_corpus(text, CorpusFormat::Plain).unwrap();
        let vocab = toy_vocab(&["alpha", "beta", "epsilon", "zeta"]);
        let mut v = DMatrix::zeros(4, 2);
        v[(0, 0)] = 1.0;
        v[(1, 0)] = 0.9;
        let v_tilde = DMatrix::from_column_slice(2, 2, &[0.0, 1.0, 5.0, 1.0]);
        let model = toy_model(v, v_tilde);
        let p = DMatrix::from_column_slice(2, 2, &[0.0, 1.0, 0.1, 1.0]);
        // top-2 terms of vertex 0 are alpha/beta, which the neighbours lack
        let got = mine_patterns(
            &model,
            &p,
            &vec![0, 1],
            &corpus,
            &vocab,
            0,
            2,
            2,
            TermRanking::Signed,
        )
        .unwrap();
        assert!(got.is_empty());
    }

    fn dec(id: usize, coeffs: &[f64]) -> UtteranceDecomposition {
        UtteranceDecomposition {
            utterance_id: id,
            coefficients: DVector::from_column_slice(coeffs),
        }
    }

    #[test]
    fn single_utterance_intent_has_unit_frequencies() {
        let text = "a\tO\n#intent\tsolo\n";
        let corpus = parse_corpus(text, CorpusFormat::Labeled).unwrap();
        let decs = vec![dec(0, &[0.05, 0.3, 0.05, 0.25, 0.1, 0.25])];
        let table = intent_vertex_table(&decs, &corpus, 3, 5).unwrap();
        assert_eq!(table.rows.len(), 1);
        let row = &table.rows[0];
        assert_eq!(row.size, 1);
        let marked: Vec<usize> = row
            .vertices
            .iter()
            .filter(|(_, f)| *f == 1.0)
            .map(|(v, _)| *v)
            .collect();
        assert_eq!(marked, vec![1, 3, 5]);
    }

    #[test]
    fn disjoint_generators_give_disjoint_top_vertices() {
        let text = "a\tO\n#intent\tx\n\nb\tO\n#intent\tx\n\nc\tO\n#intent\ty\n\nd\tO\n#intent\ty\n";
        let corpus = parse_corpus(text, CorpusFormat::Labeled).unwrap();
        let decs = vec![
            dec(0, &[0.5, 0.4, 0.1, 0.0, 0.0, 0.0]),
            dec(1, &[0.4, 0.5, 0.1, 0.0, 0.0, 0.0]),
            dec(2, &[0.0, 0.0, 0.0, 0.5, 0.3, 0.2]),
            dec(3, &[0.0, 0.0, 0.0, 0.3, 0.5, 0.2]),
        ];
        let table = intent_vertex_table(&decs, &corpus, 3, 3).unwrap();
        let x: HashSet<usize> = table.rows[0].vertices.iter().map(|(v, _)| *v).collect();
        let y: HashSet<usize> = table.rows[1].vertices.iter().map(|(v, _)| *v).collect();
        assert!(x.is_disjoint(&y), "{x:?} vs {y:?}");
    }

    #[test]
    fn reported_frequencies_never_exceed_top_coeff_budget() {
        let text = "a\tO\n#intent\tx\n\nb\tO\n#intent\tx\n";
        let corpus = parse_corpus(text, CorpusFormat::Labeled).unwrap();
        let decs = vec![
            dec(0, &[0.5, 0.3, 0.1, 0.1]),
            dec(1, &[0.1, 0.1, 0.3, 0.5]),
        ];
        let top_coeff = 3;
        let table = intent_vertex_table(&decs, &corpus, top_coeff, 4).unwrap();
        let total: f64 = table.rows[0].vertices.iter().map(|(_, f)| f).sum();
        assert!(total <= top_coeff as f64 + 1e-12);
    }

    #[test]
    fn intent_table_requires_labels() {
        let corpus = parse_corpus("a b\n", CorpusFormat::Plain).unwrap();
        let decs = vec![dec(0, &[1.0])];
        assert!(matches!(
            intent_vertex_table(&decs, &corpus, 3, 5),
            Err(CpmError::LabelsRequired(_))
        ));
    }

    #[test]
    fn radar_series_are_full_length_and_checked() {
        let decs = vec![dec(4, &[0.2, 0.3, 0.5]), dec(9, &[1.0, 0.0, 0.0])];
        let series = radar_export(&decs, &[9, 4]).unwrap();
        assert_eq!(series[0].utterance_id, 9);
        assert_eq!(series[0].coefficients, vec![1.0, 0.0, 0.0]);
        assert_eq!(series[1].coefficients.len(), 3);
        assert!(matches!(
            radar_export(&decs, &[7]),
            Err(CpmError::UnknownUtterance(7))
        ));
    }
}
