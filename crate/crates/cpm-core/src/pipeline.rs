//! End-to-end pipeline runs with persisted, reproducible artifacts.
//!
//! `run_fit` writes a self-contained model directory; `run_interpret`,
//! `run_correlate` and `run_export` work from that directory alone. All
//! randomness flows from the single seed recorded in the manifest, so
//! identical configurations produce byte-identical artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, RowDVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{
    self, Corpus, CorpusFormat, Lexicon, TermUtteranceMatrix, Vocabulary,
};
use crate::correlation::{correlate_utterance, word_vectors};
use crate::interpret::{
    intent_vertex_table, mine_patterns, nearest_utterances, radar_export, top_terms, TermRanking,
};
use crate::io;
use crate::mvsa::{
    decompositions_for, solve_mvsa, MvsaConfig, SimplexModel, SolveDiagnostics,
};
use crate::projection::{fit_projection, project_points, ProjectedPoints, ProjectionBasis};
use crate::{CpmError, Result};

pub const FILE_CORPUS: &str = "corpus.json";
pub const FILE_VOCAB: &str = "vocab.json";
pub const FILE_TDM: &str = "tdm.csv";
pub const FILE_U: &str = "U.csv";
pub const FILE_XBAR: &str = "xbar.csv";
pub const FILE_UORTH: &str = "uorth.csv";
pub const FILE_BASIS: &str = "basis.json";
pub const FILE_Q: &str = "Q.csv";
pub const FILE_VTILDE: &str = "Vtilde.csv";
pub const FILE_V: &str = "V.csv";
pub const FILE_A: &str = "A.csv";
pub const FILE_LEXICON: &str = "lexicon.tsv";
pub const FILE_MANIFEST: &str = "manifest.json";

/// Pattern-mining defaults: nearest neighbours consulted and top terms per vertex.
pub const PATTERN_NEIGHBORS: usize = 50;
pub const PATTERN_TERMS_PER_UTTERANCE: usize = 10;

/// Everything a fit run needs. The output directory is passed separately so
/// the manifest stays identical across runs into different directories.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub corpus_path: PathBuf,
    pub format: CorpusFormat,
    pub lexicon_path: Option<PathBuf>,
    pub stopwords_path: Option<PathBuf>,
    pub min_frequency: usize,
    /// Subspace dimension R; the simplex has K = R + 1 vertices.
    pub dim: usize,
    pub seed: u64,
    pub expansion_factor: f64,
    pub max_iterations: usize,
    pub objective_tolerance: f64,
    pub constraint_tolerance: f64,
}

impl PipelineConfig {
    pub fn new(corpus_path: impl Into<PathBuf>, format: CorpusFormat, dim: usize) -> Self {
        PipelineConfig {
            corpus_path: corpus_path.into(),
            format,
            lexicon_path: None,
            stopwords_path: None,
            min_frequency: 2,
            dim,
            seed: 0,
            expansion_factor: 0.0,
            max_iterations: 300,
            objective_tolerance: 1e-9,
            constraint_tolerance: 1e-8,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dim < 1 {
            return Err(CpmError::Config("dimension R must be >= 1".into()));
        }
        if self.min_frequency < 1 {
            return Err(CpmError::Config("min_frequency must be >= 1".into()));
        }
        Ok(())
    }

    fn mvsa_config(&self) -> MvsaConfig {
        MvsaConfig {
            vertex_count: self.dim + 1,
            expansion_factor: self.expansion_factor,
            max_iterations: self.max_iterations,
            objective_tolerance: self.objective_tolerance,
            constraint_tolerance: self.constraint_tolerance,
            rng_seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataSection {
    pub n_terms: usize,
    pub n_raw_utterances: usize,
    pub n_columns: usize,
    pub dropped_utterance_ids: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjectionSection {
    pub r: usize,
    pub k: usize,
    pub singular_values: Vec<f64>,
    pub u_orth_fallback: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MvsaSection {
    pub equality_constant: Vec<f64>,
    pub objective_trace: Vec<f64>,
    pub diagnostics: SolveDiagnostics,
}

/// Reproducibility record written next to the model artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config: PipelineConfig,
    pub config_hash: String,
    pub data: DataSection,
    pub projection: ProjectionSection,
    pub mvsa: MvsaSection,
}

#[derive(Debug, Clone)]
pub struct FitSummary {
    pub out_dir: PathBuf,
    pub n_terms: usize,
    pub n_columns: usize,
    pub dropped_utterance_ids: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
    pub final_objective: f64,
    pub artifacts: Vec<PathBuf>,
}

/// Fit the whole pipeline and persist the model directory.
pub fn run_fit(config: &PipelineConfig, out_dir: &Path) -> Result<FitSummary> {
    config.validate()?;
    let corpus_raw = corpus::load_corpus(&config.corpus_path, config.format)?;
    let lexicon = config
        .lexicon_path
        .as_deref()
        .map(Lexicon::load)
        .transpose()?;
    let corpus = match &lexicon {
        Some(lex) => corpus::delexicalize(&corpus_raw, lex),
        None => corpus_raw,
    };
    let stopwords = config
        .stopwords_path
        .as_deref()
        .map(corpus::load_stopwords)
        .transpose()?;
    let vocab =
        corpus::build_vocabulary_filtered(&corpus, config.min_frequency, stopwords.as_ref())?;
    let matrix = corpus::build_matrix(&corpus, &vocab)?;
    let basis = fit_projection(&matrix, config.dim)?;
    let points = project_points(&matrix, &basis)?;
    let fit = solve_mvsa(&points.p_tilde, &config.mvsa_config())?;
    let model = SimplexModel::from_fit(fit, &basis)?;

    fs::create_dir_all(out_dir).map_err(|e| CpmError::io(out_dir, e))?;
    let mut artifacts = Vec::new();
    let mut write = |name: &str, op: &dyn Fn(&Path) -> Result<()>| -> Result<()> {
        let path = out_dir.join(name);
        op(&path)?;
        artifacts.push(path);
        Ok(())
    };

    write(FILE_CORPUS, &|p| write_corpus_json(p, &corpus))?;
    write(FILE_VOCAB, &|p| io::write_vocab_json(p, &vocab))?;
    write(FILE_TDM, &|p| io::write_tdm_csv(p, &matrix, &vocab))?;
    write(FILE_U, &|p| io::write_matrix_csv(p, &basis.u))?;
    write(FILE_XBAR, &|p| {
        io::write_matrix_csv(p, &DMatrix::from_column_slice(basis.x_bar.len(), 1, basis.x_bar.as_slice()))
    })?;
    write(FILE_UORTH, &|p| {
        io::write_matrix_csv(p, &DMatrix::from_column_slice(basis.u_orth.len(), 1, basis.u_orth.as_slice()))
    })?;
    write(FILE_BASIS, &|p| write_basis_json(p, &basis, &matrix))?;
    write(FILE_Q, &|p| io::write_matrix_csv(p, &model.q))?;
    write(FILE_VTILDE, &|p| io::write_matrix_csv(p, &model.v_tilde))?;
    write(FILE_V, &|p| io::write_matrix_csv(p, &model.v))?;
    write(FILE_A, &|p| io::write_matrix_csv(p, &model.a))?;
    if let Some(path) = &config.lexicon_path {
        write(FILE_LEXICON, &|p| {
            let text = fs::read_to_string(path).map_err(|e| CpmError::io(path, e))?;
            fs::write(p, text).map_err(|e| CpmError::io(p, e))
        })?;
    }

    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        config_hash: config_hash(config),
        data: DataSection {
            n_terms: vocab.len(),
            n_raw_utterances: corpus.len(),
            n_columns: matrix.n_utterances(),
            dropped_utterance_ids: matrix.dropped_utterance_ids(corpus.len()),
        },
        projection: ProjectionSection {
            r: basis.r,
            k: basis.k(),
            singular_values: basis.singular_values.clone(),
            u_orth_fallback: basis.u_orth_fallback,
        },
        mvsa: MvsaSection {
            equality_constant: model.c.iter().copied().collect(),
            objective_trace: model.objective_trace.clone(),
            diagnostics: model.diagnostics.clone(),
        },
    };
    write(FILE_MANIFEST, &|p| write_manifest(p, &manifest))?;

    Ok(FitSummary {
        out_dir: out_dir.to_path_buf(),
        n_terms: vocab.len(),
        n_columns: matrix.n_utterances(),
        dropped_utterance_ids: manifest.data.dropped_utterance_ids.clone(),
        iterations: manifest.mvsa.diagnostics.iterations,
        converged: manifest.mvsa.diagnostics.converged,
        final_objective: *manifest
            .mvsa
            .objective_trace
            .last()
            .expect("trace never empty"),
        artifacts,
    })
}

fn config_hash(config: &PipelineConfig) -> String {
    let canonical = serde_json::to_string(config).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    hex::encode(hasher.finalize())
}

fn write_corpus_json(path: &Path, corpus: &Corpus) -> Result<()> {
    let text = serde_json::to_string(corpus).expect("corpus serializes");
    fs::write(path, text + "\n").map_err(|e| CpmError::io(path, e))
}

fn read_corpus_json(path: &Path) -> Result<Corpus> {
    let text = fs::read_to_string(path).map_err(|e| CpmError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CpmError::Format {
        line: 0,
        message: format!("bad corpus file {}: {e}", path.display()),
    })
}

#[derive(Serialize, Deserialize)]
struct BasisFile {
    n_terms: usize,
    n_points: usize,
    r: usize,
    k: usize,
    singular_values: Vec<f64>,
    u_orth_fallback: bool,
}

fn write_basis_json(path: &Path, basis: &ProjectionBasis, matrix: &TermUtteranceMatrix) -> Result<()> {
    let file = BasisFile {
        n_terms: basis.n_terms(),
        n_points: matrix.n_utterances(),
        r: basis.r,
        k: basis.k(),
        singular_values: basis.singular_values.clone(),
        u_orth_fallback: basis.u_orth_fallback,
    };
    let text = serde_json::to_string_pretty(&file).expect("basis serializes");
    fs::write(path, text + "\n").map_err(|e| CpmError::io(path, e))
}

fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(path, text + "\n").map_err(|e| CpmError::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| CpmError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CpmError::Format {
        line: 0,
        message: format!("bad manifest {}: {e}", path.display()),
    })
}

/// A model directory loaded back into memory. Projected points are recomputed
/// from the persisted matrix and basis (the CSV round trip is exact).
pub struct LoadedModel {
    pub corpus: Corpus,
    pub vocab: Vocabulary,
    pub matrix: TermUtteranceMatrix,
    pub basis: ProjectionBasis,
    pub points: ProjectedPoints,
    pub model: SimplexModel,
    pub manifest: Manifest,
    pub lexicon: Option<Lexicon>,
}

pub fn load_model(dir: &Path) -> Result<LoadedModel> {
    let manifest = read_manifest(&dir.join(FILE_MANIFEST))?;
    let corpus = read_corpus_json(&dir.join(FILE_CORPUS))?;
    let vocab = io::read_vocab_json(&dir.join(FILE_VOCAB))?;
    let (matrix, terms) = io::read_tdm_csv(&dir.join(FILE_TDM))?;
    if terms != vocab.terms {
        return Err(CpmError::Format {
            line: 0,
            message: "tdm.csv terms do not match vocab.json".into(),
        });
    }

    let u = io::read_matrix_csv(&dir.join(FILE_U))?;
    let x_bar_m = io::read_matrix_csv(&dir.join(FILE_XBAR))?;
    let u_orth_m = io::read_matrix_csv(&dir.join(FILE_UORTH))?;
    let x_bar = DVector::from_column_slice(x_bar_m.column(0).as_slice());
    let u_orth = DVector::from_column_slice(u_orth_m.column(0).as_slice());
    let r = u.ncols();
    let mut u_tilde = DMatrix::zeros(u.nrows(), r + 1);
    for c in 0..r {
        u_tilde.set_column(c, &u.column(c));
    }
    u_tilde.set_column(r, &u_orth);
    let basis = ProjectionBasis {
        u,
        x_bar,
        u_orth,
        u_tilde,
        r,
        singular_values: manifest.projection.singular_values.clone(),
        u_orth_fallback: manifest.projection.u_orth_fallback,
    };

    let q = io::read_matrix_csv(&dir.join(FILE_Q))?;
    let v_tilde = io::read_matrix_csv(&dir.join(FILE_VTILDE))?;
    let v = io::read_matrix_csv(&dir.join(FILE_V))?;
    let a = io::read_matrix_csv(&dir.join(FILE_A))?;
    let model = SimplexModel {
        q,
        v_tilde,
        v,
        a,
        c: RowDVector::from_row_slice(&manifest.mvsa.equality_constant),
        objective_trace: manifest.mvsa.objective_trace.clone(),
        config: manifest.config.mvsa_config(),
        diagnostics: manifest.mvsa.diagnostics.clone(),
    };

    let points = project_points(&matrix, &basis)?;
    let lexicon_path = dir.join(FILE_LEXICON);
    let lexicon = lexicon_path
        .exists()
        .then(|| Lexicon::load(&lexicon_path))
        .transpose()?;

    Ok(LoadedModel {
        corpus,
        vocab,
        matrix,
        basis,
        points,
        model,
        manifest,
        lexicon,
    })
}

/// Report selection for `run_interpret`.
#[derive(Debug, Clone, Default)]
pub struct InterpretOptions {
    pub top_terms: Option<usize>,
    pub neighbors: Option<usize>,
    pub patterns: bool,
    pub intent_table: bool,
    pub radar: Option<Vec<usize>>,
    /// Rank top terms by absolute coordinate value instead of signed value.
    pub absolute_ranking: bool,
}

#[derive(Debug, Clone)]
pub struct InterpretSummary {
    pub reports: Vec<PathBuf>,
}

/// Produce the requested JSON (primary) and CSV (tabular) reports.
pub fn run_interpret(
    model_dir: &Path,
    out_dir: &Path,
    opts: &InterpretOptions,
) -> Result<InterpretSummary> {
    let loaded = load_model(model_dir)?;
    let ranking = if opts.absolute_ranking {
        TermRanking::Absolute
    } else {
        TermRanking::Signed
    };
    fs::create_dir_all(out_dir).map_err(|e| CpmError::io(out_dir, e))?;
    let mut reports = Vec::new();

    if let Some(k) = opts.top_terms {
        let tt = top_terms(&loaded.model, &loaded.vocab, k, ranking)?;
        let json = out_dir.join("top_terms.json");
        write_json(&json, &tt)?;
        reports.push(json);

        let mut csv = String::from("vertex,rank,term,weight\n");
        for v in &tt {
            for (rank, t) in v.terms.iter().enumerate() {
                csv.push_str(&format!(
                    "{},{},{},{}\n",
                    v.vertex_id,
                    rank,
                    escape_cell(&t.term),
                    io::format_f64(t.weight)
                ));
            }
        }
        let path = out_dir.join("top_terms.csv");
        fs::write(&path, csv).map_err(|e| CpmError::io(&path, e))?;
        reports.push(path);
    }

    if let Some(n) = opts.neighbors {
        #[derive(Serialize)]
        struct VertexNeighbors {
            vertex_id: usize,
            utterances: Vec<NeighborRecord>,
        }
        #[derive(Serialize)]
        struct NeighborRecord {
            utterance_id: usize,
            distance: f64,
            text: String,
        }
        let mut all = Vec::new();
        for vertex in 0..loaded.model.vertex_count() {
            let near = nearest_utterances(
                &loaded.model,
                &loaded.points.p_tilde,
                &loaded.matrix.kept_utterance_ids,
                vertex,
                n,
            )?;
            all.push(VertexNeighbors {
                vertex_id: vertex,
                utterances: near
                    .iter()
                    .map(|nb| NeighborRecord {
                        utterance_id: nb.utterance_id,
                        distance: nb.distance,
                        text: loaded.corpus.utterances[nb.utterance_id].join(" "),
                    })
                    .collect(),
            });
        }
        let json = out_dir.join("nearest.json");
        write_json(&json, &all)?;
        reports.push(json);

        let mut csv = String::from("vertex,rank,utterance_id,distance,text\n");
        for v in &all {
            for (rank, nb) in v.utterances.iter().enumerate() {
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    v.vertex_id,
                    rank,
                    nb.utterance_id,
                    io::format_f64(nb.distance),
                    escape_cell(&nb.text)
                ));
            }
        }
        let path = out_dir.join("nearest.csv");
        fs::write(&path, csv).map_err(|e| CpmError::io(&path, e))?;
        reports.push(path);
    }

    if opts.patterns {
        #[derive(Serialize)]
        struct VertexPatternsOut {
            vertex_id: usize,
            patterns: Vec<crate::interpret::MinedPattern>,
        }
        let neighbors = PATTERN_NEIGHBORS.min(loaded.matrix.n_utterances());
        let mut all = Vec::new();
        for vertex in 0..loaded.model.vertex_count() {
            let patterns = mine_patterns(
                &loaded.model,
                &loaded.points.p_tilde,
                &loaded.matrix.kept_utterance_ids,
                &loaded.corpus,
                &loaded.vocab,
                vertex,
                neighbors,
                PATTERN_TERMS_PER_UTTERANCE,
                ranking,
            )?;
            all.push(VertexPatternsOut {
                vertex_id: vertex,
                patterns,
            });
        }
        let json = out_dir.join("patterns.json");
        write_json(&json, &all)?;
        reports.push(json);
    }

    if opts.intent_table {
        let decs = decompositions_for(&loaded.model.a, &loaded.matrix.kept_utterance_ids)?;
        let table = intent_vertex_table(&decs, &loaded.corpus, 3, 5)?;
        let json = out_dir.join("intent_table.json");
        write_json(&json, &table)?;
        reports.push(json);

        let mut csv = String::from("intent,size,vertex,frequency\n");
        for row in &table.rows {
            for (v, f) in &row.vertices {
                csv.push_str(&format!(
                    "{},{},{},{}\n",
                    escape_cell(&row.intent),
                    row.size,
                    v,
                    io::format_f64(*f)
                ));
            }
        }
        let path = out_dir.join("intent_table.csv");
        fs::write(&path, csv).map_err(|e| CpmError::io(&path, e))?;
        reports.push(path);
    }

    if let Some(ids) = &opts.radar {
        let decs = decompositions_for(&loaded.model.a, &loaded.matrix.kept_utterance_ids)?;
        let series = radar_export(&decs, ids)?;
        let json = out_dir.join("radar.json");
        write_json(&json, &series)?;
        reports.push(json);

        let mut csv = String::from("utterance_id,vertex,coefficient\n");
        for s in &series {
            for (v, c) in s.coefficients.iter().enumerate() {
                csv.push_str(&format!("{},{},{}\n", s.utterance_id, v, io::format_f64(*c)));
            }
        }
        let path = out_dir.join("radar.csv");
        fs::write(&path, csv).map_err(|e| CpmError::io(&path, e))?;
        reports.push(path);
    }

    Ok(InterpretSummary { reports })
}

/// Compute attention matrices for an input corpus and write one JSON line per
/// utterance, in input order. Returns the number of utterances written.
pub fn run_correlate(
    model_dir: &Path,
    input_path: &Path,
    format: CorpusFormat,
    contextual: bool,
    out_path: &Path,
) -> Result<usize> {
    let loaded = load_model(model_dir)?;
    let table = word_vectors(&loaded.model);
    let input = corpus::load_corpus(input_path, format)?;

    let mut out = String::new();
    for (id, tokens) in input.utterances.iter().enumerate() {
        let tokens = match &loaded.lexicon {
            Some(lex) => corpus::delexicalize_tokens(tokens, lex),
            None => tokens.clone(),
        };
        let matrices = correlate_utterance(&tokens, &table, &loaded.vocab, contextual)?;
        out.push_str(&io::attention_json_line(id, &tokens, &matrices));
        out.push('\n');
    }
    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| CpmError::io(parent, e))?;
        }
    }
    fs::write(out_path, out).map_err(|e| CpmError::io(out_path, e))?;
    Ok(input.len())
}

/// Export plot-ready scatter data: projected points and fitted vertices in
/// subspace coordinates.
pub fn run_export(model_dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let loaded = load_model(model_dir)?;
    fs::create_dir_all(out_dir).map_err(|e| CpmError::io(out_dir, e))?;
    let k = loaded.basis.k();

    let mut points = String::from("utterance_id");
    for c in 0..k {
        points.push_str(&format!(",c{c}"));
    }
    points.push('\n');
    for (col, &id) in loaded.matrix.kept_utterance_ids.iter().enumerate() {
        points.push_str(&id.to_string());
        for c in 0..k {
            points.push(',');
            points.push_str(&io::format_f64(loaded.points.p_tilde[(c, col)]));
        }
        points.push('\n');
    }
    let points_path = out_dir.join("points.csv");
    fs::write(&points_path, points).map_err(|e| CpmError::io(&points_path, e))?;

    let mut vertices = String::from("vertex_id");
    for c in 0..k {
        vertices.push_str(&format!(",c{c}"));
    }
    vertices.push('\n');
    for j in 0..loaded.model.vertex_count() {
        vertices.push_str(&j.to_string());
        for c in 0..k {
            vertices.push(',');
            vertices.push_str(&io::format_f64(loaded.model.v_tilde[(c, j)]));
        }
        vertices.push('\n');
    }
    let vertices_path = out_dir.join("vertices.csv");
    fs::write(&vertices_path, vertices).map_err(|e| CpmError::io(&vertices_path, e))?;

    Ok(vec![points_path, vertices_path])
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n").map_err(|e| CpmError::io(path, e))
}

fn escape_cell(cell: &str) -> String {
    if cell.contains(',') || cell.contains('"') || cell.contains('\n') {
        format!("\"{}\"", cell.replace('"', "\"\""))
    } else {
        cell.to_string()
    }
}

/// Expected artifact names for a fitted model directory (lexicon.tsv appears
/// only when a lexicon was supplied).
pub fn expected_artifacts() -> Vec<&'static str> {
    vec![
        FILE_CORPUS,
        FILE_VOCAB,
        FILE_TDM,
        FILE_U,
        FILE_XBAR,
        FILE_UORTH,
        FILE_BASIS,
        FILE_Q,
        FILE_VTILDE,
        FILE_V,
        FILE_A,
        FILE_MANIFEST,
    ]
}

/// Sanity check used by tests and the CLI: verify that every persisted
/// artifact exists.
pub fn verify_artifacts(dir: &Path) -> Result<()> {
    let missing: Vec<&str> = expected_artifacts()
        .into_iter()
        .filter(|name| !dir.join(name).exists())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(CpmError::Format {
            line: 0,
            message: format!("model directory {} is missing {missing:?}", dir.display()),
        })
    }
}

/// Convenience for tests: ids of utterances kept by the fit.
pub fn kept_ids(dir: &Path) -> Result<Vec<usize>> {
    let (matrix, _) = io::read_tdm_csv(&dir.join(FILE_TDM))?;
    Ok(matrix.kept_utterance_ids)
}
