//! Dual-encoder template retrieval.
//!
//! Both encoders embed a template as a trainable linear projection of a
//! hashed bag of tokens. Candidates are scored against a query by raw inner
//! product, and retrieval probabilities are a softmax over a finite pool.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Template, TemplateCorpus};
use crate::error::{Error, Result};
use crate::generator::GradientBuffer;
use crate::hashing::{hash_str, mix};

pub const DEFAULT_DIM: usize = 128;

/// Maps a token to a fixed pseudo-random vector with entries `±1/√d`:
/// component `i` is positive iff bit `i % 64` of
/// `splitmix64(fnv1a(token) ^ (i / 64))` is set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashBagEncoder {
    dim: usize,
}

impl HashBagEncoder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0);
        Self { dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        self.add_token(token, &mut v);
        v
    }

    fn add_token(&self, token: &str, out: &mut [f64]) {
        let seed = hash_str(token);
        let mag = 1.0 / (self.dim as f64).sqrt();
        let mut bits = 0;
        for (i, o) in out.iter_mut().enumerate() {
            if i % 64 == 0 {
                bits = mix(seed ^ (i / 64) as u64);
            }
            *o += if bits >> (i % 64) & 1 == 1 { mag } else { -mag };
        }
    }

    /// Sum of the token vectors of every template token (with repetition).
    pub fn bag(&self, z: &Template) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for t in z.tokens() {
            self.add_token(t, &mut v);
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Inner product of two embeddings.
pub fn score(q: &Embedding, c: &Embedding) -> Result<f64> {
    if q.dim() != c.dim() {
        return Err(Error::DimensionMismatch {
            expected: q.dim(),
            actual: c.dim(),
        });
    }
    Ok(dot(&q.0, &c.0))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matvec(w: &[f64], dim: usize, v: &[f64]) -> Vec<f64> {
    w.chunks_exact(dim).map(|row| dot(row, v)).collect()
}

/// Query and candidate projections (row-major `d × d`) over a shared
/// hashed bag encoder. `version` increases with every update.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrieverParams {
    encoder: HashBagEncoder,
    w_query: Vec<f64>,
    w_candidate: Vec<f64>,
    version: u64,
}

#[derive(Serialize, Deserialize)]
struct ParamsManifest {
    dim: usize,
    encoder_version: u64,
    weights_file: String,
}

impl RetrieverParams {
    /// Both projections start at the identity.
    pub fn identity(dim: usize) -> Self {
        let mut w = vec![0.0; dim * dim];
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        Self {
            encoder: HashBagEncoder::new(dim),
            w_query: w.clone(),
            w_candidate: w,
            version: 0,
        }
    }

    /// Identity plus independent uniform noise in `[-scale, scale]`.
    pub fn random(dim: usize, seed: u64, scale: f64) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::identity(dim);
        for w in p.w_query.iter_mut().chain(p.w_candidate.iter_mut()) {
            *w += rng.gen_range(-scale..=scale);
        }
        p
    }

    pub fn dim(&self) -> usize {
        self.encoder.dim
    }

    pub fn encoder(&self) -> &HashBagEncoder {
        &self.encoder
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn encode_query(&self, z0: &Template) -> Embedding {
        Embedding(matvec(&self.w_query, self.dim(), &self.encoder.bag(z0)))
    }

    pub fn encode_candidate(&self, z: &Template) -> Embedding {
        Embedding(matvec(&self.w_candidate, self.dim(), &self.encoder.bag(z)))
    }

    pub fn zero_grad(&self) -> RetrieverGradient {
        RetrieverGradient {
            w_query: vec![0.0; self.w_query.len()],
            w_candidate: vec![0.0; self.w_candidate.len()],
        }
    }

    /// `φ ← φ - lr * grad`; bumps the version.
    pub fn descend(&mut self, grad: &RetrieverGradient, lr: f64) {
        for (w, g) in self.w_query.iter_mut().zip(&grad.w_query) {
            *w -= lr * g;
        }
        for (w, g) in self.w_candidate.iter_mut().zip(&grad.w_candidate) {
            *w -= lr * g;
        }
        self.version += 1;
    }

    pub fn save(&self, dir: &Path, name: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let weights_file = format!("{name}.bin");
        let blob: Vec<u8> = self
            .w_query
            .iter()
            .chain(&self.w_candidate)
            .flat_map(|w| w.to_le_bytes())
            .collect();
        let blob_path = dir.join(&weights_file);
        fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))?;
        let m = ParamsManifest {
            dim: self.dim(),
            encoder_version: self.version,
            weights_file,
        };
        write_json(&dir.join(format!("{name}.json")), &m)
    }

    pub fn load(dir: &Path, name: &str) -> Result<Self> {
        let m: ParamsManifest = read_json(&dir.join(format!("{name}.json")))?;
        let blob_path = dir.join(&m.weights_file);
        let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        let n = m.dim * m.dim;
        if blob.len() != 2 * n * 8 {
            return Err(Error::Validation(format!(
                "{}: expected {} bytes of weights, found {}",
                blob_path.display(),
                2 * n * 8,
                blob.len()
            )));
        }
        let vals: Vec<f64> = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            encoder: HashBagEncoder::new(m.dim),
            w_query: vals[..n].to_vec(),
            w_candidate: vals[n..].to_vec(),
            version: m.encoder_version,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrieverGradient {
    pub w_query: Vec<f64>,
    pub w_candidate: Vec<f64>,
}

impl GradientBuffer for RetrieverGradient {
    fn add_scaled(&mut self, other: &Self, scale: f64) {
        for (a, b) in self.w_query.iter_mut().zip(&other.w_query) {
            *a += scale * b;
        }
        for (a, b) in self.w_candidate.iter_mut().zip(&other.w_candidate) {
            *a += scale * b;
        }
    }

    fn scale(&mut self, factor: f64) {
        self.w_query
            .iter_mut()
            .chain(self.w_candidate.iter_mut())
            .for_each(|a| *a *= factor);
    }

    fn norm(&self) -> f64 {
        self.w_query
            .iter()
            .chain(&self.w_candidate)
            .map(|a| a * a)
            .sum::<f64>()
            .sqrt()
    }
}

/// Numerically stable softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// `p_φ(z | z0)` normalized over `pool`.
pub fn retrieval_distribution(
    params: &RetrieverParams,
    z0: &Template,
    pool: &[Template],
) -> Result<Vec<f64>> {
    Ok(PoolScores::new(params, z0, pool)?.probs)
}

/// A pool re-encoded under the live encoder, with what the retriever
/// gradient needs.
#[derive(Debug, Clone)]
pub struct PoolScores {
    query_bag: Vec<f64>,
    query: Vec<f64>,
    bags: Vec<Vec<f64>>,
    candidates: Vec<Vec<f64>>,
    pub scores: Vec<f64>,
    pub probs: Vec<f64>,
    pub encoder_version: u64,
}

impl PoolScores {
    pub fn new(params: &RetrieverParams, z0: &Template, pool: &[Template]) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::EmptyPool);
        }
        let d = params.dim();
        let query_bag = params.encoder.bag(z0);
        let query = matvec(&params.w_query, d, &query_bag);
        let bags: Vec<Vec<f64>> = pool.iter().map(|z| params.encoder.bag(z)).collect();
        let candidates: Vec<Vec<f64>> = bags
            .iter()
            .map(|b| matvec(&params.w_candidate, d, b))
            .collect();
        let scores: Vec<f64> = candidates.iter().map(|c| dot(&query, c)).collect();
        let probs = softmax(&scores);
        Ok(Self {
            query_bag,
            query,
            bags,
            candidates,
            scores,
            probs,
            encoder_version: params.version,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn log_prob(&self, i: usize) -> f64 {
        self.probs[i].ln()
    }

    /// Adds `scale * ∇_φ log p_φ(pool[i] | z0)` to `grad`.
    pub fn accumulate_log_prob_grad(&self, i: usize, scale: f64, grad: &mut RetrieverGradient) {
        let d = self.query.len();
        let mut c_bar = vec![0.0; d];
        let mut b_bar = vec![0.0; d];
        for (j, p) in self.probs.iter().enumerate() {
            for k in 0..d {
                c_bar[k] += p * self.candidates[j][k];
                b_bar[k] += p * self.bags[j][k];
            }
        }
        // s_j = (W_q b0) · (W_c b_j)
        for r in 0..d {
            let dc = scale * (self.candidates[i][r] - c_bar[r]);
            let q_r = scale * self.query[r];
            let row_q = &mut grad.w_query[r * d..(r + 1) * d];
            for (g, b0) in row_q.iter_mut().zip(&self.query_bag) {
                *g += dc * b0;
            }
            let row_c = &mut grad.w_candidate[r * d..(r + 1) * d];
            for k in 0..d {
                row_c[k] += q_r * (self.bags[i][k] - b_bar[k]);
            }
        }
    }
}

/// Candidate embeddings of a whole corpus, stored as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    corpus: TemplateCorpus,
    dim: usize,
    embeddings: Vec<f32>,
    encoder_version: u64,
}

#[derive(Serialize, Deserialize)]
struct IndexManifest {
    corpus_path: PathBuf,
    dedup_threshold: f64,
    dim: usize,
    rows: usize,
    encoder_version: u64,
    matrix_file: String,
}

pub fn build_index(corpus: &TemplateCorpus, params: &RetrieverParams) -> Result<RetrievalIndex> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let rows: Vec<Vec<f32>> = corpus
        .templates()
        .par_iter()
        .map(|z| {
            params
                .encode_candidate(z)
                .0
                .iter()
                .map(|&v| v as f32)
                .collect()
        })
        .collect();
    Ok(RetrievalIndex {
        corpus: corpus.clone(),
        dim: params.dim(),
        embeddings: rows.concat(),
        encoder_version: params.version,
    })
}

impl RetrievalIndex {
    /// Builds an index from explicit rows, e.g. hand-set embeddings.
    pub fn from_embeddings(
        corpus: TemplateCorpus,
        rows: &[Vec<f64>],
        encoder_version: u64,
    ) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if rows.len() != corpus.len() {
            return Err(Error::Validation(format!(
                "{} embedding rows for {} templates",
                rows.len(),
                corpus.len()
            )));
        }
        let dim = rows[0].len();
        if let Some(r) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: r.len(),
            });
        }
        Ok(Self {
            corpus,
            dim,
            embeddings: rows.iter().flatten().map(|&v| v as f32).collect(),
            encoder_version,
        })
    }

    pub fn corpus(&self) -> &TemplateCorpus {
        &self.corpus
    }

    pub fn len(&self) -> usize {
        self.corpus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.corpus.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn encoder_version(&self) -> u64 {
        self.encoder_version
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    /// Errors unless the index was built by the encoder at `params`' version.
    pub fn check_fresh(&self, params: &RetrieverParams) -> Result<()> {
        if self.encoder_version != params.version {
            return Err(Error::StaleIndex {
                pool: self.encoder_version,
                live: params.version,
            });
        }
        Ok(())
    }

    /// Scores of every row against `query`.
    pub fn scores(&self, query: &Embedding) -> Result<Vec<f64>> {
        if query.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: query.dim(),
            });
        }
        Ok(self
            .embeddings
            .chunks_exact(self.dim)
            .map(|row| row.iter().zip(&query.0).map(|(a, b)| *a as f64 * b).sum())
            .collect())
    }

    /// Exact maximum-inner-product search: the `k` best rows as
    /// `(corpus index, score)`, best first, ties broken by corpus order.
    pub fn top_k(&self, query: &Embedding, k: usize) -> Result<Vec<(usize, f64)>> {
        if k > self.len() {
            return Err(Error::KTooLarge {
                k,
                corpus: self.len(),
            });
        }
        let scores = self.scores(query)?;
        let mut order: Vec<usize> = (0..scores.len()).collect();
        let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
        if k == 0 {
            return Ok(Vec::new());
        }
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, cmp);
            order.truncate(k);
        }
        order.sort_unstable_by(cmp);
        Ok(order.into_iter().map(|i| (i, scores[i])).collect())
    }

    pub fn save(&self, manifest_path: &Path, corpus_path: &Path) -> Result<()> {
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let stem = manifest_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "index".into());
        let matrix_file = format!("{stem}.f32");
        let blob: Vec<u8> = self
            .embeddings
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        let matrix_path = dir.join(&matrix_file);
        fs::write(&matrix_path, blob).map_err(|e| Error::io(&matrix_path, e))?;
        let m = IndexManifest {
            corpus_path: corpus_path.to_path_buf(),
            dedup_threshold: self.corpus.dedup_threshold(),
            dim: self.dim,
            rows: self.len(),
            encoder_version: self.encoder_version,
            matrix_file,
        };
        write_json(manifest_path, &m)
    }

    /// Loads an index; a relative corpus path is resolved against the
    /// manifest's directory.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let m: IndexManifest = read_json(manifest_path)?;
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let corpus_path = if m.corpus_path.is_absolute() {
            m.corpus_path.clone()
        } else {
            dir.join(&m.corpus_path)
        };
        let corpus = TemplateCorpus::read_jsonl(&corpus_path, m.dedup_threshold)?;
        if corpus.len() != m.rows {
            return Err(Error::Validation(format!(
                "index has {} rows but corpus {} has {} templates",
                m.rows,
                corpus_path.display(),
                corpus.len()
            )));
        }
        let matrix_path = dir.join(&m.matrix_file);
        let blob = fs::read(&matrix_path).map_err(|e| Error::io(&matrix_path, e))?;
        if blob.len() != m.rows * m.dim * 4 {
            return Err(Error::Validation(format!(
                "{}: expected {}x{} f32 matrix",
                matrix_path.display(),
                m.rows,
                m.dim
            )));
        }
        let embeddings = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            corpus,
            dim: m.dim,
            embeddings,
            encoder_version: m.encoder_version,
        })
    }
}

/// Top-`k` templates for the query template `z0`.
pub fn retrieve_top_k<'i>(
    index: &'i RetrievalIndex,
    params: &RetrieverParams,
    z0: &Template,
    k: usize,
) -> Result<Vec<(&'i Template, f64)>> {
    let q = params.encode_query(z0);
    Ok(index
        .top_k(&q, k)?
        .into_iter()
        .map(|(i, s)| (&index.corpus.templates()[i], s))
        .collect())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}
