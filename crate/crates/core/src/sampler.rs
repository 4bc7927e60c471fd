//! Diversity-driven style sampling.
//!
//! The retrieved pool is grouped by complete-linkage clustering on
//! `1 - Jaccard`; one style is chosen per cluster (uniformly while training,
//! by retrieval probability at inference) and each chosen style conditions
//! one nucleus-sampled question.

use rand::Rng;

use crate::corpus::{jaccard, Template};
use crate::dataset::ContextAnswer;
use crate::error::{Error, Result};
use crate::generator::{self, GenerationOutput, SequenceModel};
use crate::retriever::{PoolScores, RetrievalIndex, RetrieverParams};

/// Indices into the clustered list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StyleCluster {
    pub members: Vec<usize>,
    pub medoid: usize,
}

impl StyleCluster {
    pub fn templates<'a>(
        &'a self,
        pool: &'a [Template],
    ) -> impl Iterator<Item = &'a Template> + 'a {
        self.members.iter().map(move |&i| &pool[i])
    }
}

fn distance_matrix(s: &[Template]) -> Vec<Vec<f64>> {
    let sets: Vec<_> = s.iter().map(Template::token_set).collect();
    let n = s.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = 1.0 - jaccard(&sets[i], &sets[j]);
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

/// Agglomerative complete-linkage clustering into `min(k, |s|)` clusters.
///
/// Each merge joins the pair of clusters with the smallest maximum member
/// distance; ties go to the pair whose earliest members come first. Clusters
/// are returned ordered by their earliest member, members in input order.
pub fn cluster_templates(s: &[Template], k: usize) -> Vec<StyleCluster> {
    assert!(!s.is_empty(), "cannot cluster an empty pool");
    let k = k.clamp(1, s.len());
    let d = distance_matrix(s);
    let mut clusters: Vec<Vec<usize>> = (0..s.len()).map(|i| vec![i]).collect();
    // linkage[a][b] for live clusters a < b (indices into `clusters`)
    let mut link = d.clone();
    while clusters.len() > k {
        let mut best = (f64::INFINITY, 0, 0);
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                if link[a][b] < best.0 {
                    best = (link[a][b], a, b);
                }
            }
        }
        let (_, a, b) = best;
        // complete linkage: max of the two merged rows
        for c in 0..clusters.len() {
            let v = link[a][c].max(link[b][c]);
            link[a][c] = v;
            link[c][a] = v;
        }
        link[a][a] = 0.0;
        let moved = clusters.remove(b);
        clusters[a].extend(moved);
        clusters[a].sort_unstable();
        link.remove(b);
        for row in &mut link {
            row.remove(b);
        }
    }
    clusters
        .into_iter()
        .map(|members| {
            let medoid = *members
                .iter()
                .min_by(|&&x, &&y| {
                    let sx: f64 = members.iter().map(|&m| d[x][m]).sum();
                    let sy: f64 = members.iter().map(|&m| d[y][m]).sum();
                    sx.total_cmp(&sy).then(x.cmp(&y))
                })
                .unwrap();
            StyleCluster { members, medoid }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Training,
    Inference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingConfig {
    pub k: usize,
    pub pool_size: usize,
    pub top_p: f64,
    pub top_k: usize,
    pub max_len: usize,
}

/// A chosen style and the question generated under it.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledPair {
    pub style: Template,
    /// Position of `style` in the retrieved pool.
    pub pool_index: usize,
    pub question: GenerationOutput,
    /// Candidate-index trajectory of `question`, end token included if produced.
    pub trajectory: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct DiversitySample {
    pub pool: Vec<Template>,
    pub pool_scores: PoolScores,
    pub clusters: Vec<StyleCluster>,
    pub pairs: Vec<SampledPair>,
}

/// Retrieves `min(pool_size, |Z|)` templates for `z0`, ordered by index score.
pub fn retrieve_pool(
    index: &RetrievalIndex,
    params: &RetrieverParams,
    z0: &Template,
    pool_size: usize,
) -> Result<Vec<Template>> {
    let k = pool_size.min(index.len());
    let q = params.encode_query(z0);
    let hits = index.top_k(&q, k)?;
    if hits.is_empty() {
        return Err(Error::EmptyPool);
    }
    Ok(hits
        .into_iter()
        .map(|(i, _)| index.corpus().templates()[i].clone())
        .collect())
}

/// Picks one pool index per cluster.
pub fn choose_styles<R: Rng + ?Sized>(
    clusters: &[StyleCluster],
    probs: &[f64],
    mode: SampleMode,
    rng: &mut R,
) -> Vec<usize> {
    clusters
        .iter()
        .map(|c| match mode {
            SampleMode::Training => c.members[rng.gen_range(0..c.members.len())],
            SampleMode::Inference => *c
                .members
                .iter()
                .min_by(|&&a, &&b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)))
                .unwrap(),
        })
        .collect()
}

/// Generates one question per chosen style from an already retrieved pool.
#[allow(clippy::too_many_arguments)]
pub fn sample_from_pool<M: SequenceModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    x: &ContextAnswer,
    z0: &Template,
    pool: Vec<Template>,
    params: &RetrieverParams,
    cfg: &SamplingConfig,
    mode: SampleMode,
    rng: &mut R,
) -> Result<DiversitySample> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    let pool_scores = PoolScores::new(params, z0, &pool)?;
    let clusters = cluster_templates(&pool, cfg.k);
    let chosen = choose_styles(&clusters, &pool_scores.probs, mode, rng);
    let mut pairs = Vec::with_capacity(chosen.len());
    for i in chosen {
        let style = pool[i].clone();
        let prepared = generator::prepare(model, x, Some(&style))?;
        let question = generator::sample_nucleus_prepared(
            model,
            &prepared,
            cfg.top_p,
            cfg.top_k,
            cfg.max_len,
            rng,
        )?;
        let trajectory = generator::candidate_ids(model, &prepared, &question.tokens)
            .expect("sampled tokens are candidates");
        pairs.push(SampledPair {
            style,
            pool_index: i,
            question,
            trajectory,
        });
    }
    Ok(DiversitySample {
        pool,
        pool_scores,
        clusters,
        pairs,
    })
}

/// Retrieval, clustering, per-cluster style choice and nucleus sampling.
#[allow(clippy::too_many_arguments)]
pub fn diversity_sample<M: SequenceModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    x: &ContextAnswer,
    z0: &Template,
    index: &RetrievalIndex,
    params: &RetrieverParams,
    cfg: &SamplingConfig,
    mode: SampleMode,
    rng: &mut R,
) -> Result<DiversitySample> {
    let pool = retrieve_pool(index, params, z0, cfg.pool_size)?;
    sample_from_pool(model, x, z0, pool, params, cfg, mode, rng)
}
