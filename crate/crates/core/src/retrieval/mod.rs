//! Attribute-to-image retrieval: embed the gallery, rank it by cosine distance
//! to each query's attribute concept, and score the rankings with CMC and mAP.
//!
//! Relevance is semantic-id equality. Every query must have at least one
//! relevant gallery image. Ties in distance go to the lower gallery image index.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{AutogradError, Real, Tensor};
use crate::model::{stack_rows, Model};
use crate::synthdata::{AttributeVector, DatasetSplit, Sample, SemanticId};

/// Environment variable capping evaluation threads.
pub const THREADS_ENV: &str = "AIRID_THREADS";

const EMBED_CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("gallery image {image_index} has a zero-norm concept")]
    ZeroNormGallery { image_index: usize },
    #[error("query concept has zero norm")]
    ZeroNormQuery,
    #[error("query {query} (semantic id {id}) has no relevant gallery item")]
    NoRelevant { query: usize, id: usize },
    #[error("{what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

/// Gallery concepts with cached norms, row-aligned with ids and image indices.
#[derive(Clone, Debug, PartialEq)]
pub struct GalleryIndex {
    dim: usize,
    concepts: Vec<f64>,
    norms: Vec<f64>,
    pub ids: Vec<SemanticId>,
    pub image_indices: Vec<usize>,
}

impl GalleryIndex {
    pub fn new(
        dim: usize,
        concepts: Vec<f64>,
        ids: Vec<SemanticId>,
        image_indices: Vec<usize>,
    ) -> Result<Self, EvalError> {
        let n = ids.len();
        if n == 0 {
            return Err(EvalError::EmptyGallery);
        }
        if image_indices.len() != n {
            return Err(EvalError::Dimension {
                what: "image indices",
                expected: n,
                got: image_indices.len(),
            });
        }
        if concepts.len() != n * dim {
            return Err(EvalError::Dimension {
                what: "gallery values",
                expected: n * dim,
                got: concepts.len(),
            });
        }
        let norms: Vec<f64> = concepts.chunks(dim).map(norm).collect();
        if let Some(i) = norms.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(EvalError::ZeroNormGallery {
                image_index: image_indices[i],
            });
        }
        Ok(Self {
            dim,
            concepts,
            norms,
            ids,
            image_indices,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.concepts[i * self.dim..(i + 1) * self.dim]
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `1 - u.v / (|u| |v|)`.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    1.0 - dot / (norm(u) * norm(v))
}

/// A query's gallery ordering.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedResult {
    pub query_id: SemanticId,
    /// Gallery rows, nearest first.
    pub order: Vec<usize>,
    /// Distances aligned with `order`, non-decreasing.
    pub distances: Vec<f64>,
}

/// Ranks every gallery row by cosine distance to `query`.
pub fn rank_concept(
    query: &[f64],
    query_id: SemanticId,
    index: &GalleryIndex,
) -> Result<RankedResult, EvalError> {
    if query.len() != index.dim {
        return Err(EvalError::Dimension {
            what: "query concept",
            expected: index.dim,
            got: query.len(),
        });
    }
    let qn = norm(query);
    if !(qn > 0.0 && qn.is_finite()) {
        return Err(EvalError::ZeroNormQuery);
    }
    let dist: Vec<f64> = (0..index.len())
        .map(|i| {
            let dot: f64 = query.iter().zip(index.row(i)).map(|(a, b)| a * b).sum();
            1.0 - dot / (qn * index.norms[i])
        })
        .collect();
    let mut order: Vec<usize> = (0..index.len()).collect();
    order.sort_by(|&a, &b| {
        dist[a]
            .total_cmp(&dist[b])
            .then_with(|| index.image_indices[a].cmp(&index.image_indices[b]))
    });
    let distances = order.iter().map(|&i| dist[i]).collect();
    Ok(RankedResult {
        query_id,
        order,
        distances,
    })
}

/// Embeds the query's attribute vector and ranks the gallery against it.
pub fn rank_gallery<R: Real>(
    query: &AttributeVector,
    query_id: SemanticId,
    index: &GalleryIndex,
    model: &Model<R>,
) -> Result<RankedResult, EvalError> {
    let c = model.embed_attributes(stack_rows(&[query.to_reals::<f32>()])?)?;
    rank_concept(&c.to_f64_vec(), query_id, index)
}

fn with_pool<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    let threads = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0);
    match threads.and_then(|n| rayon::ThreadPoolBuilder::new().num_threads(n).build().ok()) {
        Some(pool) => pool.install(f),
        None => f(),
    }
}

fn embed_rows<R: Real>(
    rows: &[Vec<f32>],
    f: impl Fn(Tensor<R>) -> Result<Tensor<R>, AutogradError> + Sync,
) -> Result<Vec<f64>, EvalError> {
    let chunks = rows
        .par_chunks(EMBED_CHUNK)
        .map(|c| Ok(f(stack_rows(c)?)?.to_f64_vec()))
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok(chunks.concat())
}

/// Eval-mode image concepts for every gallery sample.
pub fn embed_gallery<R: Real>(
    gallery: &[Sample],
    model: &Model<R>,
) -> Result<GalleryIndex, EvalError> {
    if gallery.is_empty() {
        return Err(EvalError::EmptyGallery);
    }
    let rows: Vec<Vec<f32>> = gallery.iter().map(|s| s.image.pixels.clone()).collect();
    let concepts = with_pool(|| embed_rows(&rows, |t| model.embed_images(t)))?;
    GalleryIndex::new(
        model.config().embedding_size,
        concepts,
        gallery.iter().map(|s| s.image.semantic_id).collect(),
        gallery.iter().map(|s| s.index).collect(),
    )
}

/// Position of the first relevant item and the relevant positions of each result.
fn relevant_positions(
    results: &[RankedResult],
    gallery_ids: &[SemanticId],
) -> Result<Vec<Vec<usize>>, EvalError> {
    results
        .iter()
        .enumerate()
        .map(|(q, r)| {
            let hits: Vec<usize> = r
                .order
                .iter()
                .enumerate()
                .filter(|(_, &g)| gallery_ids[g] == r.query_id)
                .map(|(p, _)| p)
                .collect();
            if hits.is_empty() {
                Err(EvalError::NoRelevant {
                    query: q,
                    id: r.query_id.0,
                })
            } else {
                Ok(hits)
            }
        })
        .collect()
}

/// `cmc[k]`: fraction of queries whose first relevant item is within the top `k + 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CmcCurve(pub Vec<f64>);

impl CmcCurve {
    /// Accuracy within the top `k` (1-based), saturating at the gallery size.
    pub fn at(&self, k: usize) -> f64 {
        self.0[(k.max(1) - 1).min(self.0.len() - 1)]
    }
}

pub fn compute_cmc(
    results: &[RankedResult],
    gallery_ids: &[SemanticId],
) -> Result<CmcCurve, EvalError> {
    if results.is_empty() {
        return Err(EvalError::Dimension {
            what: "queries",
            expected: 1,
            got: 0,
        });
    }
    let n = gallery_ids.len();
    let hits = relevant_positions(results, gallery_ids)?;
    let mut counts = vec![0usize; n];
    for h in &hits {
        counts[h[0]] += 1;
    }
    let q = results.len() as f64;
    let mut acc = 0;
    Ok(CmcCurve(
        counts
            .into_iter()
            .map(|c| {
                acc += c;
                acc as f64 / q
            })
            .collect(),
    ))
}

/// Mean over queries of `(1/R) sum_hits (relevant in top p) / p`.
pub fn compute_map(results: &[RankedResult], gallery_ids: &[SemanticId]) -> Result<f64, EvalError> {
    if results.is_empty() {
        return Err(EvalError::Dimension {
            what: "queries",
            expected: 1,
            got: 0,
        });
    }
    let hits = relevant_positions(results, gallery_ids)?;
    let total: f64 = hits
        .iter()
        .map(|h| {
            h.iter()
                .enumerate()
                .map(|(k, &p)| (k + 1) as f64 / (p + 1) as f64)
                .sum::<f64>()
                / h.len() as f64
        })
        .sum();
    Ok(total / results.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub cmc: CmcCurve,
    pub num_queries: usize,
    pub gallery_size: usize,
}

impl Metrics {
    pub fn from_results(
        results: &[RankedResult],
        gallery_ids: &[SemanticId],
    ) -> Result<Self, EvalError> {
        let cmc = compute_cmc(results, gallery_ids)?;
        Ok(Self {
            rank1: cmc.at(1),
            rank5: cmc.at(5),
            rank10: cmc.at(10),
            map: compute_map(results, gallery_ids)?,
            cmc,
            num_queries: results.len(),
            gallery_size: gallery_ids.len(),
        })
    }
}

/// Ranks the gallery for every test query and scores the result.
pub fn evaluate<R: Real>(
    split: &DatasetSplit,
    model: &Model<R>,
) -> Result<(Metrics, Vec<RankedResult>), EvalError> {
    let index = embed_gallery(&split.gallery, model)?;
    let rows: Vec<Vec<f32>> = split
        .queries
        .iter()
        .map(|q| q.attributes.to_reals())
        .collect();
    if rows.is_empty() {
        return Err(EvalError::Dimension {
            what: "queries",
            expected: 1,
            got: 0,
        });
    }
    let results = with_pool(|| -> Result<Vec<RankedResult>, EvalError> {
        let concepts = embed_rows(&rows, |t| model.embed_attributes(t))?;
        let d = index.dim();
        split
            .queries
            .par_iter()
            .enumerate()
            .map(|(q, query)| {
                rank_concept(&concepts[q * d..(q + 1) * d], query.semantic_id, &index)
            })
            .collect()
    })?;
    Ok((Metrics::from_results(&results, &index.ids)?, results))
}

fn write(path: &Path, bytes: Vec<u8>) -> Result<(), EvalError> {
    fs::write(path, bytes).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// `report.csv`: one row per rank cutoff.
pub fn write_report_csv(metrics: &Metrics, path: &Path) -> Result<(), EvalError> {
    let mut out = String::from("rank,cmc\n");
    for (k, v) in metrics.cmc.0.iter().enumerate() {
        out.push_str(&format!("{},{}\n", k + 1, v));
    }
    write(path, out.into_bytes())
}

/// `rankings.tsv`: `query_id rank gallery_image_index distance relevant` per ranked item.
pub fn write_rankings_tsv(
    results: &[RankedResult],
    index_ids: &[SemanticId],
    image_indices: &[usize],
    path: &Path,
) -> Result<(), EvalError> {
    let mut out = String::from("query_id\trank\tgallery_image_index\tdistance\trelevant\n");
    for r in results {
        for (k, (&g, d)) in r.order.iter().zip(&r.distances).enumerate() {
            let rel = (index_ids[g] == r.query_id) as u8;
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                r.query_id.0,
                k + 1,
                image_indices[g],
                d,
                rel
            ));
        }
    }
    write(path, out.into_bytes())
}
