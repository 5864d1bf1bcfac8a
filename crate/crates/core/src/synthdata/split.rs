use std::collections::{BTreeSet, HashSet};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::render::mix_seed;
use super::{
    AttributeSchema, AttributeVector, DataError, PersonImage, RenderConfig, Renderer, SemanticId,
};

/// Above this many combinations, vectors are drawn by rejection instead of enumeration.
const ENUMERATION_LIMIT: u128 = 1 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub n_train_ids: usize,
    pub n_test_ids: usize,
    pub imgs_per_id_per_view: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            n_train_ids: 40,
            n_test_ids: 20,
            imgs_per_id_per_view: 6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Position in the dataset-wide image list (train images first, then gallery).
    pub index: usize,
    pub image: PersonImage,
    pub attributes: AttributeVector,
}

/// An attribute-only query; `image_index` names a gallery image carrying the same vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub attributes: AttributeVector,
    pub semantic_id: SemanticId,
    pub image_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub schema: AttributeSchema,
    pub render: RenderConfig,
    pub train: Vec<Sample>,
    pub gallery: Vec<Sample>,
    pub queries: Vec<Query>,
}

impl DatasetSplit {
    pub fn image_len(&self) -> usize {
        self.render.pixels()
    }

    /// Number of distinct semantic ids among training samples; classifier output width.
    pub fn num_train_ids(&self) -> usize {
        self.train
            .iter()
            .map(|s| s.image.semantic_id)
            .collect::<BTreeSet<_>>()
            .len()
    }

    pub fn num_test_ids(&self) -> usize {
        self.queries.len()
    }

    /// All samples in index order.
    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.train.iter().chain(&self.gallery)
    }

    /// Checks every structural invariant of a split.
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Inconsistent(m));
        self.render.validate()?;
        self.schema
            .validate(self.render.height, self.render.width)?;
        let mut by_vector = std::collections::HashMap::new();
        let mut by_id = std::collections::HashMap::new();
        for (pos, s) in self.samples().enumerate() {
            if s.index != pos {
                return bad(format!("sample at position {pos} has index {}", s.index));
            }
            self.schema.check(&s.attributes)?;
            if s.image.pixels.len() != self.image_len() {
                return bad(format!(
                    "image {pos} has {} values, expected {}",
                    s.image.pixels.len(),
                    self.image_len()
                ));
            }
            if !s.image.pixels.iter().all(|v| (0.0..=1.0).contains(v)) {
                return bad(format!("image {pos} has pixels outside [0, 1]"));
            }
            if s.image.view_id as usize >= self.render.views() {
                return bad(format!("image {pos} has view {}", s.image.view_id));
            }
            let id = s.image.semantic_id;
            if *by_vector.entry(&s.attributes).or_insert(id) != id
                || *by_id.entry(id).or_insert(&s.attributes) != &s.attributes
            {
                return bad(format!(
                    "image {pos}: semantic id {} is not a bijection with attribute vectors",
                    id.0
                ));
            }
        }
        let train_ids: HashSet<_> = self.train.iter().map(|s| s.image.semantic_id).collect();
        let n_train = train_ids.len();
        if train_ids.iter().any(|id| id.0 >= n_train) {
            return bad("training semantic ids are not 0..n".into());
        }
        let gallery_ids: HashSet<_> = self.gallery.iter().map(|s| s.image.semantic_id).collect();
        if let Some(id) = train_ids.intersection(&gallery_ids).next() {
            return bad(format!("semantic id {} appears in train and gallery", id.0));
        }
        let mut seen = HashSet::new();
        for (qi, q) in self.queries.iter().enumerate() {
            if !seen.insert(q.semantic_id) {
                return bad(format!(
                    "query {qi} repeats semantic id {}",
                    q.semantic_id.0
                ));
            }
            let g = q
                .image_index
                .checked_sub(self.train.len())
                .and_then(|i| self.gallery.get(i))
                .ok_or_else(|| {
                    DataError::Inconsistent(format!(
                        "query {qi} references non-gallery image {}",
                        q.image_index
                    ))
                })?;
            if g.attributes != q.attributes || g.image.semantic_id != q.semantic_id {
                return bad(format!(
                    "query {qi} disagrees with gallery image {}",
                    q.image_index
                ));
            }
        }
        if seen.len() != gallery_ids.len() {
            return bad(format!(
                "{} queries for {} gallery ids",
                seen.len(),
                gallery_ids.len()
            ));
        }
        Ok(())
    }
}

/// Mixed-radix decoding of a combination number into per-group settings.
fn settings_of(schema: &AttributeSchema, mut n: u128) -> Vec<usize> {
    schema
        .groups
        .iter()
        .map(|g| {
            let a = g.arity() as u128;
            let s = (n % a) as usize;
            n /= a;
            s
        })
        .collect()
}

fn sample_vectors(
    schema: &AttributeSchema,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<AttributeVector>, DataError> {
    let max = schema.combinations();
    if count as u128 > max {
        return Err(DataError::InsufficientCombinations {
            requested: count as u128,
            max,
        });
    }
    let numbers: Vec<u128> = if max <= ENUMERATION_LIMIT {
        index::sample(rng, max as usize, count)
            .into_iter()
            .map(|i| i as u128)
            .collect()
    } else {
        let mut seen = HashSet::with_capacity(count);
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let n = rng.random_range(0..max);
            if seen.insert(n) {
                out.push(n);
            }
        }
        out
    };
    numbers
        .into_iter()
        .map(|n| schema.encode(&settings_of(schema, n)))
        .collect()
}

/// Draws `n_train_ids + n_test_ids` distinct attribute vectors and renders their images.
///
/// Training ids are `0..n_train_ids`, test ids follow. Images are laid out by id,
/// then view, then replicate; each has its own seed derived from its index.
pub fn make_split(
    schema: &AttributeSchema,
    render: &RenderConfig,
    cfg: &SplitConfig,
) -> Result<DatasetSplit, DataError> {
    if cfg.n_train_ids == 0 || cfg.n_test_ids == 0 || cfg.imgs_per_id_per_view == 0 {
        return Err(DataError::InvalidArgument(
            "id counts and images per id must be positive".into(),
        ));
    }
    let renderer = Renderer::new(schema.clone(), render.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let vectors = sample_vectors(schema, cfg.n_train_ids + cfg.n_test_ids, &mut rng)?;
    let ids = super::assign_semantic_ids(schema, &vectors)?;

    let views = render.views();
    let per_id = views * cfg.imgs_per_id_per_view;
    let plan: Vec<(usize, u32)> = (0..vectors.len())
        .flat_map(|v| {
            (0..views as u32)
                .flat_map(move |view| std::iter::repeat_n((v, view), cfg.imgs_per_id_per_view))
        })
        .collect();
    let samples = plan
        .par_iter()
        .enumerate()
        .map(|(index, &(v, view))| {
            let pixels = renderer.render(&vectors[v], view, mix_seed(cfg.seed, index as u64))?;
            Ok(Sample {
                index,
                image: PersonImage {
                    pixels,
                    view_id: view,
                    semantic_id: ids[v],
                },
                attributes: vectors[v].clone(),
            })
        })
        .collect::<Result<Vec<_>, DataError>>()?;

    let mut train = samples;
    let gallery = train.split_off(cfg.n_train_ids * per_id);
    let queries = (cfg.n_train_ids..vectors.len())
        .map(|v| Query {
            attributes: vectors[v].clone(),
            semantic_id: ids[v],
            image_index: v * per_id,
        })
        .collect();
    Ok(DatasetSplit {
        schema: schema.clone(),
        render: render.clone(),
        train,
        gallery,
        queries,
    })
}
