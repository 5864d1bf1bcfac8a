use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{AttributeSchema, AttributeVector, DataError, SemanticId};

pub const CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub height: usize,
    pub width: usize,
    pub background: f32,
    pub noise_sigma: f32,
    /// Per-image illumination scale is drawn uniformly from `[lo, hi)`.
    pub illumination: (f32, f32),
    /// Extra multiplicative illumination per view; its length is the number of views.
    pub view_bias: Vec<f32>,
    /// Vertical shift drawn uniformly from `-max_jitter..=max_jitter` rows.
    pub max_jitter: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 8,
            background: 0.45,
            noise_sigma: 0.05,
            illumination: (0.7, 1.3),
            view_bias: vec![1.0, 0.85],
            max_jitter: 1,
        }
    }
}

impl RenderConfig {
    /// No noise, unit illumination, no jitter.
    pub fn clean(height: usize, width: usize, views: usize) -> Self {
        Self {
            height,
            width,
            noise_sigma: 0.0,
            illumination: (1.0, 1.0),
            view_bias: vec![1.0; views],
            max_jitter: 0,
            ..Self::default()
        }
    }

    pub fn views(&self) -> usize {
        self.view_bias.len()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width * CHANNELS
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidArgument(format!("render config: {m}")));
        if self.height == 0 || self.width == 0 {
            return bad("canvas must be non-empty");
        }
        if self.view_bias.is_empty() {
            return bad("need at least one view");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and non-negative");
        }
        let (lo, hi) = self.illumination;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad("illumination range must satisfy 0 < lo <= hi");
        }
        if self.max_jitter >= self.height {
            return bad("max_jitter must be smaller than the height");
        }
        Ok(())
    }
}

/// One rendered image, `height x width x 3` row-major in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PersonImage {
    pub pixels: Vec<f32>,
    pub view_id: u32,
    pub semantic_id: SemanticId,
}

/// SplitMix64 finalizer over `seed ^ index`, used to give every image its own stream.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct Renderer {
    schema: AttributeSchema,
    config: RenderConfig,
}

impl Renderer {
    pub fn new(schema: AttributeSchema, config: RenderConfig) -> Result<Self, DataError> {
        config.validate()?;
        schema.validate(config.height, config.width)?;
        Ok(Self { schema, config })
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.schema
    }

    pub fn config(&self) -> &RenderConfig {
        &self.config
    }

    /// Noise-free drawing: background, then each group in schema order.
    pub fn base(&self, attrs: &AttributeVector) -> Result<Vec<f32>, DataError> {
        let settings = self.schema.decode(attrs)?;
        let (h, w) = (self.config.height, self.config.width);
        let mut px = vec![self.config.background; h * w * CHANNELS];
        for (g, &s) in self.schema.groups.iter().zip(&settings) {
            let color = match g.kind {
                super::GroupKind::Binary if s == 0 => continue,
                super::GroupKind::Binary => g.colors[0],
                super::GroupKind::Categorical { .. } => g.colors[s],
            };
            for r in g.region.rows.0..g.region.rows.1 {
                for c in g.region.cols.0..g.region.cols.1 {
                    if g.paints(r, c) {
                        px[(r * w + c) * CHANNELS..][..CHANNELS].copy_from_slice(&color);
                    }
                }
            }
        }
        Ok(px)
    }

    /// Base drawing plus seeded jitter, illumination and pixel noise, clamped to `[0, 1]`.
    pub fn render(
        &self,
        attrs: &AttributeVector,
        view: u32,
        seed: u64,
    ) -> Result<Vec<f32>, DataError> {
        let cfg = &self.config;
        let bias = *cfg.view_bias.get(view as usize).ok_or_else(|| {
            DataError::InvalidArgument(format!("view {view} outside 0..{}", cfg.views()))
        })?;
        let base = self.base(attrs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let j = cfg.max_jitter as i64;
        let shift = rng.random_range(-j..=j);
        let (lo, hi) = cfg.illumination;
        let gain = if lo < hi {
            rng.random_range(lo..hi)
        } else {
            lo
        } * bias;
        let noise = Normal::new(0.0f32, cfg.noise_sigma).expect("validated sigma");

        let (h, w) = (cfg.height as i64, cfg.width);
        let row_len = w * CHANNELS;
        let mut out = Vec::with_capacity(base.len());
        for r in 0..h {
            let src = r - shift;
            let row = if (0..h).contains(&src) {
                &base[src as usize * row_len..][..row_len]
            } else {
                &[][..]
            };
            for k in 0..row_len {
                let v = row.get(k).copied().unwrap_or(cfg.background) * gain;
                let n = if cfg.noise_sigma > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                out.push((v + n).clamp(0.0, 1.0));
            }
        }
        Ok(out)
    }
}
