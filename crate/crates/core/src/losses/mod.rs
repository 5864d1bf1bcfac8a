//! Training objectives built on the tape, and the per-variant weighting that
//! turns loss terms into the discriminator, generator and image objectives.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{AutogradError, Real, Tape, Var};

/// Probability clamp inside every `log`.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_g: f64,
    pub lambda_d: f64,
    /// Weight of the MMD / CORAL term in the alignment baselines.
    pub lambda_align: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_g: 0.001,
            lambda_d: 0.5,
            lambda_align: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), AutogradError> {
        if [self.lambda_g, self.lambda_d, self.lambda_align]
            .iter()
            .all(|w| *w >= 0.0 && w.is_finite())
        {
            Ok(())
        } else {
            Err(AutogradError::InvalidArgument(format!(
                "loss weights must be finite and non-negative: {self:?}"
            )))
        }
    }
}

#[derive(
    Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default,
)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Full,
    NoAdv,
    NoSc,
    Mmd,
    Coral,
    Img2a,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Self::Full,
        Self::NoAdv,
        Self::NoSc,
        Self::Mmd,
        Self::Coral,
        Self::Img2a,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoAdv => "no-adv",
            Self::NoSc => "no-sc",
            Self::Mmd => "mmd",
            Self::Coral => "coral",
            Self::Img2a => "img2a",
        }
    }

    /// Whether this variant trains a discriminator.
    pub fn adversarial(self) -> bool {
        matches!(self, Self::Full | Self::NoSc | Self::Img2a)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("unknown variant {0:?} (expected one of full, no-adv, no-sc, mmd, coral, img2a)")]
pub struct UnknownVariant(pub String);

impl FromStr for Variant {
    type Err = UnknownVariant;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        Self::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| UnknownVariant(s.to_string()))
    }
}

/// Multipliers applied to each loss term for one variant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coefficients {
    pub adv_d: f64,
    pub adv_g: f64,
    pub sc: f64,
    pub align: f64,
}

impl Coefficients {
    pub fn new(variant: Variant, w: &LossWeights) -> Self {
        let (adv_d, adv_g, sc, align) = match variant {
            Variant::Full | Variant::Img2a => (w.lambda_d, w.lambda_g, 1.0, 0.0),
            Variant::NoAdv => (0.0, 0.0, 1.0, 0.0),
            Variant::NoSc => (w.lambda_d, w.lambda_g, 0.0, 0.0),
            Variant::Mmd | Variant::Coral => (0.0, 0.0, 1.0, w.lambda_align),
        };
        Self {
            adv_d,
            adv_g,
            sc,
            align,
        }
    }
}

/// Raw loss terms of one batch.
///
/// For `img2a` the image concepts play the generated role, so `l_sc` is the
/// classification loss on image concepts and `l_i` the one on attribute concepts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossParts {
    pub l_i: f64,
    pub l_adv_d: f64,
    pub l_adv_g: f64,
    pub l_sc: f64,
    pub align: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objectives {
    /// Present only for variants that train a discriminator.
    pub discriminator: Option<f64>,
    pub generator: f64,
    pub image: f64,
}

pub fn compose_losses(parts: &LossParts, weights: &LossWeights, variant: Variant) -> Objectives {
    let c = Coefficients::new(variant, weights);
    Objectives {
        discriminator: variant.adversarial().then_some(c.adv_d * parts.l_adv_d),
        generator: generator_objective(parts, &c),
        image: parts.l_i,
    }
}

/// `adv_g * l_adv_g + sc * l_sc + align * align`, summed in that order.
pub fn generator_objective(parts: &LossParts, c: &Coefficients) -> f64 {
    c.adv_g * parts.l_adv_g + c.sc * parts.l_sc + c.align * parts.align
}

fn eps<R: Real>() -> R {
    R::lit(PROB_EPS)
}

/// `l_I`: mean negative log-likelihood of the target semantic ids.
pub fn image_concept_loss<R: Real>(
    tape: &mut Tape<R>,
    logits: Var,
    ids: &[usize],
) -> Result<Var, AutogradError> {
    tape.softmax_cross_entropy(logits, ids)
}

/// `l_sc`: the same form as [`image_concept_loss`], applied to generated concepts.
pub fn semantic_consistency_loss<R: Real>(
    tape: &mut Tape<R>,
    logits: Var,
    ids: &[usize],
) -> Result<Var, AutogradError> {
    tape.softmax_cross_entropy(logits, ids)
}

fn neg_mean_log<R: Real>(tape: &mut Tape<R>, p: Var) -> Result<Var, AutogradError> {
    let l = tape.log_prob(p, eps())?;
    let m = tape.mean(l)?;
    tape.scale(m, -R::one())
}

/// `-E log D(real) - E log(1 - D(fake))`.
pub fn adv_d_loss<R: Real>(
    tape: &mut Tape<R>,
    d_real: Var,
    d_fake: Var,
) -> Result<Var, AutogradError> {
    let real = neg_mean_log(tape, d_real)?;
    let flipped = tape.scale(d_fake, -R::one())?;
    let flipped = tape.add_scalar(flipped, R::one())?;
    let fake = neg_mean_log(tape, flipped)?;
    tape.add(real, fake)
}

/// Non-saturating generator loss `-E log D(fake)`.
pub fn adv_g_loss<R: Real>(tape: &mut Tape<R>, d_fake: Var) -> Result<Var, AutogradError> {
    neg_mean_log(tape, d_fake)
}

fn check_pair<R: Real>(
    tape: &Tape<R>,
    op: &'static str,
    a: Var,
    b: Var,
    min_rows: usize,
) -> Result<usize, AutogradError> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(AutogradError::ShapeMismatch {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    if sa[0] < min_rows || sb[0] < min_rows {
        return Err(AutogradError::InvalidArgument(format!(
            "{op} needs at least {min_rows} rows per batch"
        )));
    }
    Ok(sa[1])
}

fn mean_gap<R: Real>(tape: &mut Tape<R>, a: Var, b: Var) -> Result<Var, AutogradError> {
    let ma = tape.mean_rows(a)?;
    let mb = tape.mean_rows(b)?;
    let d = tape.sub(ma, mb)?;
    let sq = tape.mul(d, d)?;
    tape.sum(sq)
}

/// Linear MMD: `||mean(a) - mean(b)||^2`.
pub fn mmd_loss<R: Real>(tape: &mut Tape<R>, a: Var, b: Var) -> Result<Var, AutogradError> {
    check_pair(tape, "mmd", a, b, 1)?;
    mean_gap(tape, a, b)
}

/// Sample covariance with `1/(n-1)` normalization.
fn covariance<R: Real>(tape: &mut Tape<R>, x: Var) -> Result<Var, AutogradError> {
    let n = tape.shape(x)[0];
    let m = tape.mean_rows(x)?;
    let neg = tape.scale(m, -R::one())?;
    let c = tape.add_row(x, neg)?;
    let ct = tape.transpose(c)?;
    let g = tape.matmul(ct, c)?;
    tape.scale(g, R::lit(1.0 / (n - 1) as f64))
}

/// CORAL with a mean term: `||cov(a) - cov(b)||_F^2 / (4 d^2) + ||mean(a) - mean(b)||^2`.
pub fn coral_loss<R: Real>(tape: &mut Tape<R>, a: Var, b: Var) -> Result<Var, AutogradError> {
    let d = check_pair(tape, "coral", a, b, 2)?;
    let ca = covariance(tape, a)?;
    let cb = covariance(tape, b)?;
    let diff = tape.sub(ca, cb)?;
    let sq = tape.mul(diff, diff)?;
    let fro = tape.sum(sq)?;
    let cov_term = tape.scale(fro, R::lit(1.0 / (4.0 * (d * d) as f64)))?;
    let mean_term = mean_gap(tape, a, b)?;
    tape.add(cov_term, mean_term)
}
