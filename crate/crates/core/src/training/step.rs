use crate::autograd::{AutogradError, Real, Tape, Tensor, Var};
use crate::losses::{
    adv_d_loss, adv_g_loss, coral_loss, image_concept_loss, mmd_loss, semantic_consistency_loss,
    Coefficients, LossWeights, Variant,
};
use crate::model::{Bind, Mode, Model};

/// Images, their attribute vectors and semantic ids, row-aligned.
#[derive(Clone, Debug)]
pub struct Batch<R: Real> {
    pub images: Tensor<R>,
    pub attributes: Tensor<R>,
    pub ids: Vec<usize>,
}

/// Image and attribute concepts `(C^I, C^A)` for one batch.
pub fn concepts<R: Real>(
    model: &mut Model<R>,
    tape: &mut Tape<R>,
    batch: &Batch<R>,
    image_mode: Mode,
    image_bind: Bind,
    generator_mode: Mode,
) -> Result<(Var, Var), AutogradError> {
    let xi = tape.constant(batch.images.clone())?;
    let xa = tape.constant(batch.attributes.clone())?;
    let ci = model.forward_image(tape, xi, image_mode, image_bind)?;
    let ca = model.forward_generator(tape, xa, generator_mode, Bind::Trainable)?;
    Ok((ci, ca))
}

/// `(real, generated)` concepts: attributes generate towards images, except for `img2a`.
pub fn roles(variant: Variant, ci: Var, ca: Var) -> (Var, Var) {
    match variant {
        Variant::Img2a => (ca, ci),
        _ => (ci, ca),
    }
}

pub struct DiscriminatorPass {
    /// `lambda_D * l_adv^D`, the quantity differentiated.
    pub objective: Var,
    pub l_adv_d: Var,
}

/// Discriminator objective on constant copies of `real` and `fake`.
///
/// Both batches go through the discriminator as one stacked batch so its
/// batchnorm sees both modalities.
pub fn discriminator_objective<R: Real>(
    model: &mut Model<R>,
    tape: &mut Tape<R>,
    real: &Tensor<R>,
    fake: &Tensor<R>,
    weights: &LossWeights,
    mode: Mode,
) -> Result<DiscriminatorPass, AutogradError> {
    let n = real.shape()[0];
    let r = tape.constant(real.detached())?;
    let f = tape.constant(fake.detached())?;
    let both = tape.concat_rows(&[r, f])?;
    let p = model.forward_discriminator(tape, both, mode, Bind::Trainable)?;
    let total = tape.shape(p)[0];
    let pr = tape.slice_rows(p, 0, n)?;
    let pf = tape.slice_rows(p, n, total)?;
    let l_adv_d = adv_d_loss(tape, pr, pf)?;
    let objective = tape.scale(l_adv_d, R::lit(weights.lambda_d))?;
    Ok(DiscriminatorPass { objective, l_adv_d })
}

pub struct GeneratorPass {
    /// Generator objective plus `l_I`, the quantity differentiated.
    pub total: Var,
    pub generator_objective: Var,
    pub l_i: Var,
    pub l_sc: Var,
    pub l_adv_g: Option<Var>,
    pub align: Option<Var>,
}

fn weighted<R: Real>(
    tape: &mut Tape<R>,
    acc: Option<Var>,
    term: Var,
    w: f64,
) -> Result<Option<Var>, AutogradError> {
    if w == 0.0 {
        return Ok(acc);
    }
    let t = if w == 1.0 {
        term
    } else {
        tape.scale(term, R::lit(w))?
    };
    Ok(Some(match acc {
        Some(a) => tape.add(a, t)?,
        None => t,
    }))
}

/// Generator, classifier and image objective for one batch of concepts.
///
/// The discriminator is bound frozen and normalizes with batch statistics of
/// the stacked `[real; generated]` batch without touching its running stats.
/// Terms whose coefficient is zero for `variant` are left out of the sum but
/// still evaluated for logging where cheap.
pub fn generator_objective<R: Real>(
    model: &mut Model<R>,
    tape: &mut Tape<R>,
    ci: Var,
    ca: Var,
    ids: &[usize],
    variant: Variant,
    weights: &LossWeights,
) -> Result<GeneratorPass, AutogradError> {
    let c = Coefficients::new(variant, weights);
    let (real, generated) = roles(variant, ci, ca);

    let l_adv_g = if variant.adversarial() {
        let n = tape.shape(real)[0];
        let r = tape.detach(real);
        let both = tape.concat_rows(&[r, generated])?;
        let p = model.forward_discriminator(tape, both, Mode::TrainFrozenStats, Bind::Frozen)?;
        let total = tape.shape(p)[0];
        let pf = tape.slice_rows(p, n, total)?;
        Some(adv_g_loss(tape, pf)?)
    } else {
        None
    };

    let logits_real = model.forward_classifier(tape, real, Bind::Trainable)?;
    let logits_gen = model.forward_classifier(tape, generated, Bind::Trainable)?;
    let l_i = image_concept_loss(tape, logits_real, ids)?;
    let l_sc = semantic_consistency_loss(tape, logits_gen, ids)?;

    let align = match variant {
        Variant::Mmd | Variant::Coral => {
            let fixed = tape.detach(ci);
            Some(if variant == Variant::Mmd {
                mmd_loss(tape, fixed, ca)?
            } else {
                coral_loss(tape, fixed, ca)?
            })
        }
        _ => None,
    };

    let mut g = None;
    if let Some(l) = l_adv_g {
        g = weighted(tape, g, l, c.adv_g)?;
    }
    g = weighted(tape, g, l_sc, c.sc)?;
    if let Some(a) = align {
        g = weighted(tape, g, a, c.align)?;
    }
    let generator_objective = match g {
        Some(v) => v,
        None => tape.constant(Tensor::scalar(R::zero()))?,
    };
    let total = tape.add(generator_objective, l_i)?;
    Ok(GeneratorPass {
        total,
        generator_objective,
        l_i,
        l_sc,
        l_adv_g,
        align,
    })
}
