//! Loss terms and their weighted totals.
//!
//! The adversarial part is the Wasserstein critic form (no sigmoid, no log):
//! the critic is pushed to separate real from fake scores and is regularized
//! by a gradient penalty along real-fake interpolations. Domain
//! classification keeps the negative-log-softmax form. Cycle and latent
//! recovery are mean-reduced L1 distances so the weights are independent of
//! resolution and latent size, and the KL term is the closed form for a
//! unit-variance posterior against the standard-normal prior.

use thiserror::Error;

use crate::config::LossWeights;
use crate::rng::RandomSource;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("class target {target} out of range for K={k}")]
    TargetOutOfRange { target: usize, k: usize },
}

/// Named scalar value of every objective term for one step.
///
/// Serialized order: adv_d, adv_g, gp, cls_real, cls_fake, cycle_image,
/// latent_l1, kl, total_d, total_g — fixed six-decimal formatting.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub adv_d: f64,
    pub adv_g: f64,
    pub gp: f64,
    pub cls_real: f64,
    pub cls_fake: f64,
    pub cycle_image: f64,
    pub latent_l1: f64,
    pub kl: f64,
    pub total_d: f64,
    pub total_g: f64,
}

impl LossReport {
    pub const FIELDS: [&'static str; 10] = [
        "adv_d",
        "adv_g",
        "gp",
        "cls_real",
        "cls_fake",
        "cycle_image",
        "latent_l1",
        "kl",
        "total_d",
        "total_g",
    ];

    pub fn values(&self) -> [f64; 10] {
        [
            self.adv_d,
            self.adv_g,
            self.gp,
            self.cls_real,
            self.cls_fake,
            self.cycle_image,
            self.latent_l1,
            self.kl,
            self.total_d,
            self.total_g,
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }

    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        Self::FIELDS
            .iter()
            .zip(self.values())
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| *n)
    }

    /// One comma-separated `name=value` log line.
    pub fn log_line(&self) -> String {
        Self::FIELDS
            .iter()
            .zip(self.values())
            .map(|(n, v)| format!("{n}={v:.6}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

fn ensure_finite(t: &Tape, v: Var, term: &'static str) -> Result<(), ObjectiveError> {
    if t.value(v).all_finite() {
        Ok(())
    } else {
        Err(ObjectiveError::NonFinite(term))
    }
}

/// Critic averages: `(mean(real) - mean(fake), -mean(fake))`.
///
/// The first value is the score gap the critic maximizes (the discriminator
/// total negates it); the second is the generator's adversarial part.
pub fn adv_scores(t: &Tape, real: Var, fake: Var) -> Result<(Var, Var), ObjectiveError> {
    ensure_finite(t, real, "real scores")?;
    ensure_finite(t, fake, "fake scores")?;
    let mean_real = t.mean_all(real);
    let mean_fake = t.mean_all(fake);
    let adv_d = t.sub(mean_real, mean_fake);
    let adv_g = t.neg(mean_fake);
    Ok((adv_d, adv_g))
}

/// Gradient penalty along per-sample interpolations between `real` and
/// `fake`: `mean((||d critic / d interp||_2 - 1)^2)`, unweighted.
///
/// `critic` must map an image batch var to per-sample scalar scores `[N]`.
/// The inner gradient is built on the tape, so differentiating the returned
/// value reaches the critic parameters through the gradient itself.
pub fn gradient_penalty(
    t: &Tape,
    critic: impl FnOnce(&Tape, Var) -> Var,
    real: &Tensor,
    fake: &Tensor,
    rng: &mut RandomSource,
) -> Result<Var, ObjectiveError> {
    if real.shape() != fake.shape() {
        return Err(ObjectiveError::Shape(format!(
            "real {:?} vs fake {:?}",
            real.shape(),
            fake.shape()
        )));
    }
    let (n, c, h, w) = real.dim4();
    let per = c * h * w;
    let mut interp = vec![0.0; n * per];
    for s in 0..n {
        let alpha = rng.uniform();
        let r = &real.data()[s * per..(s + 1) * per];
        let f = &fake.data()[s * per..(s + 1) * per];
        for i in 0..per {
            interp[s * per + i] = alpha * r[i] + (1.0 - alpha) * f[i];
        }
    }
    let x_hat = t.input(Tensor::new(vec![n, c, h, w], interp));
    let scores = critic(t, x_hat);
    assert_eq!(t.shape(scores), vec![n], "critic must return [N] scores");
    // Samples are independent through the critic, so the gradient of the
    // sum separates into per-sample gradients.
    let total = t.sum_all(scores);
    let grad = t.grad(total, &[x_hat])[0];
    let norms = t.sqrt(t.sum_per_sample(t.mul(grad, grad)));
    let gap = t.add_scalar(norms, -1.0);
    let penalty = t.mean_all(t.mul(gap, gap));
    ensure_finite(t, penalty, "gradient penalty")?;
    Ok(penalty)
}

/// Mean negative log-softmax of the target class: `logits [N,K]`,
/// one target index per row.
pub fn classification_loss(
    t: &Tape,
    logits: Var,
    targets: &[usize],
) -> Result<Var, ObjectiveError> {
    let sh = t.shape(logits);
    if sh.len() != 2 || sh[0] != targets.len() {
        return Err(ObjectiveError::Shape(format!(
            "logits {sh:?} vs {} targets",
            targets.len()
        )));
    }
    let (n, k) = (sh[0], sh[1]);
    for &target in targets {
        if target >= k {
            return Err(ObjectiveError::TargetOutOfRange { target, k });
        }
    }
    // Row max is detached; subtracting a constant leaves the loss unchanged
    // but keeps exp() in range.
    let lv = t.value(logits);
    let mut maxes = vec![0.0; n * k];
    let mut onehot = vec![0.0; n * k];
    for (i, row) in lv.data().chunks_exact(k).enumerate() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        maxes[i * k..(i + 1) * k].fill(m);
        onehot[i * k + targets[i]] = 1.0;
    }
    let shifted = t.sub(logits, t.constant(Tensor::new(vec![n, k], maxes)));
    let lse = t.ln(t.sum_per_sample(t.exp(shifted)));
    let picked = t.sum_per_sample(t.mul(shifted, t.constant(Tensor::new(vec![n, k], onehot))));
    let nll = t.sub(lse, picked);
    let loss = t.mean_all(nll);
    ensure_finite(t, loss, "classification loss")?;
    Ok(loss)
}

/// Mean absolute element-wise difference.
pub fn l1_distance(t: &Tape, a: Var, b: Var) -> Result<Var, ObjectiveError> {
    let (sa, sb) = (t.shape(a), t.shape(b));
    if sa != sb {
        return Err(ObjectiveError::Shape(format!("{sa:?} vs {sb:?}")));
    }
    Ok(t.mean_all(t.abs(t.sub(a, b))))
}

/// `KL(N(mu, I) || N(0, I)) = 0.5 * ||mu||^2`, averaged over the batch.
pub fn kl_to_prior(t: &Tape, mu: Var) -> Var {
    let n = t.shape(mu)[0];
    t.scale(t.sum_all(t.mul(mu, mu)), 0.5 / n as f64)
}

/// Discriminator total: `-adv_d + lambda_gp * gp + lambda_cls_real * cls_real`.
pub fn total_d(t: &Tape, adv_d: Var, gp: Var, cls_real: Var, w: &LossWeights) -> Var {
    let a = t.add(t.neg(adv_d), t.scale(gp, w.lambda_gp));
    t.add(a, t.scale(cls_real, w.lambda_cls_real))
}

/// Generator/encoder total: `adv_g + lambda_cls * cls_fake + lambda_image *
/// cycle + lambda_latent * latent + lambda_kl * kl`.
pub fn total_g(
    t: &Tape,
    adv_g: Var,
    cls_fake: Var,
    cycle: Var,
    latent: Var,
    kl: Var,
    w: &LossWeights,
) -> Var {
    let mut acc = t.add(adv_g, t.scale(cls_fake, w.lambda_cls));
    acc = t.add(acc, t.scale(cycle, w.lambda_image));
    acc = t.add(acc, t.scale(latent, w.lambda_latent));
    t.add(acc, t.scale(kl, w.lambda_kl))
}

/// Plain-value twin of [`total_d`], same operation order.
pub fn total_d_value(adv_d: f64, gp: f64, cls_real: f64, w: &LossWeights) -> f64 {
    (-adv_d + gp * w.lambda_gp) + cls_real * w.lambda_cls_real
}

/// Plain-value twin of [`total_g`], same operation order.
pub fn total_g_value(
    adv_g: f64,
    cls_fake: f64,
    cycle: f64,
    latent: f64,
    kl: f64,
    w: &LossWeights,
) -> f64 {
    (((adv_g + cls_fake * w.lambda_cls) + cycle * w.lambda_image) + latent * w.lambda_latent)
        + kl * w.lambda_kl
}
