//! Dice Focal loss over a batch of pooled pixels.
//!
//! `loss = λ_dice · (1 − (2Σpg + ε)/(Σp + Σg + ε)) + λ_focal · mean(−(1−p_t)^γ · ln p_t)`
//! where `p_t = p` on vessel pixels and `1 − p` on background, and `p` is
//! clamped to `[clip, 1 − clip]` inside the focal term.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LossParams {
    pub lambda_dice: f64,
    pub lambda_focal: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub prob_clip: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams {
            lambda_dice: 1.0,
            lambda_focal: 1.0,
            gamma: 2.0,
            epsilon: 1.0,
            prob_clip: 1e-7,
        }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_dice < 0.0 || self.lambda_focal < 0.0 || self.lambda_dice + self.lambda_focal <= 0.0 {
            return Err(Error::Config(
                "loss weights must be nonnegative with a positive sum".into(),
            ));
        }
        if self.gamma.is_nan() || self.gamma < 0.0 {
            return Err(Error::Config("focal gamma must be >= 0".into()));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::Config("dice epsilon must be > 0".into()));
        }
        if !(self.prob_clip > 0.0 && self.prob_clip < 0.5) {
            return Err(Error::Config("prob_clip must lie in (0, 0.5)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub dice: f64,
    pub focal: f64,
    pub total: f64,
}

fn check(probs: &[f64], targets: &[u8], params: &LossParams) -> Result<()> {
    params.validate()?;
    if probs.len() != targets.len() {
        return Err(Error::Contract(format!(
            "{} probabilities vs {} targets",
            probs.len(),
            targets.len()
        )));
    }
    if probs.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    Ok(())
}

fn focal_term(p: f64, g: u8, params: &LossParams) -> f64 {
    let p = p.clamp(params.prob_clip, 1.0 - params.prob_clip);
    let pt = if g == 1 { p } else { 1.0 - p };
    -(1.0 - pt).powf(params.gamma) * pt.ln()
}

/// Loss value with its Dice and focal components.
pub fn dice_focal_parts(probs: &[f64], targets: &[u8], params: &LossParams) -> Result<LossParts> {
    check(probs, targets, params)?;
    let (mut sp, mut sg, mut spg, mut focal) = (0.0, 0.0, 0.0, 0.0);
    for (&p, &g) in probs.iter().zip(targets) {
        let gf = g as f64;
        sp += p;
        sg += gf;
        spg += p * gf;
        focal += focal_term(p, g, params);
    }
    let dice = 1.0 - (2.0 * spg + params.epsilon) / (sp + sg + params.epsilon);
    let focal = focal / probs.len() as f64;
    Ok(LossParts {
        dice,
        focal,
        total: params.lambda_dice * dice + params.lambda_focal * focal,
    })
}

pub fn dice_focal_loss(probs: &[f64], targets: &[u8], params: &LossParams) -> Result<f64> {
    Ok(dice_focal_parts(probs, targets, params)?.total)
}

/// Loss and its gradient with respect to every probability.
pub fn dice_focal_loss_grad(probs: &[f64], targets: &[u8], params: &LossParams) -> Result<(f64, Vec<f64>)> {
    let parts = dice_focal_parts(probs, targets, params)?;
    let (mut sp, mut sg, mut spg) = (0.0, 0.0, 0.0);
    for (&p, &g) in probs.iter().zip(targets) {
        sp += p;
        sg += g as f64;
        spg += p * g as f64;
    }
    let denom = sp + sg + params.epsilon;
    let numer = 2.0 * spg + params.epsilon;
    let n = probs.len() as f64;
    let (lo, hi) = (params.prob_clip, 1.0 - params.prob_clip);
    let grad = probs
        .iter()
        .zip(targets)
        .map(|(&p, &g)| {
            let d_dice = -(2.0 * g as f64 * denom - numer) / (denom * denom);
            let d_focal = if p < lo || p > hi {
                0.0
            } else {
                let pt = if g == 1 { p } else { 1.0 - p };
                // d/dpt of −(1−pt)^γ ln pt
                let mut d = -(1.0 - pt).powf(params.gamma) / pt;
                if params.gamma != 0.0 {
                    d += params.gamma * (1.0 - pt).powf(params.gamma - 1.0) * pt.ln();
                }
                if g == 1 {
                    d
                } else {
                    -d
                }
            };
            params.lambda_dice * d_dice + params.lambda_focal * d_focal / n
        })
        .collect();
    Ok((parts.total, grad))
}
