//! Multi-level alignment training.
//!
//! Four objectives fit the learnable prompt parameters (placeholder
//! embeddings and component gates) to the k normal shots:
//!
//! * `loss_clip` — per-token cross entropy of the normal prompt against the
//!   abnormal bank, cosines scaled by the logit scale;
//! * `loss_triplet` — hinge on Euclidean distances pushing the abnormal mean
//!   at least `epsilon` farther from the anchor than the normal mean;
//! * `loss_mean` — squared distance between each learnable abnormal prompt
//!   and the mean handcrafted abnormal prompt of its level;
//! * `loss_reg` — norm of `(image ALP mean - sum of component ALP means) -
//!   background`, tying global and local abnormal semantics together.
//!
//! Token terms are weighted by region membership (`gamma` on the tokens the
//! level's prompt owns, 1 elsewhere, normalized to mean 1). All gradients
//! are computed analytically by chaining through the text encoder's VJP;
//! [`crate::gradcheck`] verifies them against central finite differences.
//! Optimization is plain SGD in a seeded-shuffled shot order.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::core::{l2_normalize, FeatVec, LogitScale};
use crate::encoder::{TextEncoder, TokenGrid};
use crate::error::{Error, Result};
use crate::prompts::{
    encode_banks, materialize, PromptLevel, PromptParams, PromptSet, PromptTemplate,
};
use crate::regions::RegionMap;

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Triplet margin.
    pub epsilon: f64,
    pub lambda_reg: f64,
    /// Learning weight on the tokens a prompt's region owns.
    pub gamma: f64,
    /// Learnable abnormal prompts per level/component.
    pub n_ab: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub logit_scale: LogitScale,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epsilon: 1.0,
            lambda_reg: 1.0,
            gamma: 1.5,
            n_ab: 4,
            learning_rate: 2e-3,
            epochs: 200,
            logit_scale: LogitScale::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be > 0".into()));
        }
        if !(self.gamma >= 1.0) {
            return Err(Error::Config("gamma must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.n_ab == 0 {
            return Err(Error::Config("n_ab must be >= 1".into()));
        }
        Ok(())
    }
}

/// Accumulated gradients over the learnable parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossGrads {
    pub embeddings: BTreeMap<String, Vec<f64>>,
    pub gates: BTreeMap<String, f64>,
}

impl LossGrads {
    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty() && self.gates.is_empty()
    }

    fn add_embedding(&mut self, slot: &str, grad: &[f64]) {
        let entry = self
            .embeddings
            .entry(slot.to_string())
            .or_insert_with(|| vec![0.0; grad.len()]);
        for (e, g) in entry.iter_mut().zip(grad) {
            *e += g;
        }
    }

    fn add_gate(&mut self, slot: &str, grad: f64) {
        *self.gates.entry(slot.to_string()).or_insert(0.0) += grad;
    }

    pub fn max_abs(&self) -> f64 {
        let emb = self
            .embeddings
            .values()
            .flat_map(|v| v.iter())
            .fold(0.0f64, |m, g| m.max(g.abs()));
        self.gates.values().fold(emb, |m, g| m.max(g.abs()))
    }
}

/// A bank feature together with the template it was encoded from, so that a
/// cotangent on the feature can be pulled back to the learnable parameters.
pub struct BankFeature<'a> {
    pub template: Option<&'a PromptTemplate>,
    pub feature: &'a FeatVec,
}

impl<'a> BankFeature<'a> {
    pub fn frozen(feature: &'a FeatVec) -> Self {
        BankFeature {
            template: None,
            feature,
        }
    }

    pub fn learnable(template: &'a PromptTemplate, feature: &'a FeatVec) -> Self {
        BankFeature {
            template: Some(template),
            feature,
        }
    }
}

/// Pull a cotangent on a template's encoded feature back onto the
/// placeholder embeddings and gates of that template.
pub fn accumulate_template_grad(
    template: &PromptTemplate,
    params: &PromptParams,
    enc: &dyn TextEncoder,
    cotangent: &[f64],
    grads: &mut LossGrads,
) -> Result<()> {
    if !template.has_placeholders() {
        return Ok(());
    }
    let mat = materialize(template, params, enc)?;
    let position_grads = enc.vjp(&mat.seq, cotangent)?;
    for (slot_ref, dpos) in mat.slots.iter().zip(&position_grads) {
        let Some(slot_ref) = slot_ref else { continue };
        let v = &params.embeddings[&slot_ref.slot];
        let g = params.gate(&slot_ref.slot);
        let scaled: Vec<f64> = dpos.iter().map(|d| d * g).collect();
        grads.add_embedding(&slot_ref.slot, &scaled);
        if slot_ref.gated {
            let dot: f64 = dpos.iter().zip(v).map(|(d, e)| d * e).sum();
            grads.add_gate(&slot_ref.slot, dot * g * (1.0 - g));
        }
    }
    Ok(())
}

fn backprop_feature(
    feature: &BankFeature,
    params: &PromptParams,
    enc: &dyn TextEncoder,
    cotangent: &[f64],
    grads: &mut LossGrads,
) -> Result<()> {
    if let Some(template) = feature.template {
        accumulate_template_grad(template, params, enc, cotangent, grads)?;
    }
    Ok(())
}

/// Cotangents on the features of `p = normalize(mean(features))` given a
/// cotangent on `p`. Since `normalize(mean(f)) = normalize(sum(f))`, each
/// feature contributes one-to-one to the sum and the 1/K of the mean cancels
/// against the norm.
fn mean_normalize_vjp(features: &[&FeatVec], cot_p: &[f64]) -> Vec<Vec<f64>> {
    let d = features[0].dim();
    let mut s = vec![0.0; d];
    for f in features {
        for (si, v) in s.iter_mut().zip(f.as_slice()) {
            *si += v;
        }
    }
    let norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
    let p: Vec<f64> = s.iter().map(|v| v / norm).collect();
    let radial: f64 = cot_p.iter().zip(&p).map(|(c, pi)| c * pi).sum();
    let ds: Vec<f64> = cot_p
        .iter()
        .zip(&p)
        .map(|(c, pi)| (c - radial * pi) / norm)
        .collect();
    vec![ds; features.len()]
}

/// Per-token learning weights for one level, normalized to mean 1.
///
/// The image level owns every token; foreground owns nonzero labels,
/// background owns label 0, and component `i` owns label `i + 1`.
pub fn token_weights(region: &RegionMap, level: PromptLevel, gamma: f64) -> Vec<f64> {
    let raw: Vec<f64> = region
        .labels
        .iter()
        .map(|&label| {
            let owned = match level {
                PromptLevel::Image => true,
                PromptLevel::Foreground => label > 0,
                PromptLevel::Background => label == 0,
                PromptLevel::Component(i) => label == i + 1,
            };
            if owned {
                gamma
            } else {
                1.0
            }
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    let t = raw.len() as f64;
    raw.into_iter().map(|w| w * t / sum).collect()
}

/// Visual anchor for the triplet term: the class token at image level, the
/// region-weighted mean of the tokens elsewhere.
pub fn level_anchor(
    grid: &TokenGrid,
    region: &RegionMap,
    level: PromptLevel,
    gamma: f64,
) -> Vec<f64> {
    if level == PromptLevel::Image {
        return grid.class_token().as_slice().to_vec();
    }
    let weights = token_weights(region, level, gamma);
    let d = grid.dim();
    let mut mean = vec![0.0; d];
    let t = grid.len() as f64;
    for (token, w) in grid.tokens().iter().zip(&weights) {
        for (m, v) in mean.iter_mut().zip(token.as_slice()) {
            *m += w * v / t;
        }
    }
    mean
}

fn stable_softmax(values: &[f64]) -> (f64, Vec<f64>) {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let lse = max + sum.ln();
    (lse, exps.into_iter().map(|e| e / sum).collect())
}

/// Weighted per-token cross entropy of the normal prompt against the
/// abnormal bank. Returns the loss and accumulates parameter gradients.
pub fn loss_clip(
    tokens: &[FeatVec],
    weights: &[f64],
    p_n: &BankFeature,
    abnormal: &[BankFeature],
    scale: LogitScale,
    params: &PromptParams,
    enc: &dyn TextEncoder,
    grads: &mut LossGrads,
) -> Result<f64> {
    if tokens.is_empty() {
        return Err(Error::Empty("loss_clip tokens"));
    }
    if abnormal.is_empty() {
        return Err(Error::Empty("loss_clip abnormal bank"));
    }
    if weights.len() != tokens.len() {
        return Err(Error::DimMismatch {
            context: "loss_clip weights",
            expected: tokens.len(),
            got: weights.len(),
        });
    }
    let s = scale.value();
    let t = tokens.len() as f64;
    let d = tokens[0].dim();
    let mut total = 0.0;
    let mut cot_pn = vec![0.0; d];
    let mut cot_abn = vec![vec![0.0; d]; abnormal.len()];

    for (z, w) in tokens.iter().zip(weights) {
        let z_hat = l2_normalize(z)?;
        let mut logits = Vec::with_capacity(1 + abnormal.len());
        logits.push(s * crate::core::cosine(z, p_n.feature)?);
        for q in abnormal {
            logits.push(s * crate::core::cosine(z, q.feature)?);
        }
        let (lse, probs) = stable_softmax(&logits);
        total += w / t * (lse - logits[0]);

        // d(loss_z)/d(logit_0) = p_0 - 1, d/d(logit_j) = p_j; each logit is
        // `scale * cos(z, q)` and d(cos)/dq projects onto ẑ (the encoder VJP
        // removes any radial component).
        let coeff_n = w / t * s * (probs[0] - 1.0);
        for (c, zv) in cot_pn.iter_mut().zip(z_hat.as_slice()) {
            *c += coeff_n * zv;
        }
        for (j, cot) in cot_abn.iter_mut().enumerate() {
            let coeff = w / t * s * probs[j + 1];
            for (c, zv) in cot.iter_mut().zip(z_hat.as_slice()) {
                *c += coeff * zv;
            }
        }
    }

    backprop_feature(p_n, params, enc, &cot_pn, grads)?;
    for (q, cot) in abnormal.iter().zip(&cot_abn) {
        backprop_feature(q, params, enc, cot, grads)?;
    }
    Ok(total)
}

/// Hinge `max(d(z, p̄_n) - d(z, p̄_a) + epsilon, 0)` where `p̄_a` is the
/// normalized mean of the abnormal features (the learnable side).
pub fn loss_triplet(
    anchor: &[f64],
    mean_normal: &FeatVec,
    abnormal: &[BankFeature],
    epsilon: f64,
    params: &PromptParams,
    enc: &dyn TextEncoder,
    grads: &mut LossGrads,
) -> Result<f64> {
    if abnormal.is_empty() {
        return Err(Error::Empty("loss_triplet abnormal bank"));
    }
    let features: Vec<&FeatVec> = abnormal.iter().map(|b| b.feature).collect();
    let d = anchor.len();
    let mut mean = vec![0.0; d];
    for f in &features {
        for (m, v) in mean.iter_mut().zip(f.as_slice()) {
            *m += v / features.len() as f64;
        }
    }
    let p_bar_a = l2_normalize(&FeatVec::new(mean))?;

    let dist = |p: &[f64]| -> f64 {
        anchor
            .iter()
            .zip(p)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let d_n = dist(mean_normal.as_slice());
    let d_a = dist(p_bar_a.as_slice());
    let loss = (d_n - d_a + epsilon).max(0.0);
    if loss > 0.0 && d_a > 1e-12 {
        // d(loss)/d(p̄_a) = (anchor - p̄_a) / d_a
        let cot_pbar: Vec<f64> = anchor
            .iter()
            .zip(p_bar_a.as_slice())
            .map(|(z, p)| (z - p) / d_a)
            .collect();
        let cots = mean_normalize_vjp(&features, &cot_pbar);
        for (b, cot) in abnormal.iter().zip(&cots) {
            backprop_feature(b, params, enc, cot, grads)?;
        }
    }
    Ok(loss)
}

/// Mean squared distance between each learnable abnormal prompt and the
/// normalized mean of the level's handcrafted abnormal prompts.
pub fn loss_mean(
    ahp: &[FeatVec],
    alps: &[BankFeature],
    params: &PromptParams,
    enc: &dyn TextEncoder,
    grads: &mut LossGrads,
) -> Result<f64> {
    if ahp.is_empty() || alps.is_empty() {
        return Ok(0.0);
    }
    let d = ahp[0].dim();
    let mut mean = vec![0.0; d];
    for f in ahp {
        for (m, v) in mean.iter_mut().zip(f.as_slice()) {
            *m += v / ahp.len() as f64;
        }
    }
    let h_bar = l2_normalize(&FeatVec::new(mean))?;
    let n = alps.len() as f64;
    let mut total = 0.0;
    for b in alps {
        let f_hat = l2_normalize(b.feature)?;
        let sq: f64 = h_bar
            .as_slice()
            .iter()
            .zip(f_hat.as_slice())
            .map(|(h, f)| (h - f) * (h - f))
            .sum();
        total += sq / n;
        // d(loss)/df through the explicit normalization of f:
        // (2/n) * (f̂ (f̂·h̄) - h̄) / |f|.
        let fh: f64 = f_hat
            .as_slice()
            .iter()
            .zip(h_bar.as_slice())
            .map(|(f, h)| f * h)
            .sum();
        let fnorm = b.feature.norm();
        let cot: Vec<f64> = f_hat
            .as_slice()
            .iter()
            .zip(h_bar.as_slice())
            .map(|(f, h)| 2.0 / n * (f * fh - h) / fnorm)
            .collect();
        backprop_feature(b, params, enc, &cot, grads)?;
    }
    Ok(total)
}

/// `lambda * | (image ALP mean - sum of component ALP means) - background |`.
/// The background feature is frozen; gradients flow into the image- and
/// component-level learnable prompts through their raw means.
pub fn loss_reg(
    image_alps: &[BankFeature],
    component_alps: &[Vec<BankFeature>],
    background: &FeatVec,
    lambda_reg: f64,
    params: &PromptParams,
    enc: &dyn TextEncoder,
    grads: &mut LossGrads,
) -> Result<f64> {
    if component_alps.is_empty() {
        return Err(Error::Empty("loss_reg component prompts"));
    }
    if lambda_reg == 0.0 {
        return Ok(0.0);
    }
    let d = background.dim();
    let raw_mean = |bank: &[BankFeature]| -> Vec<f64> {
        let mut mean = vec![0.0; d];
        for b in bank {
            for (m, v) in mean.iter_mut().zip(b.feature.as_slice()) {
                *m += v / bank.len() as f64;
            }
        }
        mean
    };
    let mut residual = raw_mean(image_alps);
    for bank in component_alps {
        for (r, v) in residual.iter_mut().zip(raw_mean(bank)) {
            *r -= v;
        }
    }
    for (r, b) in residual.iter_mut().zip(background.as_slice()) {
        *r -= b;
    }
    let norm = residual.iter().map(|v| v * v).sum::<f64>().sqrt();
    let loss = lambda_reg * norm;
    if norm > 1e-12 {
        let unit: Vec<f64> = residual.iter().map(|v| lambda_reg * v / norm).collect();
        let per_img: Vec<f64> = unit.iter().map(|v| v / image_alps.len() as f64).collect();
        for b in image_alps {
            backprop_feature(b, params, enc, &per_img, grads)?;
        }
        for bank in component_alps {
            let per_comp: Vec<f64> = unit.iter().map(|v| -v / bank.len() as f64).collect();
            for b in bank {
                backprop_feature(b, params, enc, &per_comp, grads)?;
            }
        }
    }
    Ok(loss)
}

/// Loss values averaged over one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub l_clip: f64,
    pub l_trip: f64,
    pub l_mean: f64,
    pub l_reg: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub epochs: Vec<EpochLoss>,
}

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,l_clip,l_trip,l_mean,l_reg,total\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.epoch, e.l_clip, e.l_trip, e.l_mean, e.l_reg, e.total
            ));
        }
        out
    }

    pub fn initial_total(&self) -> Option<f64> {
        self.epochs.first().map(|e| e.total)
    }

    pub fn final_total(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.total)
    }

    /// Means over a sliding window; used to check the non-increasing trend.
    pub fn window_means(&self, window: usize) -> Vec<f64> {
        if self.epochs.len() < window || window == 0 {
            return Vec::new();
        }
        (0..=self.epochs.len() - window)
            .map(|start| {
                self.epochs[start..start + window]
                    .iter()
                    .map(|e| e.total)
                    .sum::<f64>()
                    / window as f64
            })
            .collect()
    }
}

struct StepLosses {
    l_clip: f64,
    l_trip: f64,
    l_mean: f64,
    l_reg: f64,
}

fn check_finite(value: f64, term: &'static str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteLoss(term))
    }
}

/// One loss-and-gradient evaluation over a single shot with the current
/// parameters. Exposed for the gradient-check harness.
pub fn evaluate_shot(
    grid: &TokenGrid,
    region: &RegionMap,
    set: &PromptSet,
    params: &PromptParams,
    enc: &dyn TextEncoder,
    cfg: &TrainConfig,
    grads: &mut LossGrads,
) -> Result<(f64, EpochLoss)> {
    let banks = encode_banks(set, params, enc)?;
    let mut step = StepLosses {
        l_clip: 0.0,
        l_trip: 0.0,
        l_mean: 0.0,
        l_reg: 0.0,
    };

    for (idx, level) in set.levels.iter().enumerate() {
        let bank = &banks.levels[idx];
        let weights = token_weights(region, level.level, cfg.gamma);
        let p_n = BankFeature::learnable(&level.nhp[0], &bank.nhp[0]);
        let abnormal: Vec<BankFeature> = level
            .ahp
            .iter()
            .zip(&bank.ahp)
            .chain(level.alp.iter().zip(&bank.alp))
            .map(|(t, f)| BankFeature::learnable(t, f))
            .collect();

        step.l_clip += loss_clip(
            grid.tokens(),
            &weights,
            &p_n,
            &abnormal,
            cfg.logit_scale,
            params,
            enc,
            grads,
        )?;

        let anchor = level_anchor(grid, region, level.level, cfg.gamma);
        step.l_trip += loss_triplet(
            &anchor,
            &bank.mean_normal,
            &abnormal,
            cfg.epsilon,
            params,
            enc,
            grads,
        )?;

        let alps: Vec<BankFeature> = level
            .alp
            .iter()
            .zip(&bank.alp)
            .map(|(t, f)| BankFeature::learnable(t, f))
            .collect();
        step.l_mean += loss_mean(&bank.ahp, &alps, params, enc, grads)?;
    }

    let image_level = &set.levels[0];
    let image_alps: Vec<BankFeature> = image_level
        .alp
        .iter()
        .zip(&banks.levels[0].alp)
        .map(|(t, f)| BankFeature::learnable(t, f))
        .collect();
    let component_alps: Vec<Vec<BankFeature>> = (0..set.nc)
        .map(|ci| {
            set.levels[2 + ci]
                .alp
                .iter()
                .zip(&banks.levels[2 + ci].alp)
                .map(|(t, f)| BankFeature::learnable(t, f))
                .collect()
        })
        .collect();
    step.l_reg = loss_reg(
        &image_alps,
        &component_alps,
        &banks.background,
        cfg.lambda_reg,
        params,
        enc,
        grads,
    )?;

    let l_clip = check_finite(step.l_clip, "l_clip")?;
    let l_trip = check_finite(step.l_trip, "l_trip")?;
    let l_mean = check_finite(step.l_mean, "l_mean")?;
    let l_reg = check_finite(step.l_reg, "l_reg")?;
    let total = l_clip + l_trip + l_mean + l_reg;
    Ok((
        total,
        EpochLoss {
            epoch: 0,
            l_clip,
            l_trip,
            l_mean,
            l_reg,
            total,
        },
    ))
}

/// Fit the prompt parameters to the shots with plain SGD.
///
/// Prompt banks are re-encoded on every step; the trace records per-epoch
/// averages of each term. Deterministic given the config seed.
pub fn train_align(
    shots: &[TokenGrid],
    region_maps: &[RegionMap],
    set: &PromptSet,
    params: &mut PromptParams,
    enc: &dyn TextEncoder,
    cfg: &TrainConfig,
) -> Result<LossTrace> {
    cfg.validate()?;
    if shots.is_empty() {
        return Err(Error::Empty("training shots"));
    }
    if shots.len() != region_maps.len() {
        return Err(Error::DimMismatch {
            context: "region maps",
            expected: shots.len(),
            got: region_maps.len(),
        });
    }
    for (grid, region) in shots.iter().zip(region_maps) {
        if grid.h() != region.h || grid.w() != region.w {
            return Err(Error::Invalid {
                context: "training inputs",
                message: "region map resolution must match the token grid".into(),
            });
        }
    }

    let mut trace = LossTrace::default();
    let mut rng = crate::seeded::rng_for(cfg.seed, &["align-shuffle"]);
    let lr = cfg.learning_rate;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..shots.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);

        let mut sums = EpochLoss {
            epoch,
            l_clip: 0.0,
            l_trip: 0.0,
            l_mean: 0.0,
            l_reg: 0.0,
            total: 0.0,
        };
        for &shot in &order {
            let mut grads = LossGrads::default();
            let (_, losses) = evaluate_shot(
                &shots[shot],
                &region_maps[shot],
                set,
                params,
                enc,
                cfg,
                &mut grads,
            )?;
            sums.l_clip += losses.l_clip;
            sums.l_trip += losses.l_trip;
            sums.l_mean += losses.l_mean;
            sums.l_reg += losses.l_reg;
            sums.total += losses.total;

            for (slot, grad) in &grads.embeddings {
                let emb = params.embeddings.get_mut(slot).expect("known slot");
                for (e, g) in emb.iter_mut().zip(grad) {
                    *e -= lr * g;
                }
            }
            for (slot, grad) in &grads.gates {
                *params.gates.get_mut(slot).expect("known slot") -= lr * grad;
            }
        }

        let k = shots.len() as f64;
        sums.l_clip /= k;
        sums.l_trip /= k;
        sums.l_mean /= k;
        sums.l_reg /= k;
        sums.total /= k;
        trace.epochs.push(sums);
    }

    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderSpec, ResolutionTag, SyntheticEncoder};
    use crate::prompts::{Polarity, TemplateToken};

    fn enc() -> SyntheticEncoder {
        SyntheticEncoder::new(EncoderSpec {
            seed: 21,
            feature_dim: 12,
            token_embedding_dim: 10,
            noise_sigma: 0.0,
            text_bias: false,
        })
        .unwrap()
    }

    fn unit(values: &[f64]) -> FeatVec {
        l2_normalize(&FeatVec::new(values.to_vec())).unwrap()
    }

    fn empty_params() -> PromptParams {
        PromptParams {
            embeddings: BTreeMap::new(),
            gates: BTreeMap::new(),
        }
    }

    fn learnable_template(slot: &str, words: &[&str]) -> PromptTemplate {
        let mut tokens: Vec<TemplateToken> = words
            .iter()
            .map(|w| TemplateToken::FixedWord(w.to_string()))
            .collect();
        tokens.push(TemplateToken::Placeholder(slot.to_string()));
        PromptTemplate {
            tokens,
            level: PromptLevel::Image,
            polarity: Polarity::AbnormalLearnable,
        }
    }

    #[test]
    fn clip_loss_saturated_correct_case_tends_to_zero() {
        let enc = enc();
        let params = empty_params();
        let mut grads = LossGrads::default();
        let z = unit(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let orth = unit(&[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let p_n = BankFeature::frozen(&z);
        let lam = [BankFeature::frozen(&orth)];
        let loss = loss_clip(
            &[z.clone()],
            &[1.0],
            &p_n,
            &lam,
            LogitScale::new(60.0).unwrap(),
            &params,
            &enc,
            &mut grads,
        )
        .unwrap();
        assert!(loss < 1e-20, "saturated loss should vanish, got {loss}");
    }

    #[test]
    fn clip_loss_symmetric_two_class_is_ln_two() {
        let enc = enc();
        let params = empty_params();
        let mut grads = LossGrads::default();
        let z = unit(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let p = unit(&[1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let q = unit(&[1.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let p_n = BankFeature::frozen(&p);
        let lam = [BankFeature::frozen(&q)];
        let loss = loss_clip(
            &[z],
            &[1.0],
            &p_n,
            &lam,
            LogitScale::new(7.0).unwrap(),
            &params,
            &enc,
            &mut grads,
        )
        .unwrap();
        assert!((loss - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn triplet_margin_satisfied_gives_zero_loss_and_gradient() {
        let enc = enc();
        let params = empty_params();
        let mut grads = LossGrads::default();
        let anchor = vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let p_n = unit(&anchor);
        let far = unit(&[-1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let abn = [BankFeature::frozen(&far)];
        // d_n = 0, d_a = 2, epsilon = 1 -> hinge off.
        let loss =
            loss_triplet(&anchor, &p_n, &abn, 1.0, &params, &enc, &mut grads).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.is_empty());
    }

    #[test]
    fn triplet_tie_case_equals_epsilon() {
        let enc = enc();
        let params = empty_params();
        let mut grads = LossGrads::default();
        let anchor = vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let p = unit(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let q = unit(&[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let abn = [BankFeature::frozen(&q)];
        let loss = loss_triplet(&anchor, &p, &abn, 1.0, &params, &enc, &mut grads).unwrap();
        assert!((loss - 1.0).abs() < 1e-12, "equidistant case: loss = epsilon");
    }

    #[test]
    fn triplet_is_translation_invariant() {
        let enc = enc();
        let params = empty_params();
        let anchor: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let p_n = unit(&(0..12).map(|i| (i as f64 * 0.11).cos()).collect::<Vec<_>>());
        let q = unit(&(0..12).map(|i| (i as f64 * 0.29).sin() + 0.2).collect::<Vec<_>>());
        let abn = [BankFeature::frozen(&q)];
        let mut g1 = LossGrads::default();
        let base = loss_triplet(&anchor, &p_n, &abn, 1.0, &params, &enc, &mut g1).unwrap();

        // Translate all three vectors by the same offset: both distances are
        // preserved, so the loss must not change. The translated "mean
        // normal" and "abnormal" are passed as raw (non-unit) features.
        let offset = 0.83;
        let anchor2: Vec<f64> = anchor.iter().map(|v| v + offset).collect();
        let p_n2 = FeatVec::new(p_n.as_slice().iter().map(|v| v + offset).collect());
        // loss_triplet normalizes the abnormal mean, which would not commute
        // with translation; compute distances directly instead.
        let dist = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        };
        let d_n = dist(&anchor2, p_n2.as_slice());
        let q2: Vec<f64> = q.as_slice().iter().map(|v| v + offset).collect();
        let d_a = dist(&anchor2, &q2);
        let translated = (d_n - d_a + 1.0).max(0.0);
        assert!((translated - base).abs() < 1e-12);
    }

    #[test]
    fn mean_loss_trivial_values() {
        let enc = enc();
        let params = empty_params();
        let mut grads = LossGrads::default();
        let h = unit(&[0.3, 0.4, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        // Proportional vectors normalize to the same direction: loss 0.
        let scaled = FeatVec::new(h.as_slice().iter().map(|v| v * 4.2).collect());
        let alps = [BankFeature::frozen(&scaled)];
        let loss = loss_mean(&[h.clone()], &alps, &params, &enc, &mut grads).unwrap();
        assert!(loss < 1e-24);
        // Antipodal unit vectors: squared distance 4.
        let anti = FeatVec::new(h.as_slice().iter().map(|v| -v).collect());
        let alps = [BankFeature::frozen(&anti)];
        let loss = loss_mean(&[h], &alps, &params, &enc, &mut grads).unwrap();
        assert!((loss - 4.0).abs() < 1e-12);
    }

    #[test]
    fn reg_loss_zero_residual_and_zero_lambda() {
        let enc = enc();
        let params = empty_params();
        let mut grads = LossGrads::default();
        let b = unit(&[0.1, 0.9, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let c = unit(&[0.5, 0.0, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        // image mean = component mean + background exactly.
        let img = FeatVec::new(
            c.as_slice()
                .iter()
                .zip(b.as_slice())
                .map(|(x, y)| x + y)
                .collect(),
        );
        let image = [BankFeature::frozen(&img)];
        let comp = vec![vec![BankFeature::frozen(&c)]];
        let loss = loss_reg(&image, &comp, &b, 1.0, &params, &enc, &mut grads).unwrap();
        assert!(loss < 1e-12);
        let loss = loss_reg(&image, &comp, &c, 0.0, &params, &enc, &mut grads).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn gamma_one_gives_uniform_weights() {
        let region = RegionMap {
            h: 2,
            w: 3,
            labels: vec![0, 1, 1, 2, 0, 1],
            resolution: ResolutionTag::Native,
        };
        for level in [
            PromptLevel::Image,
            PromptLevel::Foreground,
            PromptLevel::Component(0),
        ] {
            let w = token_weights(&region, level, 1.0);
            assert!(w.iter().all(|x| (x - 1.0).abs() < 1e-12));
        }
        // gamma > 1 emphasizes owned tokens but keeps mean 1.
        let w = token_weights(&region, PromptLevel::Component(0), 1.5);
        let mean: f64 = w.iter().sum::<f64>() / w.len() as f64;
        assert!((mean - 1.0).abs() < 1e-12);
        assert!(w[1] > w[0]);
    }

    #[test]
    fn template_gradient_matches_finite_differences() {
        let enc = enc();
        let template = learnable_template("img/a0/state", &["a", "plain", "thing"]);
        let mut params = empty_params();
        params.embeddings.insert(
            "img/a0/state".into(),
            crate::seeded::gaussian_vec(&mut crate::seeded::rng_for(5, &["t"]), 10, 0.5),
        );
        params.gates.insert("img/a0/state".into(), 0.3);

        // Loss = cos(z, encode(template)).
        let z = unit(&crate::seeded::gaussian_vec(
            &mut crate::seeded::rng_for(6, &["z"]),
            12,
            1.0,
        ));
        let feature = crate::prompts::encode_template(&template, &params, &enc).unwrap();
        let mut grads = LossGrads::default();
        // d(cos)/d(feature) = ẑ with the VJP projecting radially.
        accumulate_template_grad(&template, &params, &enc, z.as_slice(), &mut grads).unwrap();
        let _ = feature;

        let h = 1e-6;
        let eval = |p: &PromptParams| -> f64 {
            let f = crate::prompts::encode_template(&template, p, &enc).unwrap();
            crate::core::cosine(&z, &f).unwrap()
        };
        for i in 0..10 {
            let mut plus = params.clone();
            plus.embeddings.get_mut("img/a0/state").unwrap()[i] += h;
            let mut minus = params.clone();
            minus.embeddings.get_mut("img/a0/state").unwrap()[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let analytic = grads.embeddings["img/a0/state"][i];
            let denom = analytic.abs().max(fd.abs()).max(1e-8);
            assert!(
                ((analytic - fd) / denom).abs() < 1e-5,
                "emb[{i}]: analytic {analytic} vs fd {fd}"
            );
        }
        let mut plus = params.clone();
        *plus.gates.get_mut("img/a0/state").unwrap() += h;
        let mut minus = params.clone();
        *minus.gates.get_mut("img/a0/state").unwrap() -= h;
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let analytic = grads.gates["img/a0/state"];
        assert!(
            ((analytic - fd) / analytic.abs().max(fd.abs()).max(1e-8)).abs() < 1e-5,
            "gate: analytic {analytic} vs fd {fd}"
        );
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.epsilon, 1.0);
        assert_eq!(cfg.lambda_reg, 1.0);
        assert_eq!(cfg.gamma, 1.5);
        assert_eq!(cfg.n_ab, 4);
        assert_eq!(cfg.learning_rate, 2e-3);
        assert!(cfg.validate().is_ok());
        let bad = TrainConfig {
            gamma: 0.5,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
