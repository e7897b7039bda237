//! Gradient verification harness.
//!
//! Verifies every analytic gradient in the training path against central
//! finite differences on seeded random instances: the four alignment loss
//! terms (through template encoding, gates included), the text-encoder
//! chain itself, and the query-former loss. Nonsmooth loci (the triplet
//! hinge, a zero regularizer residual) are excluded by construction of the
//! instances.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Instant;

use crate::align::{
    loss_clip, loss_mean, loss_reg, loss_triplet, BankFeature, LossGrads,
};
use crate::core::{l2_normalize, FeatVec, LogitScale};
use crate::encoder::{EncoderSpec, SyntheticEncoder, TextEncoder};
use crate::error::Result;
use crate::prompts::{
    encode_template, PromptLevel, PromptParams, PromptTemplate, Polarity, TemplateToken,
};
use crate::qformer::{init_query_former, qf_loss_and_grads, QueryFormerState};
use crate::seeded;

pub const FD_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// One compared coordinate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub parameter: String,
    pub analytic: f64,
    pub finite_difference: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainReport {
    pub chain: String,
    pub points: usize,
    pub coordinates: usize,
    pub max_relative_error: f64,
    pub worst: Option<GradCheckEntry>,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradReport {
    pub tolerance: f64,
    pub fd_step: f64,
    pub chains: Vec<ChainReport>,
    pub passed: bool,
    pub elapsed_ms: u64,
}

fn relative_error(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6)
}

struct ChainAccumulator {
    chain: String,
    points: usize,
    coordinates: usize,
    worst: Option<GradCheckEntry>,
}

impl ChainAccumulator {
    fn new(chain: &str) -> Self {
        ChainAccumulator {
            chain: chain.into(),
            points: 0,
            coordinates: 0,
            worst: None,
        }
    }

    fn record(&mut self, parameter: String, analytic: f64, fd: f64) {
        self.coordinates += 1;
        let relative_error = relative_error(analytic, fd);
        if self
            .worst
            .as_ref()
            .map(|w| relative_error > w.relative_error)
            .unwrap_or(true)
        {
            self.worst = Some(GradCheckEntry {
                parameter,
                analytic,
                finite_difference: fd,
                relative_error,
            });
        }
    }

    fn finish(self, tolerance: f64) -> ChainReport {
        let max = self.worst.as_ref().map(|w| w.relative_error).unwrap_or(0.0);
        ChainReport {
            chain: self.chain,
            points: self.points,
            coordinates: self.coordinates,
            max_relative_error: max,
            passed: max < tolerance,
            worst: self.worst,
        }
    }
}

/// A small random loss instance: learnable templates over a tiny encoder.
struct LossInstance {
    enc: SyntheticEncoder,
    params: PromptParams,
    p_n_template: PromptTemplate,
    abnormal_templates: Vec<PromptTemplate>,
    tokens: Vec<FeatVec>,
    weights: Vec<f64>,
    anchor: Vec<f64>,
    scale: LogitScale,
    epsilon: f64,
    lambda: f64,
}

const WORD_POOL: [&str; 12] = [
    "a", "plain", "round", "metal", "part", "on", "the", "tray", "small", "bright", "unit", "top",
];

fn random_template<R: Rng>(
    rng: &mut R,
    level: PromptLevel,
    polarity: Polarity,
    slot_prefix: &str,
    placeholders: usize,
) -> PromptTemplate {
    let n_words = rng.random_range(2..5usize);
    let mut tokens: Vec<TemplateToken> = (0..n_words)
        .map(|_| TemplateToken::FixedWord(WORD_POOL[rng.random_range(0..WORD_POOL.len())].into()))
        .collect();
    for p in 0..placeholders {
        let pos = rng.random_range(0..=tokens.len());
        tokens.insert(pos, TemplateToken::Placeholder(format!("{slot_prefix}/s{p}")));
    }
    PromptTemplate {
        tokens,
        level,
        polarity,
    }
}

fn random_instance(seed: u64, point: u64) -> LossInstance {
    let mut rng = seeded::rng_for_indexed(seed, &["gradcheck-instance"], &[point]);
    let d = 12;
    let e = 10;
    let enc = SyntheticEncoder::new(EncoderSpec {
        seed: rng.random(),
        feature_dim: d,
        token_embedding_dim: e,
        noise_sigma: 0.0,
        text_bias: rng.random_bool(0.5),
    })
    .unwrap();

    let p_n_template = random_template(
        &mut rng,
        PromptLevel::Image,
        Polarity::NormalHandcrafted,
        "unused",
        0,
    );
    let n_abnormal = rng.random_range(2..5usize);
    let mut abnormal_templates = Vec::with_capacity(n_abnormal);
    let mut params = PromptParams {
        embeddings: BTreeMap::new(),
        gates: BTreeMap::new(),
    };
    for t in 0..n_abnormal {
        // Mix component-level (gated) and image-level (ungated) templates.
        let gated = rng.random_bool(0.5);
        let level = if gated {
            PromptLevel::Component(0)
        } else {
            PromptLevel::Image
        };
        let placeholders = rng.random_range(1..3usize);
        let template = random_template(
            &mut rng,
            level,
            Polarity::AbnormalLearnable,
            &format!("t{t}"),
            placeholders,
        );
        for slot in template.slot_ids() {
            params
                .embeddings
                .insert(slot.to_string(), seeded::gaussian_vec(&mut rng, e, 0.6));
            if gated {
                params
                    .gates
                    .insert(slot.to_string(), rng.random_range(-1.0..1.0));
            }
        }
        abnormal_templates.push(template);
    }

    let n_tokens = rng.random_range(2..5usize);
    let tokens: Vec<FeatVec> = (0..n_tokens)
        .map(|_| l2_normalize(&FeatVec::new(seeded::gaussian_vec(&mut rng, d, 1.0))).unwrap())
        .collect();
    let raw_weights: Vec<f64> = (0..n_tokens).map(|_| rng.random_range(0.5..2.0)).collect();
    let sum: f64 = raw_weights.iter().sum();
    let weights = raw_weights
        .iter()
        .map(|w| w * n_tokens as f64 / sum)
        .collect();
    let anchor = seeded::gaussian_vec(&mut rng, d, 0.7);

    LossInstance {
        enc,
        params,
        p_n_template,
        abnormal_templates,
        tokens,
        weights,
        anchor,
        scale: LogitScale::new(rng.random_range(0.5..4.0)).unwrap(),
        epsilon: rng.random_range(0.5..1.5),
        lambda: rng.random_range(0.5..2.0),
    }
}

impl LossInstance {
    fn abnormal_bank<'a>(
        &'a self,
        params: &PromptParams,
    ) -> Result<Vec<(usize, FeatVec)>> {
        self.abnormal_templates
            .iter()
            .enumerate()
            .map(|(i, t)| Ok((i, encode_template(t, params, &self.enc)?)))
            .collect()
    }

    fn split_banks(&self) -> (Vec<&PromptTemplate>, Vec<Vec<&PromptTemplate>>) {
        // Image-level templates feed the "image" side of the regularizer,
        // component-level ones the per-component side.
        let image: Vec<&PromptTemplate> = self
            .abnormal_templates
            .iter()
            .filter(|t| t.level == PromptLevel::Image)
            .collect();
        let component: Vec<&PromptTemplate> = self
            .abnormal_templates
            .iter()
            .filter(|t| t.level == PromptLevel::Component(0))
            .collect();
        (image, vec![component])
    }
}

enum Chain {
    Clip,
    Triplet,
    Mean,
    Reg,
}

fn loss_value(instance: &LossInstance, params: &PromptParams, chain: &Chain) -> Result<f64> {
    let enc = &instance.enc;
    let mut grads = LossGrads::default();
    let bank = instance.abnormal_bank(params)?;
    let features: Vec<(usize, &FeatVec)> = bank.iter().map(|(i, f)| (*i, f)).collect();
    let bank_refs: Vec<BankFeature> = features
        .iter()
        .map(|(i, f)| BankFeature::learnable(&instance.abnormal_templates[*i], f))
        .collect();
    match chain {
        Chain::Clip => {
            let p_n = encode_template(&instance.p_n_template, params, enc)?;
            let p_n = BankFeature::learnable(&instance.p_n_template, &p_n);
            loss_clip(
                &instance.tokens,
                &instance.weights,
                &p_n,
                &bank_refs,
                instance.scale,
                params,
                enc,
                &mut grads,
            )
        }
        Chain::Triplet => {
            let p_n = encode_template(&instance.p_n_template, params, enc)?;
            loss_triplet(
                &instance.anchor,
                &p_n,
                &bank_refs,
                instance.epsilon,
                params,
                enc,
                &mut grads,
            )
        }
        Chain::Mean => {
            let ahp = vec![encode_template(&instance.p_n_template, params, enc)?];
            loss_mean(&ahp, &bank_refs, params, enc, &mut grads)
        }
        Chain::Reg => {
            let (image_t, comp_t) = instance.split_banks();
            if image_t.is_empty() || comp_t[0].is_empty() {
                return Ok(f64::NAN); // instance unusable for this chain
            }
            let by_template = |wanted: &[&PromptTemplate]| -> Vec<BankFeature> {
                bank_refs
                    .iter()
                    .filter(|b| wanted.iter().any(|t| std::ptr::eq(*t, b.template.unwrap())))
                    .map(|b| BankFeature {
                        template: b.template,
                        feature: b.feature,
                    })
                    .collect()
            };
            let image = by_template(&image_t);
            let comp = vec![by_template(&comp_t[0])];
            let background =
                l2_normalize(&FeatVec::new(instance.anchor.iter().map(|v| v + 0.3).collect()))?;
            loss_reg(
                &image,
                &comp,
                &background,
                instance.lambda,
                params,
                enc,
                &mut grads,
            )
        }
    }
}

fn loss_grads(instance: &LossInstance, chain: &Chain) -> Result<(f64, LossGrads)> {
    let params = &instance.params;
    let enc = &instance.enc;
    let mut grads = LossGrads::default();
    let bank = instance.abnormal_bank(params)?;
    let features: Vec<(usize, &FeatVec)> = bank.iter().map(|(i, f)| (*i, f)).collect();
    let bank_refs: Vec<BankFeature> = features
        .iter()
        .map(|(i, f)| BankFeature::learnable(&instance.abnormal_templates[*i], f))
        .collect();
    let value = match chain {
        Chain::Clip => {
            let p_n = encode_template(&instance.p_n_template, params, enc)?;
            let p_n = BankFeature::learnable(&instance.p_n_template, &p_n);
            loss_clip(
                &instance.tokens,
                &instance.weights,
                &p_n,
                &bank_refs,
                instance.scale,
                params,
                enc,
                &mut grads,
            )?
        }
        Chain::Triplet => {
            let p_n = encode_template(&instance.p_n_template, params, enc)?;
            loss_triplet(
                &instance.anchor,
                &p_n,
                &bank_refs,
                instance.epsilon,
                params,
                enc,
                &mut grads,
            )?
        }
        Chain::Mean => {
            let ahp = vec![encode_template(&instance.p_n_template, params, enc)?];
            loss_mean(&ahp, &bank_refs, params, enc, &mut grads)?
        }
        Chain::Reg => loss_value(instance, params, chain).and_then(|v| {
            // recompute with gradient accumulation
            let (image_t, comp_t) = instance.split_banks();
            if v.is_nan() {
                return Ok(f64::NAN);
            }
            let by_template = |wanted: &[&PromptTemplate]| -> Vec<BankFeature> {
                bank_refs
                    .iter()
                    .filter(|b| wanted.iter().any(|t| std::ptr::eq(*t, b.template.unwrap())))
                    .map(|b| BankFeature {
                        template: b.template,
                        feature: b.feature,
                    })
                    .collect()
            };
            let image = by_template(&image_t);
            let comp = vec![by_template(&comp_t[0])];
            let background =
                l2_normalize(&FeatVec::new(instance.anchor.iter().map(|v| v + 0.3).collect()))?;
            loss_reg(
                &image,
                &comp,
                &background,
                instance.lambda,
                params,
                enc,
                &mut grads,
            )
        })?,
    };
    Ok((value, grads))
}

fn check_loss_chain(
    name: &str,
    chain: Chain,
    seed: u64,
    points: usize,
    tolerance: f64,
) -> Result<ChainReport> {
    let mut acc = ChainAccumulator::new(name);
    let mut point = 0u64;
    while acc.points < points {
        point += 1;
        let instance = random_instance(seed, point);
        // Exclusions: skip instances sitting on a nonsmooth locus.
        match chain {
            Chain::Triplet => {
                let value = loss_value(&instance, &instance.params, &Chain::Triplet)?;
                // Stay clearly on the active side of the hinge; the inactive
                // side has exactly zero gradient and nothing to compare.
                if value < 1e-2 {
                    continue;
                }
            }
            Chain::Reg => {
                let value = loss_value(&instance, &instance.params, &Chain::Reg)?;
                if value.is_nan() || value < 1e-2 {
                    continue;
                }
            }
            _ => {}
        }
        let (_, grads) = loss_grads(&instance, &chain)?;
        acc.points += 1;

        for (slot, grad) in &grads.embeddings {
            for (i, analytic) in grad.iter().enumerate() {
                let mut plus = instance.params.clone();
                plus.embeddings.get_mut(slot).unwrap()[i] += FD_STEP;
                let mut minus = instance.params.clone();
                minus.embeddings.get_mut(slot).unwrap()[i] -= FD_STEP;
                let fd = (loss_value(&instance, &plus, &chain)?
                    - loss_value(&instance, &minus, &chain)?)
                    / (2.0 * FD_STEP);
                acc.record(format!("{name}[{point}] emb:{slot}[{i}]"), *analytic, fd);
            }
        }
        for (slot, analytic) in &grads.gates {
            let mut plus = instance.params.clone();
            *plus.gates.get_mut(slot).unwrap() += FD_STEP;
            let mut minus = instance.params.clone();
            *minus.gates.get_mut(slot).unwrap() -= FD_STEP;
            let fd = (loss_value(&instance, &plus, &chain)?
                - loss_value(&instance, &minus, &chain)?)
                / (2.0 * FD_STEP);
            acc.record(format!("{name}[{point}] gate:{slot}"), *analytic, fd);
        }
    }
    Ok(acc.finish(tolerance))
}

fn check_text_encoder(seed: u64, points: usize, tolerance: f64) -> Result<ChainReport> {
    let mut acc = ChainAccumulator::new("text_encoder");
    for point in 0..points {
        let mut rng = seeded::rng_for_indexed(seed, &["gradcheck-enc"], &[point as u64]);
        let d = 12;
        let e = 10;
        let enc = SyntheticEncoder::new(EncoderSpec {
            seed: rng.random(),
            feature_dim: d,
            token_embedding_dim: e,
            noise_sigma: 0.0,
            text_bias: rng.random_bool(0.5),
        })?;
        let m = rng.random_range(1..4usize);
        let seq: Vec<Vec<f64>> = (0..m)
            .map(|_| seeded::gaussian_vec(&mut rng, e, 1.0))
            .collect();
        let cotangent = seeded::gaussian_vec(&mut rng, d, 1.0);
        let grads = enc.vjp(&seq, &cotangent)?;
        acc.points += 1;
        // Loss = cotangent . encode(seq).
        let value = |seq: &[Vec<f64>]| -> Result<f64> {
            let out = enc.encode(seq)?;
            Ok(out.as_slice().iter().zip(&cotangent).map(|(a, b)| a * b).sum())
        };
        for pos in 0..m {
            for i in 0..e {
                let mut plus = seq.clone();
                plus[pos][i] += FD_STEP;
                let mut minus = seq.clone();
                minus[pos][i] -= FD_STEP;
                let fd = (value(&plus)? - value(&minus)?) / (2.0 * FD_STEP);
                acc.record(
                    format!("text_encoder[{point}] seq[{pos}][{i}]"),
                    grads[pos][i],
                    fd,
                );
            }
        }
    }
    Ok(acc.finish(tolerance))
}

fn qf_instance(seed: u64, point: u64) -> (QueryFormerState, Vec<Vec<FeatVec>>, Vec<Vec<FeatVec>>, Vec<FeatVec>, Vec<FeatVec>) {
    let mut rng = seeded::rng_for_indexed(seed, &["gradcheck-qf"], &[point]);
    let d = 8;
    let families = 2;
    let state = init_query_former(d, families, rng.random());
    let mut bank = |n: usize| -> Vec<FeatVec> {
        (0..n)
            .map(|_| l2_normalize(&FeatVec::new(seeded::gaussian_vec(&mut rng, d, 1.0))).unwrap())
            .collect()
    };
    let normal: Vec<Vec<FeatVec>> = (0..families).map(|_| bank(2)).collect();
    let abnormal: Vec<Vec<FeatVec>> = (0..families).map(|_| bank(3)).collect();
    let tn: Vec<FeatVec> = (0..families).map(|_| bank(1).pop().unwrap()).collect();
    let ta: Vec<FeatVec> = (0..families).map(|_| bank(1).pop().unwrap()).collect();
    (state, normal, abnormal, tn, ta)
}

fn check_query_former(seed: u64, points: usize, tolerance: f64) -> Result<ChainReport> {
    let mut acc = ChainAccumulator::new("query_former");
    for point in 0..points {
        let (state, normal, abnormal, tn, ta) = qf_instance(seed, point as u64);
        let (_, grads) = qf_loss_and_grads(&state, &normal, &abnormal, &tn, &ta)?;
        acc.points += 1;
        let eval = |s: &QueryFormerState| -> Result<f64> {
            Ok(qf_loss_and_grads(s, &normal, &abnormal, &tn, &ta)?.0)
        };
        let d = state.queries[0].len();
        // Deterministic coordinate sample across every parameter group.
        let coords: Vec<(usize, usize)> = vec![(0, 0), (3, 5), (d - 1, d - 1)];
        for &(i, j) in &coords {
            let mut cases: Vec<(String, f64, Box<dyn Fn(&mut QueryFormerState, f64)>)> = vec![
                (
                    format!("w_q_n[{i}][{j}]"),
                    grads.normal.w_q[i][j],
                    Box::new(move |s, h| s.params.normal.w_q[i][j] += h),
                ),
                (
                    format!("w_k_n[{i}][{j}]"),
                    grads.normal.w_k[i][j],
                    Box::new(move |s, h| s.params.normal.w_k[i][j] += h),
                ),
                (
                    format!("w_v_a[{i}][{j}]"),
                    grads.abnormal.w_v[i][j],
                    Box::new(move |s, h| s.params.abnormal.w_v[i][j] += h),
                ),
                (
                    format!("fuse_w[{i}][{j}]"),
                    grads.fuse_w[i][j],
                    Box::new(move |s, h| s.params.fuse_w[i][j] += h),
                ),
                (
                    format!("fuse_b[{i}]"),
                    grads.fuse_b[i],
                    Box::new(move |s, h| s.params.fuse_b[i] += h),
                ),
                (
                    format!("query0[{j}]"),
                    grads.queries[0][j],
                    Box::new(move |s, h| s.queries[0][j] += h),
                ),
            ];
            for (name, analytic, bump) in cases.drain(..) {
                let mut plus = state.clone();
                bump(&mut plus, FD_STEP);
                let mut minus = state.clone();
                bump(&mut minus, -FD_STEP);
                let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
                acc.record(format!("query_former[{point}] {name}"), analytic, fd);
            }
        }
    }
    Ok(acc.finish(tolerance))
}

/// Run every chain at `points` seeded random points each.
pub fn run_grad_checks(seed: u64, points: usize, tolerance: f64) -> Result<GradReport> {
    let start = Instant::now();
    let chains = vec![
        check_loss_chain("loss_clip", Chain::Clip, seed, points, tolerance)?,
        check_loss_chain("loss_triplet", Chain::Triplet, seed, points, tolerance)?,
        check_loss_chain("loss_mean", Chain::Mean, seed, points, tolerance)?,
        check_loss_chain("loss_reg", Chain::Reg, seed, points, tolerance)?,
        check_text_encoder(seed, points, tolerance)?,
        check_query_former(seed, points, tolerance)?,
    ];
    let passed = chains.iter().all(|c| c.passed);
    Ok(GradReport {
        tolerance,
        fd_step: FD_STEP,
        chains,
        passed,
        elapsed_ms: start.elapsed().as_millis() as u64,
    })
}
