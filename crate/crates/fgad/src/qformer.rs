//! Query Former: per-family intrinsic representations.
//!
//! One learnable query per prompt family (image, foreground, each
//! component) attends over that family's normal and abnormal prompt
//! features through two parallel single-head cross-attention branches; a
//! linear projection fuses the two branch outputs into a unit-norm
//! intrinsic feature. Training maximizes the cosine of each intrinsic
//! feature to both its family's normal and abnormal mean prompt features,
//! on frozen prompt banks. Backpropagation through the attention stack is
//! hand-derived and checked against finite differences.

use serde::{Deserialize, Serialize};

use crate::core::FeatVec;
use crate::error::{Error, Result};
use crate::prompts::PromptBanks;
use crate::seeded;

type Matrix = Vec<Vec<f64>>;

/// Projections of one attention branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

/// All Query Former parameters: two branches plus the fusion projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryFormerParams {
    pub normal: BranchParams,
    pub abnormal: BranchParams,
    /// `d x 2d`: fuses `[normal_out; abnormal_out]` down to `d`.
    pub fuse_w: Matrix,
    pub fuse_b: Vec<f64>,
}

/// Per-family learnable queries plus shared projections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryFormerState {
    pub params: QueryFormerParams,
    pub queries: Vec<Vec<f64>>,
}

impl QueryFormerState {
    pub fn families(&self) -> usize {
        self.queries.len()
    }
}

fn init_branch(d: usize, seed: u64, tag: &str) -> BranchParams {
    let std = 1.0 / (d as f64).sqrt();
    let mk = |name: &str| {
        let mut rng = seeded::rng_for(seed, &["qf", tag, name]);
        seeded::gaussian_matrix(&mut rng, d, d, std)
    };
    BranchParams {
        w_q: mk("wq"),
        w_k: mk("wk"),
        w_v: mk("wv"),
    }
}

/// Seeded initialization: projections at std `1/sqrt(d)`, queries at std 0.02.
pub fn init_query_former(d: usize, families: usize, seed: u64) -> QueryFormerState {
    let std = 1.0 / (d as f64).sqrt();
    let fuse_w = {
        let mut rng = seeded::rng_for(seed, &["qf", "fuse"]);
        seeded::gaussian_matrix(&mut rng, d, 2 * d, std)
    };
    let fuse_b = {
        let mut rng = seeded::rng_for(seed, &["qf", "fuse-bias"]);
        seeded::gaussian_vec(&mut rng, d, std)
    };
    let queries = (0..families)
        .map(|f| {
            let mut rng = seeded::rng_for_indexed(seed, &["qf", "query"], &[f as u64]);
            seeded::gaussian_vec(&mut rng, d, 0.02)
        })
        .collect();
    QueryFormerState {
        params: QueryFormerParams {
            normal: init_branch(d, seed, "normal"),
            abnormal: init_branch(d, seed, "abnormal"),
            fuse_w,
            fuse_b,
        },
        queries,
    }
}

fn matvec(m: &Matrix, v: &[f64]) -> Vec<f64> {
    m.iter()
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn matvec_t(m: &Matrix, v: &[f64]) -> Vec<f64> {
    let cols = m[0].len();
    let mut out = vec![0.0; cols];
    for (row, vi) in m.iter().zip(v) {
        for (o, w) in out.iter_mut().zip(row) {
            *o += w * vi;
        }
    }
    out
}

struct BranchCache {
    q_proj: Vec<f64>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    weights: Vec<f64>,
    out: Vec<f64>,
}

fn branch_forward(params: &BranchParams, query: &[f64], bank: &[FeatVec]) -> Result<BranchCache> {
    if bank.is_empty() {
        return Err(Error::Empty("query former bank"));
    }
    let d = query.len();
    let scale = 1.0 / (d as f64).sqrt();
    let q_proj = matvec(&params.w_q, query);
    let keys: Vec<Vec<f64>> = bank.iter().map(|x| matvec(&params.w_k, x.as_slice())).collect();
    let values: Vec<Vec<f64>> = bank.iter().map(|x| matvec(&params.w_v, x.as_slice())).collect();
    let logits: Vec<f64> = keys
        .iter()
        .map(|k| q_proj.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale)
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let weights: Vec<f64> = exps.into_iter().map(|e| e / sum).collect();
    let mut out = vec![0.0; d];
    for (w, v) in weights.iter().zip(&values) {
        for (o, vi) in out.iter_mut().zip(v) {
            *o += w * vi;
        }
    }
    Ok(BranchCache {
        q_proj,
        keys,
        values,
        weights,
        out,
    })
}

struct FamilyCache {
    normal: BranchCache,
    abnormal: BranchCache,
    fused: Vec<f64>,
    fused_norm: f64,
    intrinsic: Vec<f64>,
}

fn family_forward(
    state: &QueryFormerState,
    family: usize,
    normal_bank: &[FeatVec],
    abnormal_bank: &[FeatVec],
) -> Result<FamilyCache> {
    let query = &state.queries[family];
    let normal = branch_forward(&state.params.normal, query, normal_bank)?;
    let abnormal = branch_forward(&state.params.abnormal, query, abnormal_bank)?;
    let d = query.len();
    let mut concat = Vec::with_capacity(2 * d);
    concat.extend_from_slice(&normal.out);
    concat.extend_from_slice(&abnormal.out);
    let mut fused = matvec(&state.params.fuse_w, &concat);
    for (f, b) in fused.iter_mut().zip(&state.params.fuse_b) {
        *f += b;
    }
    let fused_norm = fused.iter().map(|v| v * v).sum::<f64>().sqrt();
    if fused_norm == 0.0 {
        return Err(Error::ZeroNorm("query former fusion"));
    }
    let intrinsic = fused.iter().map(|v| v / fused_norm).collect();
    Ok(FamilyCache {
        normal,
        abnormal,
        fused,
        fused_norm,
        intrinsic,
    })
}

/// Forward pass: one unit-norm intrinsic feature per family.
pub fn qf_forward(
    state: &QueryFormerState,
    normal_banks: &[Vec<FeatVec>],
    abnormal_banks: &[Vec<FeatVec>],
) -> Result<Vec<FeatVec>> {
    if normal_banks.len() != state.families() || abnormal_banks.len() != state.families() {
        return Err(Error::DimMismatch {
            context: "query former banks",
            expected: state.families(),
            got: normal_banks.len().min(abnormal_banks.len()),
        });
    }
    (0..state.families())
        .map(|f| {
            let cache = family_forward(state, f, &normal_banks[f], &abnormal_banks[f])?;
            Ok(FeatVec::new(cache.intrinsic))
        })
        .collect()
}

/// Extract the per-family banks the Query Former consumes from encoded
/// prompt banks: normal = NHP features, abnormal = AHP and ALP features.
pub fn family_banks(banks: &PromptBanks) -> (Vec<Vec<FeatVec>>, Vec<Vec<FeatVec>>) {
    let normal = banks.levels.iter().map(|b| b.nhp.clone()).collect();
    let abnormal = banks
        .levels
        .iter()
        .map(|b| b.ahp.iter().chain(&b.alp).cloned().collect())
        .collect();
    (normal, abnormal)
}

/// Gradients mirroring [`QueryFormerState`].
#[derive(Debug, Clone)]
pub struct QfGrads {
    pub normal: BranchParams,
    pub abnormal: BranchParams,
    pub fuse_w: Matrix,
    pub fuse_b: Vec<f64>,
    pub queries: Vec<Vec<f64>>,
}

impl QfGrads {
    fn zeros(d: usize, families: usize) -> Self {
        let zero_branch = || BranchParams {
            w_q: vec![vec![0.0; d]; d],
            w_k: vec![vec![0.0; d]; d],
            w_v: vec![vec![0.0; d]; d],
        };
        QfGrads {
            normal: zero_branch(),
            abnormal: zero_branch(),
            fuse_w: vec![vec![0.0; 2 * d]; d],
            fuse_b: vec![0.0; d],
            queries: vec![vec![0.0; d]; families],
        }
    }
}

fn branch_backward(
    params: &BranchParams,
    grads: &mut BranchParams,
    query: &[f64],
    bank: &[FeatVec],
    cache: &BranchCache,
    dout: &[f64],
    dquery: &mut [f64],
) {
    let d = query.len();
    let scale = 1.0 / (d as f64).sqrt();

    // out = sum_i w_i v_i
    let dweights: Vec<f64> = cache
        .values
        .iter()
        .map(|v| v.iter().zip(dout).map(|(a, b)| a * b).sum())
        .collect();
    // softmax backward
    let inner: f64 = cache
        .weights
        .iter()
        .zip(&dweights)
        .map(|(w, dw)| w * dw)
        .sum();
    let dlogits: Vec<f64> = cache
        .weights
        .iter()
        .zip(&dweights)
        .map(|(w, dw)| w * (dw - inner))
        .collect();

    let mut dq_proj = vec![0.0; d];
    for (i, x) in bank.iter().enumerate() {
        // dL/dv_i = w_i * dout -> W_v rows
        for (grad_row, dout_r) in grads.w_v.iter_mut().zip(dout) {
            let coeff = cache.weights[i] * dout_r;
            for (g, xj) in grad_row.iter_mut().zip(x.as_slice()) {
                *g += coeff * xj;
            }
        }
        // dL/dk_i = dlogit_i * q' * scale -> W_k rows
        let coeff = dlogits[i] * scale;
        for (grad_row, qv) in grads.w_k.iter_mut().zip(&cache.q_proj) {
            for (g, xj) in grad_row.iter_mut().zip(x.as_slice()) {
                *g += coeff * qv * xj;
            }
        }
        // accumulate dL/dq' = sum_i dlogit_i * k_i * scale
        for (dq, kv) in dq_proj.iter_mut().zip(&cache.keys[i]) {
            *dq += coeff * kv;
        }
    }

    // q' = W_q q
    for (grad_row, dq) in grads.w_q.iter_mut().zip(&dq_proj) {
        for (g, qv) in grad_row.iter_mut().zip(query) {
            *g += dq * qv;
        }
    }
    for (dq, v) in dquery.iter_mut().zip(matvec_t(&params.w_q, &dq_proj)) {
        *dq += v;
    }
}

/// Loss for one family: `-(cos(intrinsic, target_n) + cos(intrinsic, target_a)) / 2`.
/// Returns the loss and accumulates gradients for all parameters and the
/// family's query. Targets are frozen unit vectors.
fn family_loss_backward(
    state: &QueryFormerState,
    grads: &mut QfGrads,
    family: usize,
    normal_bank: &[FeatVec],
    abnormal_bank: &[FeatVec],
    target_n: &FeatVec,
    target_a: &FeatVec,
) -> Result<f64> {
    let cache = family_forward(state, family, normal_bank, abnormal_bank)?;
    let d = state.queries[family].len();
    let cos_n: f64 = cache
        .intrinsic
        .iter()
        .zip(target_n.as_slice())
        .map(|(a, b)| a * b)
        .sum();
    let cos_a: f64 = cache
        .intrinsic
        .iter()
        .zip(target_a.as_slice())
        .map(|(a, b)| a * b)
        .sum();
    let loss = -0.5 * (cos_n + cos_a);

    // dL/d(intrinsic) = -(target_n + target_a)/2, then through normalize.
    let dint: Vec<f64> = target_n
        .as_slice()
        .iter()
        .zip(target_a.as_slice())
        .map(|(n, a)| -0.5 * (n + a))
        .collect();
    let radial: f64 = dint.iter().zip(&cache.intrinsic).map(|(g, o)| g * o).sum();
    let dfused: Vec<f64> = dint
        .iter()
        .zip(&cache.intrinsic)
        .map(|(g, o)| (g - radial * o) / cache.fused_norm)
        .collect();
    let _ = &cache.fused;

    // fused = W_f [n_out; a_out] + b
    let mut concat = Vec::with_capacity(2 * d);
    concat.extend_from_slice(&cache.normal.out);
    concat.extend_from_slice(&cache.abnormal.out);
    for (grad_row, df) in grads.fuse_w.iter_mut().zip(&dfused) {
        for (g, c) in grad_row.iter_mut().zip(&concat) {
            *g += df * c;
        }
    }
    for (g, df) in grads.fuse_b.iter_mut().zip(&dfused) {
        *g += df;
    }
    let dconcat = matvec_t(&state.params.fuse_w, &dfused);
    let (dnormal_out, dabnormal_out) = dconcat.split_at(d);

    let mut dquery = vec![0.0; d];
    branch_backward(
        &state.params.normal,
        &mut grads.normal,
        &state.queries[family],
        normal_bank,
        &cache.normal,
        dnormal_out,
        &mut dquery,
    );
    branch_backward(
        &state.params.abnormal,
        &mut grads.abnormal,
        &state.queries[family],
        abnormal_bank,
        &cache.abnormal,
        dabnormal_out,
        &mut dquery,
    );
    for (g, dq) in grads.queries[family].iter_mut().zip(&dquery) {
        *g += dq;
    }
    Ok(loss)
}

/// Mean family loss and full gradients at the current parameters.
pub fn qf_loss_and_grads(
    state: &QueryFormerState,
    normal_banks: &[Vec<FeatVec>],
    abnormal_banks: &[Vec<FeatVec>],
    targets_n: &[FeatVec],
    targets_a: &[FeatVec],
) -> Result<(f64, QfGrads)> {
    let families = state.families();
    let d = state.queries[0].len();
    let mut grads = QfGrads::zeros(d, families);
    let mut total = 0.0;
    for f in 0..families {
        total += family_loss_backward(
            state,
            &mut grads,
            f,
            &normal_banks[f],
            &abnormal_banks[f],
            &targets_n[f],
            &targets_a[f],
        )?;
    }
    total /= families as f64;
    let inv = 1.0 / families as f64;
    let scale_matrix = |m: &mut Matrix| {
        for row in m {
            for v in row {
                *v *= inv;
            }
        }
    };
    scale_matrix(&mut grads.normal.w_q);
    scale_matrix(&mut grads.normal.w_k);
    scale_matrix(&mut grads.normal.w_v);
    scale_matrix(&mut grads.abnormal.w_q);
    scale_matrix(&mut grads.abnormal.w_k);
    scale_matrix(&mut grads.abnormal.w_v);
    scale_matrix(&mut grads.fuse_w);
    for v in &mut grads.fuse_b {
        *v *= inv;
    }
    for q in &mut grads.queries {
        for v in q {
            *v *= inv;
        }
    }
    Ok((total, grads))
}

fn sgd_matrix(m: &mut Matrix, g: &Matrix, lr: f64) {
    for (row, grow) in m.iter_mut().zip(g) {
        for (v, gv) in row.iter_mut().zip(grow) {
            *v -= lr * gv;
        }
    }
}

/// Train the Query Former on frozen prompt banks by SGD, maximizing the
/// cosine of each family's intrinsic feature to its normal and abnormal
/// mean prompt features. Returns the per-epoch loss trace.
pub fn train_query_former(
    state: &mut QueryFormerState,
    normal_banks: &[Vec<FeatVec>],
    abnormal_banks: &[Vec<FeatVec>],
    targets_n: &[FeatVec],
    targets_a: &[FeatVec],
    learning_rate: f64,
    epochs: usize,
) -> Result<Vec<f64>> {
    if learning_rate <= 0.0 {
        return Err(Error::Config("qf learning rate must be > 0".into()));
    }
    let mut trace = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let (loss, grads) = qf_loss_and_grads(
            state,
            normal_banks,
            abnormal_banks,
            targets_n,
            targets_a,
        )?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss("qf"));
        }
        trace.push(loss);
        sgd_matrix(&mut state.params.normal.w_q, &grads.normal.w_q, learning_rate);
        sgd_matrix(&mut state.params.normal.w_k, &grads.normal.w_k, learning_rate);
        sgd_matrix(&mut state.params.normal.w_v, &grads.normal.w_v, learning_rate);
        sgd_matrix(&mut state.params.abnormal.w_q, &grads.abnormal.w_q, learning_rate);
        sgd_matrix(&mut state.params.abnormal.w_k, &grads.abnormal.w_k, learning_rate);
        sgd_matrix(&mut state.params.abnormal.w_v, &grads.abnormal.w_v, learning_rate);
        sgd_matrix(&mut state.params.fuse_w, &grads.fuse_w, learning_rate);
        for (b, g) in state.params.fuse_b.iter_mut().zip(&grads.fuse_b) {
            *b -= learning_rate * g;
        }
        for (q, g) in state.queries.iter_mut().zip(&grads.queries) {
            for (qv, gv) in q.iter_mut().zip(g) {
                *qv -= learning_rate * gv;
            }
        }
    }
    Ok(trace)
}
