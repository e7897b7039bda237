//! Shared numeric primitives and score-map algebra.
//!
//! All arithmetic is carried out in `f64`; interchange formats round to
//! `f32` (see [`crate::encoder`]). Every function here is pure.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense feature vector in the shared feature space.
///
/// Holds visual token features, class-token features, prompt features and
/// memory entries alike. Entries are always finite; vectors documented as
/// "normalized" have Euclidean norm within `1e-6` of 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatVec(Vec<f64>);

impl FeatVec {
    /// Wrap raw values. Panics on non-finite entries; use [`FeatVec::try_new`]
    /// for untrusted data.
    pub fn new(values: Vec<f64>) -> Self {
        assert!(
            values.iter().all(|v| v.is_finite()),
            "feature vector entries must be finite"
        );
        FeatVec(values)
    }

    pub fn try_new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid {
                context: "feature vector",
                message: "non-finite entry".into(),
            });
        }
        Ok(FeatVec(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Plain dot product; debug-asserts matching dimensions.
    pub fn dot(&self, other: &FeatVec) -> f64 {
        debug_assert_eq!(self.dim(), other.dim(), "dot on mismatched dims");
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

impl std::ops::Index<usize> for FeatVec {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Cosine similarity `dot(a,b) / (|a||b|)`.
///
/// Errors on mismatched dimensions or a zero-norm input.
pub fn cosine(a: &FeatVec, b: &FeatVec) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimMismatch {
            context: "cosine",
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm("cosine"));
    }
    Ok(a.dot(b) / (na * nb))
}

/// Scale a vector to unit Euclidean norm. Errors on the zero vector.
pub fn l2_normalize(v: &FeatVec) -> Result<FeatVec> {
    let n = v.norm();
    if n == 0.0 {
        return Err(Error::ZeroNorm("l2_normalize"));
    }
    Ok(FeatVec(v.as_slice().iter().map(|x| x / n).collect()))
}

/// Harmonic combination `ab / (a + b)` of two scores in `(0, 1]`.
///
/// Dominated by the smaller input and never exceeds `min(a, b)`. By
/// convention the limit value 0 is returned when either input is 0.
pub fn harmonic_combine(a: f64, b: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b));
    if a == 0.0 || b == 0.0 {
        return 0.0;
    }
    a * b / (a + b)
}

/// Multiplier applied to cosine similarities before exponentiation in
/// softmax-form scores and losses.
///
/// The default of 100 follows the convention of contrastively pre-trained
/// vision-language encoders; it is configurable everywhere it is used.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LogitScale(f64);

impl LogitScale {
    pub fn new(scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Invalid {
                context: "logit scale",
                message: format!("must be a positive real, got {scale}"),
            });
        }
        Ok(LogitScale(scale))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for LogitScale {
    fn default() -> Self {
        LogitScale(100.0)
    }
}

/// Softmax weights over a token axis, computed with max-subtraction.
///
/// Values are multiplied by `scale` first; the output is nonnegative and
/// sums to 1 within `1e-9`. Errors on empty input.
pub fn token_softmax_weights(values: &[f64], scale: LogitScale) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Empty("token_softmax_weights"));
    }
    let scaled: Vec<f64> = values.iter().map(|v| v * scale.value()).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Rectangular grid of anomaly scores, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMap {
    h: usize,
    w: usize,
    scores: Vec<f64>,
}

impl ScoreMap {
    /// Build from row-major scores. Excursions past `[0,1]` by more than
    /// `1e-9` are a bug and panic; smaller rounding slop is clamped.
    pub fn new(h: usize, w: usize, scores: Vec<f64>) -> Self {
        assert_eq!(scores.len(), h * w, "score map size mismatch");
        let scores = scores
            .into_iter()
            .map(|s| {
                assert!(
                    s.is_finite() && (-1e-9..=1.0 + 1e-9).contains(&s),
                    "score out of range: {s}"
                );
                s.clamp(0.0, 1.0)
            })
            .collect();
        ScoreMap { h, w, scores }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.scores[i * self.w + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.scores
    }

    pub fn max(&self) -> f64 {
        self.scores.iter().cloned().fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(values: &[f64]) -> FeatVec {
        FeatVec::new(values.to_vec())
    }

    #[test]
    fn cosine_self_similarity_is_one() {
        let v = fv(&[0.3, -1.2, 4.0]);
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_orthogonal_basis_is_zero() {
        let e1 = fv(&[1.0, 0.0]);
        let e2 = fv(&[0.0, 1.0]);
        assert_eq!(cosine(&e1, &e2).unwrap(), 0.0);
    }

    #[test]
    fn cosine_hand_computed_value() {
        let a = fv(&[1.0, 1.0]);
        let b = fv(&[1.0, 0.0]);
        assert!((cosine(&a, &b).unwrap() - 0.7071067811865475).abs() < 1e-15);
    }

    #[test]
    fn cosine_rejects_zero_norm_and_dim_mismatch() {
        let z = fv(&[0.0, 0.0]);
        let v = fv(&[1.0, 0.0]);
        assert!(matches!(cosine(&z, &v), Err(Error::ZeroNorm(_))));
        let w = fv(&[1.0, 0.0, 0.0]);
        assert!(matches!(cosine(&w, &v), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn cosine_is_scale_invariant() {
        let a = fv(&[0.4, -2.0, 1.1]);
        let b = fv(&[3.0, 0.5, -0.2]);
        let scaled = fv(&[0.4 * 17.5, -2.0 * 17.5, 1.1 * 17.5]);
        let lhs = cosine(&scaled, &b).unwrap();
        let rhs = cosine(&a, &b).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn normalize_hand_computed_value() {
        let v = fv(&[3.0, 4.0]);
        let n = l2_normalize(&v).unwrap();
        assert_eq!(n.as_slice(), &[0.6, 0.8]);
    }

    #[test]
    fn normalize_unit_vector_is_identity_and_keeps_sign() {
        let u = fv(&[1.0, 0.0]);
        assert_eq!(l2_normalize(&u).unwrap(), u);
        let neg = fv(&[-2.0, 0.0]);
        assert_eq!(l2_normalize(&neg).unwrap().as_slice(), &[-1.0, 0.0]);
    }

    #[test]
    fn normalize_is_idempotent() {
        let v = fv(&[0.2, -5.0, 3.3, 0.01]);
        let once = l2_normalize(&v).unwrap();
        let twice = l2_normalize(&once).unwrap();
        for (a, b) in once.as_slice().iter().zip(twice.as_slice()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn normalize_rejects_zero() {
        assert!(l2_normalize(&fv(&[0.0, 0.0])).is_err());
    }

    #[test]
    fn harmonic_equal_inputs_halve() {
        assert_eq!(harmonic_combine(0.5, 0.5), 0.25);
    }

    #[test]
    fn harmonic_zero_convention() {
        assert_eq!(harmonic_combine(0.0, 0.7), 0.0);
        assert_eq!(harmonic_combine(0.7, 0.0), 0.0);
    }

    #[test]
    fn harmonic_hand_computed_value() {
        assert!((harmonic_combine(1.0, 0.5) - 0.3333333333).abs() < 1e-9);
    }

    #[test]
    fn harmonic_bounded_by_min_and_symmetric() {
        let mut rng = crate::seeded::rng_for(3, &["harmonic"]);
        for _ in 0..200 {
            let a: f64 = rand::Rng::random_range(&mut rng, 1e-6..1.0);
            let b: f64 = rand::Rng::random_range(&mut rng, 1e-6..1.0);
            let h = harmonic_combine(a, b);
            assert!(h <= a.min(b) + 1e-15);
            assert_eq!(h, harmonic_combine(b, a));
        }
    }

    #[test]
    fn softmax_uniform_and_singleton() {
        let w = token_softmax_weights(&[2.0; 4], LogitScale::default()).unwrap();
        assert_eq!(w, vec![0.25; 4]);
        let single = token_softmax_weights(&[-3.0], LogitScale::default()).unwrap();
        assert_eq!(single, vec![1.0]);
    }

    #[test]
    fn softmax_hand_computed_ratio() {
        let w = token_softmax_weights(&[0.0, (2.0f64).ln()], LogitScale::new(1.0).unwrap()).unwrap();
        assert!((w[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((w[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_empty_and_sums_to_one() {
        assert!(token_softmax_weights(&[], LogitScale::default()).is_err());
        let mut rng = crate::seeded::rng_for(11, &["softmax"]);
        for _ in 0..50 {
            let vals: Vec<f64> = (0..7)
                .map(|_| rand::Rng::random_range(&mut rng, -2.0..2.0))
                .collect();
            let w = token_softmax_weights(&vals, LogitScale::new(3.0).unwrap()).unwrap();
            let sum: f64 = w.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(w.iter().all(|x| *x >= 0.0));
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let vals = [0.2, -0.7, 1.3, 0.0];
        let shifted: Vec<f64> = vals.iter().map(|v| v + 5.0).collect();
        let scale = LogitScale::new(2.5).unwrap();
        let a = token_softmax_weights(&vals, scale).unwrap();
        let b = token_softmax_weights(&shifted, scale).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn logit_scale_must_be_positive() {
        assert!(LogitScale::new(0.0).is_err());
        assert!(LogitScale::new(-1.0).is_err());
        assert_eq!(LogitScale::default().value(), 100.0);
    }

    #[test]
    fn score_map_clamps_rounding_slop() {
        let m = ScoreMap::new(1, 2, vec![1.0 + 1e-12, -1e-12]);
        assert_eq!(m.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    #[should_panic]
    fn score_map_rejects_out_of_range() {
        let _ = ScoreMap::new(1, 1, vec![1.5]);
    }
}
