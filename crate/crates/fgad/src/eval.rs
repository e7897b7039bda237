//! Metrics and the synthetic benchmark harness.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::pipeline::{infer, TrainedModel};
use crate::synth::LabeledScene;

/// Scores with binary labels (`true` = anomalous).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScores {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl LabeledScores {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Self {
        LabeledScores { scores, labels }
    }
}

/// Area under the ROC curve via the rank statistic: sorts once, assigns
/// average ranks to tied scores, and normalizes the positive rank sum by
/// `n_pos * n_neg`. Equals the probability that a random anomalous item
/// outscores a random normal one, ties counted half.
pub fn auroc(data: &LabeledScores) -> Result<f64> {
    if data.scores.len() != data.labels.len() {
        return Err(Error::DimMismatch {
            context: "auroc",
            expected: data.scores.len(),
            got: data.labels.len(),
        });
    }
    if data.scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Invalid {
            context: "auroc scores",
            message: "non-finite score".into(),
        });
    }
    let n_pos = data.labels.iter().filter(|l| **l).count();
    let n_neg = data.labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "auroc needs both classes present",
        ));
    }

    let mut order: Vec<usize> = (0..data.scores.len()).collect();
    order.sort_by(|&a, &b| {
        data.scores[a]
            .partial_cmp(&data.scores[b])
            .expect("finite scores")
    });

    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && data.scores[order[j]] == data.scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j averaged across the tie group.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if data.labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }

    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// One test suite evaluated under one seed.
pub struct SeedSuite {
    pub seed: u64,
    pub scenes: Vec<LabeledScene>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub image_auroc: f64,
    pub pixel_auroc: f64,
    pub images: usize,
    pub pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub category: String,
    /// Mean over seeds.
    pub image_auroc: f64,
    pub pixel_auroc: f64,
    pub per_seed: Vec<SeedReport>,
    /// Timing only; excluded from determinism comparisons.
    pub wall_clock_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub categories: Vec<CategoryReport>,
}

impl BenchmarkReport {
    /// Aligned-column text table.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<16} {:>12} {:>12} {:>8} {:>10}\n",
            "category", "image_auroc", "pixel_auroc", "seeds", "ms"
        ));
        for c in &self.categories {
            out.push_str(&format!(
                "{:<16} {:>12.4} {:>12.4} {:>8} {:>10}\n",
                c.category,
                c.image_auroc,
                c.pixel_auroc,
                c.per_seed.len(),
                c.wall_clock_ms
            ));
        }
        out
    }

    /// The report with timing zeroed, for bit-exact comparisons.
    pub fn deterministic_view(&self) -> BenchmarkReport {
        let mut view = self.clone();
        for c in &mut view.categories {
            c.wall_clock_ms = 0;
        }
        view
    }
}

/// Score every scene of every seed suite with the trained model and compute
/// image- and pixel-level AUROC. Pixel scores pool across the whole suite
/// by default (`suite.pooled_pixels`), otherwise per-image AUROCs are
/// averaged.
pub fn evaluate_dataset(
    model: &TrainedModel,
    suites: &[SeedSuite],
    cfg: &RunConfig,
) -> Result<BenchmarkReport> {
    if suites.is_empty() {
        return Err(Error::Empty("evaluation suites"));
    }
    let start = Instant::now();
    let mut per_seed = Vec::with_capacity(suites.len());
    for suite in suites {
        let mut image_scores = Vec::new();
        let mut image_labels = Vec::new();
        let mut pixel_scores = Vec::new();
        let mut pixel_labels = Vec::new();
        let mut per_image_pixel_auroc = Vec::new();

        for labeled in &suite.scenes {
            let grid = model.encoder.encode_scene(&labeled.scene)?;
            let inference = infer(model, &grid)?;
            image_scores.push(inference.m_img);
            image_labels.push(labeled.anomalous);
            let mask = labeled.scene.anomaly_mask();
            if cfg.suite.pooled_pixels {
                pixel_scores.extend_from_slice(inference.m_pix.as_slice());
                pixel_labels.extend_from_slice(&mask);
            } else if mask.iter().any(|m| *m) && mask.iter().any(|m| !*m) {
                per_image_pixel_auroc.push(auroc(&LabeledScores::new(
                    inference.m_pix.as_slice().to_vec(),
                    mask,
                ))?);
            }
        }

        let image_auroc = auroc(&LabeledScores::new(image_scores, image_labels))?;
        let (pixel_auroc, pixels) = if cfg.suite.pooled_pixels {
            let n = pixel_scores.len();
            (
                auroc(&LabeledScores::new(pixel_scores, pixel_labels))?,
                n,
            )
        } else {
            if per_image_pixel_auroc.is_empty() {
                return Err(Error::UndefinedMetric(
                    "per-image pixel auroc needs anomalous images",
                ));
            }
            let mean =
                per_image_pixel_auroc.iter().sum::<f64>() / per_image_pixel_auroc.len() as f64;
            (mean, per_image_pixel_auroc.len())
        };

        per_seed.push(SeedReport {
            seed: suite.seed,
            image_auroc,
            pixel_auroc,
            images: suite.scenes.len(),
            pixels,
        });
    }

    let image_auroc = per_seed.iter().map(|s| s.image_auroc).sum::<f64>() / per_seed.len() as f64;
    let pixel_auroc = per_seed.iter().map(|s| s.pixel_auroc).sum::<f64>() / per_seed.len() as f64;
    Ok(BenchmarkReport {
        categories: vec![CategoryReport {
            category: model.doc.category.clone(),
            image_auroc,
            pixel_auroc,
            per_seed,
            wall_clock_ms: start.elapsed().as_millis() as u64,
        }],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded;
    use rand::Rng;

    #[test]
    fn perfectly_separated_scores_give_one() {
        let data = LabeledScores::new(
            vec![0.9, 0.8, 0.7, 0.2, 0.1],
            vec![true, true, true, false, false],
        );
        assert_eq!(auroc(&data).unwrap(), 1.0);
    }

    #[test]
    fn all_ties_give_half() {
        let data = LabeledScores::new(vec![0.5; 6], vec![true, false, true, false, true, false]);
        assert!((auroc(&data).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_class_is_undefined() {
        let data = LabeledScores::new(vec![0.1, 0.2], vec![true, true]);
        assert!(matches!(auroc(&data), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn matches_pair_counting_oracle() {
        let mut rng = seeded::rng_for(3, &["auroc"]);
        for trial in 0..50 {
            let n = 30 + trial % 20;
            let scores: Vec<f64> = (0..n)
                .map(|_| {
                    // Quantized scores force plenty of ties.
                    (rng.random_range(0..8) as f64) / 8.0
                })
                .collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            if labels.iter().all(|l| *l) || labels.iter().all(|l| !*l) {
                continue;
            }
            let fast = auroc(&LabeledScores::new(scores.clone(), labels.clone())).unwrap();
            // O(n^2) pair counting.
            let mut wins = 0.0;
            let mut pairs = 0.0;
            for (sp, _) in scores.iter().zip(&labels).filter(|(_, l)| **l) {
                for (sn, _) in scores.iter().zip(&labels).filter(|(_, l)| !*l) {
                    pairs += 1.0;
                    if sp > sn {
                        wins += 1.0;
                    } else if sp == sn {
                        wins += 0.5;
                    }
                }
            }
            assert!((fast - wins / pairs).abs() < 1e-9);
        }
    }

    #[test]
    fn invariant_under_monotone_transform_and_label_flip() {
        let mut rng = seeded::rng_for(5, &["auroc2"]);
        let scores: Vec<f64> = (0..40).map(|_| rng.random_range(-2.0..2.0)).collect();
        let labels: Vec<bool> = (0..40).map(|i| i % 3 == 0).collect();
        let base = auroc(&LabeledScores::new(scores.clone(), labels.clone())).unwrap();
        let transformed: Vec<f64> = scores.iter().map(|s| (s * 1.7).exp()).collect();
        let same = auroc(&LabeledScores::new(transformed, labels.clone())).unwrap();
        assert!((base - same).abs() < 1e-12);
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        let complement = auroc(&LabeledScores::new(scores, flipped)).unwrap();
        assert!((base + complement - 1.0).abs() < 1e-12);
    }
}
