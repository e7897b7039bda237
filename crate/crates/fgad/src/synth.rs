//! Synthetic scene generation for desk-scale experiments.
//!
//! The factory manufactures scenes whose visual statistics are consistent
//! with a caption document under a given synthetic encoder: for every
//! region (background plus each component) it solves the cell attribute
//! vector so that the region's noiseless visual token lands exactly on the
//! text feature of that region's caption. Component captions therefore
//! genuinely describe their regions, which is what the language-guided
//! pipeline assumes of real data. Anomalies are injected as perturbations
//! along the text feature of a seeded anomaly word, so abnormal prompts
//! built from the same words can recognize them.
//!
//! Requires the attribute dimension to equal the feature dimension (the
//! attribute projection is square and invertible with probability one).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::core::FeatVec;
use crate::encoder::{SceneCell, SyntheticEncoder, SyntheticScene, TextEncoder};
use crate::error::{Error, Result};
use crate::mfsc::MFSCDocument;
use crate::seeded;

/// A test scene with its image-level label; pixel labels live in the
/// scene's anomaly flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledScene {
    pub scene: SyntheticScene,
    pub anomalous: bool,
}

/// LU factorization with partial pivoting, enough to solve the square
/// attribute systems.
struct Lu {
    lu: Vec<Vec<f64>>,
    pivots: Vec<usize>,
}

impl Lu {
    fn factor(mut a: Vec<Vec<f64>>) -> Result<Lu> {
        let n = a.len();
        let mut pivots = Vec::with_capacity(n);
        for col in 0..n {
            let mut pivot = col;
            let mut best = a[col][col].abs();
            for row in col + 1..n {
                if a[row][col].abs() > best {
                    best = a[row][col].abs();
                    pivot = row;
                }
            }
            if best < 1e-12 {
                return Err(Error::Invalid {
                    context: "attribute projection",
                    message: "singular projection matrix".into(),
                });
            }
            a.swap(col, pivot);
            pivots.push(pivot);
            let diag = a[col][col];
            for row in col + 1..n {
                let factor = a[row][col] / diag;
                a[row][col] = factor;
                for k in col + 1..n {
                    let upper = a[col][k];
                    a[row][k] -= factor * upper;
                }
            }
        }
        Ok(Lu { lu: a, pivots })
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = b.len();
        let mut x = b.to_vec();
        for col in 0..n {
            x.swap(col, self.pivots[col]);
        }
        for col in 0..n {
            for row in col + 1..n {
                x[row] -= self.lu[row][col] * x[col];
            }
        }
        for col in (0..n).rev() {
            x[col] /= self.lu[col][col];
            for row in 0..col {
                x[row] -= self.lu[row][col] * x[col];
            }
        }
        x
    }
}

fn encode_words(enc: &SyntheticEncoder, text: &str) -> Result<FeatVec> {
    let seq: Vec<Vec<f64>> = text
        .split_whitespace()
        .map(|w| enc.word_embedding(w))
        .collect();
    if seq.is_empty() {
        return Err(Error::Empty("region caption text"));
    }
    enc.encode(&seq)
}

/// Builds scenes for one category under one encoder.
pub struct SceneFactory<'a> {
    doc: &'a MFSCDocument,
    enc: &'a SyntheticEncoder,
    h: usize,
    w: usize,
    /// Pre-normalization magnitude of the region signal relative to noise.
    feature_gain: f64,
    /// Per-region attribute vectors, index 0 = background.
    attributes: Vec<Vec<f64>>,
    /// Per-region text directions, index 0 = background.
    directions: Vec<FeatVec>,
}

impl<'a> SceneFactory<'a> {
    pub fn new(
        doc: &'a MFSCDocument,
        enc: &'a SyntheticEncoder,
        h: usize,
        w: usize,
        feature_gain: f64,
    ) -> Result<Self> {
        let d = enc.spec().feature_dim;
        if !(feature_gain > 0.0) {
            return Err(Error::Config("feature_gain must be > 0".into()));
        }
        let mut directions = Vec::with_capacity(doc.components.len() + 1);
        directions.push(encode_words(enc, &doc.background)?);
        for comp in &doc.components {
            directions.push(encode_words(enc, &comp.caption_text)?);
        }

        let lu = Lu::factor(enc.attribute_projection(d))?;
        let mut attributes = Vec::with_capacity(directions.len());
        for (cid, dir) in directions.iter().enumerate() {
            let proj = enc.component_projection(cid);
            let rhs: Vec<f64> = dir
                .as_slice()
                .iter()
                .zip(&proj)
                .map(|(t, p)| feature_gain * t - p)
                .collect();
            attributes.push(lu.solve(&rhs));
        }

        Ok(SceneFactory {
            doc,
            enc,
            h,
            w,
            feature_gain,
            attributes,
            directions,
        })
    }

    pub fn feature_gain(&self) -> f64 {
        self.feature_gain
    }

    /// The text feature each region's noiseless tokens sit on.
    pub fn region_direction(&self, region: usize) -> &FeatVec {
        &self.directions[region]
    }

    fn component_counts(&self) -> Vec<(usize, u32)> {
        self.doc
            .components
            .iter()
            .enumerate()
            .map(|(ci, comp)| {
                let count = self
                    .doc
                    .foreground
                    .component_counts
                    .get(&comp.name)
                    .copied()
                    .unwrap_or(1);
                (ci, count)
            })
            .collect()
    }

    fn layout(&self, scene_seed: u64) -> Result<Vec<usize>> {
        let mut labels = vec![0usize; self.h * self.w];
        let mut rng = seeded::rng_for_indexed(0, &["layout", &self.doc.category], &[scene_seed]);
        for (ci, count) in self.component_counts() {
            for _ in 0..count {
                let rh = rng.random_range(1..=3usize).min(self.h);
                let rw = rng.random_range(1..=3usize).min(self.w);
                let mut placed = false;
                for _attempt in 0..400 {
                    let top = rng.random_range(0..=self.h - rh);
                    let left = rng.random_range(0..=self.w - rw);
                    let mut free = true;
                    'scan: for i in top..top + rh {
                        for j in left..left + rw {
                            if labels[i * self.w + j] != 0 {
                                free = false;
                                break 'scan;
                            }
                        }
                    }
                    if free {
                        for i in top..top + rh {
                            for j in left..left + rw {
                                labels[i * self.w + j] = ci + 1;
                            }
                        }
                        placed = true;
                        break;
                    }
                }
                if !placed {
                    return Err(Error::Invalid {
                        context: "scene layout",
                        message: format!(
                            "could not place component {ci} on a {}x{} grid",
                            self.h, self.w
                        ),
                    });
                }
            }
        }
        // Guarantee every component id appears so labels stay contiguous.
        for (ci, _) in self.component_counts() {
            if !labels.contains(&(ci + 1)) {
                return Err(Error::Invalid {
                    context: "scene layout",
                    message: format!("component {ci} missing from layout"),
                });
            }
        }
        Ok(labels)
    }

    fn scene_from_labels(&self, labels: Vec<usize>, scene_seed: u64) -> SyntheticScene {
        let cells = labels
            .iter()
            .map(|&cid| SceneCell {
                component_id: cid,
                attribute_vector: self.attributes[cid].clone(),
                anomaly_flag: false,
                anomaly_perturbation: None,
            })
            .collect();
        SyntheticScene {
            category: self.doc.category.clone(),
            h: self.h,
            w: self.w,
            cells,
            noise_salt: scene_seed,
        }
    }

    /// A normal scene with a seeded random layout.
    pub fn normal(&self, scene_seed: u64) -> Result<SyntheticScene> {
        let scene = self.scene_from_labels(self.layout(scene_seed)?, scene_seed);
        scene.validate()?;
        Ok(scene)
    }

    /// A scene with anomalous patches injected on the foreground.
    ///
    /// Each patch perturbs its cells along the text feature of a seeded
    /// anomaly word, with pre-normalization magnitude
    /// `perturbation_multiple * noise_sigma * sqrt(d)`.
    pub fn anomalous(
        &self,
        scene_seed: u64,
        anomaly_words: &[String],
        perturbation_multiple: f64,
        patches: usize,
        patch_size: usize,
    ) -> Result<SyntheticScene> {
        if anomaly_words.is_empty() {
            return Err(Error::Empty("anomaly words"));
        }
        let mut scene = self.normal(scene_seed)?;
        let d = self.enc.spec().feature_dim;
        let magnitude = perturbation_multiple * self.enc.spec().noise_sigma * (d as f64).sqrt();
        let mut rng = seeded::rng_for_indexed(0, &["anomaly", &self.doc.category], &[scene_seed]);

        let fg_cells: Vec<(usize, usize)> = (0..self.h)
            .flat_map(|i| (0..self.w).map(move |j| (i, j)))
            .filter(|&(i, j)| scene.cell(i, j).component_id != 0)
            .collect();
        if fg_cells.is_empty() {
            return Err(Error::DegenerateForeground);
        }

        for _ in 0..patches.max(1) {
            let &(ci, cj) = &fg_cells[rng.random_range(0..fg_cells.len())];
            let word = &anomaly_words[rng.random_range(0..anomaly_words.len())];
            let direction = encode_words(self.enc, word)?;
            let pert: Vec<f64> = direction.as_slice().iter().map(|v| v * magnitude).collect();
            for i in ci..(ci + patch_size).min(self.h) {
                for j in cj..(cj + patch_size).min(self.w) {
                    let cell = scene.cell_mut(i, j);
                    cell.anomaly_flag = true;
                    cell.anomaly_perturbation = Some(pert.clone());
                }
            }
        }
        scene.validate()?;
        Ok(scene)
    }

    /// The k normal shots used for training/memory.
    pub fn shots(&self, k: usize, seed: u64) -> Result<Vec<SyntheticScene>> {
        (0..k)
            .map(|i| self.normal(mix(seed, "shot", i as u64)))
            .collect()
    }

    /// A labeled test suite of normal and anomalous scenes.
    #[allow(clippy::too_many_arguments)]
    pub fn test_suite(
        &self,
        normal: usize,
        anomalous: usize,
        anomaly_words: &[String],
        perturbation_multiple: f64,
        patches: usize,
        patch_size: usize,
        seed: u64,
    ) -> Result<Vec<LabeledScene>> {
        let mut suite = Vec::with_capacity(normal + anomalous);
        for i in 0..normal {
            suite.push(LabeledScene {
                scene: self.normal(mix(seed, "test-normal", i as u64))?,
                anomalous: false,
            });
        }
        for i in 0..anomalous {
            suite.push(LabeledScene {
                scene: self.anomalous(
                    mix(seed, "test-anomalous", i as u64),
                    anomaly_words,
                    perturbation_multiple,
                    patches,
                    patch_size,
                )?,
                anomalous: true,
            });
        }
        Ok(suite)
    }
}

fn mix(seed: u64, tag: &str, index: u64) -> u64 {
    use sha2::Digest;
    let mut hasher = sha2::Sha256::new();
    hasher.update(b"fgad.scene.v1");
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[0..8].try_into().unwrap())
}
