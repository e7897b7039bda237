//! Feature providers.
//!
//! Two sources of token grids share one interface: a deterministic synthetic
//! encoder pair (image + text) for desk-scale experiments where ground truth
//! is known, and a binary feature-file container (`FGADFEAT`) for importing
//! patch features produced by an external backbone bit-exactly.
//!
//! The synthetic image encoder maps each scene cell to
//! `normalize(P_c[component] + A * attributes + perturbation + noise)` with
//! seeded random projections `P_c`, `A`; the text encoder is mean-pool ->
//! affine -> normalize, so its Jacobian is available in closed form for
//! training and gradient verification.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::core::{l2_normalize, FeatVec};
use crate::error::{Error, Result};
use crate::seeded;

/// Parameters pinning down a synthetic encoder pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSpec {
    pub seed: u64,
    pub feature_dim: usize,
    pub token_embedding_dim: usize,
    pub noise_sigma: f64,
    /// Adds a fixed seeded bias to the text head. Off by default so that
    /// zero-contribution tokens drop out of the pooled mean exactly.
    pub text_bias: bool,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            seed: 0,
            feature_dim: 512,
            token_embedding_dim: 512,
            noise_sigma: 0.0,
            text_bias: false,
        }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 8 || self.token_embedding_dim < 8 {
            return Err(Error::Invalid {
                context: "encoder spec",
                message: format!(
                    "feature_dim and token_embedding_dim must be >= 8, got {} and {}",
                    self.feature_dim, self.token_embedding_dim
                ),
            });
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Invalid {
                context: "encoder spec",
                message: format!("noise_sigma must be >= 0, got {}", self.noise_sigma),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolutionTag {
    Native,
    Highres,
}

/// An `h x w` grid of unit-norm patch features plus a class token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenGrid {
    h: usize,
    w: usize,
    tokens: Vec<FeatVec>,
    class_token: FeatVec,
    resolution: ResolutionTag,
}

impl TokenGrid {
    pub fn new(
        h: usize,
        w: usize,
        tokens: Vec<FeatVec>,
        class_token: FeatVec,
        resolution: ResolutionTag,
    ) -> Result<Self> {
        if tokens.len() != h * w {
            return Err(Error::DimMismatch {
                context: "token grid",
                expected: h * w,
                got: tokens.len(),
            });
        }
        let d = class_token.dim();
        if tokens.iter().any(|t| t.dim() != d) {
            return Err(Error::Invalid {
                context: "token grid",
                message: "tokens and class token must share one dimension".into(),
            });
        }
        Ok(TokenGrid {
            h,
            w,
            tokens,
            class_token,
            resolution,
        })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.class_token.dim()
    }

    pub fn token(&self, i: usize, j: usize) -> &FeatVec {
        &self.tokens[i * self.w + j]
    }

    pub fn tokens(&self) -> &[FeatVec] {
        &self.tokens
    }

    pub fn class_token(&self) -> &FeatVec {
        &self.class_token
    }

    pub fn resolution(&self) -> ResolutionTag {
        self.resolution
    }
}

/// One cell of a synthetic scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneCell {
    pub component_id: usize,
    pub attribute_vector: Vec<f64>,
    pub anomaly_flag: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anomaly_perturbation: Option<Vec<f64>>,
}

/// A categorical stand-in for one image: every cell names its component
/// (0 = background) and carries an attribute vector; anomalous cells carry
/// an additive perturbation. `noise_salt` identifies the "photo", so two
/// scenes with identical content but different salts get independent
/// encoder noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub category: String,
    pub h: usize,
    pub w: usize,
    pub cells: Vec<SceneCell>,
    #[serde(default)]
    pub noise_salt: u64,
}

impl SyntheticScene {
    pub fn cell(&self, i: usize, j: usize) -> &SceneCell {
        &self.cells[i * self.w + j]
    }

    pub fn cell_mut(&mut self, i: usize, j: usize) -> &mut SceneCell {
        &mut self.cells[i * self.w + j]
    }

    /// Number of foreground components (largest component id).
    pub fn num_components(&self) -> usize {
        self.cells.iter().map(|c| c.component_id).max().unwrap_or(0)
    }

    /// Ground-truth labels, row-major: 0 = background, 1..=Nc = components.
    pub fn labels(&self) -> Vec<usize> {
        self.cells.iter().map(|c| c.component_id).collect()
    }

    /// Ground-truth anomaly mask, row-major.
    pub fn anomaly_mask(&self) -> Vec<bool> {
        self.cells.iter().map(|c| c.anomaly_flag).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.len() != self.h * self.w {
            return Err(Error::DimMismatch {
                context: "scene cells",
                expected: self.h * self.w,
                got: self.cells.len(),
            });
        }
        let attr_dim = self
            .cells
            .first()
            .map(|c| c.attribute_vector.len())
            .unwrap_or(0);
        let mut seen = vec![false; self.num_components() + 1];
        for (i, cell) in self.cells.iter().enumerate() {
            if cell.attribute_vector.len() != attr_dim {
                return Err(Error::Invalid {
                    context: "scene",
                    message: format!("cell {i} has inconsistent attribute dimension"),
                });
            }
            if cell.anomaly_flag != cell.anomaly_perturbation.is_some() {
                return Err(Error::Invalid {
                    context: "scene",
                    message: format!(
                        "cell {i}: anomaly_perturbation must be present iff anomaly_flag"
                    ),
                });
            }
            seen[cell.component_id] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Invalid {
                context: "scene",
                message: format!("component ids are not contiguous: id {missing} unused"),
            });
        }
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<SyntheticScene> {
        let scene: SyntheticScene = serde_json::from_str(&fs::read_to_string(path)?)?;
        scene.validate()?;
        Ok(scene)
    }
}

/// Pluggable text encoder: token-embedding sequences in, unit feature out,
/// with forward-mode (`jvp`) and reverse-mode (`vjp`) derivatives.
pub trait TextEncoder {
    fn token_dim(&self) -> usize;
    fn feature_dim(&self) -> usize;
    /// Fixed embedding of a word, deterministic in (seed, word).
    fn word_embedding(&self, word: &str) -> Vec<f64>;
    fn encode(&self, seq: &[Vec<f64>]) -> Result<FeatVec>;
    /// Directional derivative of `encode` along per-position tangents.
    fn jvp(&self, seq: &[Vec<f64>], tangents: &[Vec<f64>]) -> Result<Vec<f64>>;
    /// Pull a cotangent on the output back to each input position.
    fn vjp(&self, seq: &[Vec<f64>], cotangent: &[f64]) -> Result<Vec<Vec<f64>>>;
}

/// Deterministic synthetic image/text encoder pair.
pub struct SyntheticEncoder {
    spec: EncoderSpec,
    text_w: Vec<Vec<f64>>,
    text_b: Vec<f64>,
}

impl SyntheticEncoder {
    pub fn new(spec: EncoderSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.feature_dim;
        let e = spec.token_embedding_dim;
        let mut rng = seeded::rng_for(spec.seed, &["text-proj"]);
        let text_w = seeded::gaussian_matrix(&mut rng, d, e, 1.0 / (e as f64).sqrt());
        let text_b = if spec.text_bias {
            let mut rng = seeded::rng_for(spec.seed, &["text-bias"]);
            seeded::gaussian_vec(&mut rng, d, 1.0 / (d as f64).sqrt())
        } else {
            vec![0.0; d]
        };
        Ok(SyntheticEncoder {
            spec,
            text_w,
            text_b,
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    /// Seeded projection for one component id.
    pub fn component_projection(&self, component_id: usize) -> Vec<f64> {
        let d = self.spec.feature_dim;
        let mut rng = seeded::rng_for_indexed(self.spec.seed, &["component-proj"], &[component_id as u64]);
        seeded::gaussian_vec(&mut rng, d, 1.0 / (d as f64).sqrt())
    }

    /// Seeded projection from attribute space (dimension `attr_dim`) to
    /// feature space, as `d` rows of length `attr_dim`.
    pub fn attribute_projection(&self, attr_dim: usize) -> Vec<Vec<f64>> {
        let d = self.spec.feature_dim;
        let mut rng = seeded::rng_for_indexed(self.spec.seed, &["attr-proj"], &[attr_dim as u64]);
        seeded::gaussian_matrix(&mut rng, d, attr_dim, 1.0 / (attr_dim as f64).sqrt())
    }

    fn cell_noise(&self, salt: u64, i: usize, j: usize) -> Vec<f64> {
        let d = self.spec.feature_dim;
        if self.spec.noise_sigma == 0.0 {
            return vec![0.0; d];
        }
        let mut rng =
            seeded::rng_for_indexed(self.spec.seed, &["cell-noise"], &[salt, i as u64, j as u64]);
        seeded::gaussian_vec(&mut rng, d, self.spec.noise_sigma)
    }

    /// Encode a scene at native resolution: one token per cell, row-major,
    /// class token = normalized mean of the tokens.
    pub fn encode_scene(&self, scene: &SyntheticScene) -> Result<TokenGrid> {
        scene.validate()?;
        self.encode_cells(scene)
    }

    // Tile sub-scenes may omit component ids, so the contiguity check runs
    // on the parent scene only.
    fn encode_cells(&self, scene: &SyntheticScene) -> Result<TokenGrid> {
        if scene.cells.is_empty() {
            return Err(Error::Empty("scene"));
        }
        let d = self.spec.feature_dim;
        let attr_dim = scene.cells[0].attribute_vector.len();
        let proj = self.attribute_projection(attr_dim);
        let n_comp = scene.num_components();
        let comp_proj: Vec<Vec<f64>> = (0..=n_comp).map(|c| self.component_projection(c)).collect();

        let mut tokens = Vec::with_capacity(scene.cells.len());
        let mut mean = vec![0.0; d];
        for i in 0..scene.h {
            for j in 0..scene.w {
                let cell = scene.cell(i, j);
                let mut raw = comp_proj[cell.component_id].clone();
                for (r, row) in raw.iter_mut().zip(&proj) {
                    let mut acc = 0.0;
                    for (w, a) in row.iter().zip(&cell.attribute_vector) {
                        acc += w * a;
                    }
                    *r += acc;
                }
                if cell.anomaly_flag {
                    let pert = cell.anomaly_perturbation.as_ref().expect("validated");
                    if pert.len() != d {
                        return Err(Error::DimMismatch {
                            context: "anomaly perturbation",
                            expected: d,
                            got: pert.len(),
                        });
                    }
                    for (r, p) in raw.iter_mut().zip(pert) {
                        *r += p;
                    }
                }
                for (r, n) in raw.iter_mut().zip(self.cell_noise(scene.noise_salt, i, j)) {
                    *r += n;
                }
                let token = l2_normalize(&FeatVec::new(raw))?;
                for (m, t) in mean.iter_mut().zip(token.as_slice()) {
                    *m += t;
                }
                tokens.push(token);
            }
        }
        let count = tokens.len() as f64;
        for m in &mut mean {
            *m /= count;
        }
        let class_token = l2_normalize(&FeatVec::new(mean))?;
        TokenGrid::new(scene.h, scene.w, tokens, class_token, ResolutionTag::Native)
    }

    /// Encode at `factor` times the native resolution: the scene is
    /// upsampled by cell replication, split into `factor x factor` tiles of
    /// native size, each tile encoded independently, and the patch grids
    /// stitched back together. `factor == 1` is exactly [`Self::encode_scene`].
    pub fn encode_scene_highres(&self, scene: &SyntheticScene, factor: usize) -> Result<TokenGrid> {
        if factor == 0 {
            return Err(Error::Invalid {
                context: "highres factor",
                message: "factor must be >= 1".into(),
            });
        }
        if factor == 1 {
            return self.encode_scene(scene);
        }
        scene.validate()?;
        let (h, w) = (scene.h, scene.w);
        let (hh, hw) = (h * factor, w * factor);
        let mut tokens: Vec<Option<FeatVec>> = vec![None; hh * hw];
        let d = self.spec.feature_dim;
        let mut class_mean = vec![0.0; d];

        for tile_a in 0..factor {
            for tile_b in 0..factor {
                let mut cells = Vec::with_capacity(h * w);
                for local_i in 0..h {
                    for local_j in 0..w {
                        let global_i = tile_a * h + local_i;
                        let global_j = tile_b * w + local_j;
                        // Cell replication: upsampled cell (gi, gj) mirrors
                        // native cell (gi / factor, gj / factor).
                        cells.push(scene.cell(global_i / factor, global_j / factor).clone());
                    }
                }
                let tile_scene = SyntheticScene {
                    category: scene.category.clone(),
                    h,
                    w,
                    cells,
                    noise_salt: tile_salt(scene.noise_salt, tile_a, tile_b),
                };
                let grid = self.encode_cells(&tile_scene)?;
                for local_i in 0..h {
                    for local_j in 0..w {
                        let global_i = tile_a * h + local_i;
                        let global_j = tile_b * w + local_j;
                        tokens[global_i * hw + global_j] = Some(grid.token(local_i, local_j).clone());
                    }
                }
                for (m, c) in class_mean.iter_mut().zip(grid.class_token().as_slice()) {
                    *m += c;
                }
            }
        }

        let n_tiles = (factor * factor) as f64;
        for m in &mut class_mean {
            *m /= n_tiles;
        }
        let class_token = l2_normalize(&FeatVec::new(class_mean))?;
        let tokens: Vec<FeatVec> = tokens.into_iter().map(|t| t.expect("tile coverage")).collect();
        TokenGrid::new(hh, hw, tokens, class_token, ResolutionTag::Highres)
    }

    fn pre_normalized(&self, seq: &[Vec<f64>]) -> Result<Vec<f64>> {
        if seq.is_empty() {
            return Err(Error::Empty("token embedding sequence"));
        }
        let e = self.spec.token_embedding_dim;
        for (i, emb) in seq.iter().enumerate() {
            if emb.len() != e {
                return Err(Error::DimMismatch {
                    context: "token embedding",
                    expected: e,
                    got: seq[i].len(),
                });
            }
        }
        let count = seq.len() as f64;
        let mut mean = vec![0.0; e];
        for emb in seq {
            for (m, v) in mean.iter_mut().zip(emb) {
                *m += v / count;
            }
        }
        let mut out = self.text_b.clone();
        for (o, row) in out.iter_mut().zip(&self.text_w) {
            let mut acc = 0.0;
            for (w, m) in row.iter().zip(&mean) {
                acc += w * m;
            }
            *o += acc;
        }
        Ok(out)
    }
}

fn tile_salt(salt: u64, a: usize, b: usize) -> u64 {
    salt.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((a as u64) << 32)
        .wrapping_add(b as u64 + 1)
}

impl TextEncoder for SyntheticEncoder {
    fn token_dim(&self) -> usize {
        self.spec.token_embedding_dim
    }

    fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    fn word_embedding(&self, word: &str) -> Vec<f64> {
        let mut hasher = sha2::Sha256::new();
        use sha2::Digest;
        hasher.update(b"fgad.word.v1");
        hasher.update(self.spec.seed.to_le_bytes());
        hasher.update(word.as_bytes());
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::from_seed(key);
        let raw = seeded::gaussian_vec(&mut rng, self.spec.token_embedding_dim, 1.0);
        l2_normalize(&FeatVec::new(raw)).expect("gaussian draw is nonzero").into_vec()
    }

    fn encode(&self, seq: &[Vec<f64>]) -> Result<FeatVec> {
        let u = self.pre_normalized(seq)?;
        l2_normalize(&FeatVec::new(u))
    }

    fn jvp(&self, seq: &[Vec<f64>], tangents: &[Vec<f64>]) -> Result<Vec<f64>> {
        if tangents.len() != seq.len() {
            return Err(Error::DimMismatch {
                context: "jvp tangents",
                expected: seq.len(),
                got: tangents.len(),
            });
        }
        let u = self.pre_normalized(seq)?;
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroNorm("text encoder jvp"));
        }
        let out: Vec<f64> = u.iter().map(|v| v / norm).collect();
        let count = seq.len() as f64;
        let e = self.spec.token_embedding_dim;
        let mut dmean = vec![0.0; e];
        for t in tangents {
            for (m, v) in dmean.iter_mut().zip(t) {
                *m += v / count;
            }
        }
        let mut du = vec![0.0; self.spec.feature_dim];
        for (o, row) in du.iter_mut().zip(&self.text_w) {
            for (w, m) in row.iter().zip(&dmean) {
                *o += w * m;
            }
        }
        let radial: f64 = du.iter().zip(&out).map(|(a, b)| a * b).sum();
        Ok(du
            .iter()
            .zip(&out)
            .map(|(d, o)| (d - radial * o) / norm)
            .collect())
    }

    fn vjp(&self, seq: &[Vec<f64>], cotangent: &[f64]) -> Result<Vec<Vec<f64>>> {
        let d = self.spec.feature_dim;
        if cotangent.len() != d {
            return Err(Error::DimMismatch {
                context: "vjp cotangent",
                expected: d,
                got: cotangent.len(),
            });
        }
        let u = self.pre_normalized(seq)?;
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroNorm("text encoder vjp"));
        }
        let out: Vec<f64> = u.iter().map(|v| v / norm).collect();
        let radial: f64 = cotangent.iter().zip(&out).map(|(c, o)| c * o).sum();
        let du: Vec<f64> = cotangent
            .iter()
            .zip(&out)
            .map(|(c, o)| (c - radial * o) / norm)
            .collect();
        let e = self.spec.token_embedding_dim;
        let count = seq.len() as f64;
        let mut dpos = vec![0.0; e];
        for (row, dui) in self.text_w.iter().zip(&du) {
            for (p, w) in dpos.iter_mut().zip(row) {
                *p += w * dui;
            }
        }
        for p in &mut dpos {
            *p /= count;
        }
        Ok(vec![dpos; seq.len()])
    }
}

// ---------------------------------------------------------------------------
// FGADFEAT binary container
// ---------------------------------------------------------------------------

pub const FEATURE_MAGIC: &[u8; 8] = b"FGADFEAT";
pub const FEATURE_VERSION: u32 = 1;

/// Write a token grid as a version-1 `FGADFEAT` file: 8-byte magic, then
/// little-endian `u32` version, T, d, h, w, the `f32` class token, and
/// `T x d` row-major `f32` tokens.
pub fn save_feature_file(grid: &TokenGrid, path: &Path) -> Result<()> {
    let d = grid.dim();
    let t = grid.len();
    let mut bytes = Vec::with_capacity(28 + 4 * d + 4 * t * d);
    bytes.extend_from_slice(FEATURE_MAGIC);
    bytes.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(t as u32).to_le_bytes());
    bytes.extend_from_slice(&(d as u32).to_le_bytes());
    bytes.extend_from_slice(&(grid.h() as u32).to_le_bytes());
    bytes.extend_from_slice(&(grid.w() as u32).to_le_bytes());
    for v in grid.class_token().as_slice() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    for token in grid.tokens() {
        for v in token.as_slice() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

fn read_u32(bytes: &[u8], offset: usize, field: &'static str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Format {
            field,
            message: "file truncated in header".into(),
        });
    }
    Ok(u32::from_le_bytes(bytes[offset..end].try_into().unwrap()))
}

/// Read a `FGADFEAT` file back into a token grid (tagged native).
///
/// Values round-trip bit-exactly at `f32` precision; the payload is checked
/// for finiteness but not re-normalized.
pub fn load_feature_file(path: &Path) -> Result<TokenGrid> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 || &bytes[0..8] != FEATURE_MAGIC {
        return Err(Error::Format {
            field: "magic",
            message: "bad magic, expected FGADFEAT".into(),
        });
    }
    let version = read_u32(&bytes, 8, "version")?;
    if version != FEATURE_VERSION {
        return Err(Error::Format {
            field: "version",
            message: format!("unsupported version {version}"),
        });
    }
    let t = read_u32(&bytes, 12, "T")? as usize;
    let d = read_u32(&bytes, 16, "d")? as usize;
    let h = read_u32(&bytes, 20, "h")? as usize;
    let w = read_u32(&bytes, 24, "w")? as usize;
    if h.checked_mul(w) != Some(t) {
        return Err(Error::Format {
            field: "T",
            message: format!("T != h*w ({t} != {h}*{w})"),
        });
    }
    let expected_len = 28usize
        .checked_add(4 * d)
        .and_then(|n| n.checked_add(4usize.checked_mul(t.checked_mul(d)?)?))
        .ok_or(Error::Format {
            field: "length",
            message: "header sizes overflow".into(),
        })?;
    if bytes.len() != expected_len {
        return Err(Error::Format {
            field: "length",
            message: format!("expected {expected_len} bytes, got {}", bytes.len()),
        });
    }
    let mut floats = bytes[28..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    let class: Vec<f64> = floats.by_ref().take(d).collect();
    let class_token = FeatVec::try_new(class).map_err(|_| Error::Format {
        field: "payload",
        message: "non-finite class token entry".into(),
    })?;
    let mut tokens = Vec::with_capacity(t);
    for _ in 0..t {
        let vals: Vec<f64> = floats.by_ref().take(d).collect();
        tokens.push(FeatVec::try_new(vals).map_err(|_| Error::Format {
            field: "payload",
            message: "non-finite token entry".into(),
        })?);
    }
    TokenGrid::new(h, w, tokens, class_token, ResolutionTag::Native)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::cosine;

    fn small_spec(sigma: f64) -> EncoderSpec {
        EncoderSpec {
            seed: 42,
            feature_dim: 16,
            token_embedding_dim: 12,
            noise_sigma: sigma,
            text_bias: false,
        }
    }

    fn flat_scene(h: usize, w: usize, component_id: usize) -> SyntheticScene {
        SyntheticScene {
            category: "test".into(),
            h,
            w,
            cells: (0..h * w)
                .map(|_| SceneCell {
                    component_id,
                    attribute_vector: vec![0.25; 16],
                    anomaly_flag: false,
                    anomaly_perturbation: None,
                })
                .collect(),
            noise_salt: 0,
        }
    }

    #[test]
    fn encoding_is_deterministic() {
        let enc = SyntheticEncoder::new(small_spec(0.3)).unwrap();
        let scene = flat_scene(3, 4, 0);
        let a = enc.encode_scene(&scene).unwrap();
        let b = enc.encode_scene(&scene).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_noiseless_scene_gives_identical_tokens() {
        let enc = SyntheticEncoder::new(small_spec(0.0)).unwrap();
        let grid = enc.encode_scene(&flat_scene(3, 3, 0)).unwrap();
        let first = grid.token(0, 0).clone();
        for t in grid.tokens() {
            assert_eq!(*t, first);
        }
    }

    #[test]
    fn flipping_one_anomaly_flag_changes_exactly_that_token() {
        let enc = SyntheticEncoder::new(small_spec(0.2)).unwrap();
        let scene = flat_scene(3, 3, 0);
        let mut perturbed = scene.clone();
        {
            let cell = perturbed.cell_mut(1, 2);
            cell.anomaly_flag = true;
            cell.anomaly_perturbation = Some(vec![0.5; 16]);
        }
        let a = enc.encode_scene(&scene).unwrap();
        let b = enc.encode_scene(&perturbed).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if (i, j) == (1, 2) {
                    assert_ne!(a.token(i, j), b.token(i, j));
                } else {
                    assert_eq!(a.token(i, j), b.token(i, j));
                }
            }
        }
    }

    #[test]
    fn scene_salt_varies_noise() {
        let enc = SyntheticEncoder::new(small_spec(0.2)).unwrap();
        let scene = flat_scene(2, 2, 0);
        let mut other = scene.clone();
        other.noise_salt = 9;
        assert_ne!(enc.encode_scene(&scene).unwrap(), enc.encode_scene(&other).unwrap());
    }

    #[test]
    fn tokens_are_unit_norm() {
        let enc = SyntheticEncoder::new(small_spec(0.4)).unwrap();
        let grid = enc.encode_scene(&flat_scene(4, 4, 0)).unwrap();
        for t in grid.tokens() {
            assert!((t.norm() - 1.0).abs() < 1e-6);
        }
        assert!((grid.class_token().norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn text_encode_is_permutation_invariant() {
        let enc = SyntheticEncoder::new(small_spec(0.0)).unwrap();
        let a = enc.word_embedding("red");
        let b = enc.word_embedding("ring");
        let c = enc.word_embedding("metal");
        let fwd = enc.encode(&[a.clone(), b.clone(), c.clone()]).unwrap();
        let rev = enc.encode(&[c, a, b]).unwrap();
        for (x, y) in fwd.as_slice().iter().zip(rev.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn text_encode_scale_invariant_without_bias() {
        let enc = SyntheticEncoder::new(small_spec(0.0)).unwrap();
        let seq: Vec<Vec<f64>> = vec![enc.word_embedding("a"), enc.word_embedding("b")];
        let scaled: Vec<Vec<f64>> = seq
            .iter()
            .map(|v| v.iter().map(|x| x * 3.7).collect())
            .collect();
        let lhs = enc.encode(&seq).unwrap();
        let rhs = enc.encode(&scaled).unwrap();
        for (x, y) in lhs.as_slice().iter().zip(rhs.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn jvp_matches_central_finite_differences() {
        let enc = SyntheticEncoder::new(EncoderSpec {
            text_bias: true,
            ..small_spec(0.0)
        })
        .unwrap();
        let mut rng = seeded::rng_for(5, &["jvp-test"]);
        for _ in 0..20 {
            let seq: Vec<Vec<f64>> = (0..3)
                .map(|_| seeded::gaussian_vec(&mut rng, 12, 1.0))
                .collect();
            let tangents: Vec<Vec<f64>> = (0..3)
                .map(|_| seeded::gaussian_vec(&mut rng, 12, 1.0))
                .collect();
            let jvp = enc.jvp(&seq, &tangents).unwrap();
            let h = 1e-6;
            let plus: Vec<Vec<f64>> = seq
                .iter()
                .zip(&tangents)
                .map(|(s, t)| s.iter().zip(t).map(|(a, b)| a + h * b).collect())
                .collect();
            let minus: Vec<Vec<f64>> = seq
                .iter()
                .zip(&tangents)
                .map(|(s, t)| s.iter().zip(t).map(|(a, b)| a - h * b).collect())
                .collect();
            let fp = enc.encode(&plus).unwrap();
            let fm = enc.encode(&minus).unwrap();
            for ((j, p), m) in jvp.iter().zip(fp.as_slice()).zip(fm.as_slice()) {
                let fd = (p - m) / (2.0 * h);
                let denom = j.abs().max(fd.abs()).max(1e-6);
                assert!(
                    ((j - fd) / denom).abs() < 1e-6,
                    "jvp {j} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn highres_factor_four_gives_sixty_grid() {
        let enc = SyntheticEncoder::new(small_spec(0.0)).unwrap();
        let mut scene = flat_scene(15, 15, 0);
        for i in 6..9 {
            for j in 6..9 {
                scene.cell_mut(i, j).component_id = 1;
            }
        }
        let grid = enc.encode_scene_highres(&scene, 4).unwrap();
        assert_eq!((grid.h(), grid.w()), (60, 60));
        assert_eq!(grid.resolution(), ResolutionTag::Highres);
    }

    #[test]
    fn highres_factor_one_is_native_encoding() {
        let enc = SyntheticEncoder::new(small_spec(0.15)).unwrap();
        let scene = flat_scene(4, 5, 0);
        assert_eq!(
            enc.encode_scene_highres(&scene, 1).unwrap().tokens(),
            enc.encode_scene(&scene).unwrap().tokens()
        );
    }

    #[test]
    fn highres_tokens_derive_from_their_tile_cell() {
        // Zero noise: a highres token must equal the native encoding of the
        // cell it replicates, so tile boundaries introduce no reordering.
        let enc = SyntheticEncoder::new(small_spec(0.0)).unwrap();
        let mut scene = flat_scene(4, 4, 0);
        scene.cell_mut(2, 3).component_id = 1;
        scene.cell_mut(0, 1).component_id = 2;
        let native = enc.encode_scene(&scene).unwrap();
        let factor = 2;
        let hi = enc.encode_scene_highres(&scene, factor).unwrap();
        for gi in 0..hi.h() {
            for gj in 0..hi.w() {
                let src = native.token(gi / factor, gj / factor);
                let got = hi.token(gi, gj);
                let cos = cosine(src, got).unwrap();
                assert!(cos > 1.0 - 1e-9, "token ({gi},{gj}) cos {cos}");
            }
        }
    }

    #[test]
    fn feature_file_round_trips_bit_exactly() {
        let enc = SyntheticEncoder::new(small_spec(0.3)).unwrap();
        let grid = enc.encode_scene(&flat_scene(3, 5, 0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.feat");
        save_feature_file(&grid, &path).unwrap();
        let loaded = load_feature_file(&path).unwrap();
        assert_eq!((loaded.h(), loaded.w()), (3, 5));
        for (a, b) in grid.tokens().iter().zip(loaded.tokens()) {
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                assert_eq!((*x as f32) as f64, *y);
            }
        }
        // Saving the loaded grid reproduces the file byte for byte.
        let path2 = dir.path().join("grid2.feat");
        save_feature_file(&loaded, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn bad_magic_and_inconsistent_header_are_format_errors() {
        let enc = SyntheticEncoder::new(small_spec(0.0)).unwrap();
        let grid = enc.encode_scene(&flat_scene(2, 2, 0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.feat");
        save_feature_file(&grid, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[7] = b'X';
        fs::write(&path, &bad_magic).unwrap();
        match load_feature_file(&path) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "magic"),
            other => panic!("expected magic error, got {other:?}"),
        }

        // T = 10 with h = 3, w = 3.
        bytes[12..16].copy_from_slice(&10u32.to_le_bytes());
        bytes[20..24].copy_from_slice(&3u32.to_le_bytes());
        bytes[24..28].copy_from_slice(&3u32.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        match load_feature_file(&path) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "T"),
            other => panic!("expected T error, got {other:?}"),
        }
    }

    #[test]
    fn header_fuzz_never_panics() {
        let enc = SyntheticEncoder::new(small_spec(0.1)).unwrap();
        let grid = enc.encode_scene(&flat_scene(2, 3, 0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fuzz.feat");
        save_feature_file(&grid, &path).unwrap();
        let original = fs::read(&path).unwrap();
        let mut rng = seeded::rng_for(99, &["fuzz"]);
        for _ in 0..300 {
            let mut bytes = original.clone();
            let idx = rand::Rng::random_range(&mut rng, 0..28usize);
            let val: u8 = rand::Rng::random(&mut rng);
            bytes[idx] = val;
            fs::write(&path, &bytes).unwrap();
            match load_feature_file(&path) {
                Ok(grid2) => {
                    // A benign flip must still decode to a consistent grid.
                    assert_eq!(grid2.len(), grid2.h() * grid2.w());
                }
                Err(Error::Format { .. }) => {}
                Err(other) => panic!("unexpected error class: {other:?}"),
            }
        }
    }

    #[test]
    fn scene_invariants_are_enforced() {
        let mut scene = flat_scene(2, 2, 0);
        scene.cell_mut(0, 0).anomaly_flag = true;
        assert!(scene.validate().is_err());
        let mut gap = flat_scene(2, 2, 0);
        gap.cell_mut(0, 0).component_id = 2; // skips id 1
        assert!(gap.validate().is_err());
    }
}
