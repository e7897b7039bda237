//! Inference scoring: the vision branch and the prompt branch.
//!
//! The vision branch keeps every patch feature of the normal shots in a
//! memory bank and scores a query token by its smallest cosine distance to
//! the bank (exact search, no approximation). The prompt branch assigns
//! each token to the prompt family whose intrinsic feature it is most
//! similar to, then turns the assigned family's normal/abnormal prompt
//! features into an anomaly probability; an image-level softmax re-weights
//! the map, and the two branches fuse with an elementwise harmonic mean.
//! Higher always means more anomalous.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::core::{cosine, harmonic_combine, token_softmax_weights, FeatVec, LogitScale, ScoreMap};
use crate::encoder::TokenGrid;
use crate::error::{Error, Result};
use crate::prompts::{LevelBank, PromptBanks};

/// Memory bank of normal patch features.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalMemory {
    bank: Vec<FeatVec>,
}

impl NormalMemory {
    pub fn len(&self) -> usize {
        self.bank.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bank.is_empty()
    }

    pub fn entries(&self) -> &[FeatVec] {
        &self.bank
    }
}

/// Concatenate every token of every shot, in shot order then row-major.
pub fn build_memory(shots: &[TokenGrid]) -> Result<NormalMemory> {
    if shots.is_empty() {
        return Err(Error::Empty("memory shots"));
    }
    let mut bank = Vec::new();
    for shot in shots {
        bank.extend(shot.tokens().iter().cloned());
    }
    Ok(NormalMemory { bank })
}

/// Vision-guided score map: per token, `min over the bank of
/// (1 - cos(token, entry)) / 2`.
pub fn score_vad(query: &TokenGrid, memory: &NormalMemory) -> Result<ScoreMap> {
    if memory.is_empty() {
        return Err(Error::Empty("normal memory"));
    }
    let mut scores = Vec::with_capacity(query.len());
    for token in query.tokens() {
        let mut best = f64::INFINITY;
        for entry in memory.entries() {
            let d = 0.5 * (1.0 - cosine(token, entry)?);
            if d < best {
                best = d;
            }
        }
        scores.push(best);
    }
    Ok(ScoreMap::new(query.h(), query.w(), scores))
}

/// Per-token choice of prompt family (index into the intrinsic features).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentMap {
    pub h: usize,
    pub w: usize,
    pub families: Vec<usize>,
}

impl AssignmentMap {
    pub fn family(&self, i: usize, j: usize) -> usize {
        self.families[i * self.w + j]
    }
}

/// Assign each token to the family with the highest-cosine intrinsic
/// feature; ties break toward the lowest family index.
pub fn assign_prompts(query: &TokenGrid, intrinsics: &[FeatVec]) -> Result<AssignmentMap> {
    if intrinsics.is_empty() {
        return Err(Error::Empty("intrinsic features"));
    }
    let mut families = Vec::with_capacity(query.len());
    for token in query.tokens() {
        let mut best = 0;
        let mut best_cos = f64::NEG_INFINITY;
        for (k, intrinsic) in intrinsics.iter().enumerate() {
            let c = cosine(token, intrinsic)?;
            if c > best_cos {
                best_cos = c;
                best = k;
            }
        }
        families.push(best);
    }
    Ok(AssignmentMap {
        h: query.h(),
        w: query.w(),
        families,
    })
}

/// Anomaly probability of one token against a normal feature and a mean
/// abnormal feature: `exp(s·cos_a) / (exp(s·cos_n) + exp(s·cos_a))`,
/// computed in its numerically stable logistic form.
pub fn anomaly_probability(
    token: &FeatVec,
    normal: &FeatVec,
    abnormal: &FeatVec,
    scale: LogitScale,
) -> Result<f64> {
    let cos_n = cosine(token, normal)?;
    let cos_a = cosine(token, abnormal)?;
    let margin = scale.value() * (cos_n - cos_a);
    Ok(1.0 / (1.0 + margin.exp()))
}

fn level_prompts(bank: &LevelBank) -> (&FeatVec, &FeatVec) {
    (&bank.mean_normal, &bank.mean_abnormal)
}

/// Prompt-guided score map: each token scored against its assigned family's
/// normal and mean abnormal prompt features.
pub fn score_pad(
    query: &TokenGrid,
    assignment: &AssignmentMap,
    banks: &PromptBanks,
    scale: LogitScale,
) -> Result<ScoreMap> {
    if assignment.h != query.h() || assignment.w != query.w() {
        return Err(Error::DimMismatch {
            context: "assignment map",
            expected: query.len(),
            got: assignment.families.len(),
        });
    }
    let mut scores = Vec::with_capacity(query.len());
    for (token, &family) in query.tokens().iter().zip(&assignment.families) {
        let bank = banks.levels.get(family).ok_or(Error::Invalid {
            context: "assignment map",
            message: format!("family index {family} out of range"),
        })?;
        let (normal, abnormal) = level_prompts(bank);
        scores.push(anomaly_probability(token, normal, abnormal, scale)?);
    }
    Ok(ScoreMap::new(query.h(), query.w(), scores))
}

/// Re-weight the prompt-guided map by the image-level anomaly distribution:
/// softmax over the per-token image-level scores, rescaled by T so uniform
/// attention is the identity, clamped back into `[0, 1]`.
pub fn reweight_image_level(
    m_hat: &ScoreMap,
    query: &TokenGrid,
    image_bank: &LevelBank,
    scale: LogitScale,
) -> Result<ScoreMap> {
    if m_hat.h() != query.h() || m_hat.w() != query.w() {
        return Err(Error::DimMismatch {
            context: "reweight dims",
            expected: query.len(),
            got: m_hat.len(),
        });
    }
    let (normal, abnormal) = level_prompts(image_bank);
    let mut image_scores = Vec::with_capacity(query.len());
    for token in query.tokens() {
        image_scores.push(anomaly_probability(token, normal, abnormal, scale)?);
    }
    let weights = token_softmax_weights(&image_scores, scale)?;
    let t = query.len() as f64;
    let scores = m_hat
        .as_slice()
        .iter()
        .zip(&weights)
        .map(|(m, w)| (t * w * m).clamp(0.0, 1.0))
        .collect();
    Ok(ScoreMap::new(query.h(), query.w(), scores))
}

/// Elementwise harmonic fusion of the two branch maps.
pub fn fuse_pixel(m_v: &ScoreMap, m_p: &ScoreMap) -> Result<ScoreMap> {
    if m_v.h() != m_p.h() || m_v.w() != m_p.w() {
        return Err(Error::DimMismatch {
            context: "fuse dims",
            expected: m_v.len(),
            got: m_p.len(),
        });
    }
    let scores = m_v
        .as_slice()
        .iter()
        .zip(m_p.as_slice())
        .map(|(a, b)| harmonic_combine(*a, *b))
        .collect();
    Ok(ScoreMap::new(m_v.h(), m_v.w(), scores))
}

/// Image-level anomaly score of the class token against the image-level
/// prompts.
pub fn class_token_score(
    query: &TokenGrid,
    image_bank: &LevelBank,
    scale: LogitScale,
) -> Result<f64> {
    let (normal, abnormal) = level_prompts(image_bank);
    anomaly_probability(query.class_token(), normal, abnormal, scale)
}

/// Final image score: harmonic fusion of the pixel-map maximum with the
/// class-token score, dominated by the smaller of the two.
pub fn image_score(
    query: &TokenGrid,
    image_bank: &LevelBank,
    m_pix: &ScoreMap,
    scale: LogitScale,
) -> Result<f64> {
    let s_i = class_token_score(query, image_bank, scale)?;
    Ok(harmonic_combine(m_pix.max(), s_i))
}

// ---------------------------------------------------------------------------
// FGADSMAP container and PGM export
// ---------------------------------------------------------------------------

pub const SCORE_MAP_MAGIC: &[u8; 8] = b"FGADSMAP";
pub const SCORE_MAP_VERSION: u32 = 1;

/// Write a score map as raw `f32`: magic, LE `u32` version, h, w, then
/// row-major scores.
pub fn save_score_map(map: &ScoreMap, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(20 + 4 * map.len());
    bytes.extend_from_slice(SCORE_MAP_MAGIC);
    bytes.extend_from_slice(&SCORE_MAP_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(map.h() as u32).to_le_bytes());
    bytes.extend_from_slice(&(map.w() as u32).to_le_bytes());
    for v in map.as_slice() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn load_score_map(path: &Path) -> Result<ScoreMap> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 || &bytes[0..8] != SCORE_MAP_MAGIC {
        return Err(Error::Format {
            field: "magic",
            message: "bad magic, expected FGADSMAP".into(),
        });
    }
    let word = |offset: usize, field: &'static str| -> Result<u32> {
        bytes
            .get(offset..offset + 4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .ok_or(Error::Format {
                field,
                message: "file truncated in header".into(),
            })
    };
    let version = word(8, "version")?;
    if version != SCORE_MAP_VERSION {
        return Err(Error::Format {
            field: "version",
            message: format!("unsupported version {version}"),
        });
    }
    let h = word(12, "h")? as usize;
    let w = word(16, "w")? as usize;
    let expected = 20 + 4 * h * w;
    if bytes.len() != expected {
        return Err(Error::Format {
            field: "length",
            message: format!("expected {expected} bytes, got {}", bytes.len()),
        });
    }
    let scores: Vec<f64> = bytes[20..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if scores.iter().any(|s| !s.is_finite() || !(0.0..=1.0).contains(s)) {
        return Err(Error::Format {
            field: "payload",
            message: "scores must be finite and within [0, 1]".into(),
        });
    }
    Ok(ScoreMap::new(h, w, scores))
}

#[derive(Debug, Serialize, Deserialize)]
struct PgmSidecar {
    min: f64,
    max: f64,
}

/// Export a min-max normalized 8-bit PGM plus a JSON sidecar holding the
/// normalization bounds.
pub fn write_score_pgm(map: &ScoreMap, path: &Path) -> Result<()> {
    let min = map.as_slice().iter().cloned().fold(f64::INFINITY, f64::min);
    let max = map.as_slice().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = if max > min { max - min } else { 1.0 };
    let mut out = Vec::new();
    out.extend_from_slice(format!("P5\n{} {}\n255\n", map.w(), map.h()).as_bytes());
    for v in map.as_slice() {
        out.push(((v - min) / range * 255.0).round() as u8);
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    let sidecar = PgmSidecar { min, max };
    fs::write(
        path.with_extension("pgm.json"),
        serde_json::to_string(&sidecar)?,
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::l2_normalize;
    use crate::encoder::ResolutionTag;
    use crate::seeded;

    fn unit(values: &[f64]) -> FeatVec {
        l2_normalize(&FeatVec::new(values.to_vec())).unwrap()
    }

    fn grid_from(tokens: Vec<FeatVec>, h: usize, w: usize) -> TokenGrid {
        let class = l2_normalize(&tokens[0]).unwrap();
        TokenGrid::new(h, w, tokens, class, ResolutionTag::Native).unwrap()
    }

    fn random_units(seed: u64, n: usize, d: usize) -> Vec<FeatVec> {
        let mut rng = seeded::rng_for(seed, &["score"]);
        (0..n)
            .map(|_| unit(&seeded::gaussian_vec(&mut rng, d, 1.0)))
            .collect()
    }

    #[test]
    fn memory_concatenates_all_shots() {
        let shots: Vec<TokenGrid> = (0..4)
            .map(|i| grid_from(random_units(i, 15, 8), 3, 5))
            .collect();
        let memory = build_memory(&shots).unwrap();
        assert_eq!(memory.len(), 60);
        assert_eq!(memory.entries()[0], shots[0].tokens()[0]);
        assert_eq!(memory.entries()[15], shots[1].tokens()[0]);
        let single = build_memory(&shots[..1]).unwrap();
        assert_eq!(single.entries(), shots[0].tokens());
    }

    #[test]
    fn vad_self_match_scores_zero_and_antipode_scores_one() {
        let tokens = random_units(3, 6, 8);
        let grid = grid_from(tokens.clone(), 2, 3);
        let memory = build_memory(&[grid.clone()]).unwrap();
        let map = score_vad(&grid, &memory).unwrap();
        for v in map.as_slice() {
            assert!(*v < 1e-12);
        }
        let anti: Vec<FeatVec> = tokens
            .iter()
            .map(|t| FeatVec::new(t.as_slice().iter().map(|v| -v).collect()))
            .collect();
        let anti_grid = grid_from(anti, 2, 3);
        let single = build_memory(&[grid]).unwrap();
        // One memory entry antipodal to every query token.
        let one_entry = NormalMemory {
            bank: vec![single.entries()[0].clone()],
        };
        let map = score_vad(&anti_grid, &one_entry).unwrap();
        assert!(map.get(0, 0) > 1.0 - 1e-12);
    }

    #[test]
    fn vad_matches_brute_force_oracle() {
        let grid = grid_from(random_units(7, 12, 10), 3, 4);
        let memory = build_memory(&[grid_from(random_units(8, 20, 10), 4, 5)]).unwrap();
        let map = score_vad(&grid, &memory).unwrap();
        for (ti, token) in grid.tokens().iter().enumerate() {
            let mut best = f64::INFINITY;
            for entry in memory.entries() {
                let dot: f64 = token
                    .as_slice()
                    .iter()
                    .zip(entry.as_slice())
                    .map(|(a, b)| a * b)
                    .sum();
                let c = dot / (token.norm() * entry.norm());
                best = best.min(0.5 * (1.0 - c));
            }
            assert!((map.as_slice()[ti] - best).abs() < 1e-12);
        }
    }

    #[test]
    fn assignment_trivial_cases_and_oracle() {
        let intrinsics = random_units(11, 3, 8);
        let mut tokens = random_units(12, 5, 8);
        tokens[2] = intrinsics[2].clone();
        let grid = grid_from(tokens.clone(), 1, 5);
        let map = assign_prompts(&grid, &intrinsics).unwrap();
        assert_eq!(map.families[2], 2);
        for (ti, token) in tokens.iter().enumerate() {
            let mut best = (f64::NEG_INFINITY, 0);
            for (k, f) in intrinsics.iter().enumerate() {
                let dot: f64 = token
                    .as_slice()
                    .iter()
                    .zip(f.as_slice())
                    .map(|(a, b)| a * b)
                    .sum();
                let c = dot / (token.norm() * f.norm());
                if c > best.0 {
                    best = (c, k);
                }
            }
            assert_eq!(map.families[ti], best.1);
        }
        let single = assign_prompts(&grid, &intrinsics[..1]).unwrap();
        assert!(single.families.iter().all(|&f| f == 0));
    }

    #[test]
    fn anomaly_probability_symmetric_and_saturated() {
        let z = unit(&[1.0, 0.0, 0.0]);
        let p = unit(&[1.0, 1.0, 0.0]);
        let q = unit(&[1.0, -1.0, 0.0]);
        // Equal cosines -> 0.5 regardless of scale.
        let s = anomaly_probability(&z, &p, &q, LogitScale::new(37.0).unwrap()).unwrap();
        assert!((s - 0.5).abs() < 1e-12);
        // cos_a >> cos_n saturates toward 1.
        let s = anomaly_probability(&z, &q, &z, LogitScale::new(120.0).unwrap()).unwrap();
        assert!(s > 1.0 - 1e-9);
    }

    #[test]
    fn anomaly_probability_hand_computed_logistic() {
        // Token collinear with the abnormal mean, orthogonal to the normal
        // prompt, scale 1: exp(1) / (exp(0) + exp(1)) = 1 / (1 + e^-1).
        let z = unit(&[0.0, 1.0, 0.0]);
        let normal = unit(&[1.0, 0.0, 0.0]);
        let abnormal = z.clone();
        let s = anomaly_probability(&z, &normal, &abnormal, LogitScale::new(1.0).unwrap()).unwrap();
        assert!((s - 0.7310585786).abs() < 1e-9);
    }

    #[test]
    fn reweight_uniform_scores_is_identity() {
        // All tokens identical -> identical image-level scores -> uniform
        // weights -> the map passes through unchanged.
        let token = unit(&[0.6, 0.8, 0.0]);
        let tokens = vec![token.clone(); 6];
        let grid = grid_from(tokens, 2, 3);
        let bank = LevelBank {
            level: crate::prompts::PromptLevel::Image,
            nhp: vec![unit(&[1.0, 0.0, 0.0])],
            ahp: vec![unit(&[0.0, 0.0, 1.0])],
            alp: vec![unit(&[0.0, 1.0, 0.0])],
            mean_normal: unit(&[1.0, 0.0, 0.0]),
            mean_abnormal: unit(&[0.0, 1.0, 1.0]),
            alp_mean_raw: vec![0.0, 1.0, 0.0],
        };
        let m_hat = ScoreMap::new(2, 3, vec![0.1, 0.9, 0.4, 0.3, 0.2, 0.6]);
        let m_p = reweight_image_level(&m_hat, &grid, &bank, LogitScale::new(10.0).unwrap()).unwrap();
        for (a, b) in m_hat.as_slice().iter().zip(m_p.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        // Single token: weight 1, map unchanged.
        let grid1 = grid_from(vec![token], 1, 1);
        let m1 = ScoreMap::new(1, 1, vec![0.42]);
        let out = reweight_image_level(&m1, &grid1, &bank, LogitScale::new(10.0).unwrap()).unwrap();
        assert!((out.get(0, 0) - 0.42).abs() < 1e-12);
    }

    #[test]
    fn reweight_stays_in_unit_interval() {
        let bank = LevelBank {
            level: crate::prompts::PromptLevel::Image,
            nhp: vec![unit(&[1.0, 0.0, 0.0])],
            ahp: vec![],
            alp: vec![unit(&[0.0, 1.0, 0.0])],
            mean_normal: unit(&[1.0, 0.0, 0.0]),
            mean_abnormal: unit(&[0.0, 1.0, 0.0]),
            alp_mean_raw: vec![0.0, 1.0, 0.0],
        };
        let tokens = random_units(21, 9, 3);
        let grid = grid_from(tokens, 3, 3);
        let m_hat = ScoreMap::new(3, 3, vec![0.99; 9]);
        let out = reweight_image_level(&m_hat, &grid, &bank, LogitScale::new(25.0).unwrap()).unwrap();
        assert!(out.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn fuse_trivial_cases_and_bound() {
        let a = ScoreMap::new(1, 3, vec![0.5, 0.0, 0.8]);
        let b = ScoreMap::new(1, 3, vec![0.5, 0.7, 0.2]);
        let fused = fuse_pixel(&a, &b).unwrap();
        assert!((fused.get(0, 0) - 0.25).abs() < 1e-12);
        assert_eq!(fused.get(0, 1), 0.0);
        for ((f, x), y) in fused.as_slice().iter().zip(a.as_slice()).zip(b.as_slice()) {
            assert!(*f <= x.min(*y) + 1e-15);
        }
    }

    #[test]
    fn image_score_trivial_and_monotone() {
        let token = unit(&[1.0, 1.0, 0.0]);
        let grid = grid_from(vec![token], 1, 1);
        let bank = LevelBank {
            level: crate::prompts::PromptLevel::Image,
            nhp: vec![unit(&[1.0, 0.0, 0.0])],
            ahp: vec![],
            alp: vec![unit(&[0.0, 1.0, 0.0])],
            mean_normal: unit(&[1.0, 0.0, 0.0]),
            mean_abnormal: unit(&[0.0, 1.0, 0.0]),
            alp_mean_raw: vec![0.0, 1.0, 0.0],
        };
        // Class token equidistant: S_i = 0.5. With max(m_pix) = 0.5 the
        // harmonic fusion gives 0.25.
        let m_pix = ScoreMap::new(1, 1, vec![0.5]);
        let scale = LogitScale::new(13.0).unwrap();
        let m_img = image_score(&grid, &bank, &m_pix, scale).unwrap();
        assert!((m_img - 0.25).abs() < 1e-12);
        // Monotone in max(m_pix) with S_i fixed.
        let lower = image_score(&grid, &bank, &ScoreMap::new(1, 1, vec![0.3]), scale).unwrap();
        assert!(lower <= m_img);
    }

    #[test]
    fn score_map_container_round_trips() {
        let map = ScoreMap::new(2, 3, vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.125]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.smap");
        save_score_map(&map, &path).unwrap();
        let loaded = load_score_map(&path).unwrap();
        for (a, b) in map.as_slice().iter().zip(loaded.as_slice()) {
            assert_eq!((*a as f32) as f64, *b);
        }
        let path2 = dir.path().join("map2.smap");
        save_score_map(&loaded, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());

        let mut corrupted = fs::read(&path).unwrap();
        corrupted[0] = b'X';
        fs::write(&path, &corrupted).unwrap();
        assert!(matches!(
            load_score_map(&path),
            Err(Error::Format { field: "magic", .. })
        ));
    }

    #[test]
    fn pgm_export_writes_sidecar_with_bounds() {
        let map = ScoreMap::new(1, 4, vec![0.2, 0.4, 0.6, 0.8]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.pgm");
        write_score_pgm(&map, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n4 1\n255\n"));
        let sidecar: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(path.with_extension("pgm.json")).unwrap())
                .unwrap();
        assert_eq!(sidecar["min"], 0.2);
        assert_eq!(sidecar["max"], 0.8);
    }
}
