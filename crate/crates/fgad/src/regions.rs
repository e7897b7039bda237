//! Language-guided progressive region aggregation.
//!
//! Tokens are clustered in *reference space*: each token's coordinates are
//! its cosine similarities to the guiding prompt features, cluster centers
//! are the tokens most similar to each prompt, and every token joins the
//! nearest selected center (Euclidean distance over the similarity rows).
//! Clustering runs in two stages: foreground/background separation guided by
//! the foreground- and background-level prompts, then component assignment
//! of the foreground tokens guided by the component-level prompts.
//! High-resolution grids are used here only; the result is downsampled by
//! majority vote for training at native resolution.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::core::{cosine, FeatVec};
use crate::encoder::{ResolutionTag, TokenGrid};
use crate::error::{Error, Result};

/// Token-by-prompt cosine similarity matrix, row-major over tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ReferenceMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, token: usize, prompt: usize) -> f64 {
        self.data[token * self.cols + prompt]
    }

    pub fn row(&self, token: usize) -> &[f64] {
        &self.data[token * self.cols..(token + 1) * self.cols]
    }
}

/// Cosine of every token against every guiding prompt feature.
pub fn build_reference(tokens: &TokenGrid, prompts: &[FeatVec]) -> Result<ReferenceMatrix> {
    if prompts.is_empty() {
        return Err(Error::Empty("reference prompts"));
    }
    build_reference_rows(tokens.tokens(), prompts)
}

fn build_reference_rows(tokens: &[FeatVec], prompts: &[FeatVec]) -> Result<ReferenceMatrix> {
    if prompts.is_empty() {
        return Err(Error::Empty("reference prompts"));
    }
    let mut data = Vec::with_capacity(tokens.len() * prompts.len());
    for token in tokens {
        for prompt in prompts {
            data.push(cosine(token, prompt)?);
        }
    }
    Ok(ReferenceMatrix {
        rows: tokens.len(),
        cols: prompts.len(),
        data,
    })
}

/// Selected cluster-center token per guiding prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterCenters {
    pub token_indices: Vec<usize>,
}

/// Each prompt's center is its highest-similarity token; ties break toward
/// the lowest token index, and when a later prompt collides with an earlier
/// one it falls back to its next-best unused token.
pub fn select_centers(reference: &ReferenceMatrix) -> Result<ClusterCenters> {
    let (t, p) = (reference.rows(), reference.cols());
    if t < p {
        return Err(Error::Invalid {
            context: "center selection",
            message: format!("need at least as many tokens ({t}) as prompts ({p})"),
        });
    }
    let mut used = vec![false; t];
    let mut token_indices = Vec::with_capacity(p);
    for prompt in 0..p {
        let mut best: Option<(f64, usize)> = None;
        for token in 0..t {
            if used[token] {
                continue;
            }
            let value = reference.get(token, prompt);
            let better = match best {
                None => true,
                Some((bv, _)) => value > bv,
            };
            if better {
                best = Some((value, token));
            }
        }
        let (_, idx) = best.expect("t >= p guarantees a free token");
        used[idx] = true;
        token_indices.push(idx);
    }
    Ok(ClusterCenters { token_indices })
}

/// Per-token region labels: 0 = background, 1..=Nc = components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMap {
    pub h: usize,
    pub w: usize,
    pub labels: Vec<usize>,
    pub resolution: ResolutionTag,
}

impl RegionMap {
    pub fn label(&self, i: usize, j: usize) -> usize {
        self.labels[i * self.w + j]
    }

    pub fn max_label(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0)
    }
}

fn nearest_center(reference: &ReferenceMatrix, centers: &ClusterCenters, token: usize) -> usize {
    let row = reference.row(token);
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (k, &center) in centers.token_indices.iter().enumerate() {
        let center_row = reference.row(center);
        let dist: f64 = row
            .iter()
            .zip(center_row)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        if dist < best_dist {
            best_dist = dist;
            best = k;
        }
    }
    best
}

/// Two-stage clustering: split foreground from background with the
/// foreground/background prompt pair, then assign the foreground tokens to
/// components with the component prompts. Label `k` follows
/// `component_prompts[k-1]`.
pub fn cluster_two_stage(
    grid: &TokenGrid,
    fg_prompt: &FeatVec,
    bg_prompt: &FeatVec,
    component_prompts: &[FeatVec],
) -> Result<RegionMap> {
    if component_prompts.is_empty() {
        return Err(Error::Empty("component prompts"));
    }
    let stage1 = build_reference(grid, &[fg_prompt.clone(), bg_prompt.clone()])?;
    let centers1 = select_centers(&stage1)?;
    let mut labels = vec![0usize; grid.len()];
    let mut fg_indices = Vec::new();
    for token in 0..grid.len() {
        if nearest_center(&stage1, &centers1, token) == 0 {
            fg_indices.push(token);
        }
    }
    if fg_indices.is_empty() {
        return Err(Error::DegenerateForeground);
    }

    let fg_tokens: Vec<FeatVec> = fg_indices
        .iter()
        .map(|&i| grid.tokens()[i].clone())
        .collect();
    let stage2 = build_reference_rows(&fg_tokens, component_prompts)?;
    let centers2 = select_centers(&stage2)?;
    for (local, &global) in fg_indices.iter().enumerate() {
        labels[global] = nearest_center(&stage2, &centers2, local) + 1;
    }

    Ok(RegionMap {
        h: grid.h(),
        w: grid.w(),
        labels,
        resolution: grid.resolution(),
    })
}

/// Ablation path: skip the foreground/background split and cluster all
/// tokens at once over `[background, components...]`. Label 0 follows the
/// background prompt, label `k` follows `component_prompts[k-1]`.
pub fn cluster_one_stage(
    grid: &TokenGrid,
    bg_prompt: &FeatVec,
    component_prompts: &[FeatVec],
) -> Result<RegionMap> {
    if component_prompts.is_empty() {
        return Err(Error::Empty("component prompts"));
    }
    let mut prompts = vec![bg_prompt.clone()];
    prompts.extend(component_prompts.iter().cloned());
    let reference = build_reference(grid, &prompts)?;
    let centers = select_centers(&reference)?;
    let labels = (0..grid.len())
        .map(|t| nearest_center(&reference, &centers, t))
        .collect();
    Ok(RegionMap {
        h: grid.h(),
        w: grid.w(),
        labels,
        resolution: grid.resolution(),
    })
}

/// Reduce a high-resolution map to native resolution: each native cell takes
/// the majority label of its `factor x factor` block, ties toward the lower
/// label id.
pub fn downsample_region_map(map: &RegionMap, factor: usize) -> Result<RegionMap> {
    if factor == 0 || map.h % factor != 0 || map.w % factor != 0 {
        return Err(Error::Invalid {
            context: "region map downsample",
            message: format!("dims {}x{} not divisible by factor {factor}", map.h, map.w),
        });
    }
    let (h, w) = (map.h / factor, map.w / factor);
    let n_labels = map.max_label() + 1;
    let mut labels = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let mut counts = vec![0usize; n_labels];
            for di in 0..factor {
                for dj in 0..factor {
                    counts[map.label(i * factor + di, j * factor + dj)] += 1;
                }
            }
            let mut best = 0;
            for (label, &count) in counts.iter().enumerate() {
                if count > counts[best] {
                    best = label;
                }
            }
            labels.push(best);
        }
    }
    Ok(RegionMap {
        h,
        w,
        labels,
        resolution: ResolutionTag::Native,
    })
}

/// Fraction of tokens whose label matches the ground truth.
pub fn region_accuracy(map: &RegionMap, truth: &[usize]) -> f64 {
    assert_eq!(map.labels.len(), truth.len(), "accuracy over mismatched grids");
    let hits = map
        .labels
        .iter()
        .zip(truth)
        .filter(|(a, b)| a == b)
        .count();
    hits as f64 / truth.len() as f64
}

/// Dump a region map as a binary 8-bit PGM, labels spread over gray levels.
pub fn write_region_pgm(map: &RegionMap, path: &Path) -> Result<()> {
    let max_label = map.max_label().max(1);
    let mut out = Vec::new();
    out.extend_from_slice(format!("P5\n{} {}\n255\n", map.w, map.h).as_bytes());
    for &label in &map.labels {
        out.push(((label * 255) / max_label) as u8);
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::l2_normalize;
    use crate::seeded;

    fn unit(values: &[f64]) -> FeatVec {
        l2_normalize(&FeatVec::new(values.to_vec())).unwrap()
    }

    fn grid_from(tokens: Vec<FeatVec>, h: usize, w: usize) -> TokenGrid {
        let class = tokens[0].clone();
        TokenGrid::new(h, w, tokens, class, ResolutionTag::Native).unwrap()
    }

    #[test]
    fn reference_matrix_trivial_entries() {
        let p = unit(&[1.0, 0.0, 0.0]);
        let q = unit(&[0.0, 1.0, 0.0]);
        let tokens = vec![p.clone(), unit(&[0.0, 0.0, 1.0])];
        let grid = grid_from(tokens, 1, 2);
        let m = build_reference(&grid, &[p, q]).unwrap();
        assert!((m.get(0, 0) - 1.0).abs() < 1e-12);
        assert!(m.get(1, 0).abs() < 1e-12);
        assert!(m.get(1, 1).abs() < 1e-12);
    }

    #[test]
    fn reference_matches_brute_force() {
        let mut rng = seeded::rng_for(4, &["ref"]);
        let d = 9;
        let tokens: Vec<FeatVec> = (0..12)
            .map(|_| unit(&seeded::gaussian_vec(&mut rng, d, 1.0)))
            .collect();
        let prompts: Vec<FeatVec> = (0..3)
            .map(|_| unit(&seeded::gaussian_vec(&mut rng, d, 1.0)))
            .collect();
        let grid = grid_from(tokens.clone(), 3, 4);
        let m = build_reference(&grid, &prompts).unwrap();
        for (ti, token) in tokens.iter().enumerate() {
            for (pi, prompt) in prompts.iter().enumerate() {
                let dot: f64 = token.as_slice().iter().zip(prompt.as_slice()).map(|(a, b)| a * b).sum();
                let brute = dot / (token.norm() * prompt.norm());
                assert!((m.get(ti, pi) - brute).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn centers_take_unique_argmax() {
        let m = ReferenceMatrix {
            rows: 3,
            cols: 2,
            data: vec![0.9, 0.1, 0.2, 0.8, 0.1, 0.3],
        };
        let centers = select_centers(&m).unwrap();
        assert_eq!(centers.token_indices, vec![0, 1]);
    }

    #[test]
    fn identical_columns_resolve_collision_to_runner_up() {
        let m = ReferenceMatrix {
            rows: 3,
            cols: 2,
            data: vec![0.9, 0.9, 0.5, 0.5, 0.1, 0.1],
        };
        let centers = select_centers(&m).unwrap();
        assert_eq!(centers.token_indices, vec![0, 1]);
    }

    #[test]
    fn too_few_tokens_is_an_error() {
        let m = ReferenceMatrix {
            rows: 1,
            cols: 2,
            data: vec![0.9, 0.8],
        };
        assert!(select_centers(&m).is_err());
    }

    #[test]
    fn single_component_labels_all_foreground_one() {
        // Orthogonal directions: bg along e0, fg/component along e1.
        let bg = unit(&[1.0, 0.0, 0.0, 0.0]);
        let comp = unit(&[0.0, 1.0, 0.0, 0.0]);
        let fg = comp.clone();
        let tokens = vec![
            bg.clone(),
            comp.clone(),
            comp.clone(),
            bg.clone(),
            comp.clone(),
            bg.clone(),
        ];
        let grid = grid_from(tokens, 2, 3);
        let map = cluster_two_stage(&grid, &fg, &bg, &[comp.clone()]).unwrap();
        assert_eq!(map.labels, vec![0, 1, 1, 0, 1, 0]);
    }

    #[test]
    fn permuting_component_prompts_permutes_labels() {
        let bg = unit(&[1.0, 0.0, 0.0, 0.0]);
        let c1 = unit(&[0.0, 1.0, 0.0, 0.0]);
        let c2 = unit(&[0.0, 0.0, 1.0, 0.0]);
        let fg = unit(&[0.0, 1.0, 1.0, 0.0]);
        let tokens = vec![bg.clone(), c1.clone(), c2.clone(), c2.clone()];
        let grid = grid_from(tokens, 2, 2);
        let forward = cluster_two_stage(&grid, &fg, &bg, &[c1.clone(), c2.clone()]).unwrap();
        let swapped = cluster_two_stage(&grid, &fg, &bg, &[c2, c1]).unwrap();
        assert_eq!(forward.labels, vec![0, 1, 2, 2]);
        assert_eq!(swapped.labels, vec![0, 2, 1, 1]);
    }

    #[test]
    fn every_token_gets_exactly_one_label() {
        let mut rng = seeded::rng_for(8, &["partition"]);
        let d = 8;
        let tokens: Vec<FeatVec> = (0..24)
            .map(|_| unit(&seeded::gaussian_vec(&mut rng, d, 1.0)))
            .collect();
        let grid = grid_from(tokens, 4, 6);
        let fg = unit(&seeded::gaussian_vec(&mut rng, d, 1.0));
        let bg = unit(&seeded::gaussian_vec(&mut rng, d, 1.0));
        let comps: Vec<FeatVec> = (0..3)
            .map(|_| unit(&seeded::gaussian_vec(&mut rng, d, 1.0)))
            .collect();
        let map = cluster_two_stage(&grid, &fg, &bg, &comps).unwrap();
        assert_eq!(map.labels.len(), 24);
        assert!(map.labels.iter().all(|&l| l <= comps.len()));
    }

    #[test]
    fn downsample_majority_and_ties() {
        let map = RegionMap {
            h: 2,
            w: 4,
            labels: vec![0, 0, 1, 1, 1, 2, 2, 2],
            resolution: ResolutionTag::Highres,
        };
        let down = downsample_region_map(&map, 2).unwrap();
        // Block {0,0,1,2} -> 0 (majority 0); block {1,1,2,2} -> 1 (tie, lower id).
        assert_eq!(down.labels, vec![0, 1]);
        assert_eq!((down.h, down.w), (1, 2));
    }

    #[test]
    fn downsample_uniform_block() {
        let map = RegionMap {
            h: 2,
            w: 2,
            labels: vec![3, 3, 3, 3],
            resolution: ResolutionTag::Highres,
        };
        assert_eq!(downsample_region_map(&map, 2).unwrap().labels, vec![3]);
    }

    #[test]
    fn downsample_rejects_indivisible_dims() {
        let map = RegionMap {
            h: 3,
            w: 3,
            labels: vec![0; 9],
            resolution: ResolutionTag::Highres,
        };
        assert!(downsample_region_map(&map, 2).is_err());
    }

    #[test]
    fn pgm_dump_is_well_formed() {
        let map = RegionMap {
            h: 2,
            w: 2,
            labels: vec![0, 1, 2, 2],
            resolution: ResolutionTag::Native,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.pgm");
        write_region_pgm(&map, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(bytes.len(), b"P5\n2 2\n255\n".len() + 4);
    }
}
