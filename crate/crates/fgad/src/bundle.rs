//! Versioned model bundles.
//!
//! A bundle is a directory of canonical files plus a manifest of content
//! hashes: caption document, prompt templates, trained parameters, query
//! former state, the normal memory and training shots (as `FGADFEAT`
//! files), region maps, the run config snapshot and the loss trace.
//! Training never mutates a bundle in place; each save allocates the next
//! `bundle-NNNN` directory. Identical seeds produce byte-identical bundles.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::LossTrace;
use crate::config::RunConfig;
use crate::core::{l2_normalize, FeatVec};
use crate::encoder::{
    load_feature_file, save_feature_file, ResolutionTag, SyntheticEncoder, TokenGrid,
};
use crate::error::{Error, Result};
use crate::mfsc;
use crate::pipeline::TrainedModel;
use crate::prompts::{encode_banks, PromptParams, PromptSet};
use crate::qformer::{family_banks, qf_forward, QueryFormerState};
use crate::regions::RegionMap;
use crate::scoring::build_memory;

pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub bundle_version: u32,
    /// File name -> hex sha256 of its bytes.
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct QfFile {
    state: QueryFormerState,
    intrinsics: Vec<FeatVec>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn next_version_dir(base: &Path) -> Result<PathBuf> {
    fs::create_dir_all(base)?;
    let mut max = 0u32;
    for entry in fs::read_dir(base)? {
        let entry = entry?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(n) = name.strip_prefix("bundle-").and_then(|s| s.parse::<u32>().ok()) {
            max = max.max(n);
        }
    }
    Ok(base.join(format!("bundle-{:04}", max + 1)))
}

/// Write a new versioned bundle directory under `base`; returns its path.
pub fn save_bundle(
    base: &Path,
    model: &TrainedModel,
    trace: &LossTrace,
    qf_trace: Option<&[f64]>,
) -> Result<PathBuf> {
    let dir = next_version_dir(base)?;
    fs::create_dir_all(&dir)?;
    let mut files: BTreeMap<String, Vec<u8>> = BTreeMap::new();

    files.insert(
        "config.json".into(),
        serde_json::to_vec_pretty(&model.config)?,
    );
    files.insert("mfsc.json".into(), mfsc::serialize(&model.doc)?.into_bytes());
    files.insert(
        "templates.json".into(),
        serde_json::to_vec(&model.prompt_set)?,
    );
    files.insert(
        "prompt_params.json".into(),
        serde_json::to_vec(&model.params)?,
    );
    files.insert(
        "qformer.json".into(),
        serde_json::to_vec(&QfFile {
            state: model.qf.clone(),
            intrinsics: model.intrinsics.clone(),
        })?,
    );
    files.insert(
        "region_maps.json".into(),
        serde_json::to_vec(&model.region_maps)?,
    );
    files.insert("trace.csv".into(), trace.to_csv().into_bytes());
    if let Some(qf_trace) = qf_trace {
        let mut csv = String::from("epoch,loss\n");
        for (i, l) in qf_trace.iter().enumerate() {
            csv.push_str(&format!("{i},{l}\n"));
        }
        files.insert("qf_trace.csv".into(), csv.into_bytes());
    }

    for (name, bytes) in &files {
        fs::write(dir.join(name), bytes)?;
    }

    // Binary grids go through the feature container.
    let mut bank_grid_names = Vec::new();
    {
        let entries = model.memory.entries();
        let mean = {
            let d = entries[0].dim();
            let mut m = vec![0.0; d];
            for e in entries {
                for (mi, v) in m.iter_mut().zip(e.as_slice()) {
                    *mi += v / entries.len() as f64;
                }
            }
            l2_normalize(&FeatVec::new(m))?
        };
        let grid = TokenGrid::new(
            1,
            entries.len(),
            entries.to_vec(),
            mean,
            ResolutionTag::Native,
        )?;
        save_feature_file(&grid, &dir.join("memory.feat"))?;
        bank_grid_names.push("memory.feat".to_string());
    }
    for (i, shot) in model.shots.iter().enumerate() {
        let name = format!("shot-{i}.feat");
        save_feature_file(shot, &dir.join(&name))?;
        bank_grid_names.push(name);
    }

    let mut manifest_files = BTreeMap::new();
    for (name, bytes) in &files {
        manifest_files.insert(name.clone(), sha256_hex(bytes));
    }
    for name in bank_grid_names {
        let bytes = fs::read(dir.join(&name))?;
        manifest_files.insert(name, sha256_hex(&bytes));
    }
    let manifest = Manifest {
        bundle_version: BUNDLE_VERSION,
        files: manifest_files,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(dir)
}

/// Verify every manifest hash; returns the manifest on success.
pub fn verify_bundle(dir: &Path) -> Result<Manifest> {
    let manifest: Manifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.bundle_version != BUNDLE_VERSION {
        return Err(Error::Format {
            field: "bundle_version",
            message: format!("unsupported bundle version {}", manifest.bundle_version),
        });
    }
    for (name, expected) in &manifest.files {
        let bytes = fs::read(dir.join(name))?;
        let actual = sha256_hex(&bytes);
        if actual != *expected {
            return Err(Error::Format {
                field: "manifest",
                message: format!("hash mismatch for {name}: {actual} != {expected}"),
            });
        }
    }
    Ok(manifest)
}

/// Reconstruct a trained model from a bundle directory.
///
/// The prompt feature banks are re-encoded from the stored parameters
/// (deterministic); memory and shots come back at `f32` interchange
/// precision, so inference from a loaded bundle is itself deterministic.
pub fn load_bundle(dir: &Path) -> Result<TrainedModel> {
    verify_bundle(dir)?;
    let config: RunConfig =
        serde_json::from_str(&fs::read_to_string(dir.join("config.json"))?)?;
    let doc = mfsc::parse_document(&fs::read_to_string(dir.join("mfsc.json"))?)?;
    let prompt_set: PromptSet =
        serde_json::from_str(&fs::read_to_string(dir.join("templates.json"))?)?;
    let params: PromptParams =
        serde_json::from_str(&fs::read_to_string(dir.join("prompt_params.json"))?)?;
    let qf_file: QfFile = serde_json::from_str(&fs::read_to_string(dir.join("qformer.json"))?)?;
    let region_maps: Vec<RegionMap> =
        serde_json::from_str(&fs::read_to_string(dir.join("region_maps.json"))?)?;

    let encoder = SyntheticEncoder::new(config.encoder.clone())?;
    let banks = encode_banks(&prompt_set, &params, &encoder)?;

    let mut shots = Vec::new();
    let mut i = 0;
    loop {
        let path = dir.join(format!("shot-{i}.feat"));
        if !path.exists() {
            break;
        }
        shots.push(load_feature_file(&path)?);
        i += 1;
    }
    if shots.is_empty() {
        return Err(Error::Format {
            field: "shots",
            message: "bundle has no shot files".into(),
        });
    }
    // Rebuild the memory from the stored bank so it matches the saved bytes
    // exactly (shots are stored at their native h x w; memory.feat holds
    // the concatenated bank).
    let memory_grid = load_feature_file(&dir.join("memory.feat"))?;
    let memory = build_memory(&[memory_grid])?;

    let qf = qf_file.state;
    let intrinsics = {
        let (normal_banks, abnormal_banks) = family_banks(&banks);
        let recomputed = qf_forward(&qf, &normal_banks, &abnormal_banks)?;
        // The stored intrinsics are authoritative; recomputation is a
        // consistency check of banks + parameters.
        for (a, b) in recomputed.iter().zip(&qf_file.intrinsics) {
            let dot: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum();
            if dot < 1.0 - 1e-9 {
                return Err(Error::Format {
                    field: "qformer.json",
                    message: "stored intrinsics disagree with parameters".into(),
                });
            }
        }
        qf_file.intrinsics
    };

    Ok(TrainedModel {
        config,
        doc,
        prompt_set,
        params,
        banks,
        qf,
        intrinsics,
        memory,
        shots,
        region_maps,
        encoder,
    })
}

/// Compare two bundle directories byte for byte (same file set, same bytes).
pub fn bundles_identical(a: &Path, b: &Path) -> Result<bool> {
    let list = |dir: &Path| -> Result<Vec<String>> {
        let mut names: Vec<String> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        Ok(names)
    };
    let names_a = list(a)?;
    if names_a != list(b)? {
        return Ok(false);
    }
    for name in names_a {
        if fs::read(a.join(&name))? != fs::read(b.join(&name))? {
            return Ok(false);
        }
    }
    Ok(true)
}
