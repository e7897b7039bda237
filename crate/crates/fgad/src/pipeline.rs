//! End-to-end orchestration: captions -> prompts -> region aggregation ->
//! alignment training -> query-former training -> inference.

use std::path::Path;

use crate::align::{train_align, LossTrace};
use crate::caption::FixtureStore;
use crate::config::{RunConfig, RunMode};
use crate::core::{harmonic_combine, FeatVec, ScoreMap};
use crate::encoder::{load_feature_file, SyntheticEncoder, TokenGrid};
use crate::error::{Error, Result};
use crate::mfsc::{self, MFSCDocument};
use crate::prompts::{build_prompt_set, encode_banks, init_params, PromptBanks, PromptParams, PromptSet};
use crate::qformer::{
    family_banks, init_query_former, qf_forward, train_query_former, QueryFormerState,
};
use crate::regions::{cluster_two_stage, downsample_region_map, RegionMap};
use crate::scoring::{
    assign_prompts, build_memory, class_token_score, fuse_pixel, reweight_image_level, score_pad,
    score_vad, AssignmentMap, NormalMemory,
};
use crate::synth::SceneFactory;

/// Everything inference needs, produced by training or loaded from a bundle.
pub struct TrainedModel {
    pub config: RunConfig,
    pub doc: MFSCDocument,
    pub prompt_set: PromptSet,
    pub params: PromptParams,
    pub banks: PromptBanks,
    pub qf: QueryFormerState,
    pub intrinsics: Vec<FeatVec>,
    pub memory: NormalMemory,
    pub shots: Vec<TokenGrid>,
    pub region_maps: Vec<RegionMap>,
    pub encoder: SyntheticEncoder,
}

/// Resolve the caption document for a config: built-in fixtures, plus any
/// loaded from `fixtures_dir`.
pub fn load_document(cfg: &RunConfig) -> Result<MFSCDocument> {
    let mut store = FixtureStore::builtin();
    if let Some(dir) = &cfg.fixtures_dir {
        store.load_dir(dir)?;
    }
    let category = cfg
        .fixture
        .as_ref()
        .ok_or_else(|| Error::Config("config needs a `fixture` category".into()))?;
    let text = store
        .get(category)
        .ok_or_else(|| Error::MissingFixture(category.clone()))?;
    mfsc::parse_document(text)
}

/// Cluster one grid into regions guided by the normal prompt features.
pub fn aggregate_regions(
    grid: &TokenGrid,
    banks: &PromptBanks,
) -> Result<RegionMap> {
    let fg = &banks.foreground().nhp[0];
    let bg = &banks.background;
    let component_prompts: Vec<FeatVec> = banks
        .levels
        .iter()
        .skip(2)
        .map(|b| b.nhp[0].clone())
        .collect();
    cluster_two_stage(grid, fg, bg, &component_prompts)
}

struct Shots {
    native: Vec<TokenGrid>,
    regions: Vec<RegionMap>,
}

fn prepare_shots(
    cfg: &RunConfig,
    doc: &MFSCDocument,
    enc: &SyntheticEncoder,
    banks: &PromptBanks,
) -> Result<Shots> {
    match cfg.mode {
        RunMode::Synthetic => {
            let factory = SceneFactory::new(doc, enc, cfg.native_h, cfg.native_w, cfg.feature_gain)?;
            let scenes = factory.shots(cfg.shots, cfg.train.seed)?;
            let mut native = Vec::with_capacity(scenes.len());
            let mut regions = Vec::with_capacity(scenes.len());
            for scene in &scenes {
                let grid = enc.encode_scene(scene)?;
                let highres = enc.encode_scene_highres(scene, cfg.highres_factor)?;
                let highres_map = aggregate_regions(&highres, banks)?;
                let region = if cfg.highres_factor > 1 {
                    downsample_region_map(&highres_map, cfg.highres_factor)?
                } else {
                    highres_map
                };
                native.push(grid);
                regions.push(region);
            }
            Ok(Shots { native, regions })
        }
        RunMode::FeatureImport => {
            let mut native = Vec::new();
            let mut regions = Vec::new();
            for path in &cfg.feature_files {
                let grid = load_feature_file(path)?;
                // Imported features carry a single resolution; aggregation
                // runs on the same grids.
                let region = aggregate_regions(&grid, banks)?;
                native.push(grid);
                regions.push(region);
            }
            Ok(Shots { native, regions })
        }
    }
}

/// Run captioning, prompt construction, region aggregation and alignment
/// training. The query former is initialized but untrained; run
/// [`train_qf_stage`] afterwards.
pub fn run_training(cfg: &RunConfig) -> Result<(TrainedModel, LossTrace)> {
    cfg.validate()?;
    let encoder = SyntheticEncoder::new(cfg.encoder.clone())?;
    let doc = load_document(cfg)?;
    let prompt_set = build_prompt_set(&doc, &cfg.anomaly_words, cfg.train.n_ab, cfg.train.seed)?;
    let mut params = init_params(&prompt_set, cfg.encoder.token_embedding_dim, cfg.train.seed);
    let initial_banks = encode_banks(&prompt_set, &params, &encoder)?;

    let shots = prepare_shots(cfg, &doc, &encoder, &initial_banks)?;
    let trace = train_align(
        &shots.native,
        &shots.regions,
        &prompt_set,
        &mut params,
        &encoder,
        &cfg.train,
    )?;

    let banks = encode_banks(&prompt_set, &params, &encoder)?;
    let memory = build_memory(&shots.native)?;
    let qf = init_query_former(
        cfg.encoder.feature_dim,
        prompt_set.num_levels(),
        cfg.train.seed,
    );
    let (normal_banks, abnormal_banks) = family_banks(&banks);
    let intrinsics = qf_forward(&qf, &normal_banks, &abnormal_banks)?;

    Ok((
        TrainedModel {
            config: cfg.clone(),
            doc,
            prompt_set,
            params,
            banks,
            qf,
            intrinsics,
            memory,
            shots: shots.native,
            region_maps: shots.regions,
            encoder,
        },
        trace,
    ))
}

/// Train the query former on the (frozen) trained banks and refresh the
/// intrinsic features. Returns the per-epoch loss trace.
pub fn train_qf_stage(model: &mut TrainedModel) -> Result<Vec<f64>> {
    let (normal_banks, abnormal_banks) = family_banks(&model.banks);
    let targets_n: Vec<FeatVec> = model
        .banks
        .levels
        .iter()
        .map(|b| b.mean_normal.clone())
        .collect();
    let targets_a: Vec<FeatVec> = model
        .banks
        .levels
        .iter()
        .map(|b| b.mean_abnormal.clone())
        .collect();
    let trace = train_query_former(
        &mut model.qf,
        &normal_banks,
        &abnormal_banks,
        &targets_n,
        &targets_a,
        model.config.qf_learning_rate,
        model.config.qf_epochs,
    )?;
    model.intrinsics = qf_forward(&model.qf, &normal_banks, &abnormal_banks)?;
    Ok(trace)
}

/// All maps and scores produced for one query grid.
pub struct Inference {
    pub m_v: ScoreMap,
    pub m_hat_p: ScoreMap,
    pub m_p: ScoreMap,
    pub m_pix: ScoreMap,
    pub s_i: f64,
    pub m_img: f64,
    pub assignment: AssignmentMap,
}

pub fn infer(model: &TrainedModel, query: &TokenGrid) -> Result<Inference> {
    let scale = model.config.train.logit_scale;
    let m_v = score_vad(query, &model.memory)?;
    let assignment = assign_prompts(query, &model.intrinsics)?;
    let m_hat_p = score_pad(query, &assignment, &model.banks, scale)?;
    let m_p = reweight_image_level(&m_hat_p, query, model.banks.image(), scale)?;
    let m_pix = fuse_pixel(&m_v, &m_p)?;
    let s_i = class_token_score(query, model.banks.image(), scale)?;
    let m_img = harmonic_combine(m_pix.max(), s_i);
    Ok(Inference {
        m_v,
        m_hat_p,
        m_p,
        m_pix,
        s_i,
        m_img,
        assignment,
    })
}

/// Load a query grid for inference: a feature file or a scene JSON encoded
/// with the model's encoder.
pub fn load_query(model: &TrainedModel, path: &Path) -> Result<TokenGrid> {
    if path.extension().is_some_and(|e| e == "json") {
        let scene = crate::encoder::SyntheticScene::load_json(path)?;
        model.encoder.encode_scene(&scene)
    } else {
        load_feature_file(path)
    }
}

/// Fraction of foreground tokens whose assigned family is the component
/// family of their region label (region `r` maps to family `r + 1`: family
/// 0 is the image level, family 1 the foreground level).
pub fn assignment_region_agreement(assignment: &AssignmentMap, region: &RegionMap) -> f64 {
    let mut fg = 0usize;
    let mut hits = 0usize;
    for (family, &label) in assignment.families.iter().zip(&region.labels) {
        if label == 0 {
            continue;
        }
        fg += 1;
        if *family == label + 1 {
            hits += 1;
        }
    }
    if fg == 0 {
        return 0.0;
    }
    hits as f64 / fg as f64
}
