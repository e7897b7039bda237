//! `fgad` command-line interface.
//!
//! Subcommands cover the whole pipeline: caption generation/validation,
//! prompt building, region aggregation dumps, alignment training (with an
//! optional gradient-check mode), query-former training, inference, the
//! synthetic benchmark, and bundle inspection. Exit codes: 0 success,
//! 1 validation or runtime failure, 2 usage error.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use fgad::bundle::{load_bundle, save_bundle, verify_bundle};
use fgad::caption::{CaptionClient, CaptionRequest, EndpointConfig, FixtureStore, HttpTransport};
use fgad::config::RunConfig;
use fgad::encoder::SyntheticEncoder;
use fgad::error::Error;
use fgad::eval::{evaluate_dataset, SeedSuite};
use fgad::gradcheck::{run_grad_checks, DEFAULT_TOLERANCE};
use fgad::pipeline::{
    aggregate_regions, infer, load_document, load_query, run_training, train_qf_stage,
};
use fgad::prompts::{build_prompt_set, encode_banks, init_params};
use fgad::regions::write_region_pgm;
use fgad::scoring::{save_score_map, write_score_pgm};
use fgad::synth::SceneFactory;

#[derive(Parser)]
#[command(name = "fgad", version, about = "Few-shot anomaly detection with multi-level prompts")]
struct Cli {
    /// Route all randomness through this seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Path to the JSON run config.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or validate caption documents.
    Captions {
        #[command(subcommand)]
        action: CaptionsAction,
    },
    /// Build the multi-level prompt set.
    Prompts {
        #[command(subcommand)]
        action: PromptsAction,
    },
    /// Run language-guided region aggregation on one shot.
    Aggregate {
        #[command(flatten)]
        config: ConfigArg,
        /// Which shot to aggregate.
        #[arg(long, default_value_t = 0)]
        shot: usize,
        /// Write the region map as a PGM image.
        #[arg(long)]
        dump_map: Option<PathBuf>,
    },
    /// Alignment training; writes a new bundle.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Verify analytic gradients against finite differences instead of
        /// training; exits 0 only if all chains pass.
        #[arg(long)]
        grad_check: bool,
        /// Seeded points per gradient chain.
        #[arg(long, default_value_t = 100)]
        points: usize,
        /// Bundle output directory (overrides the config).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train the query former on a frozen bundle; writes a new bundle.
    QfTrain {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Score one query (scene JSON or feature file) with a trained bundle.
    Infer {
        #[arg(long)]
        bundle: PathBuf,
        /// Scene JSON or FGADFEAT feature file.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "inference-out")]
        out_dir: PathBuf,
    },
    /// Run the synthetic benchmark and emit a report.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        /// Reuse a trained bundle instead of training in-process.
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Write the JSON report here (table always goes to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Bundle maintenance.
    Bundle {
        #[command(subcommand)]
        action: BundleAction,
    },
}

#[derive(Subcommand)]
enum CaptionsAction {
    /// Produce the caption document for the configured category.
    Generate {
        #[command(flatten)]
        config: ConfigArg,
        /// Category override (defaults to the config's fixture).
        #[arg(long)]
        category: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Validate a caption document file; exits 1 on violations.
    Validate {
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Subcommand)]
enum PromptsAction {
    /// Build the prompt set; `--dump` prints the templates as JSON.
    Build {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        dump: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum BundleAction {
    /// Verify manifest hashes and print the bundle summary.
    Inspect {
        #[arg(long)]
        bundle: PathBuf,
    },
}

fn load_config(path: &PathBuf, seed: Option<u64>) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = seed {
        cfg.override_seed(seed);
    }
    Ok(cfg)
}

fn caption_client(cfg: &RunConfig) -> Result<CaptionClient, Error> {
    let mut fixtures = FixtureStore::builtin();
    if let Some(dir) = &cfg.fixtures_dir {
        fixtures.load_dir(dir)?;
    }
    let client = match &cfg.endpoint {
        Some(ep) => {
            let endpoint = EndpointConfig {
                base_url: ep.base_url.clone(),
                model_name: ep.model_name.clone(),
                api_key: std::env::var(fgad::caption::API_KEY_ENV).ok(),
                timeout: Duration::from_secs(ep.timeout_secs),
                max_retries: ep.max_retries,
                temperature: ep.temperature,
            };
            let transport = HttpTransport::new(endpoint.timeout)?;
            CaptionClient::new(endpoint, Box::new(transport))
        }
        None => {
            // Fixture-only client; the transport is never used.
            struct NoTransport;
            impl fgad::caption::ChatTransport for NoTransport {
                fn post_chat(
                    &self,
                    _: &str,
                    _: Option<&str>,
                    _: &serde_json::Value,
                ) -> fgad::Result<String> {
                    Err(Error::Endpoint {
                        attempts: 0,
                        message: "no endpoint configured; only fixture categories work".into(),
                    })
                }
            }
            CaptionClient::new(
                EndpointConfig::new("http://unconfigured.invalid", "none"),
                Box::new(NoTransport),
            )
        }
    };
    let client = client.with_fixtures(fixtures);
    Ok(match &cfg.cache_dir {
        Some(dir) => client.with_cache_dir(dir),
        None => client,
    })
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Captions { action } => match action {
            CaptionsAction::Generate {
                config,
                category,
                out,
            } => {
                let cfg = load_config(&config.config, cli.seed)?;
                let category = category
                    .or_else(|| cfg.fixture.clone())
                    .ok_or_else(|| Error::Config("no category given".into()))?;
                let client = caption_client(&cfg)?;
                let request = match &cfg.endpoint {
                    Some(_) => CaptionRequest::image(&category, Vec::new(), "image/png"),
                    None => CaptionRequest::fixture(&category),
                };
                let doc = client.generate_captions(&request)?;
                let text = fgad::mfsc::serialize(&doc)?;
                match out {
                    Some(path) => std::fs::write(path, text)?,
                    None => println!("{text}"),
                }
            }
            CaptionsAction::Validate { input } => {
                let text = std::fs::read_to_string(&input)?;
                let report = fgad::mfsc::check_document(&text);
                if report.is_empty() {
                    println!("valid");
                } else {
                    return Err(Error::DocumentInvalid(report));
                }
            }
        },

        Command::Prompts { action } => match action {
            PromptsAction::Build { config, dump, out } => {
                let cfg = load_config(&config.config, cli.seed)?;
                let doc = load_document(&cfg)?;
                let set =
                    build_prompt_set(&doc, &cfg.anomaly_words, cfg.train.n_ab, cfg.train.seed)?;
                let counts: Vec<String> = set
                    .levels
                    .iter()
                    .map(|l| {
                        format!(
                            "{}: {} nhp / {} ahp / {} alp",
                            l.level.tag(),
                            l.nhp.len(),
                            l.ahp.len(),
                            l.alp.len()
                        )
                    })
                    .collect();
                eprintln!("built prompt set for `{}`: {}", doc.category, counts.join(", "));
                if dump || out.is_some() {
                    let json = serde_json::to_string_pretty(&set)?;
                    match out {
                        Some(path) => std::fs::write(path, json)?,
                        None => println!("{json}"),
                    }
                }
            }
        },

        Command::Aggregate {
            config,
            shot,
            dump_map,
        } => {
            let cfg = load_config(&config.config, cli.seed)?;
            let doc = load_document(&cfg)?;
            let enc = SyntheticEncoder::new(cfg.encoder.clone())?;
            let set = build_prompt_set(&doc, &cfg.anomaly_words, cfg.train.n_ab, cfg.train.seed)?;
            let params = init_params(&set, cfg.encoder.token_embedding_dim, cfg.train.seed);
            let banks = encode_banks(&set, &params, &enc)?;
            let factory =
                SceneFactory::new(&doc, &enc, cfg.native_h, cfg.native_w, cfg.feature_gain)?;
            let scenes = factory.shots(cfg.shots, cfg.train.seed)?;
            let scene = scenes.get(shot).ok_or_else(|| Error::Config(format!(
                "shot {shot} out of range (have {})",
                scenes.len()
            )))?;
            let highres = enc.encode_scene_highres(scene, cfg.highres_factor)?;
            let map = aggregate_regions(&highres, &banks)?;
            let mut sizes = vec![0usize; map.max_label() + 1];
            for &l in &map.labels {
                sizes[l] += 1;
            }
            println!(
                "region map {}x{}: {}",
                map.h,
                map.w,
                sizes
                    .iter()
                    .enumerate()
                    .map(|(l, n)| format!("label {l}: {n}"))
                    .collect::<Vec<_>>()
                    .join(", ")
            );
            if let Some(path) = dump_map {
                write_region_pgm(&map, &path)?;
                eprintln!("wrote {}", path.display());
            }
        }

        Command::Train {
            config,
            grad_check,
            points,
            out_dir,
        } => {
            let cfg = load_config(&config.config, cli.seed)?;
            if grad_check {
                let report = run_grad_checks(cfg.train.seed, points, DEFAULT_TOLERANCE)?;
                println!("{}", serde_json::to_string_pretty(&report)?);
                if !report.passed {
                    return Err(Error::Invalid {
                        context: "gradient check",
                        message: "at least one chain exceeded tolerance".into(),
                    });
                }
                return Ok(());
            }
            let (model, trace) = run_training(&cfg)?;
            let base = out_dir.unwrap_or_else(|| cfg.bundle_dir.clone());
            let dir = save_bundle(&base, &model, &trace, None)?;
            println!("trained bundle: {}", dir.display());
            if let (Some(first), Some(last)) = (trace.initial_total(), trace.final_total()) {
                eprintln!("total loss {first:.6} -> {last:.6} over {} epochs", trace.epochs.len());
            }
        }

        Command::QfTrain {
            config,
            bundle,
            out_dir,
        } => {
            let cfg = load_config(&config.config, cli.seed)?;
            let mut model = load_bundle(&bundle)?;
            // The stored snapshot drives dims; the fresh config may adjust
            // the query-former schedule.
            model.config.qf_learning_rate = cfg.qf_learning_rate;
            model.config.qf_epochs = cfg.qf_epochs;
            let qf_trace = train_qf_stage(&mut model)?;
            let align_trace = fgad::align::LossTrace::default();
            let base = out_dir.unwrap_or_else(|| cfg.bundle_dir.clone());
            let dir = save_bundle(&base, &model, &align_trace, Some(&qf_trace))?;
            println!("query-former bundle: {}", dir.display());
            if let (Some(first), Some(last)) = (qf_trace.first(), qf_trace.last()) {
                eprintln!("qf loss {first:.6} -> {last:.6}");
            }
        }

        Command::Infer {
            bundle,
            input,
            out_dir,
        } => {
            let model = load_bundle(&bundle)?;
            let query = load_query(&model, &input)?;
            let result = infer(&model, &query)?;
            std::fs::create_dir_all(&out_dir)?;
            save_score_map(&result.m_v, &out_dir.join("m_v.smap"))?;
            save_score_map(&result.m_p, &out_dir.join("m_p.smap"))?;
            save_score_map(&result.m_pix, &out_dir.join("m_pix.smap"))?;
            write_score_pgm(&result.m_pix, &out_dir.join("m_pix.pgm"))?;
            let summary = serde_json::json!({
                "image_score": result.m_img,
                "class_token_score": result.s_i,
                "max_pixel_score": result.m_pix.max(),
            });
            std::fs::write(
                out_dir.join("summary.json"),
                serde_json::to_string_pretty(&summary)?,
            )?;
            println!("{}", serde_json::to_string(&summary)?);
        }

        Command::Eval {
            config,
            bundle,
            out,
        } => {
            let cfg = load_config(&config.config, cli.seed)?;
            let (model, _trace) = match bundle {
                Some(dir) => (load_bundle(&dir)?, Default::default()),
                None => {
                    let (mut model, trace) = run_training(&cfg)?;
                    train_qf_stage(&mut model)?;
                    (model, trace)
                }
            };
            let factory = SceneFactory::new(
                &model.doc,
                &model.encoder,
                cfg.native_h,
                cfg.native_w,
                cfg.feature_gain,
            )?;
            let mut suites = Vec::new();
            for &seed in &cfg.suite.eval_seeds {
                suites.push(SeedSuite {
                    seed,
                    scenes: factory.test_suite(
                        cfg.suite.normal_images,
                        cfg.suite.anomalous_images,
                        &cfg.anomaly_words,
                        cfg.suite.perturbation_multiple,
                        cfg.suite.anomaly_patches,
                        cfg.suite.patch_size,
                        seed,
                    )?,
                });
            }
            let report = evaluate_dataset(&model, &suites, &cfg)?;
            print!("{}", report.render_table());
            if let Some(path) = out {
                std::fs::write(path, serde_json::to_string_pretty(&report)?)?;
            }
        }

        Command::Bundle { action } => match action {
            BundleAction::Inspect { bundle } => {
                let manifest = verify_bundle(&bundle)?;
                println!("bundle version {}", manifest.bundle_version);
                for (name, hash) in &manifest.files {
                    println!("{hash}  {name}");
                }
                println!("all hashes verified");
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(1)
        }
    }
}
