//! Command-line workflow: generate synthetic data, train a model, run the
//! evaluation protocols and the four-variant ablation, export explanation
//! artifacts, and verify gradients.
//!
//! Exit codes: 0 success, 2 usage error, 3 I/O or file-format error,
//! 4 configuration error, 5 data/shape/numeric error. Failures print a
//! one-line JSON object to stderr.

mod config;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use aspectpd::attention::{AttentionVariant, VariantTag};
use aspectpd::dataset::LoadedData;
use aspectpd::encoder::{compute_feature_stats, normalize_features, FeatureStats};
use aspectpd::error::{Error, Result};
use aspectpd::explain::{cohort_summary, export_csv, export_json, render_heatmap_svg, ExplanationRecord};
use aspectpd::gradcheck::{check_primitive, check_variant, PRIMITIVES};
use aspectpd::model::{Model, ModelConfig, TrainSample};
use aspectpd::optim::Adam;
use aspectpd::protocol::{run_protocol_a, run_protocol_b, EvalReport};
use aspectpd::rng::SeededRng;
use aspectpd::tape::{GRAD_CHECK_H, GRAD_CHECK_TOL};

use config::{parse_seeds, RunConfig};

#[derive(Parser)]
#[command(
    name = "aspectpd",
    version,
    about = "Explainable speech-aspect attention models: data synthesis, training, evaluation, explanation export"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct CommonOpts {
    /// JSON config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted-path config override, e.g. --set protocol.epochs=10.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Comma-separated seed list, e.g. --seeds 1,2,3,4,5.
    #[arg(long, global = true)]
    seeds: Option<String>,
    /// Grid workers: 1 = sequential, 0 = one per core.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a planted aspect signal.
    Synth {
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Train one model on a dataset and write a checkpoint.
    Train {
        /// Dataset directory (from `synth` or compatible).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Attention variant: m1, m2, m3 or m4.
        #[arg(long, default_value = "m4")]
        variant: String,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Run evaluation protocol A (per task) or B (combined tasks) for one
    /// variant.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "m4")]
        variant: String,
        /// Protocol: a or b.
        #[arg(long, default_value = "a")]
        protocol: String,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Run protocol B across all four variants with Wilcoxon comparisons.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Export explanation scores (CSV, JSON, SVG) from a trained model.
    Explain {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint written by `train`.
        #[arg(long)]
        ckpt: PathBuf,
        /// Metadata written next to the checkpoint; defaults to
        /// `train_meta.json` beside it.
        #[arg(long)]
        meta: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Render at most this many per-utterance heatmaps.
        #[arg(long, default_value_t = 8)]
        svg_limit: usize,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Verify analytic gradients against finite differences.
    Gradcheck {
        /// Random seeds per check.
        #[arg(long, default_value_t = 100)]
        checks: u64,
        /// Optional directory for a JSON summary.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: CommonOpts,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        let (kind, code) = classify(&e);
        eprintln!(
            "{}",
            serde_json::json!({ "error": { "kind": kind, "message": e.to_string() } })
        );
        std::process::exit(code);
    }
}

fn classify(e: &Error) -> (&'static str, i32) {
    match e {
        Error::Io { .. } => ("io", 3),
        Error::Parse { .. } => ("parse", 3),
        Error::Config(_) => ("config", 4),
        Error::Shape(_) => ("shape", 5),
        Error::Data(_) => ("data", 5),
        Error::Numeric(_) => ("numeric", 5),
    }
}

fn load_config(common: &CommonOpts) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg = cfg.apply_overrides(&common.set)?;
    if let Some(seeds) = &common.seeds {
        let seeds = parse_seeds(seeds)?;
        cfg.synth.seed = seeds[0];
        cfg.protocol.seeds = seeds;
    }
    if let Some(jobs) = common.jobs {
        cfg.protocol.jobs = jobs;
    }
    Ok(cfg)
}

fn ensure_out_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

/// Archives the fully resolved configuration in the output directory so
/// every run is reproducible from its artifacts.
fn write_resolved_config(
    out: &Path,
    command: &str,
    extras: &[(&str, String)],
    cfg: &RunConfig,
) -> Result<()> {
    let mut doc = serde_json::Map::new();
    doc.insert("command".into(), command.into());
    for (k, v) in extras {
        doc.insert((*k).into(), v.clone().into());
    }
    doc.insert(
        "config".into(),
        serde_json::to_value(cfg).expect("config serializes"),
    );
    let path = out.join("config.resolved.json");
    let text = serde_json::to_string_pretty(&doc).expect("doc serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(path, e))
}

fn parse_variant(cfg: &RunConfig, s: &str) -> Result<AttentionVariant> {
    cfg.protocol.variant_for(VariantTag::parse(s)?)
}

fn write_report(out: &Path, report: &EvalReport) -> Result<()> {
    let json_path = out.join("report.json");
    std::fs::write(&json_path, report.to_json()).map_err(|e| Error::io(&json_path, e))?;
    let txt_path = out.join("report.txt");
    std::fs::write(&txt_path, report.to_table()).map_err(|e| Error::io(&txt_path, e))?;
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { out, common } => {
            let cfg = load_config(&common)?;
            ensure_out_dir(&out)?;
            let summary = aspectpd::synth::generate(&cfg.synth, &out)?;
            write_resolved_config(&out, "synth", &[], &cfg)?;
            let path = out.join("summary.json");
            std::fs::write(
                &path,
                serde_json::to_string_pretty(&summary).expect("summary serializes"),
            )
            .map_err(|e| Error::io(&path, e))?;
            println!(
                "wrote {} utterances for {} speakers to {}",
                summary.n_utterances,
                summary.n_speakers,
                out.display()
            );
            Ok(())
        }
        Command::Train {
            data,
            out,
            variant,
            common,
        } => {
            let cfg = load_config(&common)?;
            let variant = parse_variant(&cfg, &variant)?;
            let loaded = LoadedData::load(&data)?;
            ensure_out_dir(&out)?;
            let seed = *cfg.protocol.seeds.first().unwrap_or(&1);
            let (model, stats, final_loss) = train_model(&loaded, variant, &cfg, seed)?;
            let ckpt = out.join("model.ckpt");
            model.save_params(&ckpt)?;
            let meta = TrainMeta {
                model: model.cfg.clone(),
                stats,
                seed,
                epochs: cfg.protocol.epochs,
                final_loss,
            };
            let meta_path = out.join("train_meta.json");
            std::fs::write(
                &meta_path,
                serde_json::to_string_pretty(&meta).expect("meta serializes"),
            )
            .map_err(|e| Error::io(&meta_path, e))?;
            write_resolved_config(
                &out,
                "train",
                &[
                    ("data", data.display().to_string()),
                    ("variant", variant.label()),
                ],
                &cfg,
            )?;
            println!(
                "trained {} for {} epochs (final loss {final_loss:.4}); checkpoint at {}",
                variant.label(),
                cfg.protocol.epochs,
                ckpt.display()
            );
            Ok(())
        }
        Command::Eval {
            data,
            out,
            variant,
            protocol,
            common,
        } => {
            let cfg = load_config(&common)?;
            let variant = parse_variant(&cfg, &variant)?;
            let loaded = LoadedData::load(&data)?;
            ensure_out_dir(&out)?;
            let report = match protocol.to_ascii_lowercase().as_str() {
                "a" => run_protocol_a(&loaded, variant, &cfg.protocol)?,
                "b" => run_protocol_b(&loaded, &[variant], &cfg.protocol)?,
                other => {
                    return Err(Error::Config(format!(
                        "unknown protocol {other:?} (expected a or b)"
                    )))
                }
            };
            write_report(&out, &report)?;
            write_resolved_config(
                &out,
                "eval",
                &[
                    ("data", data.display().to_string()),
                    ("variant", variant.label()),
                    ("protocol", protocol.clone()),
                ],
                &cfg,
            )?;
            print!("{}", report.to_table());
            Ok(())
        }
        Command::Ablate { data, out, common } => {
            let cfg = load_config(&common)?;
            let loaded = LoadedData::load(&data)?;
            ensure_out_dir(&out)?;
            let variants = VariantTag::ALL
                .iter()
                .map(|&t| cfg.protocol.variant_for(t))
                .collect::<Result<Vec<_>>>()?;
            let report = run_protocol_b(&loaded, &variants, &cfg.protocol)?;
            write_report(&out, &report)?;
            write_resolved_config(
                &out,
                "ablate",
                &[("data", data.display().to_string())],
                &cfg,
            )?;
            print!("{}", report.to_table());
            Ok(())
        }
        Command::Explain {
            data,
            ckpt,
            meta,
            out,
            svg_limit,
            common,
        } => {
            let cfg = load_config(&common)?;
            let loaded = LoadedData::load(&data)?;
            ensure_out_dir(&out)?;
            let meta_path = meta.unwrap_or_else(|| {
                ckpt.parent()
                    .unwrap_or_else(|| Path::new("."))
                    .join("train_meta.json")
            });
            let meta_text =
                std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
            let meta: TrainMeta = serde_json::from_str(&meta_text)
                .map_err(|e| Error::parse(&meta_path, e.to_string()))?;
            if meta.model.variant.tag != VariantTag::M4 {
                return Err(Error::Config(
                    "explanation export needs an aspect-attention (m4) checkpoint".into(),
                ));
            }
            let model = Model::load_params(meta.model.clone(), &ckpt)?;
            let names = loaded.manifest.aspect_names();
            let mut rng = SeededRng::new(meta.seed);
            let mut records = Vec::new();
            for record in &loaded.dataset.samples {
                let ssl = loaded.load_ssl(record)?;
                let features = normalize_features(&record.features, &meta.stats)?;
                let output = model.forward(&ssl, &features, &mut rng, false)?;
                records.push(ExplanationRecord::from_prediction(
                    &record.utterance_id,
                    &names,
                    &output,
                    record.label,
                )?);
            }
            export_csv(&records, &out.join("explanations.csv"))?;
            export_json(&records, &out.join("explanations.json"))?;
            let cohort = cohort_summary(&records)?;
            let cohort_path = out.join("cohort_summary.json");
            std::fs::write(
                &cohort_path,
                serde_json::to_string_pretty(&cohort).expect("summary serializes"),
            )
            .map_err(|e| Error::io(&cohort_path, e))?;
            let svg_dir = out.join("svg");
            ensure_out_dir(&svg_dir)?;
            for record in records.iter().take(svg_limit) {
                render_heatmap_svg(
                    record,
                    &svg_dir.join(format!("{}.svg", record.utterance_id)),
                )?;
            }
            write_resolved_config(
                &out,
                "explain",
                &[
                    ("data", data.display().to_string()),
                    ("ckpt", ckpt.display().to_string()),
                ],
                &cfg,
            )?;
            println!(
                "exported {} records to {} ({} heatmaps)",
                records.len(),
                out.display(),
                records.len().min(svg_limit)
            );
            Ok(())
        }
        Command::Gradcheck { checks, out, common } => {
            let _ = load_config(&common)?; // validates overrides even if unused
            let mut failures = 0usize;
            let mut summary = Vec::new();
            for name in PRIMITIVES {
                let mut worst = 0.0f64;
                for seed in 0..checks {
                    let report = check_primitive(name, seed, GRAD_CHECK_H, GRAD_CHECK_TOL)?;
                    worst = worst.max(report.max_rel_err());
                }
                let ok = worst < GRAD_CHECK_TOL;
                failures += usize::from(!ok);
                println!(
                    "gradcheck primitive {name}: {} (max rel err {worst:.3e} over {checks} seeds)",
                    if ok { "PASS" } else { "FAIL" }
                );
                summary.push((format!("primitive/{name}"), worst, ok));
            }
            for variant in all_variants()? {
                let mut worst = 0.0f64;
                for seed in 0..checks {
                    let report = check_variant(variant, seed, GRAD_CHECK_H, GRAD_CHECK_TOL)?;
                    worst = worst.max(report.max_rel_err());
                }
                let ok = worst < GRAD_CHECK_TOL;
                failures += usize::from(!ok);
                println!(
                    "gradcheck variant {}: {} (max rel err {worst:.3e} over {checks} seeds)",
                    variant.label(),
                    if ok { "PASS" } else { "FAIL" }
                );
                summary.push((format!("variant/{}", variant.label()), worst, ok));
            }
            if let Some(out) = out {
                ensure_out_dir(&out)?;
                let doc: Vec<serde_json::Value> = summary
                    .iter()
                    .map(|(name, err, ok)| {
                        serde_json::json!({ "check": name, "max_rel_err": err, "pass": ok })
                    })
                    .collect();
                let path = out.join("gradcheck.json");
                std::fs::write(
                    &path,
                    serde_json::to_string_pretty(&doc).expect("summary serializes"),
                )
                .map_err(|e| Error::io(&path, e))?;
            }
            if failures > 0 {
                return Err(Error::Numeric(format!("{failures} gradient checks failed")));
            }
            Ok(())
        }
    }
}

fn all_variants() -> Result<Vec<AttentionVariant>> {
    use aspectpd::attention::AttentionHead;
    Ok(vec![
        AttentionVariant::new(VariantTag::M1, AttentionHead::Embedding)?,
        AttentionVariant::new(VariantTag::M1, AttentionHead::Temporal)?,
        AttentionVariant::new(VariantTag::M2, AttentionHead::Embedding)?,
        AttentionVariant::new(VariantTag::M2, AttentionHead::Temporal)?,
        AttentionVariant::new(VariantTag::M3, AttentionHead::Embedding)?,
        AttentionVariant::new(VariantTag::M3, AttentionHead::Temporal)?,
        AttentionVariant::m4(),
    ])
}

#[derive(serde::Serialize, serde::Deserialize)]
struct TrainMeta {
    model: ModelConfig,
    stats: FeatureStats,
    seed: u64,
    epochs: usize,
    final_loss: f64,
}

/// Trains one model on the whole dataset (no held-out split; evaluation
/// belongs to `eval`/`ablate`).
fn train_model(
    data: &LoadedData,
    variant: AttentionVariant,
    cfg: &RunConfig,
    seed: u64,
) -> Result<(Model, FeatureStats, f64)> {
    let stats = compute_feature_stats(
        data.dataset
            .samples
            .iter()
            .map(|s| (s.speaker_id.as_str(), &s.features)),
    )?;
    let samples: Vec<TrainSample> = data
        .dataset
        .samples
        .iter()
        .map(|s| {
            Ok(TrainSample {
                ssl: data.load_ssl(s)?,
                features: normalize_features(&s.features, &stats)?,
                label: s.label.index(),
            })
        })
        .collect::<Result<_>>()?;
    let model_cfg = ModelConfig::from_manifest(variant, &data.manifest, seed)?;
    let mut model = Model::init(model_cfg)?;
    let mut adam = Adam::new(cfg.protocol.adam, &model.params);
    let mut rng = SeededRng::with_stream(seed, 0x42);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut final_loss = f64::NAN;
    for _ in 0..cfg.protocol.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.protocol.batch_size.max(1)) {
            let batch: Vec<TrainSample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            epoch_loss += model.backward_step(&batch, &mut adam, &mut rng)?;
            batches += 1;
        }
        final_loss = epoch_loss / batches.max(1) as f64;
    }
    Ok((model, stats, final_loss))
}
