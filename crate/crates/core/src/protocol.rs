//! The two evaluation protocols.
//!
//! Protocol A trains and tests per task (one report row per task,
//! including the derived Split-Mono task). Protocol B trains on the
//! combined DDK + sentences + monologue subset and reports all six
//! metrics, with Wilcoxon signed-rank comparisons between variants.
//!
//! Both protocols run speaker-independent nested cross-validation, repeat
//! everything over a list of seeds, aggregate as mean and std across folds
//! and then average those across seeds, and are pure functions of
//! `(dataset, config, seeds)`: the fold x seed x variant grid may execute
//! on a thread pool, but job outputs are merged in deterministic order.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionHead, AttentionVariant, VariantTag};
use crate::dataset::{Label, LoadedData, SampleRecord, Task};
use crate::encoder::{compute_feature_stats, normalize_features, AspectFeatureSet};
use crate::error::{Error, Result};
use crate::exec::{map_jobs, Parallelism};
use crate::folds::{make_folds_for_speakers, FoldPlan};
use crate::metrics::{compute_metrics, MetricSet};
use crate::model::{Model, ModelConfig, TrainSample};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{mix_seed, SeededRng};
use crate::stats::wilcoxon_signed_rank;
use crate::tensor::Tensor;

pub use crate::ssl_io::read_embeddings as load_ssl_embeddings;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolKind {
    A,
    B,
}

/// Which paired vectors feed the Wilcoxon test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonPairing {
    /// One value per outer fold, averaged over seeds (default).
    Folds,
    /// One value per (seed, fold) pair.
    FoldsXSeeds,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub n_outer: usize,
    pub n_inner: usize,
    pub seeds: Vec<u64>,
    /// Decision threshold on the PD probability.
    pub threshold: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Head used by M1-M3 models.
    pub head: AttentionHead,
    pub wilcoxon_pairing: WilcoxonPairing,
    pub split_mono_segments: usize,
    /// Task filter for protocol A; `None` runs every task present.
    pub tasks: Option<Vec<Task>>,
    /// Combined subset for protocol B.
    pub protocol_b_tasks: Vec<Task>,
    /// Worker count for the job grid: 1 = sequential, 0 = all cores.
    pub jobs: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            n_outer: 5,
            n_inner: 2,
            seeds: vec![1, 2, 3, 4, 5],
            threshold: 0.5,
            epochs: 50,
            batch_size: 16,
            adam: AdamConfig::default(),
            head: AttentionHead::Temporal,
            wilcoxon_pairing: WilcoxonPairing::Folds,
            split_mono_segments: 10,
            tasks: None,
            protocol_b_tasks: vec![Task::Ddk, Task::Sentences, Task::Monologue],
            jobs: 0,
        }
    }
}

impl ProtocolConfig {
    pub fn parallelism(&self) -> Parallelism {
        Parallelism::from_jobs(self.jobs)
    }

    pub fn variant_for(&self, tag: VariantTag) -> Result<AttentionVariant> {
        match tag {
            VariantTag::M4 => Ok(AttentionVariant::m4()),
            _ => AttentionVariant::new(tag, self.head),
        }
    }
}

// ── Report structures ───────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub fold: usize,
    pub n_test: usize,
    pub metrics: MetricSet,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub folds: Vec<FoldOutcome>,
    pub fold_mean: MetricSet,
    pub fold_std: MetricSet,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub task_set: String,
    pub seeds: Vec<SeedOutcome>,
    /// Mean over seeds of the per-seed fold means.
    pub mean: MetricSet,
    /// Mean over seeds of the per-seed fold stds.
    pub std: MetricSet,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantOutcome {
    pub variant: String,
    pub head: String,
    pub tasks: Vec<TaskOutcome>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricComparison {
    pub metric: String,
    pub p_value: Option<f64>,
    pub significant: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantComparison {
    pub variant: String,
    pub baseline: String,
    pub metrics: Vec<MetricComparison>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: ProtocolKind,
    pub seeds: Vec<u64>,
    pub variants: Vec<VariantOutcome>,
    pub comparisons: Vec<VariantComparison>,
}

impl EvalReport {
    /// Deterministic pretty JSON; identical runs produce identical bytes.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned-column text table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        match self.protocol {
            ProtocolKind::A => {
                out.push_str(&format!("{:<14}", "task"));
                for v in &self.variants {
                    out.push_str(&format!("{:>18}", format!("{} f1", v.variant)));
                }
                out.push('\n');
                let n_tasks = self.variants.first().map_or(0, |v| v.tasks.len());
                for ti in 0..n_tasks {
                    out.push_str(&format!("{:<14}", self.variants[0].tasks[ti].task_set));
                    for v in &self.variants {
                        let t = &v.tasks[ti];
                        out.push_str(&format!(
                            "{:>18}",
                            format!("{:.3}+/-{:.3}", t.mean.f1, t.std.f1)
                        ));
                    }
                    out.push('\n');
                }
            }
            ProtocolKind::B => {
                out.push_str(&format!("{:<10}", "method"));
                for m in MetricSet::NAMES {
                    out.push_str(&format!("{:>18}", m));
                }
                out.push('\n');
                for v in &self.variants {
                    let stars: std::collections::BTreeMap<&str, bool> = self
                        .comparisons
                        .iter()
                        .find(|c| c.variant == v.variant)
                        .map(|c| {
                            c.metrics
                                .iter()
                                .map(|m| (m.metric.as_str(), m.significant))
                                .collect()
                        })
                        .unwrap_or_default();
                    out.push_str(&format!("{:<10}", v.variant));
                    let t = &v.tasks[0];
                    for m in MetricSet::NAMES {
                        let mean = t.mean.get(m);
                        let std = t.std.get(m);
                        let star = if stars.get(m).copied().unwrap_or(false) {
                            "*"
                        } else {
                            ""
                        };
                        let cell = match (mean, std) {
                            (Some(a), Some(b)) => format!("{a:.3}+/-{b:.3}{star}"),
                            _ => "n/a".to_string(),
                        };
                        out.push_str(&format!("{:>18}", cell));
                    }
                    out.push('\n');
                }
            }
        }
        out
    }
}

// ── Split-Mono segmentation ─────────────────────────────────────────────

/// Splits a `[T, D]` sequence into `n_segments` contiguous,
/// non-overlapping chunks covering every frame, with lengths differing by
/// at most one (longer chunks first).
pub fn segment_recording(ssl: &Tensor, n_segments: usize) -> Result<Vec<Tensor>> {
    if ssl.rank() != 2 {
        return Err(Error::Shape(format!(
            "segment_recording needs [T, D], got {:?}",
            ssl.shape()
        )));
    }
    if n_segments == 0 {
        return Err(Error::Config("n_segments must be positive".into()));
    }
    let t = ssl.dim(0);
    if t < n_segments {
        return Err(Error::Shape(format!(
            "cannot split {t} frames into {n_segments} segments"
        )));
    }
    let d = ssl.dim(1);
    let base = t / n_segments;
    let extra = t % n_segments;
    let mut out = Vec::with_capacity(n_segments);
    let mut row = 0;
    for i in 0..n_segments {
        let len = base + usize::from(i < extra);
        let data = ssl.data()[row * d..(row + len) * d].to_vec();
        out.push(Tensor::from_vec(&[len, d], data)?);
        row += len;
    }
    Ok(out)
}

// ── Grid execution ──────────────────────────────────────────────────────

/// One utterance with its SSL sequence in memory.
#[derive(Debug, Clone)]
struct Prepared {
    speaker_id: String,
    label: Label,
    features: AspectFeatureSet,
    ssl: Tensor,
}

struct TaskSet {
    label: String,
    samples: Vec<Prepared>,
}

fn prepare(record: &SampleRecord, data: &LoadedData) -> Result<Prepared> {
    Ok(Prepared {
        speaker_id: record.speaker_id.clone(),
        label: record.label,
        features: record.features.clone(),
        ssl: data.load_ssl(record)?,
    })
}

fn split_mono_set(data: &LoadedData, segments: usize) -> Result<Option<TaskSet>> {
    let monologues: Vec<&SampleRecord> = data
        .dataset
        .samples
        .iter()
        .filter(|s| s.task == Task::Monologue)
        .collect();
    if monologues.is_empty() {
        return Ok(None);
    }
    let mut samples = Vec::with_capacity(monologues.len() * segments);
    for record in monologues {
        let ssl = data.load_ssl(record)?;
        for chunk in segment_recording(&ssl, segments)? {
            samples.push(Prepared {
                speaker_id: record.speaker_id.clone(),
                label: record.label,
                // Interpretable features are per-recording aggregates, so
                // each clip inherits its source utterance's features.
                features: record.features.clone(),
                ssl: chunk,
            });
        }
    }
    Ok(Some(TaskSet {
        label: "split-mono".to_string(),
        samples,
    }))
}

fn task_sets_for_a(data: &LoadedData, cfg: &ProtocolConfig) -> Result<Vec<TaskSet>> {
    let tasks = match &cfg.tasks {
        Some(ts) if ts.is_empty() => {
            return Err(Error::Config("empty task subset".into()));
        }
        Some(ts) => ts.clone(),
        None => data.dataset.tasks_present(),
    };
    let mut sets = Vec::new();
    for task in &tasks {
        let records: Vec<&SampleRecord> = data
            .dataset
            .samples
            .iter()
            .filter(|s| s.task == *task)
            .collect();
        if records.is_empty() {
            return Err(Error::Data(format!(
                "requested task {} has no utterances",
                task.as_str()
            )));
        }
        sets.push(TaskSet {
            label: task.as_str().to_string(),
            samples: records
                .iter()
                .map(|r| prepare(r, data))
                .collect::<Result<_>>()?,
        });
    }
    if tasks.contains(&Task::Monologue) {
        if let Some(set) = split_mono_set(data, cfg.split_mono_segments)? {
            sets.push(set);
        }
    }
    Ok(sets)
}

fn task_set_for_b(data: &LoadedData, cfg: &ProtocolConfig) -> Result<Vec<TaskSet>> {
    let records: Vec<&SampleRecord> = data
        .dataset
        .samples
        .iter()
        .filter(|s| cfg.protocol_b_tasks.contains(&s.task))
        .collect();
    if records.is_empty() {
        return Err(Error::Data(format!(
            "no utterances in the combined tasks {:?}",
            cfg.protocol_b_tasks
                .iter()
                .map(|t| t.as_str())
                .collect::<Vec<_>>()
        )));
    }
    Ok(vec![TaskSet {
        label: "combined".to_string(),
        samples: records
            .iter()
            .map(|r| prepare(r, data))
            .collect::<Result<_>>()?,
    }])
}

#[derive(Debug, Clone, Copy)]
struct Job {
    variant_idx: usize,
    task_idx: usize,
    seed_idx: usize,
    fold_idx: usize,
}

/// Trains one model on a fold's training speakers and scores its test
/// speakers. Returns the fold metrics.
fn run_fold_job(
    job: &Job,
    variants: &[AttentionVariant],
    task_sets: &[TaskSet],
    plans: &[Vec<FoldPlan>],
    data: &LoadedData,
    cfg: &ProtocolConfig,
) -> Result<FoldOutcome> {
    let variant = variants[job.variant_idx];
    let set = &task_sets[job.task_idx];
    let seed = cfg.seeds[job.seed_idx];
    let fold = &plans[job.task_idx][job.seed_idx].outer[job.fold_idx];
    let train_speakers: BTreeSet<&str> =
        fold.train_speakers.iter().map(|s| s.as_str()).collect();
    let test_speakers: BTreeSet<&str> =
        fold.test_speakers.iter().map(|s| s.as_str()).collect();

    let train: Vec<&Prepared> = set
        .samples
        .iter()
        .filter(|p| train_speakers.contains(p.speaker_id.as_str()))
        .collect();
    let test: Vec<&Prepared> = set
        .samples
        .iter()
        .filter(|p| test_speakers.contains(p.speaker_id.as_str()))
        .collect();
    if train.is_empty() || test.is_empty() {
        return Err(Error::Data(format!(
            "fold {} of {} has an empty split",
            job.fold_idx, set.label
        )));
    }

    // Normalization statistics come from training speakers only; the
    // provenance tag is checked against the test speakers.
    let stats = compute_feature_stats(
        train
            .iter()
            .map(|p| (p.speaker_id.as_str(), &p.features)),
    )?;
    if stats
        .source_speakers
        .iter()
        .any(|s| test_speakers.contains(s.as_str()))
    {
        return Err(Error::Data(
            "normalization statistics include a test speaker".into(),
        ));
    }

    let model_seed = mix_seed(
        mix_seed(mix_seed(seed, 0xC0DE + job.variant_idx as u64), job.task_idx as u64),
        job.fold_idx as u64,
    );
    let model_cfg = ModelConfig::from_manifest(variant, &data.manifest, model_seed)?;
    let mut model = Model::init(model_cfg)?;
    let mut adam = Adam::new(cfg.adam, &model.params);
    let mut rng = SeededRng::with_stream(model_seed, 0x7121);

    let train_samples: Vec<TrainSample> = train
        .iter()
        .map(|p| {
            Ok(TrainSample {
                ssl: p.ssl.clone(),
                features: normalize_features(&p.features, &stats)?,
                label: p.label.index(),
            })
        })
        .collect::<Result<_>>()?;

    let mut order: Vec<usize> = (0..train_samples.len()).collect();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<TrainSample> =
                chunk.iter().map(|&i| train_samples[i].clone()).collect();
            model.backward_step(&batch, &mut adam, &mut rng)?;
        }
    }

    let mut scores = Vec::with_capacity(test.len());
    let mut labels = Vec::with_capacity(test.len());
    for p in &test {
        let features = normalize_features(&p.features, &stats)?;
        let out = model.forward(&p.ssl, &features, &mut rng, false)?;
        scores.push(out.p_positive());
        labels.push(p.label.index());
    }
    let metrics = compute_metrics(&scores, &labels, cfg.threshold)?;
    Ok(FoldOutcome {
        fold: job.fold_idx,
        n_test: test.len(),
        metrics,
    })
}

fn mean_metrics(sets: &[MetricSet]) -> MetricSet {
    let n = sets.len() as f64;
    let avg = |f: fn(&MetricSet) -> f64| sets.iter().map(f).sum::<f64>() / n;
    let aucs: Vec<f64> = sets.iter().filter_map(|m| m.auc).collect();
    MetricSet {
        accuracy: avg(|m| m.accuracy),
        precision: avg(|m| m.precision),
        f1: avg(|m| m.f1),
        auc: if aucs.is_empty() {
            None
        } else {
            Some(aucs.iter().sum::<f64>() / aucs.len() as f64)
        },
        sensitivity: avg(|m| m.sensitivity),
        specificity: avg(|m| m.specificity),
    }
}

/// Population standard deviation per metric.
fn std_metrics(sets: &[MetricSet], mean: &MetricSet) -> MetricSet {
    let n = sets.len() as f64;
    let dev = |f: fn(&MetricSet) -> f64, mu: f64| {
        (sets.iter().map(|m| (f(m) - mu).powi(2)).sum::<f64>() / n).sqrt()
    };
    let aucs: Vec<f64> = sets.iter().filter_map(|m| m.auc).collect();
    let auc_std = mean.auc.map(|mu| {
        (aucs.iter().map(|a| (a - mu).powi(2)).sum::<f64>() / aucs.len() as f64).sqrt()
    });
    MetricSet {
        accuracy: dev(|m| m.accuracy, mean.accuracy),
        precision: dev(|m| m.precision, mean.precision),
        f1: dev(|m| m.f1, mean.f1),
        auc: auc_std,
        sensitivity: dev(|m| m.sensitivity, mean.sensitivity),
        specificity: dev(|m| m.specificity, mean.specificity),
    }
}

fn run_grid(
    data: &LoadedData,
    variants: &[AttentionVariant],
    task_sets: &[TaskSet],
    protocol: ProtocolKind,
    cfg: &ProtocolConfig,
) -> Result<EvalReport> {
    if cfg.seeds.is_empty() {
        return Err(Error::Config("need at least one seed".into()));
    }
    // One fold plan per (task set, seed), shared by every variant so the
    // Wilcoxon pairs are matched.
    let mut plans: Vec<Vec<FoldPlan>> = Vec::with_capacity(task_sets.len());
    for set in task_sets {
        let speakers = set
            .samples
            .iter()
            .map(|p| (p.speaker_id.clone(), p.label))
            .collect();
        let per_seed = cfg
            .seeds
            .iter()
            .map(|&seed| make_folds_for_speakers(&speakers, cfg.n_outer, cfg.n_inner, seed))
            .collect::<Result<Vec<_>>>()?;
        plans.push(per_seed);
    }

    let mut jobs = Vec::new();
    for variant_idx in 0..variants.len() {
        for task_idx in 0..task_sets.len() {
            for seed_idx in 0..cfg.seeds.len() {
                for fold_idx in 0..cfg.n_outer {
                    jobs.push(Job {
                        variant_idx,
                        task_idx,
                        seed_idx,
                        fold_idx,
                    });
                }
            }
        }
    }
    let outcomes = map_jobs(&jobs, cfg.parallelism(), |job| {
        run_fold_job(job, variants, task_sets, &plans, data, cfg)
    });

    // Merge in deterministic grid order.
    let mut results: Vec<Vec<Vec<Vec<FoldOutcome>>>> = variants
        .iter()
        .map(|_| {
            task_sets
                .iter()
                .map(|_| cfg.seeds.iter().map(|_| Vec::new()).collect())
                .collect()
        })
        .collect();
    for (job, outcome) in jobs.iter().zip(outcomes) {
        results[job.variant_idx][job.task_idx][job.seed_idx].push(outcome?);
    }

    let variants_out: Vec<VariantOutcome> = variants
        .iter()
        .enumerate()
        .map(|(vi, variant)| VariantOutcome {
            variant: variant.tag.as_str().to_string(),
            head: variant.head.as_str().to_string(),
            tasks: task_sets
                .iter()
                .enumerate()
                .map(|(ti, set)| {
                    let seeds: Vec<SeedOutcome> = cfg
                        .seeds
                        .iter()
                        .enumerate()
                        .map(|(si, &seed)| {
                            let folds = std::mem::take(&mut results[vi][ti][si]);
                            let per_fold: Vec<MetricSet> =
                                folds.iter().map(|f| f.metrics).collect();
                            let fold_mean = mean_metrics(&per_fold);
                            let fold_std = std_metrics(&per_fold, &fold_mean);
                            SeedOutcome {
                                seed,
                                folds,
                                fold_mean,
                                fold_std,
                            }
                        })
                        .collect();
                    let means: Vec<MetricSet> = seeds.iter().map(|s| s.fold_mean).collect();
                    let stds: Vec<MetricSet> = seeds.iter().map(|s| s.fold_std).collect();
                    TaskOutcome {
                        task_set: set.label.clone(),
                        mean: mean_metrics(&means),
                        std: mean_metrics(&stds),
                        seeds,
                    }
                })
                .collect(),
        })
        .collect();

    let comparisons = if protocol == ProtocolKind::B && variants.len() >= 2 {
        compare_variants(&variants_out, cfg.wilcoxon_pairing)
    } else {
        Vec::new()
    };

    Ok(EvalReport {
        protocol,
        seeds: cfg.seeds.clone(),
        variants: variants_out,
        comparisons,
    })
}

/// Paired metric vectors for one variant's single task set.
fn pairing_vector(outcome: &VariantOutcome, metric: &str, pairing: WilcoxonPairing) -> Vec<Option<f64>> {
    let task = &outcome.tasks[0];
    match pairing {
        WilcoxonPairing::FoldsXSeeds => task
            .seeds
            .iter()
            .flat_map(|s| s.folds.iter().map(|f| f.metrics.get(metric)))
            .collect(),
        WilcoxonPairing::Folds => {
            let n_folds = task.seeds.first().map_or(0, |s| s.folds.len());
            (0..n_folds)
                .map(|fi| {
                    let vals: Vec<f64> = task
                        .seeds
                        .iter()
                        .filter_map(|s| s.folds.get(fi).and_then(|f| f.metrics.get(metric)))
                        .collect();
                    if vals.is_empty() {
                        None
                    } else {
                        Some(vals.iter().sum::<f64>() / vals.len() as f64)
                    }
                })
                .collect()
        }
    }
}

/// Pairwise Wilcoxon comparisons: each variant against the preceding one
/// in the list, and the first against the last. Public so reports can be
/// re-checked from their own fold vectors.
pub fn compare_variants(
    variants: &[VariantOutcome],
    pairing: WilcoxonPairing,
) -> Vec<VariantComparison> {
    let n = variants.len();
    let pairs: Vec<(usize, usize)> = (0..n)
        .map(|i| (i, if i == 0 { n - 1 } else { i - 1 }))
        .collect();
    pairs
        .into_iter()
        .map(|(vi, bi)| {
            let metrics = MetricSet::NAMES
                .iter()
                .map(|&metric| {
                    let a = pairing_vector(&variants[vi], metric, pairing);
                    let b = pairing_vector(&variants[bi], metric, pairing);
                    let paired: Vec<(f64, f64)> = a
                        .iter()
                        .zip(&b)
                        .filter_map(|(x, y)| x.zip(*y))
                        .collect();
                    let xs: Vec<f64> = paired.iter().map(|p| p.0).collect();
                    let ys: Vec<f64> = paired.iter().map(|p| p.1).collect();
                    match wilcoxon_signed_rank(&xs, &ys) {
                        Ok(r) => MetricComparison {
                            metric: metric.to_string(),
                            p_value: Some(r.p_value),
                            significant: r.p_value < 0.05,
                            note: None,
                        },
                        Err(e) => MetricComparison {
                            metric: metric.to_string(),
                            p_value: None,
                            significant: false,
                            note: Some(e.to_string()),
                        },
                    }
                })
                .collect();
            VariantComparison {
                variant: variants[vi].variant.clone(),
                baseline: variants[bi].variant.clone(),
                metrics,
            }
        })
        .collect()
}

/// Protocol A: per-task training and testing (Split-Mono included when
/// monologues are present), one variant.
pub fn run_protocol_a(
    data: &LoadedData,
    variant: AttentionVariant,
    cfg: &ProtocolConfig,
) -> Result<EvalReport> {
    let task_sets = task_sets_for_a(data, cfg)?;
    run_grid(data, &[variant], &task_sets, ProtocolKind::A, cfg)
}

/// Protocol B: combined-task training with six metrics and Wilcoxon
/// comparisons across the given variants.
pub fn run_protocol_b(
    data: &LoadedData,
    variants: &[AttentionVariant],
    cfg: &ProtocolConfig,
) -> Result<EvalReport> {
    if variants.is_empty() {
        return Err(Error::Config("protocol B needs at least one variant".into()));
    }
    let task_sets = task_set_for_b(data, cfg)?;
    run_grid(data, variants, &task_sets, ProtocolKind::B, cfg)
}
