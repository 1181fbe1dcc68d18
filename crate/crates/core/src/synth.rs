//! Synthetic datasets with a planted, known-ground-truth aspect signal.
//!
//! Exactly one aspect's features carry label information: a class-dependent
//! mean shift of total magnitude `signal_strength * noise_std` along a
//! fixed unit direction (PD gets +shift/2, HC -shift/2). Every other
//! aspect is pure noise. With per-feature noise std `sigma_w` inside a
//! class, the optimal linear probe on the informative aspect has accuracy
//! `Phi(signal_strength * noise_std / (2 * sigma_w))`, which makes the
//! separability of a generated dataset analytically controllable.
//!
//! SSL sequences consist of a label-agnostic channel offset plus per-frame
//! noise. With `couple_ssl` on, a low-rank projection of the informative
//! aspect's features is added to every frame so queries can carry
//! utterance-specific information into the attention.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Label, SampleRecord, Task, FEATURE_MANIFEST_FILE, MANIFEST_FILE, SSL_DIR};
use crate::encoder::{
    AspectFeatureSet, AspectFeatures, AspectManifestEntry, FeatureManifest,
};
use crate::error::{Error, Result};
use crate::rng::{mix_seed, SeededRng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_speakers_per_class: usize,
    pub utterances_per_task: usize,
    pub tasks: Vec<Task>,
    /// Inclusive frame-count range for non-monologue tasks.
    pub t_range: (usize, usize),
    /// Inclusive frame-count range for monologues (longer recordings).
    pub monologue_t_range: (usize, usize),
    pub d: usize,
    pub aspect_names: Vec<String>,
    pub aspect_feature_counts: Vec<usize>,
    pub informative_aspect: usize,
    /// Mean-shift magnitude in units of `noise_std`.
    pub signal_strength: f64,
    pub noise_std: f64,
    /// Std of label-independent per-speaker feature offsets, relative to
    /// `noise_std`.
    pub speaker_offset_std: f64,
    pub couple_ssl: bool,
    /// Scale of the informative-feature projection added to SSL frames.
    pub couple_strength: f64,
    pub ssl_noise_std: f64,
    pub h1: usize,
    pub h2: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_speakers_per_class: 10,
            utterances_per_task: 2,
            tasks: vec![Task::Ddk, Task::Sentences, Task::Monologue],
            t_range: (16, 28),
            monologue_t_range: (160, 280),
            d: 32,
            aspect_names: crate::encoder::DEFAULT_ASPECTS
                .iter()
                .map(|s| s.to_string())
                .collect(),
            aspect_feature_counts: vec![9, 9, 8, 9],
            informative_aspect: 0,
            signal_strength: 10.0,
            noise_std: 1.0,
            speaker_offset_std: 0.25,
            couple_ssl: true,
            couple_strength: 0.3,
            ssl_noise_std: 1.0,
            h1: 16,
            h2: 24,
            dropout: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers_per_class < 2 {
            return Err(Error::Config("need at least 2 speakers per class".into()));
        }
        if self.utterances_per_task == 0 || self.tasks.is_empty() {
            return Err(Error::Config("need at least one utterance per task".into()));
        }
        if self.aspect_names.len() != self.aspect_feature_counts.len()
            || self.aspect_names.is_empty()
        {
            return Err(Error::Config(
                "aspect names and feature counts must align".into(),
            ));
        }
        if self.aspect_feature_counts.contains(&0) {
            return Err(Error::Config("aspects need at least one feature".into()));
        }
        if self.informative_aspect >= self.aspect_names.len() {
            return Err(Error::Config(format!(
                "informative_aspect {} out of range for K={}",
                self.informative_aspect,
                self.aspect_names.len()
            )));
        }
        for (lo, hi) in [self.t_range, self.monologue_t_range] {
            if lo == 0 || hi < lo {
                return Err(Error::Config(format!("bad frame range ({lo}, {hi})")));
            }
        }
        if self.d == 0 || self.h1 == 0 || self.h2 == 0 {
            return Err(Error::Config("dims must be positive".into()));
        }
        if self.signal_strength < 0.0 || self.noise_std <= 0.0 {
            return Err(Error::Config("bad signal/noise configuration".into()));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.aspect_names.len()
    }

    pub fn feature_manifest(&self) -> FeatureManifest {
        FeatureManifest {
            aspects: self
                .aspect_names
                .iter()
                .zip(&self.aspect_feature_counts)
                .map(|(name, &count)| AspectManifestEntry {
                    name: name.clone(),
                    feature_names: (0..count).map(|j| format!("{name}_{j:02}")).collect(),
                })
                .collect(),
            d: self.d,
            h1: self.h1,
            h2: self.h2,
            dropout: self.dropout,
        }
    }

    /// Within-class per-feature standard deviation (noise plus speaker
    /// offset variance).
    pub fn within_class_std(&self) -> f64 {
        (self.noise_std * self.noise_std
            + (self.speaker_offset_std * self.noise_std).powi(2))
        .sqrt()
    }

    /// Accuracy of the optimal linear probe on the informative aspect,
    /// from the Gaussian error function.
    pub fn bayes_accuracy(&self) -> f64 {
        let d_prime = self.signal_strength * self.noise_std / self.within_class_std();
        crate::stats::standard_normal_cdf(d_prime / 2.0)
    }
}

/// Fixed per-dataset structure derived from the seed.
struct Blueprint {
    /// Unit direction of the planted shift, length F_inf.
    pattern: Vec<f64>,
    /// Label-agnostic SSL channel offsets, length D.
    channel_base: Vec<f64>,
    /// Low-rank coupling: informative features -> rank `r` -> channels.
    couple_in: Vec<Vec<f64>>,  // r x F_inf
    couple_out: Vec<Vec<f64>>, // r x D
}

const COUPLE_RANK: usize = 4;

fn blueprint(cfg: &SynthConfig) -> Blueprint {
    let f_inf = cfg.aspect_feature_counts[cfg.informative_aspect];
    let mut rng = SeededRng::with_stream(cfg.seed, 0x5E_0001);
    let mut pattern: Vec<f64> = (0..f_inf).map(|_| rng.normal()).collect();
    let norm = pattern.iter().map(|v| v * v).sum::<f64>().sqrt();
    pattern.iter_mut().for_each(|v| *v /= norm);

    let mut rng = SeededRng::with_stream(cfg.seed, 0x5E_0002);
    let channel_base: Vec<f64> = (0..cfg.d).map(|_| rng.normal()).collect();

    let r = COUPLE_RANK.min(cfg.d).min(f_inf);
    let mut rng = SeededRng::with_stream(cfg.seed, 0x5E_0003);
    let couple_in: Vec<Vec<f64>> = (0..r)
        .map(|_| {
            (0..f_inf)
                .map(|_| rng.normal() / (f_inf as f64).sqrt())
                .collect()
        })
        .collect();
    let couple_out: Vec<Vec<f64>> = (0..r)
        .map(|_| (0..cfg.d).map(|_| rng.normal()).collect())
        .collect();
    Blueprint {
        pattern,
        channel_base,
        couple_in,
        couple_out,
    }
}

/// Draws one utterance's feature set. `speaker_offsets` holds one offset
/// vector per aspect; `rng` supplies the per-utterance noise.
fn sample_features(
    cfg: &SynthConfig,
    bp: &Blueprint,
    speaker_offsets: &[Vec<f64>],
    label: Label,
    rng: &mut SeededRng,
) -> AspectFeatureSet {
    let sign = match label {
        Label::Pd => 0.5,
        Label::Hc => -0.5,
    };
    let aspects = cfg
        .aspect_names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let count = cfg.aspect_feature_counts[k];
            let values = (0..count)
                .map(|j| {
                    let mut v = speaker_offsets[k][j] + cfg.noise_std * rng.normal();
                    if k == cfg.informative_aspect {
                        v += sign * cfg.signal_strength * cfg.noise_std * bp.pattern[j];
                    }
                    v
                })
                .collect();
            AspectFeatures {
                name: name.clone(),
                values,
            }
        })
        .collect();
    AspectFeatureSet::new(aspects).expect("valid layout by construction")
}

fn sample_ssl(
    cfg: &SynthConfig,
    bp: &Blueprint,
    features: &AspectFeatureSet,
    t_len: usize,
    rng: &mut SeededRng,
) -> Tensor {
    let mut frame_mean = bp.channel_base.clone();
    if cfg.couple_ssl {
        let x_inf = &features.aspects[cfg.informative_aspect].values;
        for (w_in, w_out) in bp.couple_in.iter().zip(&bp.couple_out) {
            let c: f64 = w_in.iter().zip(x_inf).map(|(w, x)| w * x).sum();
            for (m, w) in frame_mean.iter_mut().zip(w_out) {
                *m += cfg.couple_strength * c * w;
            }
        }
    }
    let mut data = Vec::with_capacity(t_len * cfg.d);
    for _ in 0..t_len {
        for m in &frame_mean {
            data.push(m + cfg.ssl_noise_std * rng.normal());
        }
    }
    Tensor::from_vec(&[t_len, cfg.d], data).expect("valid shape")
}

fn speaker_offsets(cfg: &SynthConfig, speaker_idx: u64) -> Vec<Vec<f64>> {
    let mut rng = SeededRng::with_stream(cfg.seed, mix_seed(0x5E_0004, speaker_idx));
    cfg.aspect_feature_counts
        .iter()
        .map(|&count| {
            (0..count)
                .map(|_| cfg.speaker_offset_std * cfg.noise_std * rng.normal())
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct GenerateSummary {
    pub out_dir: PathBuf,
    pub n_speakers: usize,
    pub n_utterances: usize,
    pub per_task: Vec<(String, usize)>,
    pub bayes_accuracy: f64,
}

/// Writes a full dataset directory: `manifest.jsonl`,
/// `feature_manifest.json`, and one embedding file per utterance.
/// Identical configs produce byte-identical directories.
pub fn generate(cfg: &SynthConfig, out_dir: &Path) -> Result<GenerateSummary> {
    cfg.validate()?;
    let bp = blueprint(cfg);
    std::fs::create_dir_all(out_dir.join(SSL_DIR)).map_err(|e| Error::io(out_dir, e))?;

    let mut samples = Vec::new();
    let mut per_task: Vec<(String, usize)> = cfg
        .tasks
        .iter()
        .map(|t| (t.as_str().to_string(), 0))
        .collect();
    let mut speaker_count = 0u64;
    for label in [Label::Hc, Label::Pd] {
        for s in 0..cfg.n_speakers_per_class {
            let speaker_id = format!("{}{s:03}", label.as_str());
            let offsets = speaker_offsets(cfg, speaker_count);
            for (task_idx, task) in cfg.tasks.iter().enumerate() {
                for u in 0..cfg.utterances_per_task {
                    let utterance_id = format!("{speaker_id}_{}_{u:02}", task.as_str());
                    let mut rng = SeededRng::with_stream(
                        cfg.seed,
                        mix_seed(
                            0x5E_0005,
                            speaker_count
                                .wrapping_mul(1013)
                                .wrapping_add(task_idx as u64 * 131 + u as u64),
                        ),
                    );
                    let features = sample_features(cfg, &bp, &offsets, label, &mut rng);
                    let (lo, hi) = if *task == Task::Monologue {
                        cfg.monologue_t_range
                    } else {
                        cfg.t_range
                    };
                    let t_len = lo + rng.below(hi - lo + 1);
                    let ssl = sample_ssl(cfg, &bp, &features, t_len, &mut rng);
                    let ssl_path = format!("{SSL_DIR}/{utterance_id}.sslemb");
                    crate::ssl_io::write_embeddings(&out_dir.join(&ssl_path), &ssl)?;
                    per_task[task_idx].1 += 1;
                    samples.push(SampleRecord {
                        utterance_id,
                        speaker_id: speaker_id.clone(),
                        task: *task,
                        ssl_path,
                        features,
                        label,
                    });
                }
            }
            speaker_count += 1;
        }
    }
    let dataset = Dataset::new(samples)?;
    dataset.save(&out_dir.join(MANIFEST_FILE))?;
    cfg.feature_manifest().save(&out_dir.join(FEATURE_MANIFEST_FILE))?;
    Ok(GenerateSummary {
        out_dir: out_dir.to_path_buf(),
        n_speakers: 2 * cfg.n_speakers_per_class,
        n_utterances: dataset.len(),
        per_task,
        bayes_accuracy: cfg.bayes_accuracy(),
    })
}

/// In-memory feature sampling (no SSL, no files) for distribution-level
/// tests. Speaker offsets are redrawn per sample.
pub fn sample_feature_population(
    cfg: &SynthConfig,
    n_per_class: usize,
    stream: u64,
) -> Result<(Vec<AspectFeatureSet>, Vec<u8>)> {
    cfg.validate()?;
    let bp = blueprint(cfg);
    let mut rng = SeededRng::with_stream(cfg.seed, mix_seed(0x5E_0006, stream));
    let mut sets = Vec::with_capacity(2 * n_per_class);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    for label in [Label::Hc, Label::Pd] {
        for _ in 0..n_per_class {
            let offsets: Vec<Vec<f64>> = cfg
                .aspect_feature_counts
                .iter()
                .map(|&count| {
                    (0..count)
                        .map(|_| cfg.speaker_offset_std * cfg.noise_std * rng.normal())
                        .collect()
                })
                .collect();
            sets.push(sample_features(cfg, &bp, &offsets, label, &mut rng));
            labels.push(label.index());
        }
    }
    Ok((sets, labels))
}

// ── Planted-signal verification ─────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct PlantCheckReport {
    /// Held-out probe accuracy per aspect, in aspect order.
    pub per_aspect_accuracy: Vec<(String, f64)>,
    pub claimed_informative: usize,
    pub best_aspect: usize,
    /// Informative-aspect accuracy minus the best other aspect's.
    pub margin: f64,
    /// True when the claimed aspect is the unique best.
    pub matches: bool,
}

/// Trains a logistic probe per aspect on a speaker-disjoint split and
/// reports held-out accuracies. The informative aspect's probe should
/// dominate; all others should sit near chance.
pub fn plant_check(dataset: &Dataset, informative_aspect: usize) -> Result<PlantCheckReport> {
    dataset.validate()?;
    let k = dataset.samples[0].features.k();
    if informative_aspect >= k {
        return Err(Error::Config(format!(
            "informative_aspect {informative_aspect} out of range for K={k}"
        )));
    }
    // Deterministic speaker split: within each class's sorted speaker
    // list, even positions train, odd positions test.
    let speakers = dataset.speakers();
    let mut train_speakers = std::collections::BTreeSet::new();
    let mut test_speakers = std::collections::BTreeSet::new();
    for label in [Label::Hc, Label::Pd] {
        for (i, (id, _)) in speakers.iter().filter(|(_, &l)| l == label).enumerate() {
            if i % 2 == 0 {
                train_speakers.insert(id.clone());
            } else {
                test_speakers.insert(id.clone());
            }
        }
    }
    let names = dataset.samples[0].features.names();
    let mut per_aspect_accuracy = Vec::with_capacity(k);
    for aspect in 0..k {
        let collect = |speaker_set: &std::collections::BTreeSet<String>| {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for s in &dataset.samples {
                if speaker_set.contains(&s.speaker_id) {
                    xs.push(s.features.aspects[aspect].values.clone());
                    ys.push(s.label.index() as f64);
                }
            }
            (xs, ys)
        };
        let (x_train, y_train) = collect(&train_speakers);
        let (x_test, y_test) = collect(&test_speakers);
        let acc = logistic_probe_accuracy(&x_train, &y_train, &x_test, &y_test)?;
        per_aspect_accuracy.push((names[aspect].clone(), acc));
    }
    let best_aspect = (0..k)
        .max_by(|&a, &b| {
            per_aspect_accuracy[a]
                .1
                .partial_cmp(&per_aspect_accuracy[b].1)
                .expect("finite accuracy")
        })
        .expect("k >= 1");
    let best_other = (0..k)
        .filter(|&a| a != informative_aspect)
        .map(|a| per_aspect_accuracy[a].1)
        .fold(f64::NEG_INFINITY, f64::max);
    let margin = per_aspect_accuracy[informative_aspect].1 - best_other;
    Ok(PlantCheckReport {
        matches: best_aspect == informative_aspect && margin > 0.0,
        per_aspect_accuracy,
        claimed_informative: informative_aspect,
        best_aspect,
        margin,
    })
}

/// Full-batch gradient-descent logistic regression on z-scored features;
/// returns held-out accuracy.
fn logistic_probe_accuracy(
    x_train: &[Vec<f64>],
    y_train: &[f64],
    x_test: &[Vec<f64>],
    y_test: &[f64],
) -> Result<f64> {
    if x_train.is_empty() || x_test.is_empty() {
        return Err(Error::Data("probe needs train and test samples".into()));
    }
    let dim = x_train[0].len();
    let n = x_train.len() as f64;
    let mut mean = vec![0.0; dim];
    let mut var = vec![0.0; dim];
    for x in x_train {
        for j in 0..dim {
            mean[j] += x[j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    for x in x_train {
        for j in 0..dim {
            var[j] += (x[j] - mean[j]).powi(2);
        }
    }
    var.iter_mut().for_each(|v| *v = (*v / n).max(1e-12));
    let z = |x: &[f64], j: usize| (x[j] - mean[j]) / var[j].sqrt();

    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let lr = 0.5;
    for _ in 0..400 {
        let mut gw = vec![0.0; dim];
        let mut gb = 0.0;
        for (x, &y) in x_train.iter().zip(y_train) {
            let logit: f64 = b + (0..dim).map(|j| w[j] * z(x, j)).sum::<f64>();
            let p = 1.0 / (1.0 + (-logit).exp());
            let err = p - y;
            for j in 0..dim {
                gw[j] += err * z(x, j);
            }
            gb += err;
        }
        for j in 0..dim {
            w[j] -= lr * gw[j] / n;
        }
        b -= lr * gb / n;
    }
    let correct = x_test
        .iter()
        .zip(y_test)
        .filter(|(x, &y)| {
            let logit: f64 = b + (0..dim).map(|j| w[j] * z(x, j)).sum::<f64>();
            (logit >= 0.0) == (y >= 0.5)
        })
        .count();
    Ok(correct as f64 / x_test.len() as f64)
}
