//! Dataset manifests: one JSON record per utterance, stored as JSON lines.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{AspectFeatureSet, FeatureManifest};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const FEATURE_MANIFEST_FILE: &str = "feature_manifest.json";
pub const SSL_DIR: &str = "ssl";

/// Speech elicitation task of an utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Vowels,
    Words,
    Ddk,
    Sentences,
    Read,
    Monologue,
}

impl Task {
    pub const ALL: [Task; 6] = [
        Task::Vowels,
        Task::Words,
        Task::Ddk,
        Task::Sentences,
        Task::Read,
        Task::Monologue,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Vowels => "vowels",
            Task::Words => "words",
            Task::Ddk => "ddk",
            Task::Sentences => "sentences",
            Task::Read => "read",
            Task::Monologue => "monologue",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Task::ALL
            .iter()
            .find(|t| t.as_str() == s.to_ascii_lowercase())
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown task {s:?}")))
    }
}

/// Binary diagnosis label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Hc,
    Pd,
}

impl Label {
    pub fn index(&self) -> u8 {
        match self {
            Label::Hc => 0,
            Label::Pd => 1,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Label::Hc => "hc",
            Label::Pd => "pd",
        }
    }
}

/// One utterance of the dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub utterance_id: String,
    pub speaker_id: String,
    pub task: Task,
    /// Path of the SSL embedding file, relative to the dataset root.
    pub ssl_path: String,
    pub features: AspectFeatureSet,
    pub label: Label,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<SampleRecord>,
}

impl Dataset {
    pub fn new(samples: Vec<SampleRecord>) -> Result<Self> {
        let ds = Dataset { samples };
        ds.validate()?;
        Ok(ds)
    }

    /// Structural checks: non-empty, unique utterance ids, one label per
    /// speaker, finite features.
    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::Data("dataset has no samples".into()));
        }
        let mut ids = BTreeSet::new();
        let mut speaker_label: BTreeMap<&str, Label> = BTreeMap::new();
        for s in &self.samples {
            if !ids.insert(s.utterance_id.as_str()) {
                return Err(Error::Data(format!(
                    "duplicate utterance id {}",
                    s.utterance_id
                )));
            }
            match speaker_label.get(s.speaker_id.as_str()) {
                Some(&l) if l != s.label => {
                    return Err(Error::Data(format!(
                        "speaker {} appears with both labels",
                        s.speaker_id
                    )));
                }
                _ => {
                    speaker_label.insert(&s.speaker_id, s.label);
                }
            }
            s.features.ensure_finite()?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Distinct speakers with their labels, sorted by id.
    pub fn speakers(&self) -> BTreeMap<String, Label> {
        self.samples
            .iter()
            .map(|s| (s.speaker_id.clone(), s.label))
            .collect()
    }

    /// Tasks present, in canonical order.
    pub fn tasks_present(&self) -> Vec<Task> {
        let present: BTreeSet<Task> = self.samples.iter().map(|s| s.task).collect();
        Task::ALL
            .iter()
            .filter(|t| present.contains(t))
            .copied()
            .collect()
    }

    pub fn subset_by_tasks(&self, tasks: &[Task]) -> Dataset {
        Dataset {
            samples: self
                .samples
                .iter()
                .filter(|s| tasks.contains(&s.task))
                .cloned()
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let reader = BufReader::new(file);
        let mut samples = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: SampleRecord = serde_json::from_str(&line)
                .map_err(|e| Error::parse(path, format!("line {}: {e}", i + 1)))?;
            samples.push(record);
        }
        Dataset::new(samples)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for s in &self.samples {
            let line = serde_json::to_string(s).expect("record serializes");
            writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// A dataset directory: manifest, feature manifest, and SSL files.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub root: PathBuf,
    pub manifest: FeatureManifest,
    pub dataset: Dataset,
}

impl LoadedData {
    pub fn load(root: &Path) -> Result<LoadedData> {
        let manifest = FeatureManifest::load(&root.join(FEATURE_MANIFEST_FILE))?;
        let dataset = Dataset::load(&root.join(MANIFEST_FILE))?;
        let names = manifest.aspect_names();
        let counts = manifest.feature_counts();
        for s in &dataset.samples {
            if s.features.names() != names || s.features.feature_counts() != counts {
                return Err(Error::Data(format!(
                    "utterance {} does not match the feature manifest layout",
                    s.utterance_id
                )));
            }
        }
        Ok(LoadedData {
            root: root.to_path_buf(),
            manifest,
            dataset,
        })
    }

    /// Reads one utterance's SSL sequence, checking D against the manifest.
    pub fn load_ssl(&self, record: &SampleRecord) -> Result<Tensor> {
        crate::ssl_io::read_embeddings_expecting(
            &self.root.join(&record.ssl_path),
            self.manifest.d,
        )
    }
}
