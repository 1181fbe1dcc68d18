//! Speaker-independent nested cross-validation splits.
//!
//! Splitting happens at the speaker level, stratified by class: each
//! class's speakers are shuffled with the given seed and dealt round-robin
//! into the outer test folds, so every speaker lands in exactly one outer
//! test fold and train/test speakers never overlap. Inner folds partition
//! each outer fold's training speakers the same way for model selection.

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Label};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InnerFold {
    pub train_speakers: Vec<String>,
    pub val_speakers: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OuterFold {
    pub train_speakers: Vec<String>,
    pub test_speakers: Vec<String>,
    pub inner: Vec<InnerFold>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldPlan {
    pub seed: u64,
    pub outer: Vec<OuterFold>,
}

impl FoldPlan {
    /// Every speaker appears in exactly one outer test fold.
    pub fn is_partition(&self) -> bool {
        let mut seen = std::collections::BTreeSet::new();
        for fold in &self.outer {
            for s in &fold.test_speakers {
                if !seen.insert(s.clone()) {
                    return false;
                }
            }
            for s in &fold.train_speakers {
                if fold.test_speakers.contains(s) {
                    return false;
                }
            }
        }
        true
    }
}

/// Builds a speaker-stratified nested cross-validation plan.
pub fn make_folds(
    dataset: &Dataset,
    n_outer: usize,
    n_inner: usize,
    seed: u64,
) -> Result<FoldPlan> {
    make_folds_for_speakers(&dataset.speakers(), n_outer, n_inner, seed)
}

/// Same plan construction from a speaker-to-label map.
pub fn make_folds_for_speakers(
    speakers: &std::collections::BTreeMap<String, Label>,
    n_outer: usize,
    n_inner: usize,
    seed: u64,
) -> Result<FoldPlan> {
    if n_outer < 2 {
        return Err(Error::Config("need at least 2 outer folds".into()));
    }
    if n_inner < 1 {
        return Err(Error::Config("need at least 1 inner fold".into()));
    }
    let mut by_class: [Vec<String>; 2] = [Vec::new(), Vec::new()];
    for (id, label) in speakers {
        by_class[label.index() as usize].push(id.clone());
    }
    for (class, list) in by_class.iter().enumerate() {
        if list.len() < 2 {
            let name = if class == 0 { Label::Hc } else { Label::Pd };
            return Err(Error::Data(format!(
                "need at least 2 speakers of class {}, got {}",
                name.as_str(),
                list.len()
            )));
        }
    }
    if by_class.iter().map(|c| c.len()).sum::<usize>() < n_outer {
        return Err(Error::Data(format!(
            "cannot make {n_outer} folds from {} speakers",
            speakers.len()
        )));
    }

    let mut buckets: Vec<Vec<String>> = vec![Vec::new(); n_outer];
    for (class, list) in by_class.iter().enumerate() {
        let mut shuffled = list.clone();
        SeededRng::with_stream(seed, 0xF01D + class as u64).shuffle(&mut shuffled);
        for (i, s) in shuffled.into_iter().enumerate() {
            buckets[i % n_outer].push(s);
        }
    }

    let all: Vec<String> = speakers.keys().cloned().collect();
    let outer = buckets
        .iter()
        .enumerate()
        .map(|(fold_idx, test)| {
            let train: Vec<String> = all
                .iter()
                .filter(|s| !test.contains(s))
                .cloned()
                .collect();
            let inner = make_inner(&train, speakers, n_inner, seed, fold_idx as u64);
            OuterFold {
                train_speakers: train,
                test_speakers: test.clone(),
                inner,
            }
        })
        .collect();
    Ok(FoldPlan { seed, outer })
}

fn make_inner(
    train: &[String],
    labels: &std::collections::BTreeMap<String, Label>,
    n_inner: usize,
    seed: u64,
    fold_idx: u64,
) -> Vec<InnerFold> {
    let n_inner = n_inner.min(train.len());
    let mut buckets: Vec<Vec<String>> = vec![Vec::new(); n_inner];
    for class in 0..2u8 {
        let mut members: Vec<String> = train
            .iter()
            .filter(|s| labels[*s].index() == class)
            .cloned()
            .collect();
        SeededRng::with_stream(seed, 0x1F01D + 2 * fold_idx + class as u64).shuffle(&mut members);
        for (i, s) in members.into_iter().enumerate() {
            buckets[i % n_inner].push(s);
        }
    }
    buckets
        .iter()
        .map(|val| InnerFold {
            train_speakers: train
                .iter()
                .filter(|s| !val.contains(s))
                .cloned()
                .collect(),
            val_speakers: val.clone(),
        })
        .collect()
}
