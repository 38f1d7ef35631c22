use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::CtlExample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!("unknown split {other:?}"))),
        }
    }
}

/// Scene-level partition; every pair follows its scene.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitAssignment {
    pub scenes: BTreeMap<String, Split>,
}

impl SplitAssignment {
    pub fn split_of(&self, scene_id: &str) -> Option<Split> {
        self.scenes.get(scene_id).copied()
    }

    /// Examples whose scene is assigned to `split`, in manifest order.
    pub fn select<'a>(&self, examples: &'a [CtlExample], split: Split) -> Vec<&'a CtlExample> {
        examples
            .iter()
            .filter(|e| self.split_of(&e.pair.scene_id) == Some(split))
            .collect()
    }

    pub fn scene_count(&self, split: Split) -> usize {
        self.scenes.values().filter(|s| **s == split).count()
    }
}

/// Shuffles the distinct scene ids with a seeded RNG and cuts the sequence at
/// the rounded cumulative ratios.
pub fn split_scenes(examples: &[CtlExample], ratios: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    if ratios.iter().any(|r| *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    let mut ids: Vec<&str> = examples
        .iter()
        .map(|e| e.pair.scene_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);

    let n = ids.len() as f64;
    let cut_train = (ratios[0] * n).round() as usize;
    let cut_val = (((ratios[0] + ratios[1]) * n).round() as usize).max(cut_train);
    let scenes = ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| {
            let split = if i < cut_train {
                Split::Train
            } else if i < cut_val {
                Split::Val
            } else {
                Split::Test
            };
            (id.to_string(), split)
        })
        .collect();
    Ok(SplitAssignment { scenes })
}

/// One `scene_id<TAB>split` line per scene, sorted by scene id.
pub fn write_split_file(path: &Path, assignment: &SplitAssignment) -> Result<()> {
    let mut out = String::new();
    for (id, split) in &assignment.scenes {
        out.push_str(id);
        out.push('\t');
        out.push_str(split.as_str());
        out.push('\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_split_file(path: &Path) -> Result<SplitAssignment> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut scenes = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::ManifestParse {
            path: path.display().to_string(),
            line: i + 1,
            message,
        };
        let (id, split) = line
            .split_once('\t')
            .ok_or_else(|| err("expected scene_id<TAB>split".into()))?;
        let split: Split = split.trim().parse().map_err(|e: Error| err(e.to_string()))?;
        if scenes.insert(id.to_string(), split).is_some() {
            return Err(err(format!("scene {id:?} listed twice")));
        }
    }
    Ok(SplitAssignment { scenes })
}
