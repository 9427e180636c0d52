//! Dataset manifests: the textual binding between item identifiers, the
//! per-modality feature packs, and query-to-relevant-context ground truth.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::pack::{read_pack_file, FeaturePack};
use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Valid => write!(f, "valid"),
            Split::Test => write!(f, "test"),
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(vec![format!(
                "unknown split {other:?} (expected train, valid, or test)"
            )])),
        }
    }
}

/// One ground-truth pair: an audio item and its caption ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestPair {
    pub audio_id: String,
    pub caption_ids: Vec<String>,
}

/// On-disk manifest. Pack paths are resolved relative to the manifest file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub split: String,
    pub audio_pack: String,
    pub text_pack: String,
    pub pairs: Vec<ManifestPair>,
}

pub fn load_manifest_file(path: impl AsRef<Path>) -> Result<Manifest> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn save_manifest_file(path: impl AsRef<Path>, manifest: &Manifest) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// A resolved pair: ids plus positions into the packs.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetPair {
    pub audio_id: String,
    pub audio_pos: usize,
    pub caption_ids: Vec<String>,
    pub caption_positions: Vec<usize>,
}

/// Validated dataset: both packs plus resolved ground truth for one split.
#[derive(Clone, Debug)]
pub struct RetrievalDataset {
    pub split: Split,
    pub audio: FeaturePack,
    pub text: FeaturePack,
    pairs: Vec<DatasetPair>,
}

impl RetrievalDataset {
    /// Cross-validates every reference in the manifest against the packs;
    /// all offenders are reported together.
    pub fn from_manifest(manifest: &Manifest, audio: FeaturePack, text: FeaturePack) -> Result<Self> {
        let mut problems = Vec::new();
        let split = match manifest.split.parse::<Split>() {
            Ok(s) => Some(s),
            Err(Error::Validation(mut v)) => {
                problems.append(&mut v);
                None
            }
            Err(e) => return Err(e),
        };

        let mut seen_audio = std::collections::BTreeSet::new();
        let mut seen_caption = std::collections::BTreeSet::new();
        let mut pairs = Vec::with_capacity(manifest.pairs.len());
        for pair in &manifest.pairs {
            if !seen_audio.insert(pair.audio_id.clone()) {
                problems.push(format!("audio id {:?} appears in more than one pair", pair.audio_id));
            }
            let audio_pos = match audio.position(&pair.audio_id) {
                Some(p) => p,
                None => {
                    problems.push(format!("audio id {:?} not found in audio pack", pair.audio_id));
                    0
                }
            };
            if pair.caption_ids.is_empty() {
                problems.push(format!("audio id {:?} has no captions", pair.audio_id));
            }
            let mut caption_positions = Vec::with_capacity(pair.caption_ids.len());
            for cid in &pair.caption_ids {
                if !seen_caption.insert(cid.clone()) {
                    problems.push(format!("caption id {cid:?} assigned more than once"));
                }
                match text.position(cid) {
                    Some(p) => caption_positions.push(p),
                    None => problems.push(format!("caption id {cid:?} not found in text pack")),
                }
            }
            pairs.push(DatasetPair {
                audio_id: pair.audio_id.clone(),
                audio_pos,
                caption_ids: pair.caption_ids.clone(),
                caption_positions,
            });
        }

        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        Ok(RetrievalDataset {
            split: split.expect("split parsed"),
            audio,
            text,
            pairs,
        })
    }

    pub fn n_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn caption_count(&self) -> usize {
        self.pairs.iter().map(|p| p.caption_ids.len()).sum()
    }

    pub fn pairs(&self) -> &[DatasetPair] {
        &self.pairs
    }

    pub fn pair(&self, idx: usize) -> &DatasetPair {
        &self.pairs[idx]
    }

    pub fn audio_feature(&self, pair_idx: usize) -> &FeatureMatrix {
        self.audio.by_position(self.pairs[pair_idx].audio_pos)
    }

    pub fn caption_feature(&self, pair_idx: usize, slot: usize) -> &FeatureMatrix {
        self.text.by_position(self.pairs[pair_idx].caption_positions[slot])
    }

    /// All captions in pair-major order as (pair index, slot).
    pub fn flat_captions(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.caption_count());
        for (pi, pair) in self.pairs.iter().enumerate() {
            for slot in 0..pair.caption_ids.len() {
                out.push((pi, slot));
            }
        }
        out
    }
}

/// Loads a manifest and the packs it references (paths relative to the
/// manifest's directory), producing a validated dataset.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<RetrievalDataset> {
    let manifest_path = manifest_path.as_ref();
    let manifest = load_manifest_file(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let audio = read_pack_file(base.join(&manifest.audio_pack))?;
    let text = read_pack_file(base.join(&manifest.text_pack))?;
    RetrievalDataset::from_manifest(&manifest, audio, text)
}
