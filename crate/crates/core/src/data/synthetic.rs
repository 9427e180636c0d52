//! Synthetic-event benchmark generator.
//!
//! Items are built from a vocabulary of unit-norm latent event vectors:
//! each item picks a handful of events and renders them as noisy feature
//! rows in both modalities (several frames per event on the audio side,
//! several words per event on the text side). A configurable fraction of
//! items are hard negatives: clones of another item with exactly one event
//! swapped, so only the rows of the differing event tell them apart.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::data::manifest::{Manifest, ManifestPair, RetrievalDataset};
use crate::data::pack::FeaturePack;
use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticConfig {
    /// Number of latent events in the vocabulary.
    pub vocab_size: usize,
    pub dim: usize,
    pub items: usize,
    pub events_per_item: usize,
    /// Audio rows rendered per event.
    pub frames_per_event: usize,
    /// Text rows rendered per event.
    pub words_per_event: usize,
    pub noise_sigma: f64,
    /// Fraction of items generated as one-event-swapped clones.
    pub hard_negative_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            vocab_size: 32,
            dim: 16,
            items: 64,
            events_per_item: 3,
            frames_per_event: 3,
            words_per_event: 2,
            noise_sigma: 0.05,
            hard_negative_fraction: 0.25,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("dim", self.dim),
            ("items", self.items),
            ("events_per_item", self.events_per_item),
            ("frames_per_event", self.frames_per_event),
            ("words_per_event", self.words_per_event),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.events_per_item > self.vocab_size {
            return Err(Error::Config(format!(
                "events_per_item ({}) exceeds vocab_size ({})",
                self.events_per_item, self.vocab_size
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !(0.0..=1.0).contains(&self.hard_negative_fraction) {
            return Err(Error::Config(format!(
                "hard_negative_fraction must be in [0, 1], got {}",
                self.hard_negative_fraction
            )));
        }
        Ok(())
    }
}

/// How a hard-negative item was derived.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HardNegativeInfo {
    /// Item it was cloned from.
    pub source: usize,
    /// Which event slot was swapped.
    pub slot: usize,
    pub old_event: usize,
    pub new_event: usize,
}

/// Ground-truth alignment: which latent event produced each feature row.
#[derive(Clone, Debug)]
pub struct EventAssignment {
    /// Event vocabulary (unit vectors, f32-quantized like the features).
    pub event_vectors: Vec<Vec<f64>>,
    /// Event ids per item, in slot order.
    pub item_events: Vec<Vec<usize>>,
    /// Per item: the event id behind each audio row.
    pub audio_row_events: Vec<Vec<usize>>,
    /// Per item: the event id behind each text row.
    pub text_row_events: Vec<Vec<usize>>,
    /// Per item: provenance when the item is a hard negative.
    pub hard_negatives: Vec<Option<HardNegativeInfo>>,
}

const MAX_REDRAWS: usize = 10_000;
const NEAR_DUPLICATE_COSINE: f64 = 0.95;

/// Draws `count` unit-norm event vectors; candidates with cosine above
/// 0.95 against an already-drawn event are rejected and redrawn so the
/// vocabulary stays separable.
pub fn draw_event_vectors<R: Rng>(count: usize, dim: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    let mut events: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut attempts = 0;
    while events.len() < count {
        attempts += 1;
        if attempts > MAX_REDRAWS {
            return Err(Error::Config(format!(
                "could not draw {count} separable event vectors in dim {dim}"
            )));
        }
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        for x in &mut v {
            *x /= norm;
        }
        let near_duplicate = events.iter().any(|e| {
            let cos: f64 = e.iter().zip(&v).map(|(a, b)| a * b).sum();
            cos > NEAR_DUPLICATE_COSINE
        });
        if !near_duplicate {
            events.push(v);
        }
    }
    Ok(events)
}

/// Renders one modality of one item: `rows_per_event` noisy copies of each
/// listed event, in slot order. Values are quantized through f32 so they
/// survive a pack round trip bit-exactly.
pub fn render_item<R: Rng>(
    events: &[Vec<f64>],
    event_ids: &[usize],
    rows_per_event: usize,
    sigma: f64,
    rng: &mut R,
) -> FeatureMatrix {
    let dim = events[0].len();
    let mut rows = Vec::with_capacity(event_ids.len() * rows_per_event);
    let noise = if sigma > 0.0 { Some(Normal::new(0.0, sigma).expect("valid sigma")) } else { None };
    for &eid in event_ids {
        for _ in 0..rows_per_event {
            let row: Vec<f64> = events[eid]
                .iter()
                .map(|&v| {
                    let n = noise.as_ref().map_or(0.0, |d| d.sample(rng));
                    ((v + n) as f32) as f64
                })
                .take(dim)
                .collect();
            rows.push(row);
        }
    }
    FeatureMatrix::from_rows(&rows).expect("rendered features are finite and non-empty")
}

fn sample_distinct<R: Rng>(rng: &mut R, upper: usize, count: usize) -> Vec<usize> {
    // Partial Fisher-Yates over the index range.
    let mut pool: Vec<usize> = (0..upper).collect();
    for i in 0..count {
        let j = rng.gen_range(i..upper);
        pool.swap(i, j);
    }
    pool.truncate(count);
    pool
}

/// Generates a full desk-scale dataset plus its alignment oracle. A pure
/// function of the config: the same seed reproduces the dataset exactly.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<(RetrievalDataset, EventAssignment)> {
    cfg.validate()?;
    let n_hard = (cfg.items as f64 * cfg.hard_negative_fraction).floor() as usize;
    let n_base = cfg.items - n_hard;
    if n_hard > 0 && n_base == 0 {
        return Err(Error::Config(
            "hard negatives need at least one independently drawn item to clone".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let events = draw_event_vectors(cfg.vocab_size, cfg.dim, &mut rng)?;

    let mut item_events: Vec<Vec<usize>> = Vec::with_capacity(cfg.items);
    let mut hard_negatives: Vec<Option<HardNegativeInfo>> = vec![None; cfg.items];
    for _ in 0..n_base {
        item_events.push(sample_distinct(&mut rng, cfg.vocab_size, cfg.events_per_item));
    }
    for h in 0..n_hard {
        let source = rng.gen_range(0..n_base);
        let slot = rng.gen_range(0..cfg.events_per_item);
        let mut list = item_events[source].clone();
        let old_event = list[slot];
        let new_event = loop {
            let candidate = rng.gen_range(0..cfg.vocab_size);
            if !list.contains(&candidate) {
                break candidate;
            }
        };
        list[slot] = new_event;
        hard_negatives[n_base + h] = Some(HardNegativeInfo { source, slot, old_event, new_event });
        item_events.push(list);
    }

    let mut audio_records = Vec::with_capacity(cfg.items);
    let mut text_records = Vec::with_capacity(cfg.items);
    let mut audio_row_events = Vec::with_capacity(cfg.items);
    let mut text_row_events = Vec::with_capacity(cfg.items);
    let mut pairs = Vec::with_capacity(cfg.items);
    for (i, list) in item_events.iter().enumerate() {
        let audio_id = format!("a{i:04}");
        let text_id = format!("t{i:04}");
        let audio = render_item(&events, list, cfg.frames_per_event, cfg.noise_sigma, &mut rng);
        let text = render_item(&events, list, cfg.words_per_event, cfg.noise_sigma, &mut rng);
        audio_records.push((audio_id.clone(), audio));
        text_records.push((text_id.clone(), text));
        audio_row_events.push(repeat_each(list, cfg.frames_per_event));
        text_row_events.push(repeat_each(list, cfg.words_per_event));
        pairs.push(ManifestPair { audio_id, caption_ids: vec![text_id] });
    }

    let manifest = Manifest {
        split: "train".into(),
        audio_pack: String::new(),
        text_pack: String::new(),
        pairs,
    };
    let dataset = RetrievalDataset::from_manifest(
        &manifest,
        FeaturePack::new(audio_records)?,
        FeaturePack::new(text_records)?,
    )?;

    let event_vectors = events
        .iter()
        .map(|e| e.iter().map(|&v| (v as f32) as f64).collect())
        .collect();
    Ok((
        dataset,
        EventAssignment {
            event_vectors,
            item_events,
            audio_row_events,
            text_row_events,
            hard_negatives,
        },
    ))
}

fn repeat_each(events: &[usize], times: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(events.len() * times);
    for &e in events {
        for _ in 0..times {
            out.push(e);
        }
    }
    out
}
