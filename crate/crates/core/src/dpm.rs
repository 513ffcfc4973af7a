//! Dynamic pseudo-label memory bank and its update trigger.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ImageId, UnlabeledSample};
use crate::error::{Error, Result};
use crate::geometry::Window;
use crate::grid::{argmax_channels, Image, LabelMap};
use crate::model::Segmenter;
use crate::reliability::{pixel_filter_mask, rank_and_select, score_images, selection_count, ReliabilityScore};
use crate::rng::{stream_rng, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriggerState {
    pub best_val: f64,
    pub count: u32,
    pub gain_threshold: f64,
    pub patience: u32,
}

impl TriggerState {
    pub fn new(best_val: f64, gain_threshold: f64, patience: u32) -> Self {
        Self {
            best_val,
            count: 0,
            gain_threshold,
            patience,
        }
    }
}

/// Fires on a validation gain above the threshold or when patience runs out.
pub fn should_update(current_val: f64, state: &TriggerState) -> bool {
    current_val > state.best_val + state.gain_threshold || state.count > state.patience
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Keep,
    Update,
}

/// One end-of-epoch step: count the epoch, then test the trigger. An update
/// adopts the current score as the new best even when it is lower.
pub fn on_validation(current_val: f64, state: TriggerState) -> (Decision, TriggerState) {
    let mut next = state;
    next.count += 1;
    if should_update(current_val, &next) {
        next.best_val = current_val;
        next.count = 0;
        (Decision::Update, next)
    } else {
        (Decision::Keep, next)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Top-ratio by cross-window reliability.
    #[default]
    Reliable,
    /// Uniformly random subset of the same size.
    Random,
    /// Every unlabeled image.
    All,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BankEntry {
    pub pseudo: LabelMap,
    pub score: Option<f64>,
    pub generation: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MemoryBank {
    pub entries: BTreeMap<ImageId, BankEntry>,
    pub built_at_epoch: usize,
    pub generation: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RebuildSettings {
    pub ratio: f64,
    pub mode: SelectionMode,
    pub win: usize,
    pub min_overlap: usize,
    pub pixel_filter: Option<f64>,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Rebuild {
    pub bank: MemoryBank,
    pub renewal_ratio: f64,
    pub scores: Vec<ReliabilityScore>,
}

impl MemoryBank {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> BTreeSet<ImageId> {
        self.entries.keys().copied().collect()
    }

    /// Scores, selects, and pseudo-labels a fresh bank that wholly replaces
    /// `previous`. `epoch` is recorded as the build epoch.
    pub fn rebuild<S: Segmenter + ?Sized>(
        model: &S,
        unlabeled: &[UnlabeledSample],
        settings: &RebuildSettings,
        previous: Option<&MemoryBank>,
        epoch: usize,
    ) -> Result<Rebuild> {
        if unlabeled.is_empty() {
            return Err(Error::EmptyInput("no unlabeled images to pseudo-label"));
        }
        let generation = previous.map_or(1, |b| b.generation + 1);
        let images: Vec<(ImageId, &Image)> = unlabeled.iter().map(|u| (u.id, &u.image)).collect();
        let mut scores = Vec::new();
        let selected: Vec<ImageId> = match settings.mode {
            SelectionMode::Reliable => {
                scores = score_images(model, &images, settings.win, settings.min_overlap, settings.seed, generation)?;
                rank_and_select(&scores, settings.ratio)?
            }
            SelectionMode::Random => {
                let mut rng = stream_rng(settings.seed, Stream::Selection, generation);
                let k = selection_count(images.len(), settings.ratio);
                let mut picked: Vec<ImageId> = sample(&mut rng, images.len(), k).iter().map(|i| images[i].0).collect();
                picked.sort();
                picked
            }
            SelectionMode::All => images.iter().map(|(id, _)| *id).collect(),
        };
        let score_of: BTreeMap<ImageId, f64> = scores.iter().map(|s| (s.image_id, s.score)).collect();
        let by_id: BTreeMap<ImageId, &Image> = images.iter().copied().collect();
        let entries = selected
            .par_iter()
            .map(|id| {
                let image = by_id[id];
                let conf = model.forward(image, &Window::full(image.height(), image.width()))?;
                let pseudo = match settings.pixel_filter {
                    Some(t) => pixel_filter_mask(&conf, t)?,
                    None => argmax_channels(&conf),
                };
                Ok((
                    *id,
                    BankEntry {
                        pseudo,
                        score: score_of.get(id).copied(),
                        generation,
                    },
                ))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        let bank = MemoryBank {
            entries,
            built_at_epoch: epoch,
            generation,
        };
        let renewal_ratio = match previous {
            None => 1.0,
            Some(old) => {
                let old_ids = old.ids();
                let fresh = bank.entries.keys().filter(|id| !old_ids.contains(id)).count();
                fresh as f64 / bank.len() as f64
            }
        };
        Ok(Rebuild {
            bank,
            renewal_ratio,
            scores,
        })
    }

    /// Writes one SGRID per pseudo-label plus an `index` file, replacing any
    /// previous contents of `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        if dir.exists() {
            fs::remove_dir_all(dir)?;
        }
        fs::create_dir_all(dir)?;
        let mut index = format!("generation={}\nbuilt_at_epoch={}\n", self.generation, self.built_at_epoch);
        for (id, e) in &self.entries {
            let name = format!("{id}.sgrid");
            crate::sgrid::write_sgrid(&e.pseudo, dir.join(&name))?;
            let score = e.score.map_or_else(|| "-".to_string(), |s| format!("{s:?}"));
            index.push_str(&format!("{id}\t{name}\t{score}\n"));
        }
        fs::write(dir.join("index"), index)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("index"))?;
        let mut bank = MemoryBank::default();
        let bad = |line: &str| Error::Checkpoint(format!("bad bank index line `{line}`"));
        for line in text.lines().filter(|l| !l.is_empty()) {
            if let Some(v) = line.strip_prefix("generation=") {
                bank.generation = v.parse().map_err(|_| bad(line))?;
            } else if let Some(v) = line.strip_prefix("built_at_epoch=") {
                bank.built_at_epoch = v.parse().map_err(|_| bad(line))?;
            } else {
                let mut parts = line.split('\t');
                let (Some(id), Some(path), Some(score)) = (parts.next(), parts.next(), parts.next()) else {
                    return Err(bad(line));
                };
                let pseudo = crate::sgrid::read_sgrid(dir.join(path))?.into_byte()?;
                let score = match score {
                    "-" => None,
                    s => Some(s.parse().map_err(|_| bad(line))?),
                };
                bank.entries.insert(
                    id.parse()?,
                    BankEntry {
                        pseudo,
                        score,
                        generation: bank.generation,
                    },
                );
            }
        }
        Ok(bank)
    }
}

/// One line of the bank update log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub generation: u64,
    pub epoch: usize,
    pub val_miou: f64,
    pub renewal_ratio: f64,
    pub bank_size: usize,
}

pub fn append_update_log(path: &Path, record: &UpdateRecord) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    let line = serde_json::to_string(record).map_err(|e| Error::Checkpoint(e.to_string()))?;
    writeln!(f, "{line}")?;
    Ok(())
}

/// Writes `image_id,score` rows.
pub fn write_score_dump(path: &Path, scores: &[ReliabilityScore]) -> Result<()> {
    let mut out = String::from("image_id,score\n");
    for s in scores {
        out.push_str(&format!("{},{:.12}\n", s.image_id, s.score));
    }
    fs::write(path, out)?;
    Ok(())
}
