//! Experiment configuration.
//!
//! Stored as TOML; nested tables are addressed by flat dotted keys
//! (`loss.lambda_bcc`), which is also how command-line overrides name them.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Fraction, LabeledAugment, PartitionProtocol, SynthConfig, UnlabeledAugment};
use crate::dpm::SelectionMode;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, MaskMode};
use crate::model::ModelArch;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub geometry: GeometryConfig,
    pub loss: LossConfig,
    pub components: Components,
    pub selection: SelectionConfig,
    pub optim: OptimConfig,
    pub schedule: ScheduleConfig,
    pub augment: AugmentConfig,
    pub output: OutputConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_images: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub cells: usize,
    pub noise_sigma_min: f64,
    pub noise_sigma_max: f64,
    pub gradient_max: f64,
    pub labeled_fraction: Fraction,
    pub val_size: usize,
    pub test_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SynthConfig::default();
        Self {
            n_images: s.n_images,
            height: s.height,
            width: s.width,
            num_classes: s.num_classes,
            cells: s.cells,
            noise_sigma_min: s.noise_sigma_min,
            noise_sigma_max: s.noise_sigma_max,
            gradient_max: s.gradient_max,
            labeled_fraction: Fraction { num: 1, den: 8 },
            val_size: 20,
            test_size: 20,
        }
    }
}

impl DataConfig {
    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            n_images: self.n_images,
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
            cells: self.cells,
            noise_sigma_min: self.noise_sigma_min,
            noise_sigma_max: self.noise_sigma_max,
            gradient_max: self.gradient_max,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub receptive_field: usize,
    pub hidden_units: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            receptive_field: 3,
            hidden_units: 12,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryConfig {
    /// Square training crop and patch-group window size.
    pub crop_size: usize,
    /// Minimum overlap between adjacent windows; `None` means half the window.
    pub min_overlap: Option<usize>,
    pub n_pairs: usize,
    pub resample_each_epoch: bool,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            crop_size: 32,
            min_overlap: None,
            n_pairs: 6,
            resample_each_epoch: true,
        }
    }
}

impl GeometryConfig {
    pub fn min_overlap(&self) -> usize {
        self.min_overlap.unwrap_or(self.crop_size / 2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_bcc: f64,
    pub lambda_dpm: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            lambda_bcc: w.lambda_bcc,
            lambda_dpm: w.lambda_dpm,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BccMode {
    Off,
    /// Consistency on every overlap pixel.
    Plain,
    /// Consistency only where argmax predictions disagree.
    Importance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoSelection {
    None,
    Random,
    Reliable,
    All,
}

impl PseudoSelection {
    pub fn mode(self) -> Option<SelectionMode> {
        match self {
            PseudoSelection::None => None,
            PseudoSelection::Random => Some(SelectionMode::Random),
            PseudoSelection::Reliable => Some(SelectionMode::Reliable),
            PseudoSelection::All => Some(SelectionMode::All),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Components {
    pub bcc: BccMode,
    pub selection: PseudoSelection,
    /// Rebuild the bank when the validation trigger fires; otherwise build once.
    pub dynamic_bank: bool,
    /// Pixel-level filtering of pseudo-labels below this top-class confidence.
    pub pixel_filter_threshold: Option<f64>,
}

impl Default for Components {
    fn default() -> Self {
        Self {
            bcc: BccMode::Importance,
            selection: PseudoSelection::Reliable,
            dynamic_bank: true,
            pixel_filter_threshold: None,
        }
    }
}

impl Components {
    pub fn mask_mode(&self) -> Option<MaskMode> {
        match self.bcc {
            BccMode::Off => None,
            BccMode::Plain => Some(MaskMode::Dense),
            BccMode::Importance => Some(MaskMode::Importance),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    pub ratio: f64,
    pub gain_threshold: f64,
    pub patience: u32,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            ratio: 0.5,
            gain_threshold: 0.02,
            patience: 25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr_stage1: f64,
    /// Defaults to 0.6 x `lr_stage1`.
    pub lr_stage2: Option<f64>,
    pub poly_power: f64,
    /// Classifier-layer learning rate as a multiple of the first layer's.
    pub head_lr_scale: f64,
    pub momentum: f64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub batch_stage2: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_stage1: 0.1,
            lr_stage2: None,
            poly_power: 0.9,
            head_lr_scale: 10.0,
            momentum: 0.0,
            batch_labeled: 2,
            batch_unlabeled: 1,
            batch_stage2: 4,
        }
    }
}

impl OptimConfig {
    pub fn lr_stage2(&self) -> f64 {
        self.lr_stage2.unwrap_or(0.6 * self.lr_stage1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub stage1_epochs: usize,
    pub stage2_max_epochs: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            stage1_epochs: 100,
            stage2_max_epochs: 100,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub labeled: LabeledAugment,
    pub unlabeled: UnlabeledAugment,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Write `scores_gen<n>.csv` on every reliable-selection rebuild.
    pub dump_scores: bool,
    /// Run ablation cells on the rayon pool instead of one after another.
    pub parallel_cells: bool,
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(key, format!("must be positive, got {v}")))
    }
}

fn nonnegative(key: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(key, format!("must be >= 0, got {v}")))
    }
}

impl ExperimentConfig {
    pub fn arch(&self) -> ModelArch {
        ModelArch {
            receptive_field: self.model.receptive_field,
            hidden_units: self.model.hidden_units,
            num_classes: self.data.num_classes,
            in_channels: 1,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_bcc: self.loss.lambda_bcc,
            lambda_dpm: self.loss.lambda_dpm,
        }
    }

    pub fn protocol(&self) -> PartitionProtocol {
        PartitionProtocol {
            labeled_fraction: self.data.labeled_fraction,
            val_size: self.data.val_size,
            test_size: self.data.test_size,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.synth().validate()?;
        self.arch().validate()?;
        if self.data.val_size == 0 {
            return Err(Error::config("data.val_size", "must be positive"));
        }
        if self.data.test_size == 0 {
            return Err(Error::config("data.test_size", "must be positive"));
        }
        let g = &self.geometry;
        if g.crop_size == 0 || g.crop_size > self.data.height || g.crop_size > self.data.width {
            return Err(Error::config("geometry.crop_size", "must fit inside the images"));
        }
        if g.min_overlap() >= g.crop_size {
            return Err(Error::config("geometry.min_overlap", "must be smaller than crop_size"));
        }
        if g.n_pairs > 6 {
            return Err(Error::config("geometry.n_pairs", "must be at most 6"));
        }
        nonnegative("loss.lambda_bcc", self.loss.lambda_bcc)?;
        nonnegative("loss.lambda_dpm", self.loss.lambda_dpm)?;
        let s = &self.selection;
        if !(s.ratio > 0.0 && s.ratio <= 1.0) {
            return Err(Error::config("selection.ratio", "must be in (0, 1]"));
        }
        nonnegative("selection.gain_threshold", s.gain_threshold)?;
        if s.patience == 0 {
            return Err(Error::config("selection.patience", "must be at least 1"));
        }
        let o = &self.optim;
        positive("optim.lr_stage1", o.lr_stage1)?;
        positive("optim.lr_stage2", o.lr_stage2())?;
        nonnegative("optim.poly_power", o.poly_power)?;
        positive("optim.head_lr_scale", o.head_lr_scale)?;
        if !(0.0..1.0).contains(&o.momentum) {
            return Err(Error::config("optim.momentum", "must be in [0, 1)"));
        }
        for (key, v) in [
            ("optim.batch_labeled", o.batch_labeled),
            ("optim.batch_unlabeled", o.batch_unlabeled),
            ("optim.batch_stage2", o.batch_stage2),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.schedule.stage1_epochs == 0 {
            return Err(Error::config("schedule.stage1_epochs", "must be at least 1"));
        }
        let c = &self.components;
        if let Some(t) = c.pixel_filter_threshold {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::config("components.pixel_filter_threshold", "must be in (0, 1)"));
            }
            if c.selection == PseudoSelection::None {
                return Err(Error::config(
                    "components.pixel_filter_threshold",
                    "requires a pseudo-label selection mode",
                ));
            }
        }
        if c.dynamic_bank && c.selection == PseudoSelection::None {
            return Err(Error::config("components.dynamic_bank", "requires a pseudo-label selection mode"));
        }
        let a = &self.augment;
        if !(0.0..=1.0).contains(&a.labeled.flip_prob) {
            return Err(Error::config("augment.labeled.flip_prob", "must be in [0, 1]"));
        }
        if !(a.labeled.scale_min > 0.0 && a.labeled.scale_min <= a.labeled.scale_max) {
            return Err(Error::config("augment.labeled.scale_min", "need 0 < scale_min <= scale_max"));
        }
        nonnegative("augment.unlabeled.brightness_jitter", a.unlabeled.brightness_jitter)?;
        if !(0.0..=1.0).contains(&a.unlabeled.blur_prob) {
            return Err(Error::config("augment.unlabeled.blur_prob", "must be in [0, 1]"));
        }
        Ok(())
    }

    /// Parses TOML, applies `key=value` overrides, and validates.
    pub fn from_toml_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut root: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<file>", e.message().to_string()))?;
        for (key, raw) in overrides {
            set_dotted(&mut root, key, parse_value(raw))?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(unknown_field(e.message()).unwrap_or("<file>"), e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the resolved TOML.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

fn unknown_field(message: &str) -> Option<&str> {
    let start = message.find('`')? + 1;
    let end = start + message[start..].find('`')?;
    Some(&message[start..end])
}

/// Interprets an override as a TOML scalar, falling back to a string.
fn parse_value(raw: &str) -> toml::Value {
    let probe = format!("v = {raw}");
    match probe.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("probe key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_dotted(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut table = root;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{p}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}
