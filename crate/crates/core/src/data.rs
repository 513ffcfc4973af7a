//! Synthetic Voronoi segmentation data, split protocols, and augmentation.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::grid::{Grid, Image, LabelMap, IGNORE};
use crate::rng::{stream_rng, Stream};
use crate::sgrid::{read_sgrid, write_sgrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageId(pub u32);

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:05}", self.0)
    }
}

impl FromStr for ImageId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        s.parse()
            .map(ImageId)
            .map_err(|_| Error::InvalidGrid(format!("bad image id `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: ImageId,
    pub image: Image,
    pub label: LabelMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledSample {
    pub id: ImageId,
    pub image: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub items: Vec<Sample>,
    pub num_classes: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_images: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Voronoi cells per image; the first `num_classes` cells cover every class once.
    pub cells: usize,
    /// Per-image Gaussian noise sigma is drawn uniformly from this range.
    pub noise_sigma_min: f64,
    pub noise_sigma_max: f64,
    /// Maximum amplitude of the per-image linear intensity ramp.
    pub gradient_max: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_images: 200,
            height: 64,
            width: 64,
            num_classes: 5,
            cells: 10,
            noise_sigma_min: 0.05,
            noise_sigma_max: 0.25,
            gradient_max: 0.05,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 254 {
            return Err(Error::config("data.num_classes", "must be in 2..=254"));
        }
        if self.height < 32 || self.width < 32 {
            return Err(Error::config("data.height", "images must be at least 32x32"));
        }
        if self.cells < self.num_classes {
            return Err(Error::config("data.cells", "need at least one cell per class"));
        }
        if self.n_images == 0 {
            return Err(Error::config("data.n_images", "must be positive"));
        }
        if !(0.0 <= self.noise_sigma_min && self.noise_sigma_min <= self.noise_sigma_max) {
            return Err(Error::config("data.noise_sigma_min", "need 0 <= min <= max"));
        }
        if !(self.gradient_max >= 0.0 && self.gradient_max.is_finite()) {
            return Err(Error::config("data.gradient_max", "must be finite and >= 0"));
        }
        Ok(())
    }

    /// Class base intensity: evenly spaced band centres in (0, 1).
    pub fn class_intensity(&self, class: usize) -> f64 {
        (class as f64 + 0.5) / self.num_classes as f64
    }
}

fn generate_one(cfg: &SynthConfig, seed: u64, index: usize) -> Sample {
    let mut rng = stream_rng(seed, Stream::Data, index as u64);
    let (h, w) = (cfg.height, cfg.width);

    let mut sites: Vec<(usize, usize)> = Vec::with_capacity(cfg.cells);
    while sites.len() < cfg.cells {
        let p = (rng.random_range(0..h), rng.random_range(0..w));
        if !sites.contains(&p) {
            sites.push(p);
        }
    }
    let mut classes: Vec<u8> = (0..cfg.num_classes as u8).collect();
    classes.shuffle(&mut rng);
    classes.extend((cfg.num_classes..cfg.cells).map(|_| rng.random_range(0..cfg.num_classes as u8)));

    let label = Grid::from_fn(h, w, 1, |r, c, _| {
        let dist = |&(sr, sc): &(usize, usize)| {
            let (dr, dc) = (sr as i64 - r as i64, sc as i64 - c as i64);
            dr * dr + dc * dc
        };
        let nearest = (0..sites.len()).min_by_key(|&i| (dist(&sites[i]), i)).expect("cells");
        classes[nearest]
    });

    let sigma = rng.random_range(cfg.noise_sigma_min..=cfg.noise_sigma_max);
    let amp = rng.random_range(-cfg.gradient_max..=cfg.gradient_max);
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let (cos, sin) = (theta.cos(), theta.sin());
    let noise = Normal::new(0.0, sigma.max(0.0)).expect("sigma is finite");
    let image = Grid::from_fn(h, w, 1, |r, c, _| {
        let u = 2.0 * (c as f64 / (w - 1) as f64 - 0.5);
        let v = 2.0 * (r as f64 / (h - 1) as f64 - 0.5);
        let base = cfg.class_intensity(label.get(r, c, 0) as usize);
        let n = if sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        (base + amp * (u * cos + v * sin) + n).clamp(0.0, 1.0) as f32
    });

    Sample {
        id: ImageId(index as u32),
        image,
        label,
    }
}

pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let items = (0..cfg.n_images)
        .into_par_iter()
        .map(|i| generate_one(cfg, seed, i))
        .collect();
    Ok(Dataset {
        items,
        num_classes: cfg.num_classes,
        seed,
    })
}

/// Labeled fraction written as `n/d` (or a bare integer).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fraction {
    pub num: u32,
    pub den: u32,
}

impl Fraction {
    pub fn new(num: u32, den: u32) -> Result<Self> {
        if den == 0 || num == 0 || num > den {
            return Err(Error::config("data.labeled_fraction", "must satisfy 0 < fraction <= 1"));
        }
        Ok(Self { num, den })
    }

    pub fn of(&self, n: usize) -> usize {
        n * self.num as usize / self.den as usize
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Fraction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config("data.labeled_fraction", format!("cannot parse `{s}` as n/d"));
        match s.split_once('/') {
            Some((n, d)) => Fraction::new(
                n.trim().parse().map_err(|_| bad())?,
                d.trim().parse().map_err(|_| bad())?,
            ),
            None => Fraction::new(s.trim().parse().map_err(|_| bad())?, 1),
        }
    }
}

impl Serialize for Fraction {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Fraction {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PartitionProtocol {
    pub labeled_fraction: Fraction,
    pub val_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Labeled,
    Unlabeled,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Labeled => "labeled",
            Split::Unlabeled => "unlabeled",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "labeled" => Ok(Split::Labeled),
            "unlabeled" => Ok(Split::Unlabeled),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidGrid(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<UnlabeledSample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub num_classes: usize,
}

impl Splits {
    pub fn assignment(&self) -> BTreeMap<ImageId, Split> {
        let mut m = BTreeMap::new();
        m.extend(self.labeled.iter().map(|s| (s.id, Split::Labeled)));
        m.extend(self.unlabeled.iter().map(|s| (s.id, Split::Unlabeled)));
        m.extend(self.val.iter().map(|s| (s.id, Split::Val)));
        m.extend(self.test.iter().map(|s| (s.id, Split::Test)));
        m
    }
}

pub fn partition(ds: &Dataset, protocol: &PartitionProtocol) -> Result<Splits> {
    let needed = protocol.val_size + protocol.test_size + 1;
    if ds.items.len() < needed {
        return Err(Error::InsufficientData {
            needed,
            available: ds.items.len(),
        });
    }
    let mut order: Vec<usize> = (0..ds.items.len()).collect();
    order.shuffle(&mut stream_rng(protocol.seed, Stream::Partition, 0));
    let (val, rest) = order.split_at(protocol.val_size);
    let (test, rest) = rest.split_at(protocol.test_size);
    let n_labeled = protocol.labeled_fraction.of(rest.len());
    if n_labeled == 0 {
        return Err(Error::InsufficientData {
            needed: protocol.labeled_fraction.den as usize,
            available: rest.len(),
        });
    }
    let (labeled, unlabeled) = rest.split_at(n_labeled);
    let take = |idx: &[usize]| -> Vec<Sample> { idx.iter().map(|&i| ds.items[i].clone()).collect() };
    Ok(Splits {
        labeled: take(labeled),
        unlabeled: unlabeled
            .iter()
            .map(|&i| UnlabeledSample {
                id: ds.items[i].id,
                image: ds.items[i].image.clone(),
            })
            .collect(),
        val: take(val),
        test: take(test),
        num_classes: ds.num_classes,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledAugment {
    pub flip_prob: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for LabeledAugment {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            scale_min: 0.5,
            scale_max: 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnlabeledAugment {
    pub brightness_jitter: f64,
    pub blur_prob: f64,
}

impl Default for UnlabeledAugment {
    fn default() -> Self {
        Self {
            brightness_jitter: 0.2,
            blur_prob: 0.3,
        }
    }
}

fn resize_nearest<T: crate::grid::Element>(g: &Grid<T>, h: usize, w: usize) -> Grid<T> {
    let (sh, sw) = (g.height(), g.width());
    Grid::from_fn(h, w, g.channels(), |r, c, ch| {
        g.get((r * sh / h).min(sh - 1), (c * sw / w).min(sw - 1), ch)
    })
}

/// Flip, nearest-neighbor rescale, and crop (or pad) back to `crop x crop`.
/// Padding replicates image edges and marks labels IGNORE.
pub fn augment_labeled<R: Rng + ?Sized>(
    image: &Image,
    label: &LabelMap,
    crop: usize,
    params: &LabeledAugment,
    rng: &mut R,
) -> Result<(Image, LabelMap)> {
    if (image.height(), image.width()) != (label.height(), label.width()) {
        return Err(Error::ShapeMismatch("image and label sizes differ".into()));
    }
    let flip = rng.random_bool(params.flip_prob.clamp(0.0, 1.0));
    let scale = if params.scale_min < params.scale_max {
        rng.random_range(params.scale_min..=params.scale_max)
    } else {
        params.scale_min
    };
    let (mut img, mut lab) = if flip {
        (image.flip_horizontal(), label.flip_horizontal())
    } else {
        (image.clone(), label.clone())
    };
    let nh = ((image.height() as f64 * scale).round() as usize).max(1);
    let nw = ((image.width() as f64 * scale).round() as usize).max(1);
    if (nh, nw) != (image.height(), image.width()) {
        img = resize_nearest(&img, nh, nw);
        lab = resize_nearest(&lab, nh, nw);
    }
    // Per axis: source start when larger than the crop, destination offset when smaller.
    let mut place = |n: usize| -> (usize, usize) {
        if n >= crop {
            (rng.random_range(0..=n - crop), 0)
        } else {
            (0, rng.random_range(0..=crop - n))
        }
    };
    let (src_r, dst_r) = place(nh);
    let (src_c, dst_c) = place(nw);
    let out_img = Grid::from_fn(crop, crop, img.channels(), |r, c, ch| {
        let sr = (src_r + r).saturating_sub(dst_r).min(nh - 1);
        let sc = (src_c + c).saturating_sub(dst_c).min(nw - 1);
        img.get(sr, sc, ch)
    });
    let out_lab = Grid::from_fn(crop, crop, 1, |r, c, _| {
        let inside = r >= dst_r && c >= dst_c && r - dst_r + src_r < nh && c - dst_c + src_c < nw;
        if inside {
            lab.get(src_r + r - dst_r, src_c + c - dst_c, 0)
        } else {
            IGNORE
        }
    });
    Ok((out_img, out_lab))
}

/// Brightness jitter with clamping and an optional 3x3 box blur. Never moves pixels.
pub fn augment_unlabeled<R: Rng + ?Sized>(image: &Image, params: &UnlabeledAugment, rng: &mut R) -> Image {
    let shift = if params.brightness_jitter > 0.0 {
        rng.random_range(-params.brightness_jitter..=params.brightness_jitter)
    } else {
        0.0
    };
    let blur = rng.random_bool(params.blur_prob.clamp(0.0, 1.0));
    let mut out = image.map(|v| (v as f64 + shift).clamp(0.0, 1.0) as f32);
    if blur {
        out = box_blur3(&out);
    }
    out
}

fn box_blur3(g: &Image) -> Image {
    let (h, w) = (g.height() as isize, g.width() as isize);
    Grid::from_fn(g.height(), g.width(), g.channels(), |r, c, ch| {
        let mut acc = 0.0f64;
        for dr in -1..=1isize {
            for dc in -1..=1isize {
                let rr = (r as isize + dr).clamp(0, h - 1) as usize;
                let cc = (c as isize + dc).clamp(0, w - 1) as usize;
                acc += g.get(rr, cc, ch) as f64;
            }
        }
        (acc / 9.0) as f32
    })
}

/// Writes `images/<id>.sgrid`, `labels/<id>.sgrid` and a `manifest` of `id<TAB>split`.
pub fn write_dataset_dir(dir: &Path, ds: &Dataset, splits: &BTreeMap<ImageId, Split>) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("labels"))?;
    let mut manifest = String::new();
    for s in &ds.items {
        write_sgrid(&s.image, dir.join("images").join(format!("{}.sgrid", s.id)))?;
        write_sgrid(&s.label, dir.join("labels").join(format!("{}.sgrid", s.id)))?;
        let split = splits.get(&s.id).map_or("unassigned", |s| s.name());
        manifest.push_str(&format!("{}\t{}\n", s.id, split));
    }
    fs::write(dir.join("manifest"), manifest)?;
    Ok(())
}

/// Reads a dataset directory back; returns samples in manifest order with their split.
pub fn read_dataset_dir(dir: &Path) -> Result<Vec<(Sample, Option<Split>)>> {
    let manifest = fs::read_to_string(dir.join("manifest"))?;
    manifest
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let (id, split) = line
                .split_once('\t')
                .ok_or_else(|| Error::InvalidGrid(format!("bad manifest line `{line}`")))?;
            let id: ImageId = id.parse()?;
            let image = read_sgrid(dir.join("images").join(format!("{id}.sgrid")))?.into_float32()?;
            let label = read_sgrid(dir.join("labels").join(format!("{id}.sgrid")))?.into_byte()?;
            Ok((Sample { id, image, label }, split.parse().ok()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::argmax_channels;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> SynthConfig {
        SynthConfig {
            n_images: 12,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&small(), 3).unwrap();
        let b = generate_synthetic(&small(), 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_synthetic(&small(), 4).unwrap());
        for s in &a.items {
            s.label.validate_labels(5).unwrap();
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn every_class_present_in_nearly_all_images() {
        let ds = generate_synthetic(
            &SynthConfig {
                n_images: 100,
                ..SynthConfig::default()
            },
            11,
        )
        .unwrap();
        let with_all = ds
            .items
            .iter()
            .filter(|s| (0..5u8).all(|c| s.label.data().contains(&c)))
            .count();
        assert!(with_all >= 90, "{with_all}/100 images contain every class");
    }

    #[test]
    fn noiseless_images_are_separable_by_intensity() {
        let cfg = SynthConfig {
            noise_sigma_min: 0.0,
            noise_sigma_max: 0.0,
            ..small()
        };
        let ds = generate_synthetic(&cfg, 5).unwrap();
        for s in &ds.items {
            // Nearest band centre recovers the class at every pixel.
            let conf = Grid::from_fn(cfg.height, cfg.width, 5, |r, c, k| {
                -(s.image.get(r, c, 0) as f64 - cfg.class_intensity(k)).abs()
            });
            assert_eq!(argmax_channels(&conf), s.label);
        }
    }

    #[test]
    fn partition_sizes_and_disjointness() {
        let ds = generate_synthetic(
            &SynthConfig {
                n_images: 200,
                height: 32,
                width: 32,
                ..SynthConfig::default()
            },
            1,
        )
        .unwrap();
        let p = PartitionProtocol {
            labeled_fraction: "1/8".parse().unwrap(),
            val_size: 20,
            test_size: 20,
            seed: 9,
        };
        let s = partition(&ds, &p).unwrap();
        assert_eq!((s.labeled.len(), s.unlabeled.len(), s.val.len(), s.test.len()), (20, 140, 20, 20));
        assert_eq!(s.assignment().len(), 200);
        assert_eq!(partition(&ds, &p).unwrap(), s);

        let full = PartitionProtocol {
            labeled_fraction: "1".parse().unwrap(),
            ..p
        };
        assert!(partition(&ds, &full).unwrap().unlabeled.is_empty());

        let big = PartitionProtocol { val_size: 150, test_size: 60, ..p };
        assert!(matches!(partition(&ds, &big), Err(Error::InsufficientData { .. })));
    }

    #[test]
    fn fraction_parsing() {
        assert_eq!("1/30".parse::<Fraction>().unwrap().of(160), 5);
        assert!("0/4".parse::<Fraction>().is_err());
        assert!("3/2".parse::<Fraction>().is_err());
        assert!("x".parse::<Fraction>().is_err());
    }

    fn sample(seed: u64) -> Sample {
        generate_synthetic(&SynthConfig { n_images: 1, ..small() }, seed)
            .unwrap()
            .items
            .remove(0)
    }

    #[test]
    fn labeled_identity_and_double_flip() {
        let s = sample(2);
        let identity = LabeledAugment {
            flip_prob: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (i, l) = augment_labeled(&s.image, &s.label, 64, &identity, &mut rng).unwrap();
        assert_eq!((&i, &l), (&s.image, &s.label));

        let flip = LabeledAugment {
            flip_prob: 1.0,
            ..identity
        };
        let (i1, l1) = augment_labeled(&s.image, &s.label, 64, &flip, &mut rng).unwrap();
        let (i2, l2) = augment_labeled(&i1, &l1, 64, &flip, &mut rng).unwrap();
        assert_eq!((i2, l2), (s.image, s.label));
    }

    #[test]
    fn labeled_augment_preserves_class_set() {
        let s = sample(4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let (img, lab) = augment_labeled(&s.image, &s.label, 32, &LabeledAugment::default(), &mut rng).unwrap();
            assert_eq!(img.dims(), (32, 32, 1));
            assert!(lab.data().iter().all(|v| *v == IGNORE || s.label.data().contains(v)));
        }
    }

    #[test]
    fn unlabeled_augment_properties() {
        let s = sample(6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let off = UnlabeledAugment {
            brightness_jitter: 0.0,
            blur_prob: 0.0,
        };
        assert_eq!(augment_unlabeled(&s.image, &off, &mut rng), s.image);
        for _ in 0..20 {
            let out = augment_unlabeled(&s.image, &UnlabeledAugment::default(), &mut rng);
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(out.dims(), s.image.dims());
        }
        let flat = Grid::filled(8, 8, 1, 0.25f32);
        assert_eq!(box_blur3(&flat), flat);
    }

    #[test]
    fn dataset_dir_round_trip() {
        let ds = generate_synthetic(&SynthConfig { n_images: 3, ..small() }, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let splits = BTreeMap::from([(ImageId(0), Split::Val)]);
        write_dataset_dir(dir.path(), &ds, &splits).unwrap();
        let back = read_dataset_dir(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[0].0, ds.items[0]);
        assert_eq!(back[0].1, Some(Split::Val));
        assert_eq!(back[1].1, None);
    }
}
