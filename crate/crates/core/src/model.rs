//! Per-pixel two-layer classifier over a small receptive field.
//!
//! For each output pixel the `rf x rf x in_channels` neighborhood is gathered
//! from the window (edge-replicated at the window border, never reading image
//! pixels outside the window), then `affine -> tanh -> affine -> softmax`.
//! Parameters are float32 values; they are held as `f64` so that all
//! arithmetic runs in double precision, and every update rounds back to f32.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Window;
use crate::grid::{ConfidenceMap, Grid, Image};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelArch {
    pub receptive_field: usize,
    pub hidden_units: usize,
    pub num_classes: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
}

fn default_in_channels() -> usize {
    1
}

impl ModelArch {
    pub fn new(receptive_field: usize, hidden_units: usize, num_classes: usize) -> Result<Self> {
        let arch = Self {
            receptive_field,
            hidden_units,
            num_classes,
            in_channels: 1,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.receptive_field, 1 | 3) {
            return Err(Error::config("model.receptive_field", "must be 1 or 3"));
        }
        if self.hidden_units == 0 {
            return Err(Error::config("model.hidden_units", "must be at least 1"));
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::config("model.num_classes", "must be in 2..=255"));
        }
        if self.in_channels == 0 {
            return Err(Error::config("model.in_channels", "must be at least 1"));
        }
        Ok(())
    }

    pub fn fan_in(&self) -> usize {
        self.receptive_field * self.receptive_field * self.in_channels
    }

    pub fn num_params(&self) -> usize {
        self.hidden_units * (self.fan_in() + 1) + self.num_classes * (self.hidden_units + 1)
    }
}

/// Parameter-shaped tensors: `w1` is `hidden x fan_in`, `w2` is `classes x hidden`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensors {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Tensors {
    pub fn zeros(arch: &ModelArch) -> Self {
        Self {
            w1: vec![0.0; arch.hidden_units * arch.fan_in()],
            b1: vec![0.0; arch.hidden_units],
            w2: vec![0.0; arch.num_classes * arch.hidden_units],
            b2: vec![0.0; arch.num_classes],
        }
    }

    pub fn parts(&self) -> [&[f64]; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn parts_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn len(&self) -> usize {
        self.parts().iter().map(|p| p.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.parts().into_iter().flat_map(|p| p.iter().copied())
    }

    pub fn get(&self, mut i: usize) -> f64 {
        for p in self.parts() {
            if i < p.len() {
                return p[i];
            }
            i -= p.len();
        }
        panic!("tensor index out of range");
    }

    fn get_mut(&mut self, mut i: usize) -> &mut f64 {
        for p in self.parts_mut() {
            if i < p.len() {
                return &mut p[i];
            }
            i -= p.len();
        }
        panic!("tensor index out of range");
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(f64::is_finite)
    }

    pub fn add_assign(&mut self, other: &Tensors) {
        for (dst, src) in self.parts_mut().into_iter().zip(other.parts()) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }
    }

    pub fn add_scaled(&mut self, other: &Tensors, scale: f64) {
        for (dst, src) in self.parts_mut().into_iter().zip(other.parts()) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += scale * s);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for p in self.parts_mut() {
            p.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn max_abs_diff(&self, other: &Tensors) -> f64 {
        self.iter()
            .zip(other.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub type GradientSet = Tensors;

#[inline]
fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    arch: ModelArch,
    t: Tensors,
}

impl ModelParams {
    /// Builds params from tensors, rounding every value to float32.
    pub fn from_tensors(arch: ModelArch, mut t: Tensors) -> Result<Self> {
        arch.validate()?;
        let want = Tensors::zeros(&arch);
        if t.parts().map(<[f64]>::len) != want.parts().map(<[f64]>::len) {
            return Err(Error::ShapeMismatch("parameter tensors do not match arch".into()));
        }
        if !t.is_finite() {
            return Err(Error::InvalidGrid("non-finite parameter".into()));
        }
        for p in t.parts_mut() {
            p.iter_mut().for_each(|v| *v = round_f32(*v));
        }
        Ok(Self { arch, t })
    }

    pub fn zeros(arch: ModelArch) -> Self {
        Self {
            t: Tensors::zeros(&arch),
            arch,
        }
    }

    pub fn arch(&self) -> &ModelArch {
        &self.arch
    }

    pub fn tensors(&self) -> &Tensors {
        &self.t
    }

    /// Applies `theta += scale * delta` per tensor, rounding to float32.
    pub fn apply_update(&mut self, delta: &Tensors, scales: [f64; 4]) {
        for ((dst, src), s) in self.t.parts_mut().into_iter().zip(delta.parts()).zip(scales) {
            dst.iter_mut()
                .zip(src)
                .for_each(|(d, g)| *d = round_f32(*d + s * g));
        }
    }

    /// Copy with one coordinate shifted by `delta`, without float32 rounding.
    pub fn perturbed(&self, index: usize, delta: f64) -> Self {
        let mut p = self.clone();
        *p.t.get_mut(index) += delta;
        p
    }

    /// Named float32 grids, one per tensor, for checkpointing.
    pub fn to_grids(&self) -> Vec<(&'static str, Grid<f32>)> {
        let a = &self.arch;
        let g = |data: &[f64], h, w| {
            Grid::new(h, w, 1, data.iter().map(|&v| v as f32).collect()).expect("param grid shape")
        };
        vec![
            ("w1", g(&self.t.w1, a.hidden_units, a.fan_in())),
            ("b1", g(&self.t.b1, a.hidden_units, 1)),
            ("w2", g(&self.t.w2, a.num_classes, a.hidden_units)),
            ("b2", g(&self.t.b2, a.num_classes, 1)),
        ]
    }

    pub fn from_grids(arch: ModelArch, grids: &[(String, Grid<f32>)]) -> Result<Self> {
        let find = |name: &str| -> Result<Vec<f64>> {
            grids
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, g)| g.data().iter().map(|&v| v as f64).collect())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
        };
        Self::from_tensors(
            arch,
            Tensors {
                w1: find("w1")?,
                b1: find("b1")?,
                w2: find("w2")?,
                b2: find("b2")?,
            },
        )
    }
}

pub fn init_params<R: Rng + ?Sized>(arch: ModelArch, rng: &mut R) -> Result<ModelParams> {
    arch.validate()?;
    let mut uniform = |fan_in: usize, n: usize| -> Vec<f64> {
        let s = 1.0 / (fan_in as f64).sqrt();
        (0..n)
            .map(|_| loop {
                let v = round_f32(rng.random_range(-s..s));
                if v.abs() < s {
                    break v;
                }
            })
            .collect()
    };
    let w1 = uniform(arch.fan_in(), arch.hidden_units * arch.fan_in());
    let w2 = uniform(arch.hidden_units, arch.num_classes * arch.hidden_units);
    ModelParams::from_tensors(
        arch,
        Tensors {
            w1,
            b1: vec![0.0; arch.hidden_units],
            w2,
            b2: vec![0.0; arch.num_classes],
        },
    )
}

/// Anything that maps an image window to a confidence map.
pub trait Segmenter: Sync {
    fn arch(&self) -> &ModelArch;
    fn forward(&self, image: &Image, window: &Window) -> Result<ConfidenceMap>;
}

impl Segmenter for ModelParams {
    fn arch(&self) -> &ModelArch {
        &self.arch
    }

    fn forward(&self, image: &Image, window: &Window) -> Result<ConfidenceMap> {
        forward(self, image, window)
    }
}

/// Wraps a segmenter and counts forward calls.
pub struct CountingSegmenter<'a, S> {
    inner: &'a S,
    calls: AtomicUsize,
}

impl<'a, S: Segmenter> CountingSegmenter<'a, S> {
    pub fn new(inner: &'a S) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl<S: Segmenter> Segmenter for CountingSegmenter<'_, S> {
    fn arch(&self) -> &ModelArch {
        self.inner.arch()
    }

    fn forward(&self, image: &Image, window: &Window) -> Result<ConfidenceMap> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.forward(image, window)
    }
}

fn check_input(arch: &ModelArch, image: &Image, window: &Window) -> Result<()> {
    if image.channels() != arch.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "image has {} channels, model expects {}",
            image.channels(),
            arch.in_channels
        )));
    }
    if !image.contains(window) {
        return Err(Error::ShapeMismatch(format!(
            "window {window:?} exceeds {}x{} image",
            image.height(),
            image.width()
        )));
    }
    Ok(())
}

/// Scratch buffers for one pixel.
struct PixelPass {
    x: Vec<f64>,
    h: Vec<f64>,
    p: Vec<f64>,
}

impl PixelPass {
    fn new(arch: &ModelArch) -> Self {
        Self {
            x: vec![0.0; arch.fan_in()],
            h: vec![0.0; arch.hidden_units],
            p: vec![0.0; arch.num_classes],
        }
    }

    fn gather(&mut self, arch: &ModelArch, image: &Image, window: &Window, r: usize, c: usize) {
        let half = (arch.receptive_field / 2) as isize;
        let mut k = 0;
        for dr in -half..=half {
            let rr = (r as isize + dr).clamp(0, window.height as isize - 1) as usize;
            for dc in -half..=half {
                let cc = (c as isize + dc).clamp(0, window.width as isize - 1) as usize;
                for &v in image.pixel(window.top + rr, window.left + cc) {
                    self.x[k] = v as f64;
                    k += 1;
                }
            }
        }
    }

    fn run(&mut self, arch: &ModelArch, t: &Tensors) {
        let fan_in = arch.fan_in();
        for (i, h) in self.h.iter_mut().enumerate() {
            let row = &t.w1[i * fan_in..(i + 1) * fan_in];
            let a = t.b1[i] + row.iter().zip(&self.x).map(|(w, x)| w * x).sum::<f64>();
            *h = a.tanh();
        }
        let hidden = arch.hidden_units;
        for (j, p) in self.p.iter_mut().enumerate() {
            let row = &t.w2[j * hidden..(j + 1) * hidden];
            *p = t.b2[j] + row.iter().zip(&self.h).map(|(w, h)| w * h).sum::<f64>();
        }
        let max = self.p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for p in self.p.iter_mut() {
            *p = (*p - max).exp();
            sum += *p;
        }
        self.p.iter_mut().for_each(|p| *p /= sum);
    }
}

pub fn forward(params: &ModelParams, image: &Image, window: &Window) -> Result<ConfidenceMap> {
    let arch = &params.arch;
    check_input(arch, image, window)?;
    let mut pass = PixelPass::new(arch);
    let mut out = Grid::zeros(window.height, window.width, arch.num_classes);
    for r in 0..window.height {
        for c in 0..window.width {
            pass.gather(arch, image, window, r, c);
            pass.run(arch, &params.t);
            out.pixel_mut(r, c).copy_from_slice(&pass.p);
        }
    }
    Ok(out)
}

/// Gradient of a scalar loss with respect to every parameter, given the
/// loss gradient with respect to the window's output probabilities.
pub fn backward(
    params: &ModelParams,
    image: &Image,
    window: &Window,
    dloss_dprobs: &Grid<f64>,
) -> Result<GradientSet> {
    let arch = &params.arch;
    check_input(arch, image, window)?;
    if dloss_dprobs.dims() != (window.height, window.width, arch.num_classes) {
        return Err(Error::ShapeMismatch(format!(
            "probability gradient {:?} does not match window {}x{}x{}",
            dloss_dprobs.dims(),
            window.height,
            window.width,
            arch.num_classes
        )));
    }
    let t = &params.t;
    let (fan_in, hidden) = (arch.fan_in(), arch.hidden_units);
    let mut grads = Tensors::zeros(arch);
    let mut pass = PixelPass::new(arch);
    let mut dz = vec![0.0; arch.num_classes];
    let mut da = vec![0.0; hidden];
    for r in 0..window.height {
        for c in 0..window.width {
            let g = dloss_dprobs.pixel(r, c);
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            pass.gather(arch, image, window, r, c);
            pass.run(arch, t);
            // Softmax Jacobian: dz_j = p_j (g_j - <g, p>).
            let gp: f64 = g.iter().zip(&pass.p).map(|(g, p)| g * p).sum();
            for j in 0..arch.num_classes {
                dz[j] = pass.p[j] * (g[j] - gp);
            }
            da.iter_mut().for_each(|v| *v = 0.0);
            for (j, &dzj) in dz.iter().enumerate() {
                grads.b2[j] += dzj;
                let row = j * hidden;
                for (i, d) in da.iter_mut().enumerate() {
                    grads.w2[row + i] += dzj * pass.h[i];
                    *d += t.w2[row + i] * dzj;
                }
            }
            for (i, &d) in da.iter().enumerate() {
                let dai = d * (1.0 - pass.h[i] * pass.h[i]);
                grads.b1[i] += dai;
                let row = &mut grads.w1[i * fan_in..(i + 1) * fan_in];
                row.iter_mut().zip(&pass.x).for_each(|(w, x)| *w += dai * x);
            }
        }
    }
    Ok(grads)
}

/// Maximum relative error between the analytic gradient and central
/// differences over a random subsample of at least `min(samples, n)` coordinates.
///
/// `loss` returns the scalar loss and its analytic gradient at the given params.
pub fn check_gradients<F, R>(
    params: &ModelParams,
    loss: F,
    eps: f64,
    samples: usize,
    rng: &mut R,
) -> Result<f64>
where
    F: Fn(&ModelParams) -> Result<(f64, GradientSet)>,
    R: Rng + ?Sized,
{
    if !(1e-6..=1e-2).contains(&eps) {
        return Err(Error::Precondition(format!("eps {eps} outside [1e-6, 1e-2]")));
    }
    let (value, analytic) = loss(params)?;
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    let n = analytic.len();
    let picked = sample(rng, n, samples.max(50).min(n));
    let mut worst: f64 = 0.0;
    for i in picked.iter() {
        let (plus, _) = loss(&params.perturbed(i, eps))?;
        let (minus, _) = loss(&params.perturbed(i, -eps))?;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.get(i);
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Grid::from_fn(h, w, 1, |_, _, _| rng.random_range(0.0f32..1.0))
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let arch = ModelArch::new(3, 8, 4).unwrap();
        let a = init_params(arch, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = init_params(arch, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert!(a.tensors().b1.iter().chain(&a.tensors().b2).all(|&v| v == 0.0));
        assert!(a.tensors().w1.iter().all(|&v| v.abs() < 1.0 / 3.0));
        assert!(a.tensors().iter().all(|v| v as f32 as f64 == v));
    }

    #[test]
    fn zero_params_give_uniform_output() {
        let arch = ModelArch::new(3, 4, 5).unwrap();
        let out = forward(&ModelParams::zeros(arch), &image(6, 6, 1), &Window::full(6, 6)).unwrap();
        assert!(out.data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn rf1_is_context_free() {
        let arch = ModelArch::new(1, 6, 3).unwrap();
        let params = init_params(arch, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let img = image(20, 20, 2);
        let a = Window::new(0, 0, 12, 12).unwrap();
        let b = Window::new(5, 7, 12, 12).unwrap();
        let pa = forward(&params, &img, &a).unwrap();
        let pb = forward(&params, &img, &b).unwrap();
        let o = crate::geometry::overlap_rect(&a, &b).unwrap();
        assert_eq!(pa.crop(&o.local_a).unwrap(), pb.crop(&o.local_b).unwrap());
        assert!(pa.is_normalized(1e-6));
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let arch = ModelArch::new(3, 4, 3).unwrap();
        let params = ModelParams::zeros(arch);
        let img = image(8, 8, 0);
        assert!(forward(&params, &img, &Window::new(4, 4, 5, 5).unwrap()).is_err());
        let w = Window::full(8, 8);
        assert!(backward(&params, &img, &w, &Grid::zeros(8, 8, 2)).is_err());
    }

    #[test]
    fn backward_is_linear_in_upstream_gradient() {
        let arch = ModelArch::new(3, 5, 3).unwrap();
        let params = init_params(arch, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let img = image(7, 9, 5);
        let w = Window::new(1, 1, 5, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = Grid::from_fn(5, 6, 3, |_, _, _| rng.random_range(-1.0..1.0));
        let one = backward(&params, &img, &w, &g).unwrap();
        let two = backward(&params, &img, &w, &g.map(|v| 2.0 * v)).unwrap();
        let mut doubled = one.clone();
        doubled.scale(2.0);
        assert!(two.max_abs_diff(&doubled) < 1e-12);
        let zero = backward(&params, &img, &w, &Grid::zeros(5, 6, 3)).unwrap();
        assert!(zero.iter().all(|v| v == 0.0));
    }

    #[test]
    fn quadratic_loss_gradient_check() {
        let arch = ModelArch::new(3, 6, 4).unwrap();
        let params = init_params(arch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let quad = |p: &ModelParams| {
            let t = p.tensors();
            Ok((t.iter().map(|v| v * v).sum::<f64>() / 2.0, t.clone()))
        };
        let err = check_gradients(&params, quad, 1e-4, 80, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(err < 1e-7, "rel error {err}");
        assert!(matches!(
            check_gradients(&params, quad, 0.5, 80, &mut ChaCha8Rng::seed_from_u64(2)),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn weighted_probability_loss_gradient_check() {
        // L = sum_i c_i * p_i with fixed random weights; dL/dp = c.
        let arch = ModelArch::new(3, 5, 3).unwrap();
        let img = image(8, 8, 11);
        let w = Window::new(1, 0, 6, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let c = Grid::from_fn(6, 7, 3, |_, _, _| rng.random_range(-1.0..1.0));
        for seed in 0..5 {
            let params = init_params(arch, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let loss = |p: &ModelParams| {
                let out = forward(p, &img, &w)?;
                let v = out.data().iter().zip(c.data()).map(|(a, b)| a * b).sum();
                Ok((v, backward(p, &img, &w, &c)?))
            };
            let err = check_gradients(&params, loss, 1e-5, 60, &mut rng).unwrap();
            assert!(err < 1e-4, "seed {seed}: rel error {err}");
        }
    }

    #[test]
    fn counting_segmenter_counts() {
        let params = ModelParams::zeros(ModelArch::new(1, 2, 2).unwrap());
        let counter = CountingSegmenter::new(&params);
        let img = image(4, 4, 0);
        for _ in 0..3 {
            counter.forward(&img, &Window::full(4, 4)).unwrap();
        }
        assert_eq!(counter.calls(), 3);
    }
}
