//! Dense row-major grids with channel-fastest layout.
//!
//! Images are `Grid<f32>`, confidence maps and gradient buffers are
//! `Grid<f64>`, label maps and binary masks are `Grid<u8>`.

use std::fmt::Debug;

use crate::error::{Error, Result};
use crate::geometry::Window;

/// Label value excluded from every loss and confusion matrix.
pub const IGNORE: u8 = 255;

pub type Image = Grid<f32>;
pub type ConfidenceMap = Grid<f64>;
pub type LabelMap = Grid<u8>;
pub type BinaryMask = Grid<u8>;

pub trait Element: Copy + Default + PartialEq + Debug + Send + Sync + 'static {
    fn is_finite(self) -> bool {
        true
    }
}

impl Element for u8 {}

impl Element for f32 {
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Element for f64 {
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Element> Grid<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidGrid(format!(
                "dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(Error::InvalidGrid(format!(
                "data length {} does not match {height}x{width}x{channels} = {expected}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid(format!("non-finite value at index {i}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "empty grid");
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, T::default())
    }

    /// Builds a grid by evaluating `f(row, col, channel)` in storage order.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        debug_assert!(row < self.height && col < self.width && ch < self.channels);
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> T {
        self.data[self.index(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: T) {
        let i = self.index(row, col, ch);
        self.data[i] = value;
    }

    /// All channel values of one pixel.
    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[T] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [T] {
        let start = (row * self.width + col) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    pub fn same_shape<U: Element>(&self, other: &Grid<U>) -> bool {
        self.dims() == other.dims()
    }

    pub fn contains(&self, window: &Window) -> bool {
        window.bottom() <= self.height && window.right() <= self.width
    }

    pub fn crop(&self, window: &Window) -> Result<Self> {
        if !self.contains(window) {
            return Err(Error::ShapeMismatch(format!(
                "window {window:?} exceeds {}x{} grid",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(window.height * window.width * self.channels);
        for r in window.top..window.bottom() {
            let start = self.index(r, window.left, 0);
            data.extend_from_slice(&self.data[start..start + window.width * self.channels]);
        }
        Ok(Self {
            height: window.height,
            width: window.width,
            channels: self.channels,
            data,
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, self.channels, |r, c, ch| {
            self.get(r, self.width - 1 - c, ch)
        })
    }

    pub fn map<U: Element>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl Grid<f64> {
    /// Narrows to float32 storage, e.g. before writing to disk.
    pub fn to_f32(&self) -> Grid<f32> {
        self.map(|v| v as f32)
    }

    /// Checks the softmax normalization invariant within `tol`.
    pub fn is_normalized(&self, tol: f64) -> bool {
        self.data.chunks(self.channels).all(|px| {
            px.iter().all(|&p| p >= 0.0) && (px.iter().sum::<f64>() - 1.0).abs() <= tol
        })
    }
}

impl Grid<f32> {
    pub fn to_f64(&self) -> Grid<f64> {
        self.map(|v| v as f64)
    }
}

impl Grid<u8> {
    /// Checks that every value is a class index below `num_classes` or [`IGNORE`].
    pub fn validate_labels(&self, num_classes: usize) -> Result<()> {
        match self
            .data
            .iter()
            .find(|&&v| v != IGNORE && v as usize >= num_classes)
        {
            Some(&label) => Err(Error::LabelOutOfRange { label, num_classes }),
            None => Ok(()),
        }
    }
}

/// Per-pixel index of the largest channel; ties resolve to the lowest index.
pub fn argmax_channels<T: Element + PartialOrd>(conf: &Grid<T>) -> LabelMap {
    let data = conf
        .data()
        .chunks(conf.channels())
        .map(|px| argmax(px) as u8)
        .collect();
    Grid {
        height: conf.height(),
        width: conf.width(),
        channels: 1,
        data,
    }
}

#[inline]
pub(crate) fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
