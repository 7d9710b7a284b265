//! Image, label and probability-map containers shared across the pipeline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Label value excluded from losses and metrics.
pub const IGNORE: u8 = 255;

/// Dense C×H×W image, values in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::dim(format!(
                "image {channels}×{height}×{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        (self.channels, self.height, self.width) == (other.channels, other.height, other.width)
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            vec![self.channels, self.height, self.width],
            self.data.iter().map(|&v| T::from_f64_lossy(v as f64)).collect(),
        )
        .expect("shape matches by construction")
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

/// H×W class ids; [`IGNORE`] marks pixels without a label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dim(format!(
                "label map {height}×{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[u8] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }
}

/// K×H×W per-pixel class distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    classes: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ProbMap {
    /// Wraps channel-major probabilities. Each pixel must be a distribution
    /// (non-negative, summing to 1 within 1e-4).
    pub fn new(classes: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if classes < 2 {
            return Err(Error::dim(format!("ProbMap needs K ≥ 2, got {classes}")));
        }
        if data.len() != classes * height * width {
            return Err(Error::dim(format!(
                "ProbMap {classes}×{height}×{width} needs {} values, got {}",
                classes * height * width,
                data.len()
            )));
        }
        let hw = height * width;
        for j in 0..hw {
            let mut s = 0.0f64;
            for c in 0..classes {
                let v = data[c * hw + j];
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(Error::NonFinite { op: "ProbMap::new" });
                }
                s += v as f64;
            }
            if (s - 1.0).abs() > 1e-4 {
                return Err(Error::arg(format!("pixel {j} sums to {s}, not 1")));
            }
        }
        Ok(Self {
            classes,
            height,
            width,
            data,
        })
    }

    /// From softmax output of any precision.
    pub fn from_tensor<T: Scalar>(probs: &Tensor<T>) -> Result<Self> {
        let (k, h, w) = probs.chw()?;
        Self::new(k, h, w, probs.data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect())
    }

    /// Probability one at `labels[j]` for every pixel. Labels must be `< classes`.
    pub fn one_hot(classes: usize, height: usize, width: usize, labels: &[usize]) -> Result<Self> {
        let hw = height * width;
        if labels.len() != hw {
            return Err(Error::dim("one_hot: label count mismatch"));
        }
        let mut data = vec![0.0; classes * hw];
        for (j, &l) in labels.iter().enumerate() {
            if l >= classes {
                return Err(Error::arg(format!("class {l} out of range for K={classes}")));
            }
            data[l * hw + j] = 1.0;
        }
        Self::new(classes, height, width, data)
    }

    pub fn uniform(classes: usize, height: usize, width: usize) -> Self {
        Self {
            classes,
            height,
            width,
            data: vec![1.0 / classes as f32; classes * height * width],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn prob(&self, c: usize, j: usize) -> f32 {
        self.data[c * self.pixels() + j]
    }

    pub fn same_shape(&self, other: &ProbMap) -> bool {
        (self.classes, self.height, self.width) == (other.classes, other.height, other.width)
    }

    /// Probabilities at pixel `j`, widened to f64.
    pub fn pixel(&self, j: usize) -> Vec<f64> {
        (0..self.classes).map(|c| self.prob(c, j) as f64).collect()
    }

    /// `(argmax class, max probability)` at pixel `j`; ties go to the lowest class.
    #[inline]
    pub fn argmax_at(&self, j: usize) -> (usize, f32) {
        let hw = self.pixels();
        let mut best = (0, self.data[j]);
        for c in 1..self.classes {
            let v = self.data[c * hw + j];
            if v > best.1 {
                best = (c, v);
            }
        }
        best
    }

    pub fn argmax(&self) -> Vec<usize> {
        (0..self.pixels()).map(|j| self.argmax_at(j).0).collect()
    }

    pub fn max_probs(&self) -> Vec<f32> {
        (0..self.pixels()).map(|j| self.argmax_at(j).1).collect()
    }

    /// Copies the distribution of `src` at pixel `j` into `self`.
    pub(crate) fn copy_pixel_from(&mut self, src: &ProbMap, j: usize) {
        let hw = self.pixels();
        for c in 0..self.classes {
            self.data[c * hw + j] = src.data[c * hw + j];
        }
    }
}
