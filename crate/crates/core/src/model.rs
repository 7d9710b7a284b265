//! Encoder-decoder segmentation network and the EMA-coupled student/teacher pair.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{ImageTensor, ProbMap};
use crate::tensor::{softmax_channels, OptimizerState, Scalar, Tape, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IMAS";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Encoder widths at full, half and quarter resolution.
    pub widths: [usize; 3],
}

impl SegNetConfig {
    pub fn new(num_classes: usize) -> Self {
        Self {
            in_channels: 3,
            num_classes,
            widths: [16, 32, 64],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be ≥ 2, got {}", self.num_classes)));
        }
        if self.in_channels == 0 || self.widths.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    /// `(c_in, c_out, kernel, stride)` per conv, in parameter order.
    fn layer_specs(&self) -> [(usize, usize, usize, usize); 7] {
        let [w1, w2, w3] = self.widths;
        [
            (self.in_channels, w1, 3, 1), // enc1, full res
            (w1, w2, 3, 2),               // enc2, 1/2
            (w2, w3, 3, 2),               // enc3, 1/4
            (w3, w3, 3, 1),               // bottleneck, 1/4
            (w3, w2, 3, 1),               // dec1 after 2× upsample, + enc2 skip
            (w2, w1, 3, 1),               // dec2 after 2× upsample, + enc1 skip
            (w1, self.num_classes, 1, 1), // head
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
}

impl<T: Scalar> ConvLayer<T> {
    fn pad(&self) -> usize {
        self.weight.shape()[2] / 2
    }
}

/// Small U-shaped conv net: four encoder convs (two stride-2, the last a
/// quarter-resolution bottleneck), two nearest-upsample refinement convs with
/// additive skips, and a 1×1 head.
#[derive(Clone, Debug, PartialEq)]
pub struct SegNet<T: Scalar = f32> {
    config: SegNetConfig,
    layers: Vec<ConvLayer<T>>,
}

/// Tape handles for a network's parameters, in [`SegNet::params`] order.
#[derive(Clone, Debug)]
pub struct ParamVars(pub Vec<Var>);

impl<T: Scalar> SegNet<T> {
    pub fn zeros(config: SegNetConfig) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_specs()
            .iter()
            .map(|&(ci, co, k, stride)| ConvLayer {
                weight: Tensor::zeros(vec![co, ci, k, k]),
                bias: Tensor::zeros(vec![co]),
                stride,
            })
            .collect();
        Ok(Self { config, layers })
    }

    /// He-normal weights, zero biases.
    pub fn he_init(config: SegNetConfig, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut net.layers {
            let s = layer.weight.shape();
            let fan_in = (s[1] * s[2] * s[3]) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
            for v in layer.weight.data_mut() {
                *v = T::from_f64_lossy(normal.sample(&mut rng));
            }
        }
        Ok(net)
    }

    pub fn config(&self) -> &SegNetConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn layers(&self) -> &[ConvLayer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ConvLayer<T>] {
        &mut self.layers
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn num_params(&self) -> usize {
        self.params().map(Tensor::len).sum()
    }

    /// All parameter values concatenated in layer order.
    pub fn flat_params(&self) -> Vec<T> {
        self.params().flat_map(|p| p.data().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::dim(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut off = 0;
        for p in self.params_mut() {
            let n = p.len();
            p.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> SegNet<U> {
        SegNet {
            config: self.config,
            layers: self
                .layers
                .iter()
                .map(|l| ConvLayer {
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                    stride: l.stride,
                })
                .collect(),
        }
    }

    /// Registers parameters as trainable leaves of `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> ParamVars {
        ParamVars(self.params().map(|p| tape.leaf(p.clone(), true)).collect())
    }

    fn check_input(&self, c: usize, h: usize, w: usize) -> Result<()> {
        if c != self.config.in_channels {
            return Err(Error::dim(format!(
                "network expects {} channels, got {c}",
                self.config.in_channels
            )));
        }
        if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::dim(format!("spatial dims {h}×{w} must be positive multiples of 4")));
        }
        Ok(())
    }

    /// Builds the forward graph on `tape` for one C×H×W input; returns K×H×W logits.
    pub fn forward_on(&self, tape: &mut Tape<T>, params: &ParamVars, input: Var) -> Result<Var> {
        let (c, h, w) = tape.value(input).chw()?;
        self.check_input(c, h, w)?;
        let p = &params.0;
        let conv = |tape: &mut Tape<T>, i: usize, x: Var| {
            let l = &self.layers[i];
            tape.conv2d(x, p[2 * i], p[2 * i + 1], l.pad(), l.stride)
        };
        let e1 = conv(tape, 0, input)?;
        let e1 = tape.relu(e1)?;
        let e2 = conv(tape, 1, e1)?;
        let e2 = tape.relu(e2)?;
        let e3 = conv(tape, 2, e2)?;
        let e3 = tape.relu(e3)?;
        let e4 = conv(tape, 3, e3)?;
        let e4 = tape.relu(e4)?;
        let u1 = tape.upsample_nearest(e4, 2)?;
        let d1 = conv(tape, 4, u1)?;
        let d1 = tape.add(d1, e2)?;
        let d1 = tape.relu(d1)?;
        let u2 = tape.upsample_nearest(d1, 2)?;
        let d2 = conv(tape, 5, u2)?;
        let d2 = tape.add(d2, e1)?;
        let d2 = tape.relu(d2)?;
        conv(tape, 6, d2)
    }

    /// Gradient-free forward; returns logits.
    pub fn infer_tensor(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::no_grad();
        let params = ParamVars(self.params().map(|p| tape.constant(p.clone())).collect());
        let x = tape.constant(input.clone());
        let out = self.forward_on(&mut tape, &params, x)?;
        Ok(tape.value(out).clone())
    }

    pub fn infer(&self, image: &ImageTensor) -> Result<Tensor<T>> {
        self.infer_tensor(&image.to_tensor())
    }

    /// Softmax of the gradient-free forward.
    pub fn predict(&self, image: &ImageTensor) -> Result<ProbMap> {
        ProbMap::from_tensor(&softmax_channels(&self.infer(image)?)?)
    }
}

/// Student and EMA teacher. Only the student is ever handed to an optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelPair {
    pub student: SegNet<f32>,
    pub teacher: SegNet<f32>,
    pub alpha: f64,
}

impl ModelPair {
    /// Student He-initialised from `seed`; teacher an exact copy.
    pub fn init(config: SegNetConfig, seed: u64, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0,1), got {alpha}")));
        }
        let student = SegNet::he_init(config, seed)?;
        Ok(Self {
            teacher: student.clone(),
            student,
            alpha,
        })
    }

    /// `θ_t ← α·θ_t + (1−α)·θ_s`, elementwise over every parameter.
    pub fn ema_update(&mut self) -> Result<()> {
        if self.student.config != self.teacher.config {
            return Err(Error::Config("student/teacher structure mismatch".into()));
        }
        let (a, b) = (self.alpha, 1.0 - self.alpha);
        for (t, s) in self.teacher.params_mut().zip(self.student.params()) {
            if t.shape() != s.shape() {
                return Err(Error::Config("student/teacher parameter shape mismatch".into()));
            }
            for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
                *tv = (a * *tv as f64 + b * sv as f64) as f32;
            }
        }
        Ok(())
    }

    /// Copies student weights into the teacher (used by the supervised baseline).
    pub fn mirror_student(&mut self) {
        self.teacher = self.student.clone();
    }
}

/// Seeded pair initialisation with the default momentum.
pub fn init_pair(config: SegNetConfig, seed: u64) -> Result<ModelPair> {
    ModelPair::init(config, seed, 0.996)
}

pub fn ema_update(pair: &mut ModelPair) -> Result<()> {
    pair.ema_update()
}

/// Little-endian checkpoint: magic, version, K, input channels, the three
/// widths, param count, student params,
/// teacher params, optimizer scalars, then the momentum buffers.
pub fn save_checkpoint(path: &Path, pair: &ModelPair, opt: &OptimizerState<f32>) -> Result<()> {
    let n = pair.student.num_params();
    let mut buf = Vec::with_capacity(64 + 12 * n);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = pair.student.config();
    for d in [cfg.num_classes, cfg.in_channels, cfg.widths[0], cfg.widths[1], cfg.widths[2]] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    for v in pair.student.flat_params().into_iter().chain(pair.teacher.flat_params()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&opt.step_count.to_le_bytes());
    buf.extend_from_slice(&opt.total_steps.to_le_bytes());
    for s in [opt.base_lr, opt.momentum, opt.poly_power, pair.alpha] {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    let velocity: Vec<f32> = opt.velocity.iter().flat_map(|t| t.data().iter().copied()).collect();
    if velocity.len() != n {
        return Err(Error::dim("optimizer velocity does not match parameter count"));
    }
    for v in velocity {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let bytes = self
            .buf
            .get(self.pos..end)
            .ok_or_else(|| Error::decode(self.path, "checkpoint truncated"))?;
        self.pos = end;
        Ok(bytes.try_into().expect("length checked"))
    }
    fn u32(&mut self) -> Result<u32> {
        self.take::<4>().map(u32::from_le_bytes)
    }
    fn u64(&mut self) -> Result<u64> {
        self.take::<8>().map(u64::from_le_bytes)
    }
    fn f32(&mut self) -> Result<f32> {
        self.take::<4>().map(f32::from_le_bytes)
    }
    fn f64(&mut self) -> Result<f64> {
        self.take::<8>().map(f64::from_le_bytes)
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        (0..n).map(|_| self.f32()).collect()
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelPair, OptimizerState<f32>)> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0, path };
    if &r.take::<4>()? != CHECKPOINT_MAGIC {
        return Err(Error::decode(path, "bad magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::decode(path, format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let n = r.u64()? as usize;
    let config = SegNetConfig {
        num_classes: dims[0],
        in_channels: dims[1],
        widths: [dims[2], dims[3], dims[4]],
    };
    config.validate().map_err(|e| Error::decode(path, e.to_string()))?;
    let mut student = SegNet::<f32>::zeros(config).map_err(|e| Error::decode(path, e.to_string()))?;
    if student.num_params() != n {
        return Err(Error::decode(
            path,
            format!("param count {n} does not match architecture ({})", student.num_params()),
        ));
    }
    let mut teacher = student.clone();
    student.set_flat_params(&r.f32s(n)?)?;
    teacher.set_flat_params(&r.f32s(n)?)?;
    let step_count = r.u64()?;
    let total_steps = r.u64()?;
    let base_lr = r.f64()?;
    let momentum = r.f64()?;
    let poly_power = r.f64()?;
    let alpha = r.f64()?;
    let flat_v = r.f32s(n)?;
    if r.pos != buf.len() {
        return Err(Error::decode(path, "trailing bytes after checkpoint"));
    }
    let mut velocity = Vec::new();
    let mut off = 0;
    for p in student.params() {
        velocity.push(Tensor::new(p.shape().to_vec(), flat_v[off..off + p.len()].to_vec())?);
        off += p.len();
    }
    Ok((
        ModelPair {
            student,
            teacher,
            alpha,
        },
        OptimizerState {
            velocity,
            step_count,
            base_lr,
            total_steps,
            momentum,
            poly_power,
        },
    ))
}
