//! The untrained generator: a U-net whose weights are the only thing any
//! solver optimizes.
//!
//! Topology per encoder level: conv -> activation -> 2x downsample; two
//! bottleneck convs; per decoder level: 2x nearest upsample -> concat with
//! the matching encoder activation -> conv -> activation; final 1x1 conv to
//! one channel with no activation. All convs are shape-preserving
//! (`padding = (kernel-1)/2`), so the output spatial dims equal the input's.

use crate::autodiff::{Shape, Tape, Var};
use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_distr::Distribution;
use std::io::{Read, Write};
use std::rc::Rc;

/// Widths double per level and cap here; depth 4 at the default base of 16
/// gives 16, 32, 64, 128.
pub const CHANNEL_CAP: usize = 128;

/// How the encoder halves spatial resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Downsample {
    /// Stride-2 convolution (learned).
    StridedConv,
    /// 2x2 average pooling (parameter-free).
    AvgPool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    /// Odd spatial size of every conv kernel except the final 1x1.
    pub kernel_size: usize,
    pub activation_slope: f64,
    pub seed: u64,
    pub downsample: Downsample,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            base_channels: 16,
            kernel_size: 3,
            activation_slope: 0.1,
            seed: 0,
            downsample: Downsample::StridedConv,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::InvalidConfig("unet depth must be >= 1".into()));
        }
        if self.base_channels < 1 {
            return Err(Error::InvalidConfig("unet base_channels must be >= 1".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::InvalidConfig("unet kernel_size must be odd".into()));
        }
        if !(0.0..1.0).contains(&self.activation_slope) {
            return Err(Error::InvalidConfig("unet activation_slope must be in [0,1)".into()));
        }
        Ok(())
    }

    /// Encoder width per level: `min(base * 2^level, CHANNEL_CAP)`.
    pub fn channel_widths(&self) -> Vec<usize> {
        (0..self.depth)
            .map(|l| (self.base_channels << l.min(31)).min(CHANNEL_CAP))
            .collect()
    }
}

#[derive(Debug, Clone)]
struct Param {
    label: String,
    shape: Shape,
    data: Rc<Vec<f64>>,
}

/// The generator's parameters (kernels and biases) in a fixed layout.
#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
    params: Vec<Param>,
}

/// Handles returned by one forward pass: the output plus the parameter vars
/// in the same order as [`UNet::param_count`].
pub struct UNetForward {
    pub output: Var,
    pub params: Vec<Var>,
}

impl UNet {
    /// Seeded fan-in-scaled init: weights uniform on
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` (std `= sqrt(1/(3 fan_in))`),
    /// biases uniform on the same interval. The same seed always produces
    /// bitwise-identical parameters.
    ///
    /// The scale matters: the reconstruction loop feeds the network its own
    /// output through the outer skip, so the untrained network must start as
    /// a low-gain map. A variance-preserving init (std `= sqrt(2/fan_in)`)
    /// gives the skip recursion a spectral radius around 1.4 and the
    /// iteration diverges geometrically, faster than any reasonable
    /// optimizer step can counteract.
    pub fn init(config: &UNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Vec::new();
        let k = config.kernel_size;

        let wscale: f64 = std::env::var("RBP_WSCALE").ok().and_then(|v| v.parse().ok()).unwrap_or(1.0);
        let bscale: f64 = std::env::var("RBP_BSCALE").ok().and_then(|v| v.parse().ok()).unwrap_or(1.0);
        let mut conv = |label: String, co: usize, ci: usize, kh: usize, kw: usize| {
            let bound = 1.0 / (ci as f64 * kh as f64 * kw as f64).sqrt();
            let bound_b = bound * bscale / wscale.max(1e-12);
            let bound = bound * wscale;
            let uniform = rand_distr::Uniform::new_inclusive(-bound, bound).expect("bound > 0");
            let kernel: Vec<f64> =
                (0..co * ci * kh * kw).map(|_| uniform.sample(&mut rng)).collect();
            params.push(Param {
                label: format!("{label}.kernel"),
                shape: Shape::Kernel(co, ci, kh, kw),
                data: Rc::new(kernel),
            });
            let uniform_b = rand_distr::Uniform::new_inclusive(-bound_b.max(1e-300), bound_b.max(1e-300)).expect("bound > 0");
            let bias: Vec<f64> = (0..co).map(|_| if bscale == 0.0 { 0.0 * uniform_b.sample(&mut rng) } else { uniform_b.sample(&mut rng) }).collect();
            params.push(Param {
                label: format!("{label}.bias"),
                shape: Shape::Chw(co, 1, 1),
                data: Rc::new(bias),
            });
        };

        let widths = config.channel_widths();
        let mut c_in = 1;
        for (level, &w) in widths.iter().enumerate() {
            conv(format!("enc{level}"), w, c_in, k, k);
            if config.downsample == Downsample::StridedConv {
                conv(format!("down{level}"), w, w, k, k);
            }
            c_in = w;
        }
        let deep = *widths.last().expect("depth >= 1");
        conv("bottleneck0".into(), deep, deep, k, k);
        conv("bottleneck1".into(), deep, deep, k, k);
        let mut carry = deep;
        for (level, &w) in widths.iter().enumerate().rev() {
            conv(format!("dec{level}"), w, carry + w, k, k);
            carry = w;
        }
        conv("head".into(), 1, widths[0], 1, 1);
        let mut net = Self { config: config.clone(), params };

        // Zero the head so the untrained network is exactly the zero map.
        // The reconstruction loop feeds the estimate back through the outer
        // skip; any nonzero initial output would be integrated iteration
        // after iteration before the optimizer can suppress it. Interior
        // layers keep their scale so gradients flow from the first step.
        let head = net.param_count() - 2;
        net.param_data_mut(head).fill(0.0);
        net.param_data_mut(head + 1).fill(0.0);
        Ok(net)
    }

    /// Init then zero every weight; `G(w; z) = 0` for any input.
    pub fn zeroed(config: &UNetConfig) -> Result<Self> {
        let mut net = Self::init(config)?;
        net.zero_weights();
        Ok(net)
    }

    pub fn zero_weights(&mut self) {
        for p in &mut self.params {
            Rc::make_mut(&mut p.data).fill(0.0);
        }
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn param_elements(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn param_label(&self, idx: usize) -> &str {
        &self.params[idx].label
    }

    pub fn param_data(&self, idx: usize) -> &[f64] {
        &self.params[idx].data
    }

    pub fn param_data_mut(&mut self, idx: usize) -> &mut [f64] {
        let data: &mut Vec<f64> = Rc::make_mut(&mut self.params[idx].data);
        data.as_mut_slice()
    }

    /// Record `G(w; z)` on the tape. `z` must be a single-channel CHW tensor
    /// whose spatial dims are divisible by `2^depth`.
    pub fn forward(&self, tape: &Tape, z: Var) -> Result<UNetForward> {
        let (c, h, w) = match tape.shape(z) {
            Shape::Chw(c, h, w) => (c, h, w),
            other => {
                return Err(Error::InvalidInput(format!("unet input must be CHW, got {other:?}")))
            }
        };
        if c != 1 {
            return Err(Error::InvalidInput(format!("unet input must have 1 channel, got {c}")));
        }
        let div = 1usize << self.config.depth;
        if h % div != 0 || w % div != 0 {
            return Err(Error::InvalidInput(format!(
                "unet input {h}x{w} not divisible by 2^depth = {div}"
            )));
        }

        let pad = (self.config.kernel_size - 1) / 2;
        let slope = self.config.activation_slope;
        let mut param_vars = Vec::with_capacity(self.params.len());
        let mut cursor = 0usize;
        let mut next_conv = |tape: &Tape, x: Var, stride: usize, pad: usize| -> Result<Var> {
            let kernel = tape.leaf_shared(
                self.params[cursor].shape,
                self.params[cursor].data.clone(),
                true,
            )?;
            let bias = tape.leaf_shared(
                self.params[cursor + 1].shape,
                self.params[cursor + 1].data.clone(),
                true,
            )?;
            param_vars.push(kernel);
            param_vars.push(bias);
            cursor += 2;
            tape.conv2d(x, kernel, bias, stride, pad)
        };

        let mut x = z;
        let mut skips = Vec::with_capacity(self.config.depth);
        for _ in 0..self.config.depth {
            let a = tape.leaky_relu(next_conv(tape, x, 1, pad)?, slope)?;
            skips.push(a);
            x = match self.config.downsample {
                Downsample::StridedConv => next_conv(tape, a, 2, pad)?,
                Downsample::AvgPool => tape.avg_pool2x(a)?,
            };
        }
        x = tape.leaky_relu(next_conv(tape, x, 1, pad)?, slope)?;
        x = tape.leaky_relu(next_conv(tape, x, 1, pad)?, slope)?;
        for skip in skips.into_iter().rev() {
            let up = tape.upsample2x(x)?;
            let cat = tape.concat_channels(up, skip)?;
            x = tape.leaky_relu(next_conv(tape, cat, 1, pad)?, slope)?;
        }
        let output = next_conv(tape, x, 1, 0)?;
        Ok(UNetForward { output, params: param_vars })
    }

    /// Serialize parameters as a little-endian blob. Layout:
    ///
    /// | bytes | field |
    /// |-------|-------|
    /// | 4     | magic `UNW1` |
    /// | 4     | format version, u32 = 1 |
    /// | 4     | depth, u32 |
    /// | 4     | base_channels, u32 |
    /// | 4     | kernel_size, u32 |
    /// | 4     | downsample, u32 (0 strided conv, 1 avg pool) |
    /// | 8     | activation_slope, f64 |
    /// | 8     | seed, u64 |
    /// | 8     | total element count, u64 |
    /// | 8 * n | parameters, f64, in layout order |
    pub fn save_params(&self, mut out: impl Write) -> Result<()> {
        out.write_all(b"UNW1")?;
        out.write_all(&1u32.to_le_bytes())?;
        out.write_all(&(self.config.depth as u32).to_le_bytes())?;
        out.write_all(&(self.config.base_channels as u32).to_le_bytes())?;
        out.write_all(&(self.config.kernel_size as u32).to_le_bytes())?;
        let ds: u32 = match self.config.downsample {
            Downsample::StridedConv => 0,
            Downsample::AvgPool => 1,
        };
        out.write_all(&ds.to_le_bytes())?;
        out.write_all(&self.config.activation_slope.to_le_bytes())?;
        out.write_all(&self.config.seed.to_le_bytes())?;
        out.write_all(&(self.param_elements() as u64).to_le_bytes())?;
        for p in &self.params {
            for v in p.data.iter() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load_params(mut input: impl Read) -> Result<Self> {
        let fail = |detail: &str| Error::Format { path: "<unet blob>".into(), detail: detail.into() };
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != b"UNW1" {
            return Err(fail("bad magic"));
        }
        let mut u32buf = [0u8; 4];
        let mut read_u32 = |input: &mut dyn Read| -> Result<u32> {
            input.read_exact(&mut u32buf)?;
            Ok(u32::from_le_bytes(u32buf))
        };
        if read_u32(&mut input)? != 1 {
            return Err(fail("unsupported version"));
        }
        let depth = read_u32(&mut input)? as usize;
        let base_channels = read_u32(&mut input)? as usize;
        let kernel_size = read_u32(&mut input)? as usize;
        let downsample = match read_u32(&mut input)? {
            0 => Downsample::StridedConv,
            1 => Downsample::AvgPool,
            _ => return Err(fail("unknown downsample code")),
        };
        let mut f64buf = [0u8; 8];
        input.read_exact(&mut f64buf)?;
        let activation_slope = f64::from_le_bytes(f64buf);
        input.read_exact(&mut f64buf)?;
        let seed = u64::from_le_bytes(f64buf);
        input.read_exact(&mut f64buf)?;
        let count = u64::from_le_bytes(f64buf) as usize;

        let config =
            UNetConfig { depth, base_channels, kernel_size, activation_slope, seed, downsample };
        let mut net = Self::init(&config)?;
        if net.param_elements() != count {
            return Err(fail(&format!(
                "element count {} does not match config ({} expected)",
                count,
                net.param_elements()
            )));
        }
        for p in &mut net.params {
            let data = Rc::make_mut(&mut p.data);
            for v in data.iter_mut() {
                input.read_exact(&mut f64buf)?;
                *v = f64::from_le_bytes(f64buf);
            }
        }
        Ok(net)
    }
}
