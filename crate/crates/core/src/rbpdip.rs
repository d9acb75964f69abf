//! The residual-back-projection reconstruction loop and the fixed-input DIP
//! baseline.
//!
//! Per iteration, the untrained network's input is nudged by the steepest
//! descent correction `z = c + alpha * beta(n) * r` (held constant for
//! backpropagation), the estimate is `c = z + G(w; z)`, and the weights are
//! updated from the Huber loss of the fresh normal-equation residual. The
//! `beta` sigmoid keeps early iterations prior-dominated and late iterations
//! residual-dominated.

use crate::autodiff::{RmsProp, SelfAdjointMap, Shape, Tape, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::mbir::{normal_residual, sd_step_size, StepSize};
use crate::metrics::snr_db;
use crate::projection::{back_project, normal_op, ParallelGeometry, Sinogram};
use crate::recon::{IterRecord, ReconRun};
use crate::unet::{UNet, UNetConfig};
use rand::{Rng, SeedableRng};
use std::io::{Read, Write};
use std::path::PathBuf;
use std::rc::Rc;

/// Residual blend weight: a sigmoid in the iteration count, centered at
/// `n_c` after stretching by `n_s`, saturating at `beta_max`.
pub fn beta(n: usize, n_s: f64, n_c: f64, beta_max: f64) -> f64 {
    beta_max / (1.0 + (-(n as f64 / n_s - n_c)).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReconMode {
    /// Algorithm with the RBP input update and the outer skip connection.
    RbpDip,
    /// Plain deep-image-prior baseline: fixed random input, no skip.
    DipFixed,
}

/// Write network + loop state every `every` iterations into `dir`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointSpec {
    pub every: usize,
    pub dir: PathBuf,
}

#[derive(Debug, Clone)]
pub struct RbpConfig {
    pub n_c: f64,
    pub n_s: f64,
    pub beta_max: f64,
    pub max_iters: usize,
    pub huber_delta: f64,
    pub unet: UNetConfig,
    pub mode: ReconMode,
    /// Seeds the fixed DIP input noise; network weights use `unet.seed`.
    pub seed: u64,
    pub optimizer: RmsProp,
    /// Force a constant beta (used by the reduction checks, and available as
    /// a config hook).
    pub beta_override: Option<f64>,
    /// Skip every weight update; the network stays at its initialization.
    pub freeze_weights: bool,
    pub checkpoint: Option<CheckpointSpec>,
}

impl Default for RbpConfig {
    fn default() -> Self {
        Self {
            n_c: 4.0,
            n_s: 1000.0,
            beta_max: 1e-3,
            max_iters: 10_000,
            huber_delta: 1.0,
            unet: UNetConfig::default(),
            mode: ReconMode::RbpDip,
            seed: 0,
            optimizer: RmsProp::reconstruction_default(),
            beta_override: None,
            freeze_weights: false,
            checkpoint: None,
        }
    }
}

impl RbpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.n_s > 0.0) {
            return Err(Error::InvalidConfig("n_s must be > 0".into()));
        }
        if !(self.beta_max > 0.0) {
            return Err(Error::InvalidConfig("beta_max must be > 0".into()));
        }
        if self.max_iters < 1 {
            return Err(Error::InvalidConfig("max_iters must be >= 1".into()));
        }
        if !(self.huber_delta > 0.0) {
            return Err(Error::InvalidConfig("huber_delta must be > 0".into()));
        }
        if let Some(ck) = &self.checkpoint {
            if ck.every == 0 {
                return Err(Error::InvalidConfig("checkpoint interval must be >= 1".into()));
            }
        }
        self.unet.validate()
    }
}

/// The projector's normal operator as a tape-compatible self-adjoint map.
struct NormalMap {
    geom: ParallelGeometry,
}

impl SelfAdjointMap for NormalMap {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let img = Image::from_vec(self.geom.image_width(), self.geom.image_height(), x.to_vec())
            .expect("caller guarantees image-sized input");
        normal_op(&img, &self.geom).expect("dims match").into_values()
    }
}

/// Everything needed to continue an interrupted run, bit-for-bit.
#[derive(Debug, Clone)]
pub struct LoopState {
    /// Next iteration to execute.
    pub iteration: usize,
    pub c: Image,
    pub net: UNet,
    pub accumulators: Vec<Vec<f64>>,
    /// The fixed input, present in DIP mode only.
    pub z_fixed: Option<Image>,
}

/// One iteration's computation graph. The RBP update of `z` happens outside
/// the tape: `z` enters as a constant leaf, so no gradient can flow through
/// the `alpha*beta*r` correction.
struct IterationTape {
    tape: Tape,
    c: Var,
    r: Var,
    loss: Var,
    params: Vec<Var>,
}

fn build_iteration_tape(
    net: &UNet,
    z: &Image,
    mode: ReconMode,
    atg: &Image,
    map: &Rc<dyn SelfAdjointMap>,
    inv_scale: f64,
    delta: f64,
) -> Result<IterationTape> {
    let tape = Tape::new();
    let z_var = tape.leaf(
        Shape::Chw(1, z.height(), z.width()),
        z.values().to_vec(),
        false,
    )?;
    let fwd = net.forward(&tape, z_var)?;
    let c = match mode {
        ReconMode::RbpDip => tape.add(z_var, fwd.output)?,
        ReconMode::DipFixed => fwd.output,
    };
    let r = tape.residual(c, atg.values(), map.clone())?;
    let scaled = tape.scale(r, inv_scale)?;
    let loss = tape.huber_loss(scaled, delta)?;
    Ok(IterationTape { tape, c, r, loss, params: fwd.params })
}

/// RBP-DIP reconstruction (the mode field of `config` is ignored; use
/// [`reconstruct`] to dispatch on it).
pub fn rbp_dip_reconstruct(
    sino: &Sinogram,
    geom: &ParallelGeometry,
    config: &RbpConfig,
    ground_truth: Option<&Image>,
) -> Result<(Image, ReconRun)> {
    run_loop(sino, geom, config, ReconMode::RbpDip, ground_truth, None)
}

/// Fixed-input deep-image-prior baseline; requires `mode: DipFixed`.
pub fn dip_reconstruct(
    sino: &Sinogram,
    geom: &ParallelGeometry,
    config: &RbpConfig,
    ground_truth: Option<&Image>,
) -> Result<(Image, ReconRun)> {
    if config.mode != ReconMode::DipFixed {
        return Err(Error::InvalidConfig("dip_reconstruct requires mode dip-fixed".into()));
    }
    run_loop(sino, geom, config, ReconMode::DipFixed, ground_truth, None)
}

/// Dispatch on `config.mode`.
pub fn reconstruct(
    sino: &Sinogram,
    geom: &ParallelGeometry,
    config: &RbpConfig,
    ground_truth: Option<&Image>,
) -> Result<(Image, ReconRun)> {
    match config.mode {
        ReconMode::RbpDip => rbp_dip_reconstruct(sino, geom, config, ground_truth),
        ReconMode::DipFixed => dip_reconstruct(sino, geom, config, ground_truth),
    }
}

/// Continue a checkpointed run up to `config.max_iters`. The continuation is
/// bitwise identical to the uninterrupted run.
pub fn resume(
    sino: &Sinogram,
    geom: &ParallelGeometry,
    config: &RbpConfig,
    mode: ReconMode,
    ground_truth: Option<&Image>,
    state: LoopState,
) -> Result<(Image, ReconRun)> {
    run_loop(sino, geom, config, mode, ground_truth, Some(state))
}

fn run_loop(
    sino: &Sinogram,
    geom: &ParallelGeometry,
    config: &RbpConfig,
    mode: ReconMode,
    ground_truth: Option<&Image>,
    resume_from: Option<LoopState>,
) -> Result<(Image, ReconRun)> {
    config.validate()?;
    if sino.geometry() != geom {
        return Err(Error::DimensionMismatch("sinogram geometry differs from solver geometry".into()));
    }
    let (w, h) = (geom.image_width(), geom.image_height());
    if let Some(gt) = ground_truth {
        if gt.width() != w || gt.height() != h {
            return Err(Error::DimensionMismatch("ground truth dims differ from geometry".into()));
        }
    }

    let atg = back_project(sino);
    let scale = atg.max_abs();
    let inv_scale = if scale > 0.0 { 1.0 / scale } else { 1.0 };
    let map: Rc<dyn SelfAdjointMap> = Rc::new(NormalMap { geom: geom.clone() });

    let (mut net, mut opt, mut c, z_fixed, start) = match resume_from {
        Some(state) => {
            let mut opt = config.optimizer.clone();
            opt.set_accumulators(state.accumulators);
            (state.net, opt, state.c, state.z_fixed, state.iteration)
        }
        None => {
            let net = UNet::init(&config.unet)?;
            let z_fixed = (mode == ReconMode::DipFixed).then(|| {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
                Image::from_fn(w, h, |_, _| rng.random_range(0.0..0.1))
            });
            (net, config.optimizer.clone(), Image::zeros(w, h), z_fixed, 0)
        }
    };

    let mut r = normal_residual(&atg, &c, geom)?;
    let mut records = Vec::with_capacity(config.max_iters.saturating_sub(start));
    let mut snapshots = Vec::new();

    for n in start..config.max_iters {
        let mut record = IterRecord::new(n, f64::NAN);

        let z = match mode {
            ReconMode::RbpDip => {
                let b = config.beta_override.unwrap_or_else(|| beta(n, config.n_s, config.n_c, config.beta_max));
                record.beta = Some(b);
                let coef = match sd_step_size(&r, geom)? {
                    StepSize::Step(alpha) => {
                        record.alpha = Some(alpha);
                        alpha * b
                    }
                    StepSize::Converged => 0.0,
                    StepSize::NullSpace => {
                        record.null_space = true;
                        0.0
                    }
                };
                let mut z = c.clone();
                z.axpy(coef, &r);
                z
            }
            ReconMode::DipFixed => z_fixed.clone().expect("set at init"),
        };

        let it = build_iteration_tape(&net, &z, mode, &atg, &map, inv_scale, config.huber_delta)?;
        let loss = it.tape.value_scalar(it.loss);
        if !loss.is_finite() {
            return Err(Error::NumericalFailure {
                iteration: n,
                detail: format!("loss became {loss}"),
            });
        }
        record.loss = loss;

        c = Image::from_vec(w, h, it.tape.value(it.c).to_vec())?;
        r = Image::from_vec(w, h, it.tape.value(it.r).to_vec())?;
        record.snr_db = ground_truth.map(|gt| snr_db(&c, gt).unwrap_or(f64::INFINITY));
        records.push(record);

        if !config.freeze_weights {
            it.tape.backward(it.loss)?;
            let grads: Vec<Vec<f64>> = it
                .params
                .iter()
                .map(|p| it.tape.grad(*p).expect("network params require gradients"))
                .collect();
            drop(it); // release shared parameter storage before updating it
            for (slot, grad) in grads.iter().enumerate() {
                opt.step_tensor(slot, net.param_data_mut(slot), grad, n)?;
            }
        }

        if let Some(ck) = &config.checkpoint {
            if (n + 1) % ck.every == 0 {
                std::fs::create_dir_all(&ck.dir)?;
                let state = LoopState {
                    iteration: n + 1,
                    c: c.clone(),
                    net: net.clone(),
                    accumulators: opt.accumulators().to_vec(),
                    z_fixed: z_fixed.clone(),
                };
                let tag = format!("iter{:06}", n + 1);
                state.save(
                    ck.dir.join(format!("{tag}.state")),
                    ck.dir.join(format!("{tag}.unet")),
                    mode,
                )?;
                snapshots.push(n);
            }
        }
    }

    let run = ReconRun { records, snapshots, final_image: c.clone() };
    Ok((c, run))
}

impl LoopState {
    /// Write the loop-state record and the network blob.
    ///
    /// State layout (little-endian): magic `RBL1`, version u32, mode u8
    /// (0 rbp-dip, 1 dip-fixed), next iteration u64, width u32, height u32,
    /// estimate f64s, z flag u8 + fixed-input f64s when set, accumulator
    /// count u64, then per accumulator: length u64 + f64s.
    pub fn save(
        &self,
        state_path: impl AsRef<std::path::Path>,
        unet_path: impl AsRef<std::path::Path>,
        mode: ReconMode,
    ) -> Result<()> {
        let file = std::fs::File::create(state_path.as_ref())?;
        let mut out = std::io::BufWriter::new(file);
        out.write_all(b"RBL1")?;
        out.write_all(&1u32.to_le_bytes())?;
        out.write_all(&[match mode {
            ReconMode::RbpDip => 0u8,
            ReconMode::DipFixed => 1u8,
        }])?;
        out.write_all(&(self.iteration as u64).to_le_bytes())?;
        out.write_all(&(self.c.width() as u32).to_le_bytes())?;
        out.write_all(&(self.c.height() as u32).to_le_bytes())?;
        for v in self.c.values() {
            out.write_all(&v.to_le_bytes())?;
        }
        match &self.z_fixed {
            Some(z) => {
                out.write_all(&[1u8])?;
                for v in z.values() {
                    out.write_all(&v.to_le_bytes())?;
                }
            }
            None => out.write_all(&[0u8])?,
        }
        out.write_all(&(self.accumulators.len() as u64).to_le_bytes())?;
        for acc in &self.accumulators {
            out.write_all(&(acc.len() as u64).to_le_bytes())?;
            for v in acc {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        drop(out);
        let file = std::fs::File::create(unet_path.as_ref())?;
        self.net.save_params(std::io::BufWriter::new(file))
    }

    /// Counterpart of [`LoopState::save`]; returns the state and the mode it
    /// was written under.
    pub fn load(
        state_path: impl AsRef<std::path::Path>,
        unet_path: impl AsRef<std::path::Path>,
    ) -> Result<(Self, ReconMode)> {
        let net = UNet::load_params(std::io::BufReader::new(std::fs::File::open(
            unet_path.as_ref(),
        )?))?;
        let mut input = std::io::BufReader::new(std::fs::File::open(state_path.as_ref())?);
        let fail = |detail: &str| Error::Format {
            path: state_path.as_ref().display().to_string(),
            detail: detail.into(),
        };
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != b"RBL1" {
            return Err(fail("bad magic"));
        }
        let mut b4 = [0u8; 4];
        input.read_exact(&mut b4)?;
        if u32::from_le_bytes(b4) != 1 {
            return Err(fail("unsupported version"));
        }
        let mut b1 = [0u8; 1];
        input.read_exact(&mut b1)?;
        let mode = match b1[0] {
            0 => ReconMode::RbpDip,
            1 => ReconMode::DipFixed,
            _ => return Err(fail("unknown mode")),
        };
        let mut b8 = [0u8; 8];
        input.read_exact(&mut b8)?;
        let iteration = u64::from_le_bytes(b8) as usize;
        input.read_exact(&mut b4)?;
        let w = u32::from_le_bytes(b4) as usize;
        input.read_exact(&mut b4)?;
        let h = u32::from_le_bytes(b4) as usize;
        let read_f64s = |input: &mut dyn Read, n: usize| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(n);
            let mut b8 = [0u8; 8];
            for _ in 0..n {
                input.read_exact(&mut b8)?;
                out.push(f64::from_le_bytes(b8));
            }
            Ok(out)
        };
        let c = Image::from_vec(w, h, read_f64s(&mut input, w * h)?)?;
        input.read_exact(&mut b1)?;
        let z_fixed = if b1[0] == 1 {
            Some(Image::from_vec(w, h, read_f64s(&mut input, w * h)?)?)
        } else {
            None
        };
        input.read_exact(&mut b8)?;
        let n_acc = u64::from_le_bytes(b8) as usize;
        let mut accumulators = Vec::with_capacity(n_acc);
        for _ in 0..n_acc {
            input.read_exact(&mut b8)?;
            let len = u64::from_le_bytes(b8) as usize;
            accumulators.push(read_f64s(&mut input, len)?);
        }
        Ok((Self { iteration, c, net, accumulators, z_fixed }, mode))
    }
}
