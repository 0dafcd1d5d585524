//! Rate-distortion training of one attribute codec: latents, decoder and ARM.
//!
//! The loss is `D + lambda * R / M`, with `D` the mean squared error in the
//! normalized attribute domain and `R` the modeled codelength in bits. The
//! first `noise_fraction` of iterations perturb latents with uniform noise;
//! the rest round them and pass gradients straight through.

use crate::arm::{estimate_rate, ArmNet};
use crate::autodiff::{backward, forward, NodeId, Tape};
use crate::error::{Error, Result};
use crate::gaussian::{normalize, AttributeMatrix, NormalizationParams};
use crate::geometry::OctreeHierarchy;
use crate::latent::{
    decoder_forward, upsample_copy, DecoderConfig, DecoderNet, LatentPyramid, NeighborTable,
};
use crate::tensor::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub iterations: usize,
    /// Peak learning rate of the network weights.
    pub lr: f64,
    /// Peak learning rate of the latents.
    pub latent_lr: f64,
    /// Cosine decay ends at `lr * lr_floor`.
    pub lr_floor: f64,
    pub seed: u64,
    pub noise_fraction: f64,
    pub levels: usize,
    pub context: usize,
    pub arm_hidden: usize,
    pub decoder: DecoderConfig,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            iterations: 10_000,
            lr: 3e-3,
            latent_lr: 0.2,
            lr_floor: 0.02,
            seed: 0,
            noise_fraction: 0.9,
            levels: 5,
            context: 16,
            arm_hidden: 16,
            decoder: DecoderConfig::default(),
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_fraction) {
            return Err(Error::Config("noise fraction must lie in [0, 1]".into()));
        }
        if self.levels == 0 || self.context == 0 || self.arm_hidden == 0 {
            return Err(Error::Config(
                "levels, context and ARM width must be >= 1".into(),
            ));
        }
        if self.decoder.hidden == 0 || self.decoder.conv_hidden == 0 {
            return Err(Error::Config("decoder widths must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.latent_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn noise_iterations(&self) -> usize {
        (self.iterations as f64 * self.noise_fraction).round() as usize
    }

    fn lr_at(&self, peak: f64, it: usize) -> f64 {
        let floor = peak * self.lr_floor;
        let t = it as f64 / self.iterations.max(1) as f64;
        floor + 0.5 * (peak - floor) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub loss: f64,
    pub distortion: f64,
    pub bits: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub distortion: f64,
    pub bits: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedAttribute {
    pub attr_id: u8,
    pub pyramid: LatentPyramid,
    pub decoder: DecoderNet,
    pub arm: ArmNet,
    pub norm: NormalizationParams,
    /// Loss of the stored state with latents rounded to integers.
    pub report: LossReport,
    pub log: Vec<LogRow>,
    pub restarted: bool,
}

/// Round half to even; used for latents everywhere.
pub fn round_latent(v: f32) -> f32 {
    v.round_ties_even()
}

pub fn rounded(p: &LatentPyramid) -> LatentPyramid {
    LatentPyramid {
        attr_id: p.attr_id,
        levels: p
            .levels
            .iter()
            .map(|l| l.iter().map(|&v| round_latent(v)).collect())
            .collect(),
    }
}

/// Uniform noise in `[-0.5, 0.5)` on every latent, a pure function of
/// `(seed, iteration)` and the pyramid shape.
pub fn add_noise(p: &LatentPyramid, seed: u64, iteration: u64) -> LatentPyramid {
    let mut rng = noise_rng(seed, iteration);
    LatentPyramid {
        attr_id: p.attr_id,
        levels: p
            .levels
            .iter()
            .map(|l| l.iter().map(|&v| v + (rng.random::<f32>() - 0.5)).collect())
            .collect(),
    }
}

fn noise_rng(seed: u64, iteration: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration);
    rng
}

/// `(loss, distortion, bits)` of the given latents, taken as they are.
pub fn rd_loss(
    target: &AttributeMatrix,
    h: &OctreeHierarchy,
    nbr: &NeighborTable,
    pyramid: &LatentPyramid,
    decoder: &DecoderNet,
    arm: &ArmNet,
    lambda: f64,
) -> Result<LossReport> {
    if target.rows() != h.len() || target.channels != decoder.out_channels {
        return Err(Error::shape(format!(
            "attribute is {}x{}, decoder expects {}x{}",
            target.rows(),
            target.channels,
            h.len(),
            decoder.out_channels
        )));
    }
    let rec = decoder_forward(&upsample_copy(pyramid, h)?, decoder, nbr)?;
    let sse: f64 = rec
        .data
        .iter()
        .zip(&target.values)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    let distortion = sse / rec.len() as f64;
    let bits = estimate_rate(pyramid, arm)?;
    Ok(LossReport {
        loss: distortion + lambda * bits / h.len() as f64,
        distortion,
        bits,
    })
}

/// The training graph of one attribute. Parameter slots: decoder `0..8`,
/// ARM `8..14`, latent levels `14..14 + k`. Input slots: per-level latent
/// perturbations `0..k`, then the target.
pub struct RdGraph {
    pub tape: Tape,
    pub loss: NodeId,
    pub distortion: NodeId,
    pub rate: NodeId,
    pub levels: usize,
}

pub const DECODER_SLOT: usize = 0;
pub const ARM_SLOT: usize = 8;
pub const LATENT_SLOT: usize = 14;

impl RdGraph {
    pub fn build(
        h: &OctreeHierarchy,
        nbr: Arc<NeighborTable>,
        channels: usize,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        let k = h.num_levels();
        let mut tape = Tape::new();
        let mut noisy = Vec::with_capacity(k);
        for (j, l) in h.levels.iter().enumerate() {
            let y = tape.param(LATENT_SLOT + j, l.len(), 1)?;
            let n = tape.input(j, l.len(), 1)?;
            noisy.push(tape.add(y, n)?);
        }
        let feats = tape.upsample(noisy.clone(), Arc::new(h.parent_map.clone()))?;
        let rec = DecoderNet::record(
            &mut tape,
            feats,
            k,
            cfg.decoder,
            channels,
            nbr,
            DECODER_SLOT,
        )?;
        let target = tape.input(k, h.len(), channels)?;
        let distortion = tape.mse(rec, target)?;
        let bits = ArmNet::record(&mut tape, &noisy, cfg.context, cfg.arm_hidden, ARM_SLOT)?;
        let rate = tape.sum(bits)?;
        let loss = tape.linear_sum(vec![(distortion, 1.0), (rate, cfg.lambda / h.len() as f64)])?;
        Ok(Self {
            tape,
            loss,
            distortion,
            rate,
            levels: k,
        })
    }
}

struct State {
    params: Vec<Mat<f32>>,
}

impl State {
    fn new(pyramid: &LatentPyramid, decoder: &DecoderNet, arm: &ArmNet) -> Self {
        let mut params = decoder.tensors.clone();
        params.extend(arm.tensors.iter().cloned());
        params.extend(pyramid.levels.iter().map(|l| Mat::column_vector(l.clone())));
        Self { params }
    }

    fn split(
        &self,
        attr_id: u8,
        in_width: usize,
        cfg: &TrainConfig,
        channels: usize,
    ) -> Result<(LatentPyramid, DecoderNet, ArmNet)> {
        let decoder = DecoderNet::from_tensors(
            in_width,
            cfg.decoder,
            channels,
            self.params[DECODER_SLOT..ARM_SLOT].to_vec(),
        )?;
        let arm = ArmNet::from_tensors(
            cfg.context,
            cfg.arm_hidden,
            self.params[ARM_SLOT..LATENT_SLOT].to_vec(),
        )?;
        let pyramid = LatentPyramid {
            attr_id,
            levels: self.params[LATENT_SLOT..]
                .iter()
                .map(|m| m.data.clone())
                .collect(),
        };
        Ok((pyramid, decoder, arm))
    }
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(params: &[Mat<f32>]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }

    fn step(
        &mut self,
        params: &mut [Mat<f32>],
        grads: &[Mat<f32>],
        lrs: &[f64],
        cfg: &TrainConfig,
    ) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (s, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let lr = lrs[s];
            for (i, (w, &gv)) in p.data.iter_mut().zip(&g.data).enumerate() {
                let gv = gv as f64;
                let m = &mut self.m[s][i];
                let v = &mut self.v[s][i];
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gv;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gv * gv;
                let upd = lr * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_eps);
                *w = (*w as f64 - upd) as f32;
            }
        }
    }
}

fn train_once(
    attr_id: u8,
    target: &AttributeMatrix,
    h: &OctreeHierarchy,
    graph: &RdGraph,
    cfg: &TrainConfig,
    lr_scale: f64,
) -> Result<(State, Vec<LogRow>)> {
    let k = h.num_levels();
    let channels = target.channels;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_rng.set_stream(u64::MAX);
    let decoder = DecoderNet::init(k, cfg.decoder, channels, &mut init_rng);
    let arm = ArmNet::init(cfg.context, cfg.arm_hidden, &mut init_rng);
    let mut state = State::new(&LatentPyramid::zeros(attr_id, h), &decoder, &arm);
    let mut adam = Adam::new(&state.params);
    let target_mat = Mat::from_vec(h.len(), channels, target.values.clone())?;

    let noise_iters = cfg.noise_iterations();
    let has_hard = noise_iters < cfg.iterations;
    let mut best: Option<(f64, Vec<Mat<f32>>)> = None;
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut inputs: Vec<Mat<f32>> = h.levels.iter().map(|l| Mat::zeros(l.len(), 1)).collect();
    inputs.push(target_mat);
    let one = Mat::scalar(1.0f32);

    for it in 0..=cfg.iterations {
        let noisy = it < noise_iters;
        if noisy {
            let mut rng = noise_rng(cfg.seed, it as u64);
            for inp in inputs.iter_mut().take(k) {
                for v in &mut inp.data {
                    *v = rng.random::<f32>() - 0.5;
                }
            }
        } else {
            for j in 0..k {
                let y = &state.params[LATENT_SLOT + j].data;
                for (d, &v) in inputs[j].data.iter_mut().zip(y) {
                    *d = round_latent(v) - v;
                }
            }
        }
        let vals = forward(&graph.tape, &state.params, &inputs)?;
        let loss = vals.scalar(graph.loss) as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite loss at iteration {it} (last logged loss {:?})",
                log.last().map(|r: &LogRow| r.loss)
            )));
        }
        log.push(LogRow {
            iteration: it,
            distortion: vals.scalar(graph.distortion) as f64,
            bits: vals.scalar(graph.rate) as f64,
            loss,
        });
        let tracked = !has_hard || !noisy;
        if tracked && best.as_ref().is_none_or(|b| loss < b.0) {
            best = Some((loss, state.params.clone()));
        }
        // The extra pass after the last update only scores the final state.
        if it == cfg.iterations {
            break;
        }
        let grads = backward(&graph.tape, &vals, graph.loss, &one)?;
        let lr = cfg.lr_at(cfg.lr, it) * lr_scale;
        let llr = cfg.lr_at(cfg.latent_lr, it) * lr_scale;
        let lrs: Vec<f64> = (0..state.params.len())
            .map(|s| if s >= LATENT_SLOT { llr } else { lr })
            .collect();
        adam.step(&mut state.params, &grads.params, &lrs, cfg);
    }
    if let Some((_, p)) = best {
        state.params = p;
    }
    Ok((state, log))
}

pub fn train_attribute(
    attr: &AttributeMatrix,
    h: &OctreeHierarchy,
    cfg: &TrainConfig,
) -> Result<TrainedAttribute> {
    let nbr = Arc::new(NeighborTable::new(h));
    train_attribute_with(attr, h, nbr, cfg)
}

fn train_attribute_with(
    attr: &AttributeMatrix,
    h: &OctreeHierarchy,
    nbr: Arc<NeighborTable>,
    cfg: &TrainConfig,
) -> Result<TrainedAttribute> {
    cfg.validate()?;
    if attr.rows() != h.len() {
        return Err(Error::shape(format!(
            "attribute has {} rows for {} voxels",
            attr.rows(),
            h.len()
        )));
    }
    if cfg.levels != h.num_levels() {
        return Err(Error::Config(format!(
            "config asks for {} levels, hierarchy has {}",
            cfg.levels,
            h.num_levels()
        )));
    }
    let (target, norm) = normalize(attr);
    let graph = RdGraph::build(h, nbr.clone(), attr.channels, cfg)?;
    let (state, log, restarted) = match train_once(attr.attr_id, &target, h, &graph, cfg, 1.0) {
        Ok((s, l)) => (s, l, false),
        Err(Error::Divergence(first)) => {
            match train_once(attr.attr_id, &target, h, &graph, cfg, 0.1) {
                Ok((s, l)) => (s, l, true),
                Err(Error::Divergence(second)) => {
                    return Err(Error::Divergence(format!(
                        "{first}; retry at lr/10 also failed: {second}"
                    )))
                }
                Err(e) => return Err(e),
            }
        }
        Err(e) => return Err(e),
    };
    let (pyramid, decoder, arm) = state.split(attr.attr_id, h.num_levels(), cfg, attr.channels)?;
    let report = rd_loss(
        &target,
        h,
        &nbr,
        &rounded(&pyramid),
        &decoder,
        &arm,
        cfg.lambda,
    )?;
    Ok(TrainedAttribute {
        attr_id: attr.attr_id,
        pyramid,
        decoder,
        arm,
        norm,
        report,
        log,
        restarted,
    })
}

/// Trains every attribute independently under one shared lambda. Failures
/// carry the attribute id.
pub fn train_model(
    attrs: &[AttributeMatrix],
    h: &OctreeHierarchy,
    cfg: &TrainConfig,
) -> Result<Vec<TrainedAttribute>> {
    cfg.validate()?;
    let nbr = Arc::new(NeighborTable::new(h));
    attrs
        .par_iter()
        .map(|a| {
            train_attribute_with(a, h, nbr.clone(), cfg).map_err(|e| Error::Attribute {
                attr: a.attr_id,
                source: Box::new(e),
            })
        })
        .collect()
}

/// Per-iteration training log as CSV: `attr,iteration,distortion,bits,loss`.
pub fn write_training_log(path: &Path, trained: &[TrainedAttribute]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["attr", "iteration", "distortion", "bits", "loss"])
        .map_err(csv_err)?;
    for t in trained {
        for r in &t.log {
            w.write_record(&[
                t.attr_id.to_string(),
                r.iteration.to_string(),
                r.distortion.to_string(),
                r.bits.to_string(),
                r.loss.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

/// Writes a short human summary of trained attributes.
pub fn summarize(trained: &[TrainedAttribute], mut out: impl Write) -> Result<()> {
    for t in trained {
        writeln!(
            out,
            "attr {:>2}: loss {:.6} distortion {:.3e} bits {:.1}{}",
            t.attr_id,
            t.report.loss,
            t.report.distortion,
            t.report.bits,
            if t.restarted { " (restarted)" } else { "" }
        )?;
    }
    Ok(())
}
