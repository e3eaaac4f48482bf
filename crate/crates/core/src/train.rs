//! Training of a small space-optimized VQ autoencoder.
//!
//! Loss per sample (squared Frobenius norms, `z = enc(x)`, `q = g_C(z)`):
//!
//! ```text
//! recon_w * ||x - dec(q)||^2 + vq_w * (||sg[z] - q||^2 + ||sg[q] - z||^2) + reg_w * R(C)
//! ```
//!
//! with `R(C) = |d_C - theta|` (minimal pair) or `|mean pairwise distance - theta|`.
//! Gradient routing: the reconstruction term reaches the decoder and, through a
//! straight-through copy of the quantizer, the encoder; the codebook only
//! receives the second term and `R`; the encoder only the third term.

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::network::{Layer, NetworkSpec, Role};
use crate::quantizer::{self, quantize_grid, CodeGrid, Codebook};
use crate::rng;
use crate::tensor::{Activation, ConvLayer, Kernel4, Shape3, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegObjective {
    MinimalDistance,
    AverageDistance,
}

impl RegObjective {
    pub fn as_str(&self) -> &'static str {
        match self {
            RegObjective::MinimalDistance => "min",
            RegObjective::AverageDistance => "avg",
        }
    }
}

impl std::str::FromStr for RegObjective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "min" | "minimal" | "minimal_distance" => Ok(RegObjective::MinimalDistance),
            "avg" | "average" | "average_distance" => Ok(RegObjective::AverageDistance),
            _ => Err(Error::invalid(format!("unknown regularization objective `{s}`"))),
        }
    }
}

/// Weights of the loss terms plus the codebook regularizer settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub recon: f64,
    pub vq: f64,
    pub reg: f64,
    pub theta: f64,
    pub objective: RegObjective,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            recon: 1.0,
            vq: 1.0,
            reg: 0.1,
            theta: 1.0,
            objective: RegObjective::MinimalDistance,
        }
    }
}

impl LossWeights {
    fn validate(&self) -> Result<()> {
        for (name, v) in [("recon", self.recon), ("vq", self.vq), ("reg", self.reg)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} weight must be finite and >= 0")));
            }
        }
        if !(self.theta > 0.0) || !self.theta.is_finite() {
            return Err(Error::invalid("theta must be positive"));
        }
        Ok(())
    }
}

/// Encoder/decoder/codebook sizes.
///
/// Encoder: `downsample_steps` convolutions with kernel 2 and stride 2
/// (`activation` between them), the last one emitting `latent_dim` channels.
/// Decoder: 1x1 conv, activation, 1x1 conv, activation, nearest upsampling by
/// `2^downsample_steps`, 1x1 conv back to the image channels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArchConfig {
    pub input: Shape3,
    pub activation: Activation,
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    pub latent_dim: usize,
    pub codebook_size: usize,
    pub downsample_steps: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub arch: ArchConfig,
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(())
    }
}

/// Encoder, decoder, codebook and the number of SGD steps taken.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub encoder: NetworkSpec,
    pub decoder: NetworkSpec,
    pub codebook: Codebook,
    pub step: u64,
}

fn he_kernel(rng: &mut rng::Rng, c_out: usize, c_in: usize, k: usize) -> Kernel4 {
    let std = (2.0 / (c_in * k * k) as f64).sqrt();
    let data = rng::normal_vec(rng, c_out * c_in * k * k)
        .into_iter()
        .map(|v| v * std)
        .collect();
    Kernel4::new(c_out, c_in, k, k, data).expect("valid kernel dims")
}

impl ModelState {
    pub fn new(encoder: NetworkSpec, decoder: NetworkSpec, codebook: Codebook, step: u64) -> Result<Self> {
        let state = Self {
            encoder,
            decoder,
            codebook,
            step,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder.role != Role::Encoder || self.decoder.role != Role::Decoder {
            return Err(Error::invalid("encoder/decoder roles swapped"));
        }
        let latent = self.encoder.output_shape()?;
        if latent.c != self.codebook.dim() {
            return Err(Error::shape("encoder output channels vs codebook dim", self.codebook.dim(), latent.c));
        }
        if self.decoder.input_shape != latent {
            return Err(Error::shape("decoder input", latent, self.decoder.input_shape));
        }
        let out = self.decoder.output_shape()?;
        if out != self.encoder.input_shape {
            return Err(Error::shape("decoder output", self.encoder.input_shape, out));
        }
        let f = self.encoder.downsample_factor()?;
        if !f.is_power_of_two() {
            return Err(Error::invalid(format!("downsample factor {f} is not a power of two")));
        }
        Ok(())
    }

    /// Random initial state: He-normal kernels, anchors uniform in `[-1/N, 1/N]^c`.
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        if arch.downsample_steps == 0 {
            return Err(Error::invalid("at least one downsampling step is required"));
        }
        let mut rng = rng::seeded(seed);
        let mut enc_layers = Vec::new();
        let mut c_prev = arch.input.c;
        for s in 0..arch.downsample_steps {
            let last = s + 1 == arch.downsample_steps;
            let c_out = if last { arch.latent_dim } else { arch.encoder_hidden };
            enc_layers.push(Layer::Conv(ConvLayer::new(
                he_kernel(&mut rng, c_out, c_prev, 2),
                (2, 2),
                (0, 0),
            )?));
            if !last {
                enc_layers.push(Layer::Act(arch.activation));
            }
            c_prev = c_out;
        }
        let encoder = NetworkSpec::new(Role::Encoder, arch.input, enc_layers)?;
        let latent = encoder.output_shape()?;
        let dh = arch.decoder_hidden;
        let dec_layers = vec![
            Layer::Conv(ConvLayer::new(he_kernel(&mut rng, dh, arch.latent_dim, 1), (1, 1), (0, 0))?),
            Layer::Act(arch.activation),
            Layer::Conv(ConvLayer::new(he_kernel(&mut rng, dh, dh, 1), (1, 1), (0, 0))?),
            Layer::Act(arch.activation),
            Layer::Upsample(1 << arch.downsample_steps),
            Layer::Conv(ConvLayer::new(he_kernel(&mut rng, arch.input.c, dh, 1), (1, 1), (0, 0))?),
        ];
        let decoder = NetworkSpec::new(Role::Decoder, latent, dec_layers)?;
        let n = arch.codebook_size;
        let r = 1.0 / n as f64;
        let anchors = (0..n * arch.latent_dim).map(|_| rng.random_range(-r..r)).collect();
        Self::new(encoder, decoder, Codebook::new(n, arch.latent_dim, anchors)?, 0)
    }

    /// Re-seeds the anchors by farthest-point selection over the latent
    /// columns of `dataset`; anchors left over once every distinct column is
    /// taken keep their random initial values.
    pub fn seed_codebook_from(&mut self, dataset: &[Tensor]) -> Result<()> {
        let mut columns = Vec::new();
        for x in dataset {
            let z = self.encode(x)?;
            let s = z.shape();
            for i in 0..s.h {
                for j in 0..s.w {
                    columns.push(z.column(i, j));
                }
            }
        }
        let Some(first) = columns.first().cloned() else {
            return Ok(());
        };
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        let mut nearest: Vec<f64> = columns.iter().map(|c| dist(c, &first)).collect();
        let mut chosen = vec![first];
        while chosen.len() < self.codebook.len() {
            let (idx, &d) = nearest
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .expect("columns are nonempty");
            if d <= 1e-12 {
                break;
            }
            let pick = columns[idx].clone();
            for (n, c) in nearest.iter_mut().zip(&columns) {
                *n = n.min(dist(c, &pick));
            }
            chosen.push(pick);
        }
        let dim = self.codebook.dim();
        let mut anchors = self.codebook.as_slice().to_vec();
        for (k, a) in chosen.iter().enumerate() {
            anchors[k * dim..(k + 1) * dim].copy_from_slice(a);
        }
        self.codebook = Codebook::new(self.codebook.len(), dim, anchors)?;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.decoder.param_count() + self.codebook.as_slice().len()
    }

    /// Encoder params, decoder params, then anchors.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p.extend_from_slice(self.codebook.as_slice());
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::shape("model parameters", self.param_count(), p.len()));
        }
        let ne = self.encoder.param_count();
        let nd = self.decoder.param_count();
        self.encoder.set_params(&p[..ne])?;
        self.decoder.set_params(&p[ne..ne + nd])?;
        self.codebook.as_mut_slice().copy_from_slice(&p[ne + nd..]);
        Ok(())
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.encoder.forward(x)
    }

    /// `dec(g_C(enc(x)))` together with the code grid.
    pub fn reconstruct(&self, x: &Tensor) -> Result<(CodeGrid, Tensor)> {
        let (grid, q) = quantize_grid(&self.encode(x)?, &self.codebook)?;
        Ok((grid, self.decoder.forward(&q)?))
    }
}

/// Loss components of one sample (unweighted).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub recon: f64,
    /// `||sg[z] - q||^2`
    pub codebook: f64,
    /// `||sg[q] - z||^2`
    pub commitment: f64,
}

impl LossParts {
    pub fn weighted(&self, w: &LossWeights) -> f64 {
        w.recon * self.recon + w.vq * (self.codebook + self.commitment)
    }
}

/// Gradients in the same layout as [`ModelState::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub encoder: Vec<f64>,
    pub decoder: Vec<f64>,
    pub codebook: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(state: &ModelState) -> Self {
        Self {
            encoder: vec![0.0; state.encoder.param_count()],
            decoder: vec![0.0; state.decoder.param_count()],
            codebook: vec![0.0; state.codebook.as_slice().len()],
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        [&self.encoder[..], &self.decoder[..], &self.codebook[..]].concat()
    }

    fn add_scaled(&mut self, other: &Gradients, s: f64) {
        for (a, b) in [
            (&mut self.encoder, &other.encoder),
            (&mut self.decoder, &other.decoder),
            (&mut self.codebook, &other.codebook),
        ] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += s * y);
        }
    }
}

/// Values held fixed by the stop-gradients at the evaluation point.
#[derive(Debug, Clone, PartialEq)]
pub struct StopGradPoint {
    pub grid: CodeGrid,
    pub latent: Tensor,
    pub quantized: Tensor,
}

fn sq_norm_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(a.sub(b)?.data().iter().map(|v| v * v).sum())
}

/// Weighted VQ loss of one sample and its stop-gradient-routed gradient.
pub fn vq_loss_weighted(
    x: &Tensor,
    state: &ModelState,
    w: &LossWeights,
) -> Result<(LossParts, Gradients, StopGradPoint)> {
    let (z, enc_cache) = state.encoder.forward_cached(x)?;
    let (grid, q) = quantize_grid(&z, &state.codebook)?;
    let (xhat, dec_cache) = state.decoder.forward_cached(&q)?;
    let resid = xhat.sub(x)?;
    let recon: f64 = resid.data().iter().map(|v| v * v).sum();
    let diff = z.sub(&q)?;
    let latent_sq: f64 = diff.data().iter().map(|v| v * v).sum();
    let parts = LossParts {
        recon,
        codebook: latent_sq,
        commitment: latent_sq,
    };

    let (g_q, dec_kernel_grads) = state.decoder.backward(&dec_cache, &resid.scale(2.0 * w.recon)?)?;
    // straight-through: dL/dz gets dL/dq unchanged, plus the commitment pull toward q
    let g_z = g_q.lin_comb(1.0, &diff, 2.0 * w.vq)?;
    let (_, enc_kernel_grads) = state.encoder.backward(&enc_cache, &g_z)?;

    let dim = state.codebook.dim();
    let mut g_cb = vec![0.0; state.codebook.as_slice().len()];
    let s = z.shape();
    for i in 0..s.h {
        for j in 0..s.w {
            let k = grid.get(i, j);
            for c in 0..dim {
                g_cb[k * dim + c] -= 2.0 * w.vq * diff.get(c, i, j);
            }
        }
    }
    let flat = |ks: Vec<Kernel4>| ks.iter().flat_map(|k| k.data().to_vec()).collect::<Vec<_>>();
    Ok((
        parts,
        Gradients {
            encoder: flat(enc_kernel_grads),
            decoder: flat(dec_kernel_grads),
            codebook: g_cb,
        },
        StopGradPoint {
            grid,
            latent: z,
            quantized: q,
        },
    ))
}

/// Unit-weight VQ loss `||x - x_hat||^2 + ||sg[z] - q||^2 + ||sg[q] - z||^2` and its gradient.
pub fn vq_loss(x: &Tensor, state: &ModelState) -> Result<(f64, Gradients)> {
    let w = LossWeights {
        recon: 1.0,
        vq: 1.0,
        reg: 0.0,
        ..LossWeights::default()
    };
    let (parts, grads, _) = vq_loss_weighted(x, state, &w)?;
    Ok((parts.weighted(&w), grads))
}

/// Codebook regularizer and its (sub)gradient with respect to the anchors.
///
/// At `distance == theta`, and for coincident anchors, the subgradient 0 is used.
pub fn reg_loss(cb: &Codebook, theta: f64, objective: RegObjective) -> Result<(f64, Vec<f64>)> {
    match objective {
        RegObjective::MinimalDistance => {
            let (i, j, _) = quantizer::min_pair(cb)?;
            Ok(pair_reg(cb, i, j, theta))
        }
        RegObjective::AverageDistance => {
            let n = cb.len();
            let mean = quantizer::mean_pairwise_distance(cb)?;
            let dim = cb.dim();
            let mut grad = vec![0.0; cb.as_slice().len()];
            let sign = sign(mean - theta);
            if sign != 0.0 {
                let pairs = (n * (n - 1) / 2) as f64;
                for i in 0..n {
                    for j in i + 1..n {
                        let (a, b) = (cb.anchor(i), cb.anchor(j));
                        let d = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                        if d == 0.0 {
                            continue;
                        }
                        for c in 0..dim {
                            let g = sign * (a[c] - b[c]) / (d * pairs);
                            grad[i * dim + c] += g;
                            grad[j * dim + c] -= g;
                        }
                    }
                }
            }
            Ok(((mean - theta).abs(), grad))
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn pair_reg(cb: &Codebook, i: usize, j: usize, theta: f64) -> (f64, Vec<f64>) {
    let dim = cb.dim();
    let (a, b) = (cb.anchor(i), cb.anchor(j));
    let d = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut grad = vec![0.0; cb.as_slice().len()];
    let s = sign(d - theta);
    if s != 0.0 && d > 0.0 {
        for c in 0..dim {
            let g = s * (a[c] - b[c]) / d;
            grad[i * dim + c] = g;
            grad[j * dim + c] = -g;
        }
    }
    ((d - theta).abs(), grad)
}

/// Full per-sample objective (VQ terms plus regularizer) with gradient.
pub fn total_loss(x: &Tensor, state: &ModelState, w: &LossWeights) -> Result<(f64, Gradients, StopGradPoint)> {
    let (parts, mut grads, point) = vq_loss_weighted(x, state, w)?;
    let mut total = parts.weighted(w);
    if w.reg > 0.0 && state.codebook.len() >= 2 {
        let (r, g) = reg_loss(&state.codebook, w.theta, w.objective)?;
        total += w.reg * r;
        grads.codebook.iter_mut().zip(&g).for_each(|(a, b)| *a += w.reg * b);
    }
    Ok((total, grads, point))
}

/// Per-epoch training summary (means over the epoch's samples).
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub recon: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub reg: f64,
    pub total: f64,
    pub d_c: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub records: Vec<EpochRecord>,
}

fn check_dataset(dataset: &[Tensor], shape: Shape3) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    for x in dataset {
        if x.shape() != shape {
            return Err(Error::shape("dataset image", shape, x.shape()));
        }
    }
    Ok(())
}

/// Trains from the seeded initial state for `config.arch`, with anchors
/// seeded from the initial latents of `dataset`.
pub fn train(dataset: &[Tensor], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let mut state = ModelState::init(&config.arch, config.seed)?;
    check_dataset(dataset, state.encoder.input_shape)?;
    state.seed_codebook_from(dataset)?;
    train_from(dataset, config, state)
}

/// Plain minibatch SGD from a given state. Deterministic in `config.seed`.
pub fn train_from(dataset: &[Tensor], config: &TrainConfig, mut state: ModelState) -> Result<TrainOutcome> {
    config.validate()?;
    state.validate()?;
    check_dataset(dataset, state.encoder.input_shape)?;
    let w = &config.weights;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut shuffle_rng = rng::seeded(rng::derive_seed(config.seed, 0x5_4u64));
    let mut records = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sums = LossParts::default();
        let mut reg_sum = 0.0;
        let mut steps = 0usize;
        for batch in order.chunks(config.batch_size) {
            let mut grads = Gradients::zeros_like(&state);
            let inv = 1.0 / batch.len() as f64;
            for &idx in batch {
                let (parts, g, _) = vq_loss_weighted(&dataset[idx], &state, w)
                    .map_err(|e| diverged(e, state.step))?;
                grads.add_scaled(&g, inv);
                sums.recon += parts.recon;
                sums.codebook += parts.codebook;
                sums.commitment += parts.commitment;
            }
            if w.reg > 0.0 && state.codebook.len() >= 2 {
                let (r, g) = reg_loss(&state.codebook, w.theta, w.objective)?;
                reg_sum += r;
                grads.codebook.iter_mut().zip(&g).for_each(|(a, b)| *a += w.reg * b);
            }
            steps += 1;
            let lr = config.learning_rate;
            let mut p = state.params();
            for (pi, gi) in p.iter_mut().zip(grads.flatten()) {
                *pi -= lr * gi;
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged { step: state.step });
            }
            state.set_params(&p)?;
            state.step += 1;
        }
        let n = dataset.len() as f64;
        let latents = dataset
            .iter()
            .map(|x| state.encode(x))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| diverged(e, state.step))?;
        let rec = EpochRecord {
            epoch,
            recon: sums.recon / n,
            codebook: sums.codebook / n,
            commitment: sums.commitment / n,
            reg: reg_sum / steps as f64,
            total: sums.weighted(w) / n + w.reg * reg_sum / steps as f64,
            d_c: if state.codebook.len() >= 2 {
                quantizer::min_pairwise_distance(&state.codebook)?
            } else {
                0.0
            },
            gamma: quantizer::gamma(&latents, &state.codebook)?,
        };
        if !rec.total.is_finite() {
            return Err(Error::Diverged { step: state.step });
        }
        records.push(rec);
    }
    Ok(TrainOutcome { state, records })
}

fn diverged(e: Error, step: u64) -> Error {
    match e {
        Error::NonFinite(_) => Error::Diverged { step },
        other => other,
    }
}

/// Analytic and central-difference gradients of the stop-gradient objective.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheck {
    /// `max |a - n| / max(|a|, |n|, 1e-8)`.
    pub fn max_relative_error(&self) -> f64 {
        max_relative_error(&self.analytic, &self.numeric)
    }
}

pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Objective whose ordinary gradient equals the stop-gradient-routed one at
/// `point`: quantizer assignments and every `sg[...]` operand are frozen,
/// and the decoder sees `z + (q0 - z0)`.
fn frozen_objective(
    x: &Tensor,
    state: &ModelState,
    point: &StopGradPoint,
    pair: Option<(usize, usize)>,
    w: &LossWeights,
) -> Result<f64> {
    let z = state.encoder.forward(x)?;
    let st = z.add(&point.quantized.sub(&point.latent)?)?;
    let xhat = state.decoder.forward(&st)?;
    let recon = sq_norm_diff(&xhat, x)?;
    let q_now = quantizer::dequantize(&point.grid, &state.codebook)?;
    let codebook = sq_norm_diff(&point.latent, &q_now)?;
    let commitment = sq_norm_diff(&point.quantized, &z)?;
    let mut total = w.recon * recon + w.vq * (codebook + commitment);
    if w.reg > 0.0 && state.codebook.len() >= 2 {
        let r = match (w.objective, pair) {
            (RegObjective::MinimalDistance, Some((i, j))) => pair_reg(&state.codebook, i, j, w.theta).0,
            _ => reg_loss(&state.codebook, w.theta, w.objective)?.0,
        };
        total += w.reg * r;
    }
    Ok(total)
}

/// Central finite differences (`h = 1e-5`) over every parameter against the analytic gradient.
pub fn grad_check_detail(state: &ModelState, x: &Tensor, w: &LossWeights) -> Result<GradCheck> {
    let (_, grads, point) = total_loss(x, state, w)?;
    let pair = if state.codebook.len() >= 2 {
        let (i, j, _) = quantizer::min_pair(&state.codebook)?;
        Some((i, j))
    } else {
        None
    };
    let h = 1e-5;
    let p0 = state.params();
    let mut probe = state.clone();
    let mut numeric = Vec::with_capacity(p0.len());
    let mut p = p0.clone();
    for k in 0..p0.len() {
        p[k] = p0[k] + h;
        probe.set_params(&p)?;
        let up = frozen_objective(x, &probe, &point, pair, w)?;
        p[k] = p0[k] - h;
        probe.set_params(&p)?;
        let down = frozen_objective(x, &probe, &point, pair, w)?;
        p[k] = p0[k];
        numeric.push((up - down) / (2.0 * h));
    }
    Ok(GradCheck {
        analytic: grads.flatten(),
        numeric,
    })
}

/// Maximum relative error between analytic and finite-difference gradients.
pub fn grad_check(state: &ModelState, x: &Tensor, w: &LossWeights) -> Result<f64> {
    Ok(grad_check_detail(state, x, w)?.max_relative_error())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cb(rows: &[&[f64]]) -> Codebook {
        Codebook::from_anchors(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn reg_loss_examples() {
        let c = cb(&[&[0.0, 0.0], &[1.0, 0.0], &[5.0, 0.0]]);
        let (l, g) = reg_loss(&c, 1.0, RegObjective::MinimalDistance).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));

        let c = cb(&[&[0.0, 0.0], &[0.6, 0.0], &[2.0, 0.0]]);
        let (l, g) = reg_loss(&c, 1.0, RegObjective::MinimalDistance).unwrap();
        assert!((l - 0.4).abs() < 1e-15);
        // pushes the pair apart, leaves the third anchor alone
        assert_eq!(g, vec![1.0, 0.0, -1.0, 0.0, 0.0, 0.0]);
        assert!(reg_loss(&cb(&[&[1.0]]), 1.0, RegObjective::MinimalDistance).is_err());
    }

    #[test]
    fn average_reg_touches_every_anchor() {
        let c = cb(&[&[0.0, 0.0], &[0.6, 0.0], &[2.0, 0.0]]);
        let (l, g) = reg_loss(&c, 2.0, RegObjective::AverageDistance).unwrap();
        assert!((l - (2.0 - (0.6 + 2.0 + 1.4) / 3.0)).abs() < 1e-15);
        // the middle anchor is pulled equally both ways
        assert!(g[0] > 0.0 && g[2] == 0.0 && g[4] < 0.0);
    }

    #[test]
    fn objective_parses() {
        assert_eq!("min".parse::<RegObjective>().unwrap(), RegObjective::MinimalDistance);
        assert_eq!("avg".parse::<RegObjective>().unwrap(), RegObjective::AverageDistance);
        assert!("max".parse::<RegObjective>().is_err());
    }

    fn identity_model(anchor: &[f64]) -> ModelState {
        // 1x1x1 image, 1x1 identity encoder and decoder, scalar codebook
        let id = || Layer::Conv(ConvLayer::new(Kernel4::new(1, 1, 1, 1, vec![1.0]).unwrap(), (1, 1), (0, 0)).unwrap());
        let s = Shape3::new(1, 1, 1);
        ModelState::new(
            NetworkSpec::new(Role::Encoder, s, vec![id()]).unwrap(),
            NetworkSpec::new(Role::Decoder, s, vec![id()]).unwrap(),
            Codebook::from_anchors(&anchor.iter().map(|&a| vec![a]).collect::<Vec<_>>()).unwrap(),
            0,
        )
        .unwrap()
    }

    #[test]
    fn zero_at_global_minimum() {
        let m = identity_model(&[0.5, 2.0]);
        let x = Tensor::new(Shape3::new(1, 1, 1), vec![2.0]).unwrap();
        let (l, g) = vq_loss(&x, &m).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_hand_expansion() {
        let m = identity_model(&[0.5, 2.0]);
        let x = Tensor::new(Shape3::new(1, 1, 1), vec![0.9]).unwrap();
        let (l, g) = vq_loss(&x, &m).unwrap();
        // q = 0.5: (0.9-0.5)^2 + 2*(0.9-0.5)^2
        assert!((l - 3.0 * 0.16).abs() < 1e-12);
        // codebook: d/dc (0.9 - c)^2 = -2*0.4 at the chosen anchor only
        assert!((g.codebook[0] + 0.8).abs() < 1e-12 && g.codebook[1] == 0.0);
        // decoder: d/dw (0.9 - w*0.5)^2 = -2*0.4*0.5
        assert!((g.decoder[0] + 0.4).abs() < 1e-12);
        // encoder: straight-through recon (-2*0.4*1*0.9) plus commitment (2*0.4*0.9)
        assert!(g.encoder[0].abs() < 1e-12);
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let arch = ArchConfig {
            activation: Activation::Relu,
            input: Shape3::new(2, 4, 4),
            encoder_hidden: 3,
            decoder_hidden: 3,
            latent_dim: 2,
            codebook_size: 3,
            downsample_steps: 1,
        };
        let state = ModelState::init(&arch, 3).unwrap();
        let x = Tensor::from_fn(arch.input, |c, i, j| ((c * 16 + i * 4 + j) as f64 * 0.7).sin());
        let w = LossWeights::default();
        let mut gc = grad_check_detail(&state, &x, &w).unwrap();
        assert!(gc.max_relative_error() < 1e-4, "{}", gc.max_relative_error());
        let k = (0..gc.analytic.len())
            .max_by(|&a, &b| gc.analytic[a].abs().total_cmp(&gc.analytic[b].abs()))
            .unwrap();
        gc.analytic[k] *= 2.0;
        assert!(gc.max_relative_error() > 1e-2);
    }

    #[test]
    fn zero_input_gives_zero_gradient() {
        let arch = ArchConfig {
            activation: Activation::Relu,
            input: Shape3::new(1, 4, 4),
            encoder_hidden: 2,
            decoder_hidden: 2,
            latent_dim: 2,
            codebook_size: 2,
            downsample_steps: 2,
        };
        let state = ModelState::init(&arch, 1).unwrap();
        let x = Tensor::zeros(arch.input);
        let w = LossWeights {
            reg: 0.0,
            ..LossWeights::default()
        };
        // every conv is bias-free, so the latent is 0 and only the anchor term survives
        let (_, g, _) = total_loss(&x, &state, &w).unwrap();
        assert!(g.encoder.iter().all(|&v| v == 0.0));
        assert!(g.decoder.iter().any(|&v| v != 0.0) || g.codebook.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn zero_weight_model_has_zero_error() {
        let arch = ArchConfig {
            activation: Activation::Relu,
            input: Shape3::new(1, 4, 4),
            encoder_hidden: 2,
            decoder_hidden: 2,
            latent_dim: 2,
            codebook_size: 1,
            downsample_steps: 2,
        };
        let mut state = ModelState::init(&arch, 1).unwrap();
        let zeros = vec![0.0; state.param_count()];
        state.set_params(&zeros).unwrap();
        let gc = grad_check_detail(&state, &Tensor::zeros(arch.input), &LossWeights::default()).unwrap();
        assert!(gc.analytic.iter().chain(&gc.numeric).all(|&v| v == 0.0));
        assert_eq!(gc.max_relative_error(), 0.0);
    }

    #[test]
    fn reg_gradient_matches_finite_differences() {
        let mut r = rng::seeded(11);
        for objective in [RegObjective::MinimalDistance, RegObjective::AverageDistance] {
            let c = Codebook::new(5, 3, rng::normal_vec(&mut r, 15)).unwrap();
            let (_, g) = reg_loss(&c, 1.0, objective).unwrap();
            let h = 1e-6;
            let mut num = Vec::new();
            for k in 0..15 {
                let mut a = c.as_slice().to_vec();
                a[k] += h;
                let up = reg_loss(&Codebook::new(5, 3, a.clone()).unwrap(), 1.0, objective).unwrap().0;
                a[k] -= 2.0 * h;
                let down = reg_loss(&Codebook::new(5, 3, a).unwrap(), 1.0, objective).unwrap().0;
                num.push((up - down) / (2.0 * h));
            }
            assert!(max_relative_error(&g, &num) < 1e-4, "{objective:?}");
        }
    }

    #[test]
    fn single_image_is_memorised() {
        let arch = ArchConfig {
            activation: Activation::Relu,
            input: Shape3::new(1, 2, 2),
            encoder_hidden: 2,
            decoder_hidden: 4,
            latent_dim: 2,
            codebook_size: 2,
            downsample_steps: 1,
        };
        let x = Tensor::new(arch.input, vec![0.5; 4]).unwrap();
        let config = TrainConfig {
            arch,
            weights: LossWeights {
                reg: 0.0,
                ..LossWeights::default()
            },
            learning_rate: 0.05,
            epochs: 400,
            batch_size: 1,
            seed: 5,
        };
        let out = train(std::slice::from_ref(&x), &config).unwrap();
        let (_, xhat) = out.state.reconstruct(&x).unwrap();
        let mse = sq_norm_diff(&xhat, &x).unwrap() / 4.0;
        assert!(mse < 1e-4, "mse {mse}");
        assert_eq!(out.records.len(), 400);
        let again = train(&[x], &config).unwrap();
        assert_eq!(again.state, out.state);
    }
}
