//! Robustness radius of a VQ encoder and the trials that try to falsify it.
//!
//! If every training latent column lies within `gamma` of its anchor, any
//! input perturbation with `||N||_F < (d_C - 2 gamma) / (2 L_eps)` moves each
//! column by less than `d_C / 2 - gamma`, so no column changes its anchor.

use crate::error::{Error, Result};
use crate::lipschitz::{compose_network_bound, oracle_operator_norm};
use crate::network::{Layer, NetworkSpec};
use crate::quantizer::{self, quantize_grid, Codebook};
use crate::rng;
use crate::tensor::{unroll_conv_matrix, Shape3, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NroubCertificate {
    pub d_c: f64,
    pub gamma: f64,
    pub l_eps: f64,
    pub bound: f64,
    /// Set iff `d_c <= 2 gamma`; the bound is then 0.
    pub degenerate: bool,
}

impl NroubCertificate {
    pub fn from_parts(d_c: f64, gamma: f64, l_eps: f64) -> Result<Self> {
        if !(d_c >= 0.0 && gamma >= 0.0 && l_eps > 0.0) || !(d_c + gamma + l_eps).is_finite() {
            return Err(Error::invalid(format!(
                "certificate inputs out of range: d_C={d_c} gamma={gamma} L_eps={l_eps}"
            )));
        }
        let degenerate = d_c <= 2.0 * gamma;
        let bound = if degenerate {
            0.0
        } else {
            (d_c - 2.0 * gamma) / (2.0 * l_eps)
        };
        Ok(Self {
            d_c,
            gamma,
            l_eps,
            bound,
            degenerate,
        })
    }
}

/// Assembles the certificate from the codebook geometry, the training latents
/// and the certified encoder bound. Uncertifiable encoders are refused.
pub fn compute_certificate(net: &NetworkSpec, cb: &Codebook, train_latents: &[Tensor]) -> Result<NroubCertificate> {
    let d_c = quantizer::min_pairwise_distance(cb)?;
    let gamma = quantizer::gamma(train_latents, cb)?;
    let l_eps = compose_network_bound(net)?.value;
    NroubCertificate::from_parts(d_c, gamma, l_eps)
}

/// Encodes `images` and certifies against the resulting latents.
pub fn certify_images(net: &NetworkSpec, cb: &Codebook, images: &[Tensor]) -> Result<NroubCertificate> {
    let latents = images.iter().map(|x| net.forward(x)).collect::<Result<Vec<_>>>()?;
    compute_certificate(net, cb, &latents)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DegradationKind {
    GaussianNoise,
    GaussianBlur,
}

impl DegradationKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DegradationKind::GaussianNoise => "gaussian_noise",
            DegradationKind::GaussianBlur => "gaussian_blur",
        }
    }
}

impl std::str::FromStr for DegradationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" | "gaussian_noise" => Ok(DegradationKind::GaussianNoise),
            "blur" | "gaussian_blur" => Ok(DegradationKind::GaussianBlur),
            _ => Err(Error::invalid(format!("unknown degradation `{s}`"))),
        }
    }
}

/// Rectangle `(top, left, height, width)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    pub fn full(shape: Shape3) -> Self {
        Self {
            top: 0,
            left: 0,
            height: shape.h,
            width: shape.w,
        }
    }

    fn check(&self, shape: Shape3) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.top + self.height > shape.h || self.left + self.width > shape.w {
            return Err(Error::invalid(format!(
                "region {}+{}x{}+{} outside {}x{} image",
                self.top, self.height, self.left, self.width, shape.h, shape.w
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    /// `None` means the whole frame.
    pub region: Option<Region>,
    pub target_frobenius_norm: Option<f64>,
    pub blur_sigma: f64,
    pub seed: u64,
}

/// I.i.d. standard normal entries rescaled to Frobenius norm `target_norm`.
/// An all-zero draw is redrawn with the next seed.
pub fn sample_perturbation(shape: Shape3, target_norm: f64, seed: u64) -> Result<Tensor> {
    if !(target_norm >= 0.0) || !target_norm.is_finite() {
        return Err(Error::invalid("target norm must be finite and >= 0"));
    }
    if target_norm == 0.0 {
        return Ok(Tensor::zeros(shape));
    }
    let mut s = seed;
    loop {
        let raw = rng::normal_vec(&mut rng::seeded(s), shape.numel());
        let t = Tensor::new(shape, raw)?;
        let n = t.frobenius_norm();
        if n > 0.0 {
            return t.scale(target_norm / n);
        }
        s = s.wrapping_add(1);
    }
}

/// Normalized 1-D Gaussian taps truncated at `3 sigma`.
fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let mut taps: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Separable blur of the pixels inside `region`; reads outside the image are clamped.
fn blur_region(image: &Tensor, region: Region, sigma: f64) -> Tensor {
    let s = image.shape();
    let taps = gaussian_taps(sigma);
    let r = (taps.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    // horizontal pass over the rows the vertical pass will read
    let row_lo = clamp(region.top as isize - r, s.h);
    let row_hi = clamp((region.top + region.height - 1) as isize + r, s.h);
    let mut horiz = image.clone();
    for c in 0..s.c {
        for i in row_lo..=row_hi {
            for j in region.left..region.left + region.width {
                let v = taps
                    .iter()
                    .enumerate()
                    .map(|(t, w)| w * image.get(c, i, clamp(j as isize + t as isize - r, s.w)))
                    .sum();
                horiz.set(c, i, j, v);
            }
        }
    }
    let mut out = image.clone();
    for c in 0..s.c {
        for i in region.top..region.top + region.height {
            for j in region.left..region.left + region.width {
                let v = taps
                    .iter()
                    .enumerate()
                    .map(|(t, w)| w * horiz.get(c, clamp(i as isize + t as isize - r, s.h), j))
                    .sum();
                out.set(c, i, j, v);
            }
        }
    }
    out
}

/// Applies the degradation and returns the degraded image with `||degraded - image||_F`.
pub fn degrade(image: &Tensor, spec: &DegradationSpec) -> Result<(Tensor, f64)> {
    let s = image.shape();
    let region = spec.region.unwrap_or_else(|| Region::full(s));
    region.check(s)?;
    if let Some(t) = spec.target_frobenius_norm {
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::invalid("target norm must be positive"));
        }
    }
    let out = match spec.kind {
        DegradationKind::GaussianNoise => {
            let target = spec
                .target_frobenius_norm
                .ok_or_else(|| Error::invalid("gaussian noise needs a target norm"))?;
            let noise = sample_perturbation(Shape3::new(s.c, region.height, region.width), target, spec.seed)?;
            let mut out = image.clone();
            for c in 0..s.c {
                for i in 0..region.height {
                    for j in 0..region.width {
                        let (y, x) = (region.top + i, region.left + j);
                        out.set(c, y, x, image.get(c, y, x) + noise.get(c, i, j));
                    }
                }
            }
            out
        }
        DegradationKind::GaussianBlur => {
            if !(spec.blur_sigma > 0.0) || !spec.blur_sigma.is_finite() {
                return Err(Error::invalid("blur sigma must be positive"));
            }
            let blurred = blur_region(image, region, spec.blur_sigma);
            match spec.target_frobenius_norm {
                None => blurred,
                Some(t) => {
                    let diff = blurred.sub(image)?;
                    let n = diff.frobenius_norm();
                    if n == 0.0 {
                        return Err(Error::invalid("blur left the region unchanged; cannot rescale to target norm"));
                    }
                    image.lin_comb(1.0, &diff, t / n)?
                }
            }
        }
    };
    let realized = out.sub(image)?.frobenius_norm();
    Ok((out, realized))
}

/// True iff the clean and perturbed images quantize to identical code grids.
pub fn verify_code_invariance(net: &NetworkSpec, cb: &Codebook, clean: &Tensor, perturbed: &Tensor) -> Result<bool> {
    if clean.shape() != perturbed.shape() {
        return Err(Error::shape("perturbed image", clean.shape(), perturbed.shape()));
    }
    let (a, _) = quantize_grid(&net.forward(clean)?, cb)?;
    let (b, _) = quantize_grid(&net.forward(perturbed)?, cb)?;
    Ok(a == b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialReport {
    pub trials: usize,
    pub code_matches: usize,
    /// Matching trials whose decoded outputs were also bit-identical (0 without a decoder).
    pub decoded_identical: usize,
    pub fraction: f64,
    pub max_perturbation_norm: f64,
    pub certificate: NroubCertificate,
}

/// Perturbs every image `trials_per_image` times with norm `norm_fraction * bound`.
///
/// Trials 0 and 1 of each image go along `+v` and `-v`, where `v` is the top
/// right singular vector of the unrolled first encoder layer; the rest use
/// uniformly random directions. With a decoder, matching trials also compare
/// the decoded outputs bit for bit.
#[allow(clippy::too_many_arguments)]
pub fn run_trial_suite(
    net: &NetworkSpec,
    cb: &Codebook,
    decoder: Option<&NetworkSpec>,
    images: &[Tensor],
    certificate: &NroubCertificate,
    trials_per_image: usize,
    norm_fraction: f64,
    seed: u64,
) -> Result<TrialReport> {
    if !(norm_fraction > 0.0 && norm_fraction <= 1.0) {
        return Err(Error::invalid("norm fraction must lie in (0, 1]"));
    }
    let mut report = TrialReport {
        trials: 0,
        code_matches: 0,
        decoded_identical: 0,
        fraction: norm_fraction,
        max_perturbation_norm: 0.0,
        certificate: *certificate,
    };
    if trials_per_image == 0 || images.is_empty() {
        return Ok(report);
    }
    if certificate.degenerate || certificate.bound <= 0.0 {
        return Err(Error::Precondition {
            method: "run_trial_suite",
            reason: format!("certificate is degenerate (d_C={} gamma={})", certificate.d_c, certificate.gamma),
        });
    }
    let norm = norm_fraction * certificate.bound;
    let shape = net.input_shape;
    let probe = worst_direction(net)?;
    for (idx, x) in images.iter().enumerate() {
        if x.shape() != shape {
            return Err(Error::shape("trial image", shape, x.shape()));
        }
        let (clean_grid, clean_q) = quantize_grid(&net.forward(x)?, cb)?;
        let clean_out = decoder.map(|d| d.forward(&clean_q)).transpose()?;
        for t in 0..trials_per_image {
            let noise = match (&probe, t) {
                (Some(v), 0 | 1) => {
                    let sign = if t == 0 { norm } else { -norm };
                    v.scale(sign)?
                }
                _ => sample_perturbation(shape, norm, rng::derive_seed(seed, (idx * trials_per_image + t) as u64))?,
            };
            let perturbed = x.add(&noise)?;
            report.trials += 1;
            report.max_perturbation_norm = report.max_perturbation_norm.max(noise.frobenius_norm());
            let (grid, q) = quantize_grid(&net.forward(&perturbed)?, cb)?;
            if grid != clean_grid {
                continue;
            }
            report.code_matches += 1;
            if let (Some(d), Some(clean_out)) = (decoder, &clean_out) {
                let out = d.forward(&q)?;
                if out.data().iter().zip(clean_out.data()).all(|(a, b)| a.to_bits() == b.to_bits()) {
                    report.decoded_identical += 1;
                }
            }
        }
    }
    Ok(report)
}

/// Unit input direction of largest gain of the first conv layer, if it can be unrolled.
fn worst_direction(net: &NetworkSpec) -> Result<Option<Tensor>> {
    let shapes = net.shape_chain()?;
    let Some((layer, &input)) = net.layers.iter().zip(&shapes).find_map(|(l, s)| match l {
        Layer::Conv(c) => Some((c, s)),
        _ => None,
    }) else {
        return Ok(None);
    };
    if input != net.input_shape || layer.output_shape(input)?.numel() * input.numel() > crate::lipschitz::UNROLL_LIMIT {
        return Ok(None);
    }
    let top = oracle_operator_norm(&unroll_conv_matrix(layer, input)?)?.top_vector;
    let t = Tensor::new(input, top)?;
    let n = t.frobenius_norm();
    if n == 0.0 {
        return Ok(None);
    }
    Ok(Some(t.scale(1.0 / n)?))
}
