//! Certified operator-norm bounds for bias-free conv layers and their
//! composition into an encoder Lipschitz constant.
//!
//! A conv layer `F = F_hat . pad` splits into `c_o x c_i` single-channel maps;
//! each is bounded separately and the block lemma
//! `||A||_op <= sqrt(m n) max_ij ||A_ij||_op` combines them. Single-channel
//! bounds come from one of:
//!
//! * stride-dominant (`s >= k`): rows of the patch matrix have disjoint
//!   support, so `||F_ij|| <= ||ker_ij||_F`;
//! * Toeplitz-Fourier: when every row of the padded patch matrix is the first
//!   row shifted by a multiple of a fixed step, its Gram matrix is a symmetric
//!   Toeplitz matrix with symbol `f(l) = c_0 + 2 sum_k c_k cos(k l)`, and
//!   `rho(Gram) <= sup |f|`;
//! * block-composed: the Schur test `sqrt(max row sum * max col sum)` of
//!   absolute entries, valid for every geometry.
//!
//! Power iteration on the unrolled matrix gives the exact norm numerically; it
//! is kept as a diagnostic and never reported as certified.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::network::{Layer, NetworkSpec};
use crate::rng;
use crate::tensor::{unroll_conv_matrix, ConvLayer, Kernel4, Matrix, Shape3};

/// Largest unrolled matrix (entries) built for structure checks or the oracle.
pub const UNROLL_LIMIT: usize = 1 << 22;
/// Grid resolution used when maximizing the Toeplitz symbol.
pub const SYMBOL_GRID: usize = 4096;

const ORACLE_TOL: f64 = 1e-10;
const ORACLE_MAX_ITERS: usize = 10_000;
const ORACLE_SEED: u64 = 0x5EED_0AC1E;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundMethod {
    StrideDominant,
    ToeplitzFourier,
    BlockComposed,
    OraclePowerIteration,
}

impl BoundMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            BoundMethod::StrideDominant => "stride_dominant",
            BoundMethod::ToeplitzFourier => "toeplitz_fourier",
            BoundMethod::BlockComposed => "block_composed",
            BoundMethod::OraclePowerIteration => "oracle_power_iteration",
        }
    }

    pub fn is_certified(&self) -> bool {
        !matches!(self, BoundMethod::OraclePowerIteration)
    }
}

/// Operator-norm bound for one conv layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerBound {
    pub value: f64,
    pub method: BoundMethod,
    /// `c_o x c_i` single-channel bounds fed to the block lemma.
    pub per_channel_bounds: Option<Vec<Vec<f64>>>,
    /// Power-iteration estimate of the exact norm, when the layer was small enough to unroll.
    pub oracle_value: Option<f64>,
}

impl LayerBound {
    pub fn is_certified(&self) -> bool {
        self.method.is_certified()
    }
}

/// `sqrt(m n) * max_ij b_ij` for an `m x n` matrix of block norms.
pub fn block_lemma_bound(per_channel_bounds: &[Vec<f64>]) -> Result<f64> {
    let m = per_channel_bounds.len();
    let n = per_channel_bounds.first().map_or(0, Vec::len);
    if m == 0 || n == 0 {
        return Err(Error::invalid("block lemma needs a nonempty matrix of bounds"));
    }
    let mut max = 0.0f64;
    for row in per_channel_bounds {
        if row.len() != n {
            return Err(Error::shape("block bound row", n, row.len()));
        }
        for &b in row {
            if !(b >= 0.0) || !b.is_finite() {
                return Err(Error::invalid(format!("block bound must be finite and >= 0, got {b}")));
            }
            max = max.max(b);
        }
    }
    Ok(((m * n) as f64).sqrt() * max)
}

fn per_channel<F>(kernel: &Kernel4, mut f: F) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(usize, usize) -> Result<f64>,
{
    (0..kernel.c_out)
        .map(|o| (0..kernel.c_in).map(|i| f(o, i)).collect())
        .collect()
}

/// Per-channel Frobenius norms composed by the block lemma; requires `s >= k` on both axes.
pub fn stride_dominant_bound(layer: &ConvLayer) -> Result<LayerBound> {
    let k = &layer.kernel;
    if layer.stride.0 < k.kh || layer.stride.1 < k.kw {
        return Err(Error::Precondition {
            method: "stride_dominant",
            reason: format!(
                "stride {:?} smaller than kernel {}x{}",
                layer.stride, k.kh, k.kw
            ),
        });
    }
    let per = per_channel(k, |o, i| Ok(k.slice(o, i).iter().map(|v| v * v).sum::<f64>().sqrt()))?;
    Ok(LayerBound {
        value: block_lemma_bound(&per)?,
        method: BoundMethod::StrideDominant,
        per_channel_bounds: Some(per),
        oracle_value: None,
    })
}

/// Schur-test bound per channel (max absolute row sum times max absolute
/// column sum of the unpadded patch matrix, square-rooted), composed by the
/// block lemma. Applies to every layer.
pub fn block_composed_bound(layer: &ConvLayer, input: Shape3) -> Result<LayerBound> {
    let out = layer.output_shape(input)?;
    let k = &layer.kernel;
    let (sh, sw) = layer.stride;
    let (lh, lw) = layer.lead_padding();
    let per = per_channel(k, |o, i| {
        let ks = k.slice(o, i);
        let mut col = vec![0.0; input.h * input.w];
        let mut max_row = 0.0f64;
        for a in 0..out.h {
            for b in 0..out.w {
                let mut row = 0.0;
                for u in 0..k.kh {
                    let r = (a * sh + u) as isize - lh as isize;
                    if r < 0 || r >= input.h as isize {
                        continue;
                    }
                    for v in 0..k.kw {
                        let q = (b * sw + v) as isize - lw as isize;
                        if q < 0 || q >= input.w as isize {
                            continue;
                        }
                        let w = ks[u * k.kw + v].abs();
                        row += w;
                        col[r as usize * input.w + q as usize] += w;
                    }
                }
                max_row = max_row.max(row);
            }
        }
        let max_col = col.iter().copied().fold(0.0, f64::max);
        Ok((max_row * max_col).sqrt())
    })?;
    Ok(LayerBound {
        value: block_lemma_bound(&per)?,
        method: BoundMethod::BlockComposed,
        per_channel_bounds: Some(per),
        oracle_value: None,
    })
}

/// Step between consecutive patch offsets in the flattened padded input, if
/// the offsets form an arithmetic progression in row-major output order.
fn row_shift_step(layer: &ConvLayer, input: Shape3, out: Shape3) -> Option<usize> {
    let padded_w = input.w + layer.padding.1;
    let (sh, sw) = layer.stride;
    if out.h * out.w == 1 {
        Some(0)
    } else if out.h == 1 {
        Some(sw)
    } else if out.w == 1 {
        Some(sh * padded_w)
    } else if sh * padded_w == out.w * sw {
        Some(sw)
    } else {
        None
    }
}

/// Symbol `f(l) = c_0 + 2 sum_k c_k cos(k l)` of a symmetric Toeplitz matrix
/// given by its nonzero first-row entries `(k, c_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToeplitzSymbol {
    pub c0: f64,
    pub lags: Vec<(usize, f64)>,
}

impl ToeplitzSymbol {
    pub fn from_autocorrelations(c: &[f64]) -> Self {
        let c0 = c.first().copied().unwrap_or(0.0);
        let lags = c
            .iter()
            .enumerate()
            .skip(1)
            .filter(|(_, &v)| v != 0.0)
            .map(|(k, &v)| (k, v))
            .collect();
        Self { c0, lags }
    }

    pub fn eval(&self, lambda: f64) -> f64 {
        self.c0
            + 2.0
                * self
                    .lags
                    .iter()
                    .map(|&(k, c)| c * (k as f64 * lambda).cos())
                    .sum::<f64>()
    }

    /// `sup |f|` over `[0, 2 pi]`: dense grid, then golden-section refinement
    /// around every grid-local maximum of `|f|`.
    pub fn sup_abs(&self) -> f64 {
        if self.lags.is_empty() {
            return self.c0.abs();
        }
        let n = SYMBOL_GRID;
        let h = 2.0 * PI / n as f64;
        let vals: Vec<f64> = (0..n).map(|i| self.eval(i as f64 * h).abs()).collect();
        let mut best = vals.iter().copied().fold(0.0, f64::max);
        for i in 0..n {
            let prev = vals[(i + n - 1) % n];
            let next = vals[(i + 1) % n];
            if vals[i] >= prev && vals[i] >= next {
                let center = i as f64 * h;
                let refined = golden_max(|l| self.eval(l).abs(), center - h, center + h);
                best = best.max(refined);
            }
        }
        best
    }
}

fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    let mut best = f1.max(f2);
    for _ in 0..80 {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        }
        best = best.max(f1).max(f2);
        if hi - lo < 1e-15 {
            break;
        }
    }
    best
}

/// Single-channel patch matrix on the padded input (the map before the padding embedding).
fn padded_channel_matrix(layer: &ConvLayer, o: usize, i: usize, input: Shape3) -> Result<Matrix> {
    let k = &layer.kernel;
    let slice = Kernel4::new(1, 1, k.kh, k.kw, k.slice(o, i).to_vec())?;
    let single = ConvLayer::new(slice, layer.stride, (0, 0))?;
    let padded = Shape3::new(1, input.h + layer.padding.0, input.w + layer.padding.1);
    unroll_conv_matrix(&single, padded)
}

/// Checks that row `r` equals row 0 shifted right by `r * step` with nothing truncated.
fn rows_are_shifts(m: &Matrix, step: usize) -> bool {
    let first = m.row(0);
    (1..m.rows).all(|r| {
        let shift = r * step;
        let row = m.row(r);
        if shift >= m.cols {
            return first.iter().all(|&v| v == 0.0) && row.iter().all(|&v| v == 0.0);
        }
        row[..shift].iter().all(|&v| v == 0.0)
            && first[m.cols - shift..].iter().all(|&v| v == 0.0)
            && row[shift..] == first[..m.cols - shift]
    })
}

/// Toeplitz-Fourier bound. Errors with a precondition failure when the padded
/// patch matrix of the layer lacks the shifted-row structure, or is too large
/// to verify.
pub fn toeplitz_fourier_bound(layer: &ConvLayer, input: Shape3) -> Result<LayerBound> {
    let out = layer.output_shape(input)?;
    let precondition = |reason: String| Error::Precondition {
        method: "toeplitz_fourier",
        reason,
    };
    let step = row_shift_step(layer, input, out)
        .ok_or_else(|| precondition("patch offsets are not an arithmetic progression".into()))?;
    let entries = out.h * out.w * (input.h + layer.padding.0) * (input.w + layer.padding.1);
    if entries > UNROLL_LIMIT {
        return Err(precondition(format!("{entries} entries exceed the unroll limit")));
    }
    let k = &layer.kernel;
    let per = per_channel(k, |o, i| {
        let m = padded_channel_matrix(layer, o, i, input)?;
        if !rows_are_shifts(&m, step) {
            return Err(precondition(format!("channel ({o},{i}) rows are not shifts of the first row")));
        }
        let first = m.row(0);
        let autocorr: Vec<f64> = (0..m.rows)
            .map(|r| first.iter().zip(m.row(r)).map(|(a, b)| a * b).sum())
            .collect();
        Ok(ToeplitzSymbol::from_autocorrelations(&autocorr).sup_abs().sqrt())
    })?;
    Ok(LayerBound {
        value: block_lemma_bound(&per)?,
        method: BoundMethod::ToeplitzFourier,
        per_channel_bounds: Some(per),
        oracle_value: None,
    })
}

/// Result of power iteration on `A^T A`.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleNorm {
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Unit right singular vector estimate (input-space direction of largest gain).
    pub top_vector: Vec<f64>,
}

/// Largest singular value of `m` by power iteration, with the default seed.
pub fn oracle_operator_norm(m: &Matrix) -> Result<OracleNorm> {
    oracle_operator_norm_seeded(m, ORACLE_SEED)
}

/// Power iteration `v <- A^T A v` (same nonzero spectrum as `A A^T`), stopped
/// when the Rayleigh quotient changes by less than `1e-10` relative.
pub fn oracle_operator_norm_seeded(m: &Matrix, seed: u64) -> Result<OracleNorm> {
    if m.rows == 0 || m.cols == 0 {
        return Err(Error::invalid("oracle norm of an empty matrix"));
    }
    let mut rng = rng::seeded(seed);
    let mut v = rng::normal_vec(&mut rng, m.cols);
    normalize(&mut v);
    let mut rq = 0.0;
    for it in 1..=ORACLE_MAX_ITERS {
        let av = m.matvec(&v);
        let next_rq: f64 = av.iter().map(|x| x * x).sum();
        let mut w = m.matvec_t(&av);
        let wn = normalize(&mut w);
        if wn == 0.0 {
            return Ok(OracleNorm {
                value: next_rq.sqrt(),
                converged: true,
                iterations: it,
                top_vector: v,
            });
        }
        let done = it > 1 && (next_rq - rq).abs() <= ORACLE_TOL * next_rq;
        rq = next_rq;
        if done {
            return Ok(OracleNorm {
                value: rq.sqrt(),
                converged: true,
                iterations: it,
                top_vector: v,
            });
        }
        v = w;
    }
    let av = m.matvec(&v);
    let rq_final: f64 = av.iter().map(|x| x * x).sum();
    Ok(OracleNorm {
        value: rq_final.max(rq).sqrt(),
        converged: false,
        iterations: ORACLE_MAX_ITERS,
        top_vector: v,
    })
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Power-iteration norm of the unrolled layer, flagged as uncertified.
pub fn oracle_layer_bound(layer: &ConvLayer, input: Shape3) -> Result<LayerBound> {
    let out = layer.output_shape(input)?;
    if out.numel() * input.numel() > UNROLL_LIMIT {
        return Err(Error::Precondition {
            method: "oracle_power_iteration",
            reason: "layer too large to unroll".into(),
        });
    }
    let norm = oracle_operator_norm(&unroll_conv_matrix(layer, input)?)?;
    Ok(LayerBound {
        value: norm.value,
        method: BoundMethod::OraclePowerIteration,
        per_channel_bounds: None,
        oracle_value: Some(norm.value),
    })
}

/// Smallest certified bound among the applicable methods, with the oracle
/// value attached when the layer can be unrolled.
pub fn certified_layer_bound(layer: &ConvLayer, input: Shape3) -> Result<LayerBound> {
    let mut candidates = Vec::new();
    for attempt in [
        stride_dominant_bound(layer),
        toeplitz_fourier_bound(layer, input),
        block_composed_bound(layer, input),
    ] {
        match attempt {
            Ok(b) if b.value.is_finite() => candidates.push(b),
            Ok(_) | Err(Error::Precondition { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    let mut best = candidates
        .into_iter()
        .reduce(|a, b| if b.value < a.value { b } else { a })
        .ok_or_else(|| Error::Precondition {
            method: "certified_layer_bound",
            reason: "no certified method applies".into(),
        })?;
    best.oracle_value = match oracle_layer_bound(layer, input) {
        Ok(o) => o.oracle_value,
        Err(Error::Precondition { .. }) => None,
        Err(e) => return Err(e),
    };
    Ok(best)
}

/// One factor of the composed encoder bound.
#[derive(Debug, Clone, PartialEq)]
pub enum BoundFactor {
    Conv { layer_index: usize, bound: LayerBound },
    /// Activation or upsampling constant.
    Pointwise { layer_index: usize, name: String, constant: f64 },
}

impl BoundFactor {
    pub fn value(&self) -> f64 {
        match self {
            BoundFactor::Conv { bound, .. } => bound.value,
            BoundFactor::Pointwise { constant, .. } => *constant,
        }
    }
}

/// Encoder Lipschitz constant as the product of per-layer factors.
#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzBound {
    pub value: f64,
    pub factors: Vec<BoundFactor>,
}

impl LipschitzBound {
    pub fn layer_bounds(&self) -> Vec<&LayerBound> {
        self.factors
            .iter()
            .filter_map(|f| match f {
                BoundFactor::Conv { bound, .. } => Some(bound),
                _ => None,
            })
            .collect()
    }

    pub fn activation_constants(&self) -> Vec<f64> {
        self.factors
            .iter()
            .filter_map(|f| match f {
                BoundFactor::Pointwise { constant, .. } => Some(*constant),
                _ => None,
            })
            .collect()
    }
}

/// Composes certified per-layer bounds and pointwise constants in network order.
pub fn compose_network_bound(net: &NetworkSpec) -> Result<LipschitzBound> {
    let shapes = net.shape_chain()?;
    let mut factors = Vec::with_capacity(net.layers.len());
    let mut value = 1.0;
    for (idx, (layer, &input)) in net.layers.iter().zip(&shapes).enumerate() {
        let factor = match layer {
            Layer::Conv(c) => {
                let bound = certified_layer_bound(c, input).map_err(|e| match e {
                    Error::Precondition { reason, .. } => Error::Uncertifiable { layer: idx, reason },
                    other => other,
                })?;
                BoundFactor::Conv {
                    layer_index: idx,
                    bound,
                }
            }
            Layer::Act(a) => BoundFactor::Pointwise {
                layer_index: idx,
                name: a.name(),
                constant: a.lipschitz_constant(),
            },
            Layer::Upsample(f) => BoundFactor::Pointwise {
                layer_index: idx,
                name: format!("upsample({f})"),
                constant: *f as f64,
            },
        };
        value *= factor.value();
        factors.push(factor);
    }
    Ok(LipschitzBound { value, factors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Role;
    use crate::tensor::Activation;

    fn conv(c_out: usize, c_in: usize, kh: usize, kw: usize, data: Vec<f64>, s: usize) -> ConvLayer {
        ConvLayer::new(Kernel4::new(c_out, c_in, kh, kw, data).unwrap(), (s, s), (0, 0)).unwrap()
    }

    #[test]
    fn block_lemma_examples() {
        assert_eq!(block_lemma_bound(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap(), 2.0);
        assert_eq!(block_lemma_bound(&[vec![5.0]]).unwrap(), 5.0);
        let v = block_lemma_bound(&[vec![1.0, 2.0, 0.5], vec![0.0, 1.5, 2.0]]).unwrap();
        assert!((v - 6f64.sqrt() * 2.0).abs() < 1e-12);
        assert!((v - 4.898_979_485_566_356).abs() < 1e-12);
        assert!(block_lemma_bound(&[]).is_err());
        assert!(block_lemma_bound(&[vec![-1.0]]).is_err());
    }

    #[test]
    fn stride_dominant_examples() {
        let b = stride_dominant_bound(&conv(1, 1, 2, 2, vec![1.0; 4], 2)).unwrap();
        assert_eq!(b.value, 2.0);
        assert_eq!(b.per_channel_bounds, Some(vec![vec![2.0]]));
        assert_eq!(stride_dominant_bound(&conv(1, 1, 1, 1, vec![3.0], 1)).unwrap().value, 3.0);
        let err = stride_dominant_bound(&conv(1, 1, 3, 3, vec![1.0; 9], 2)).unwrap_err();
        assert!(matches!(err, Error::Precondition { .. }));
    }

    #[test]
    fn oracle_examples() {
        let n = oracle_operator_norm(&Matrix::diag(&[3.0, 1.0])).unwrap();
        assert!((n.value - 3.0).abs() < 1e-9 && n.converged);
        let n = oracle_operator_norm(&Matrix::from_rows(&[vec![0.0, 2.0], vec![0.0, 0.0]])).unwrap();
        assert!((n.value - 2.0).abs() < 1e-9);
        assert_eq!(oracle_operator_norm(&Matrix::zeros(3, 2)).unwrap().value, 0.0);
        assert!(oracle_operator_norm(&Matrix::zeros(0, 0)).is_err());
    }

    #[test]
    fn symbol_of_tridiagonal_case() {
        let s = ToeplitzSymbol::from_autocorrelations(&[2.0, 1.0, 0.0, 0.0]);
        assert_eq!(s.sup_abs(), 4.0);
        assert_eq!(s.eval(PI), 0.0);
    }

    #[test]
    fn toeplitz_matches_stride_dominant_when_rows_disjoint() {
        let l = conv(1, 1, 1, 3, vec![1.0, -2.0, 0.5], 3);
        let input = Shape3::new(1, 1, 12);
        let t = toeplitz_fourier_bound(&l, input).unwrap();
        let s = stride_dominant_bound(&l).unwrap();
        assert!((t.value - s.value).abs() < 1e-12);
    }

    #[test]
    fn toeplitz_refuses_general_2d_geometry() {
        let l = conv(1, 1, 3, 3, vec![1.0; 9], 1);
        let err = toeplitz_fourier_bound(&l, Shape3::new(1, 6, 6)).unwrap_err();
        assert!(matches!(err, Error::Precondition { .. }));
    }

    #[test]
    fn composition_is_a_product() {
        let net = NetworkSpec::new(
            Role::Encoder,
            Shape3::new(1, 4, 4),
            vec![
                Layer::Conv(conv(1, 1, 1, 1, vec![2.0], 1)),
                Layer::Act(Activation::Relu),
                Layer::Conv(conv(1, 1, 1, 1, vec![3.0], 1)),
                Layer::Act(Activation::Identity),
            ],
        )
        .unwrap();
        let b = compose_network_bound(&net).unwrap();
        assert_eq!(b.value, 6.0);
        assert_eq!(b.activation_constants(), vec![1.0, 1.0]);
        assert_eq!(b.layer_bounds().len(), 2);

        let id = NetworkSpec::new(
            Role::Encoder,
            Shape3::new(1, 3, 3),
            vec![Layer::Conv(conv(1, 1, 1, 1, vec![1.0], 1)), Layer::Act(Activation::Identity)],
        )
        .unwrap();
        assert_eq!(compose_network_bound(&id).unwrap().value, 1.0);
    }

    #[test]
    fn block_composed_is_l1_norm_in_the_interior() {
        let l = conv(1, 1, 3, 3, vec![1.0, -1.0, 2.0, 0.0, 0.5, 0.5, -1.0, 1.0, 1.0], 1);
        let b = block_composed_bound(&l, Shape3::new(1, 7, 7)).unwrap();
        assert!((b.value - 8.0).abs() < 1e-12);
    }
}
