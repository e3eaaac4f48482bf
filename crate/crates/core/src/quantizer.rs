//! Codebook storage, channel-wise nearest-anchor matching and the geometric
//! quantities `d_C` (minimal anchor separation) and `gamma` (worst latent to
//! anchor distance) that enter the robustness radius.

use crate::error::{Error, Result};
use crate::io::RawArray;
use crate::tensor::{Shape3, Tensor};

/// `N` anchors in `R^c`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    n: usize,
    dim: usize,
    anchors: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl Codebook {
    pub fn new(n: usize, dim: usize, anchors: Vec<f64>) -> Result<Self> {
        if n == 0 || dim == 0 {
            return Err(Error::invalid("codebook needs N >= 1 and c >= 1"));
        }
        if anchors.len() != n * dim {
            return Err(Error::shape("codebook anchors", n * dim, anchors.len()));
        }
        if anchors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("codebook"));
        }
        let cb = Self { n, dim, anchors };
        if let Some((i, j)) = cb.duplicate_pair() {
            return Err(Error::invalid(format!("anchors {i} and {j} coincide")));
        }
        Ok(cb)
    }

    pub fn from_anchors(anchors: &[Vec<f64>]) -> Result<Self> {
        let dim = anchors.first().map_or(0, Vec::len);
        if anchors.iter().any(|a| a.len() != dim) {
            return Err(Error::invalid("anchors have differing dimensions"));
        }
        Self::new(anchors.len(), dim, anchors.concat())
    }

    fn duplicate_pair(&self) -> Option<(usize, usize)> {
        for i in 0..self.n {
            for j in i + 1..self.n {
                if self.anchor(i) == self.anchor(j) {
                    return Some((i, j));
                }
            }
        }
        None
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn anchor(&self, k: usize) -> &[f64] {
        &self.anchors[k * self.dim..(k + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.anchors
    }

    /// Replaces the anchors in place (trainer only); duplicates are tolerated
    /// mid-training and caught when the codebook is certified.
    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.anchors
    }

    /// Stored as an `(N, c, 1)` array.
    pub fn to_raw(&self) -> RawArray {
        RawArray {
            dims: vec![self.n as u32, self.dim as u32, 1],
            data: self.anchors.clone(),
        }
    }

    pub fn from_raw(raw: RawArray) -> Result<Self> {
        match raw.dims[..] {
            [n, c, 1] => Self::new(n as usize, c as usize, raw.data),
            _ => Err(Error::shape("codebook array dims", "(N, c, 1)", format!("{:?}", raw.dims))),
        }
    }

    /// Index of the closest anchor and its squared distance; ties go to the lowest index.
    pub fn nearest(&self, v: &[f64]) -> Result<(usize, f64)> {
        if v.len() != self.dim {
            return Err(Error::shape("nearest_anchor vector", self.dim, v.len()));
        }
        let mut best = (0, f64::INFINITY);
        for k in 0..self.n {
            let d = sq_dist(v, self.anchor(k));
            if d < best.1 {
                best = (k, d);
            }
        }
        Ok(best)
    }
}

pub fn nearest_anchor(v: &[f64], cb: &Codebook) -> Result<usize> {
    Ok(cb.nearest(v)?.0)
}

/// Anchor indices over the latent's spatial grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeGrid {
    pub h: usize,
    pub w: usize,
    pub indices: Vec<usize>,
}

impl CodeGrid {
    pub fn get(&self, i: usize, j: usize) -> usize {
        self.indices[i * self.w + j]
    }
}

/// Replaces every latent column by its nearest anchor.
pub fn quantize_grid(latent: &Tensor, cb: &Codebook) -> Result<(CodeGrid, Tensor)> {
    let s = latent.shape();
    if s.c != cb.dim() {
        return Err(Error::shape("latent channels vs codebook dim", cb.dim(), s.c));
    }
    let mut q = Tensor::zeros(s);
    let mut indices = Vec::with_capacity(s.h * s.w);
    for i in 0..s.h {
        for j in 0..s.w {
            let k = nearest_anchor(&latent.column(i, j), cb)?;
            q.set_column(i, j, cb.anchor(k));
            indices.push(k);
        }
    }
    Ok((
        CodeGrid {
            h: s.h,
            w: s.w,
            indices,
        },
        q,
    ))
}

/// Builds the quantized latent for a known code grid.
pub fn dequantize(grid: &CodeGrid, cb: &Codebook) -> Result<Tensor> {
    let mut q = Tensor::zeros(Shape3::new(cb.dim(), grid.h, grid.w));
    for i in 0..grid.h {
        for j in 0..grid.w {
            let k = grid.get(i, j);
            if k >= cb.len() {
                return Err(Error::invalid(format!("code {k} out of range for N={}", cb.len())));
            }
            q.set_column(i, j, cb.anchor(k));
        }
    }
    Ok(q)
}

/// The lowest-index pair `(i, j)`, `i < j`, attaining the minimal squared distance.
pub fn min_pair(cb: &Codebook) -> Result<(usize, usize, f64)> {
    if cb.len() < 2 {
        return Err(Error::invalid("d_C needs at least two anchors"));
    }
    let mut best = (0, 1, f64::INFINITY);
    for i in 0..cb.len() {
        for j in i + 1..cb.len() {
            let d = sq_dist(cb.anchor(i), cb.anchor(j));
            if d < best.2 {
                best = (i, j, d);
            }
        }
    }
    Ok(best)
}

/// `d_C`: minimal Euclidean distance between distinct anchors.
pub fn min_pairwise_distance(cb: &Codebook) -> Result<f64> {
    Ok(min_pair(cb)?.2.sqrt())
}

/// Mean Euclidean distance over unordered anchor pairs.
pub fn mean_pairwise_distance(cb: &Codebook) -> Result<f64> {
    if cb.len() < 2 {
        return Err(Error::invalid("mean pairwise distance needs at least two anchors"));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..cb.len() {
        for j in i + 1..cb.len() {
            sum += sq_dist(cb.anchor(i), cb.anchor(j)).sqrt();
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

/// `gamma`: largest distance from any latent column to its nearest anchor.
pub fn gamma<'a>(latents: impl IntoIterator<Item = &'a Tensor>, cb: &Codebook) -> Result<f64> {
    let mut worst: Option<f64> = None;
    for latent in latents {
        let s = latent.shape();
        if s.c != cb.dim() {
            return Err(Error::shape("latent channels vs codebook dim", cb.dim(), s.c));
        }
        for i in 0..s.h {
            for j in 0..s.w {
                let d = cb.nearest(&latent.column(i, j))?.1;
                worst = Some(worst.map_or(d, |w: f64| w.max(d)));
            }
        }
    }
    worst
        .map(f64::sqrt)
        .ok_or_else(|| Error::invalid("gamma needs at least one latent"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cb(rows: &[&[f64]]) -> Codebook {
        Codebook::from_anchors(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn nearest_examples() {
        let c = cb(&[&[0.0, 0.0], &[1.0, 0.0]]);
        assert_eq!(nearest_anchor(&[0.1, 0.0], &c).unwrap(), 0);
        assert_eq!(nearest_anchor(&[0.5, 0.0], &c).unwrap(), 0);
        assert_eq!(nearest_anchor(&[0.51, 0.0], &c).unwrap(), 1);
        assert!(nearest_anchor(&[0.5], &c).is_err());
    }

    #[test]
    fn distance_examples() {
        assert_eq!(min_pairwise_distance(&cb(&[&[0.0, 0.0], &[3.0, 4.0]])).unwrap(), 5.0);
        assert_eq!(
            min_pairwise_distance(&cb(&[&[0.0, 0.0], &[3.0, 4.0], &[10.0, 0.0]])).unwrap(),
            5.0
        );
        assert!(min_pairwise_distance(&cb(&[&[1.0, 2.0]])).is_err());
    }

    #[test]
    fn duplicates_rejected() {
        assert!(Codebook::from_anchors(&[vec![1.0, 2.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn gamma_examples() {
        let c = cb(&[&[0.0, 0.0], &[1.0, 0.0]]);
        let on = Tensor::new(Shape3::new(2, 1, 2), vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(gamma([&on], &c).unwrap(), 0.0);
        let off = Tensor::new(Shape3::new(2, 1, 1), vec![0.0, 0.2]).unwrap();
        assert!((gamma([&off], &c).unwrap() - 0.2).abs() < 1e-15);
        assert!(gamma(std::iter::empty(), &c).is_err());
    }

    #[test]
    fn quantize_fixed_point_and_single_site() {
        let c = cb(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 2.0]]);
        let lat = Tensor::new(Shape3::new(2, 1, 3), vec![1.0, 0.0, 0.0, 0.0, 0.0, 2.0]).unwrap();
        let (g, q) = quantize_grid(&lat, &c).unwrap();
        assert_eq!(q, lat);
        assert_eq!(g.indices, vec![1, 0, 2]);
        assert_eq!(dequantize(&g, &c).unwrap(), q);

        let one = Tensor::new(Shape3::new(2, 1, 1), vec![0.2, 1.4]).unwrap();
        let (g, _) = quantize_grid(&one, &c).unwrap();
        assert_eq!(g.indices[0], nearest_anchor(&[0.2, 1.4], &c).unwrap());
    }

    #[test]
    fn raw_round_trip_uses_n_c_1_layout() {
        let c = cb(&[&[0.0, 1.0, 2.0], &[3.0, 4.0, 5.0]]);
        let raw = c.to_raw();
        assert_eq!(raw.dims, vec![2, 3, 1]);
        assert_eq!(Codebook::from_raw(raw).unwrap(), c);
    }
}
