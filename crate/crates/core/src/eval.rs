//! Image quality metrics and temporal alignment of frame sequences.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `10 log10(peak^2 / MSE)`; `f64::INFINITY` when the images are identical.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("psnr operands", a.shape(), b.shape()));
    }
    check_peak(peak)?;
    let sse: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(psnr_from_mse(sse / a.data().len() as f64, peak))
}

fn check_peak(peak: f64) -> Result<()> {
    if !(peak > 0.0) || !peak.is_finite() {
        return Err(Error::invalid("peak must be positive"));
    }
    Ok(())
}

fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// Per-pixel selection over an `h x w` frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    h: usize,
    w: usize,
    mask: Vec<bool>,
}

impl RegionMask {
    pub fn new(h: usize, w: usize, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != h * w {
            return Err(Error::shape("region mask", h * w, mask.len()));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::invalid("region mask selects no pixels"));
        }
        Ok(Self { h, w, mask })
    }

    pub fn full(h: usize, w: usize) -> Result<Self> {
        Self::new(h, w, vec![true; h * w])
    }

    pub fn rect(h: usize, w: usize, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        let mask = (0..h * w)
            .map(|p| {
                let (i, j) = (p / w, p % w);
                (top..top + height).contains(&i) && (left..left + width).contains(&j)
            })
            .collect();
        Self::new(h, w, mask)
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.w + j]
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// PSNR over the masked pixels only, across all channels.
pub fn region_psnr(a: &Tensor, b: &Tensor, mask: &RegionMask, peak: f64) -> Result<f64> {
    let s = a.shape();
    if s != b.shape() {
        return Err(Error::shape("region_psnr operands", s, b.shape()));
    }
    if (mask.h, mask.w) != (s.h, s.w) {
        return Err(Error::shape("region mask", format!("{}x{}", s.h, s.w), format!("{}x{}", mask.h, mask.w)));
    }
    check_peak(peak)?;
    let mut sse = 0.0;
    for c in 0..s.c {
        for i in 0..s.h {
            for j in 0..s.w {
                if mask.get(i, j) {
                    let d = a.get(c, i, j) - b.get(c, i, j);
                    sse += d * d;
                }
            }
        }
    }
    Ok(psnr_from_mse(sse / (mask.count() * s.c) as f64, peak))
}

/// Nonempty run of frames sharing one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    frames: Vec<Tensor>,
}

impl FrameSequence {
    pub fn new(frames: Vec<Tensor>) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::invalid("empty frame sequence"))?.shape();
        if let Some(f) = frames.iter().find(|f| f.shape() != first) {
            return Err(Error::shape("frame", first, f.shape()));
        }
        Ok(Self { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[Tensor] {
        &self.frames
    }
}

/// Best mean metric over full-overlap offsets of `gen` inside `gt`, with that offset.
///
/// Means follow IEEE arithmetic, so one infinite frame score makes the
/// offset's mean infinite. Ties keep the smallest offset.
pub fn sliding_eval(
    gen: &FrameSequence,
    gt: &FrameSequence,
    metric: impl Fn(&Tensor, &Tensor) -> Result<f64>,
) -> Result<(f64, usize)> {
    if gen.len() > gt.len() {
        return Err(Error::invalid(format!(
            "generated sequence ({}) longer than ground truth ({})",
            gen.len(),
            gt.len()
        )));
    }
    let mut best: Option<(f64, usize)> = None;
    for offset in 0..=gt.len() - gen.len() {
        let mut sum = 0.0;
        for (g, t) in gen.frames.iter().zip(&gt.frames[offset..]) {
            sum += metric(g, t)?;
        }
        let mean = sum / gen.len() as f64;
        if best.is_none_or(|(b, _)| mean > b) {
            best = Some((mean, offset));
        }
    }
    Ok(best.expect("at least one offset"))
}

/// Mean of the finite values and the number of infinite ones.
pub fn finite_mean(values: &[f64]) -> (Option<f64>, usize) {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let inf = values.len() - finite.len();
    if finite.is_empty() {
        (None, inf)
    } else {
        (Some(finite.iter().sum::<f64>() / finite.len() as f64), inf)
    }
}

/// Report formatting: `inf` for infinite values, shortest round-trip decimal otherwise.
pub fn fmt_metric(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape3;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(Shape3::new(1, 1, v.len()), v.to_vec()).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = t(&[0.2, 0.4, 0.6, 0.8]);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = t(&[0.3, 0.5, 0.7, 0.9]);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &t(&[0.0]), 1.0).is_err());
        assert!(psnr(&a, &b, 0.0).is_err());
    }

    #[test]
    fn region_examples() {
        let a = Tensor::new(Shape3::new(1, 2, 2), vec![0.0, 0.5, 1.0, 0.25]).unwrap();
        let b = Tensor::new(Shape3::new(1, 2, 2), vec![0.0, 0.4, 1.0, 0.25]).unwrap();
        let full = RegionMask::full(2, 2).unwrap();
        assert_eq!(region_psnr(&a, &b, &full, 1.0).unwrap(), psnr(&a, &b, 1.0).unwrap());
        let same = RegionMask::new(2, 2, vec![true, false, true, true]).unwrap();
        assert_eq!(region_psnr(&a, &b, &same, 1.0).unwrap(), f64::INFINITY);
        assert!(RegionMask::new(2, 2, vec![false; 4]).is_err());
    }

    #[test]
    fn sliding_examples() {
        let a = t(&[0.1, 0.2]);
        let b = t(&[0.9, 0.9]);
        let m = |x: &Tensor, y: &Tensor| psnr(x, y, 1.0);
        let gen = FrameSequence::new(vec![a.clone()]).unwrap();
        let gt = FrameSequence::new(vec![b.clone(), a.clone()]).unwrap();
        assert_eq!(sliding_eval(&gen, &gt, m).unwrap(), (f64::INFINITY, 1));

        let same = FrameSequence::new(vec![a.clone(), b.clone()]).unwrap();
        let gt2 = FrameSequence::new(vec![b.clone(), b.clone()]).unwrap();
        let (v, o) = sliding_eval(&same, &gt2, m).unwrap();
        assert_eq!(o, 0);
        assert_eq!(v, f64::INFINITY);
        assert!(sliding_eval(&gt, &gen, m).is_err());
    }

    #[test]
    fn ties_keep_first_offset() {
        let a = t(&[0.5]);
        let gen = FrameSequence::new(vec![a.clone()]).unwrap();
        let gt = FrameSequence::new(vec![t(&[0.4]), t(&[0.6]), t(&[0.4])]).unwrap();
        let (_, o) = sliding_eval(&gen, &gt, |x, y| psnr(x, y, 1.0)).unwrap();
        assert_eq!(o, 0);
    }

    #[test]
    fn finite_mean_counts_infinities() {
        assert_eq!(finite_mean(&[1.0, f64::INFINITY, 3.0]), (Some(2.0), 1));
        assert_eq!(finite_mean(&[f64::INFINITY]), (None, 1));
        assert_eq!(fmt_metric(f64::INFINITY), "inf");
        assert_eq!(fmt_metric(20.5), "20.5");
    }

    #[test]
    fn mixed_shapes_rejected() {
        assert!(FrameSequence::new(vec![t(&[0.0]), t(&[0.0, 1.0])]).is_err());
        assert!(FrameSequence::new(vec![]).is_err());
    }
}
