use nroub::eval::{psnr, region_psnr, sliding_eval, FrameSequence, RegionMask};
use nroub::lipschitz::{certified_layer_bound, oracle_operator_norm};
use nroub::nroub::{sample_perturbation, NroubCertificate};
use nroub::quantizer::{quantize_grid, Codebook};
use nroub::tensor::{unroll_conv_matrix, ConvLayer, Kernel4, Shape3, Tensor};
use proptest::prelude::*;

fn shape() -> impl Strategy<Value = Shape3> {
    (1usize..4, 1usize..7, 1usize..7).prop_map(|(c, h, w)| Shape3::new(c, h, w))
}

fn tensor(s: Shape3) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(0.0f64..1.0, s.numel()).prop_map(move |v| Tensor::new(s, v).unwrap())
}

/// Small conv layer with an input whose span is divisible by the stride.
fn layer() -> impl Strategy<Value = (ConvLayer, Shape3)> {
    (1usize..4, 1usize..4, 1usize..4, 1usize..4, 1usize..4, 1usize..3, 0usize..3, 0usize..3, 0usize..4, 0usize..4)
        .prop_flat_map(|(ci, co, kh, kw, sh, sw, ph, pw, mh, mw)| {
            let (span_h, span_w) = (kh + mh * sh, kw + mw * sw);
            let (ph, pw) = (ph.min(span_h - 1), pw.min(span_w - 1));
            let (h, w) = (span_h - ph, span_w - pw);
            prop::collection::vec(-1.0f64..1.0, co * ci * kh * kw).prop_map(move |data| {
                let k = Kernel4::new(co, ci, kh, kw, data).unwrap();
                (ConvLayer::new(k, (sh, sw), (ph, pw)).unwrap(), Shape3::new(ci, h, w))
            })
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn perturbation_has_requested_norm(s in shape(), norm in 1e-6f64..10.0, seed in any::<u64>()) {
        let p = sample_perturbation(s, norm, seed).unwrap();
        prop_assert!((p.frobenius_norm() - norm).abs() <= 1e-9 * norm);
        prop_assert_eq!(p, sample_perturbation(s, norm, seed).unwrap());
    }

    #[test]
    fn certificate_is_monotone(d in 0.0f64..4.0, g in 0.0f64..2.0, l in 0.1f64..5.0, eps in 0.0f64..0.5) {
        let base = NroubCertificate::from_parts(d, g, l).unwrap();
        prop_assert!(base.bound >= 0.0);
        prop_assert_eq!(base.degenerate, d <= 2.0 * g);
        prop_assert!(NroubCertificate::from_parts(d + eps, g, l).unwrap().bound >= base.bound);
        prop_assert!(NroubCertificate::from_parts(d, g + eps, l).unwrap().bound <= base.bound);
        prop_assert!(NroubCertificate::from_parts(d, g, l + eps).unwrap().bound <= base.bound);
    }

    #[test]
    fn certified_bound_dominates_oracle((layer, input) in layer()) {
        let b = certified_layer_bound(&layer, input).unwrap();
        let o = oracle_operator_norm(&unroll_conv_matrix(&layer, input).unwrap()).unwrap();
        prop_assert!(b.value >= o.value - 1e-9, "{} < {}", b.value, o.value);
        prop_assert_eq!(b.oracle_value, Some(o.value));
    }

    #[test]
    fn full_mask_matches_psnr((a, b) in shape().prop_flat_map(|s| (tensor(s), tensor(s)))) {
        let s = a.shape();
        let full = RegionMask::full(s.h, s.w).unwrap();
        let r = region_psnr(&a, &b, &full, 1.0).unwrap();
        let p = psnr(&a, &b, 1.0).unwrap();
        prop_assert!(r == p || (r - p).abs() <= 1e-12 * p.abs());
    }

    #[test]
    fn sliding_matches_exhaustive(
        (gen, gt) in (1usize..4, 0usize..4).prop_flat_map(|(n, extra)| {
            let s = Shape3::new(1, 2, 2);
            (prop::collection::vec(tensor(s), n), prop::collection::vec(tensor(s), n + extra))
        })
    ) {
        let m = |x: &Tensor, y: &Tensor| psnr(x, y, 1.0);
        let (best, off) = sliding_eval(
            &FrameSequence::new(gen.clone()).unwrap(),
            &FrameSequence::new(gt.clone()).unwrap(),
            m,
        ).unwrap();
        let means: Vec<f64> = (0..=gt.len() - gen.len())
            .map(|o| gen.iter().zip(&gt[o..]).map(|(g, t)| m(g, t).unwrap()).sum::<f64>() / gen.len() as f64)
            .collect();
        let top = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(best, top);
        prop_assert_eq!(off, means.iter().position(|&v| v == top).unwrap());
    }

    #[test]
    fn quantized_latent_is_a_fixed_point(
        (anchors, latent) in (1usize..5, 1usize..4).prop_flat_map(|(n, c)| (
            prop::collection::vec(prop::collection::vec(-2.0f64..2.0, c), n),
            tensor(Shape3::new(c, 3, 3)),
        ))
    ) {
        let cb = Codebook::from_anchors(&anchors).unwrap();
        let (grid, q) = quantize_grid(&latent, &cb).unwrap();
        let (grid2, q2) = quantize_grid(&q, &cb).unwrap();
        prop_assert_eq!(&q, &q2);
        for (&a, &b) in grid.indices.iter().zip(&grid2.indices) {
            prop_assert_eq!(cb.anchor(a), cb.anchor(b));
        }
    }
}
