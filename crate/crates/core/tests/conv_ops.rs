use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rdanet::gradcheck::{finite_diff_grad, random_tensor, relative_error};
use rdanet::{ConvAlgo, ConvGeom, PaddingMode, Shape, Tape, Tensor};

fn t64(shape: Shape, data: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(shape, data.to_vec()).unwrap()
}

fn conv(algo: ConvAlgo, x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, geom: ConvGeom) -> Tensor<f64> {
    let mut tape = Tape::new().with_conv_algo(algo);
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let bv = b.map(|b| tape.constant(b.clone()));
    let y = tape.conv2d(xv, wv, bv, geom).unwrap();
    tape.value(y).unwrap().clone()
}

fn conv_t(algo: ConvAlgo, x: &Tensor<f64>, w: &Tensor<f64>, geom: ConvGeom) -> Tensor<f64> {
    let mut tape = Tape::new().with_conv_algo(algo);
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let y = tape.conv_transpose2d(xv, wv, None, geom).unwrap();
    tape.value(y).unwrap().clone()
}

fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.max_abs_diff(b).unwrap()
}

const ALGOS: [ConvAlgo; 3] = [ConvAlgo::Direct, ConvAlgo::Im2col, ConvAlgo::TapGemm];

#[test]
fn one_by_one_unit_kernel_is_identity() {
    let x = t64(Shape::new(1, 1, 3, 3), &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
    let w = Tensor::full(Shape::new(1, 1, 1, 1), 1.0);
    let b = Tensor::zeros(Shape::new(1, 1, 1, 1));
    for algo in ALGOS {
        assert_eq!(conv(algo, &x, &w, Some(&b), ConvGeom::new(1, 1)), x);
    }
}

#[test]
fn box_filter_center_is_five() {
    let x = t64(Shape::new(1, 1, 3, 3), &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
    let w = Tensor::full(Shape::new(1, 1, 3, 3), 1.0 / 9.0);
    for algo in ALGOS {
        let y = conv(algo, &x, &w, None, ConvGeom::same(3, 1));
        assert_eq!(y.shape(), Shape::new(1, 1, 3, 3));
        assert!((y.get(0, 0, 1, 1) - 5.0).abs() < 1e-12);
        // Corner sees 1+2+4+5 through zero padding.
        assert!((y.get(0, 0, 0, 0) - 12.0 / 9.0).abs() < 1e-12);
    }
}

#[test]
fn dilated_same_padding_preserves_size() {
    let geom = ConvGeom::new(3, 3).with_dilation(2).with_padding(2);
    assert_eq!(geom.extent(), (5, 5));
    assert_eq!(geom.output_size(9, 7), Some((9, 7)));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_tensor(Shape::new(1, 2, 9, 7), &mut rng, 1.0);
    let w = random_tensor(Shape::new(3, 2, 3, 3), &mut rng, 1.0);
    assert_eq!(conv(ConvAlgo::Direct, &x, &w, None, geom).shape(), Shape::new(1, 3, 9, 7));
}

#[test]
fn channel_mismatch_and_empty_output_are_errors() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(Shape::new(1, 2, 4, 4)));
    let w = tape.constant(Tensor::zeros(Shape::new(1, 3, 3, 3)));
    let err = tape.conv2d(x, w, None, ConvGeom::same(3, 1)).unwrap_err();
    assert!(err.to_string().contains('3'), "{err}");
    let w = tape.constant(Tensor::zeros(Shape::new(1, 2, 5, 5)));
    assert!(tape.conv2d(x, w, None, ConvGeom::new(5, 5)).is_err());
}

#[test]
fn transpose_doubles_spatial_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_tensor(Shape::new(1, 3, 4, 4), &mut rng, 1.0);
    let w = random_tensor(Shape::new(5, 3, 2, 2), &mut rng, 1.0);
    let geom = ConvGeom::new(2, 2).with_stride(2);
    for algo in ALGOS {
        assert_eq!(conv_t(algo, &x, &w, geom).shape(), Shape::new(1, 5, 8, 8));
    }
}

#[test]
fn transpose_of_single_pixel_stamps_kernel() {
    let x = t64(Shape::new(1, 1, 1, 1), &[2.5]);
    let w = Tensor::full(Shape::new(1, 1, 2, 2), 1.0);
    let geom = ConvGeom::new(2, 2).with_stride(2);
    for algo in ALGOS {
        assert_eq!(conv_t(algo, &x, &w, geom).data(), &[2.5; 4]);
    }
}

#[test]
fn strided_down_then_up_restores_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(Shape::new(2, 3, 6, 10), &mut rng, 1.0);
    let down = random_tensor(Shape::new(4, 3, 2, 2), &mut rng, 1.0);
    let up = random_tensor(Shape::new(3, 4, 2, 2), &mut rng, 1.0);
    let geom = ConvGeom::new(2, 2).with_stride(2);
    let y = conv(ConvAlgo::Direct, &x, &down, None, geom);
    assert_eq!(conv_t(ConvAlgo::Direct, &y, &up, geom).shape(), x.shape());
}

#[test]
fn finite_differences_of_simple_functions() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_tensor(Shape::new(1, 2, 3, 3), &mut rng, 2.0);
    let g = finite_diff_grad(|t: &Tensor<f64>| t.data().iter().sum(), &x, 1e-4);
    assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-9));
    let one = Tensor::full(Shape::new(1, 1, 1, 1), 1.0);
    let g = finite_diff_grad(|t: &Tensor<f64>| t.data().iter().map(|v| v * v).sum(), &one, 1e-4);
    assert!((g.data()[0] - 2.0).abs() < 1e-6);
}

#[test]
fn conv_weight_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_tensor(Shape::new(2, 3, 6, 6), &mut rng, 1.0);
    let w = random_tensor(Shape::new(2, 3, 3, 3), &mut rng, 1.0);
    let proj = random_tensor(Shape::new(2, 2, 6, 6), &mut rng, 1.0);
    let geom = ConvGeom::same(3, 1);
    let f = |w: &Tensor<f64>| {
        let y = conv(ConvAlgo::Direct, &x, w, None, geom);
        y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum::<f64>()
    };
    let numeric = finite_diff_grad(f, &w, 1e-6);
    for algo in ALGOS {
        let mut tape = Tape::new().with_conv_algo(algo);
        let xv = tape.constant(x.clone());
        let wv = tape.variable(w.clone());
        let pv = tape.constant(proj.clone());
        let y = tape.conv2d(xv, wv, None, geom).unwrap();
        let p = tape.mul_broadcast(y, pv).unwrap();
        let s = tape.sum_per_item(p).unwrap();
        let s = tape.mean(s).unwrap();
        tape.backward(s).unwrap();
        // The mean over the batch of two halves the projected sum.
        let analytic: Vec<f64> = tape.grad(wv).unwrap().unwrap().iter().map(|g| g * 2.0).collect();
        assert!(relative_error(&analytic, numeric.data()) < 1e-4, "{algo:?}");
    }
}

/// Kernel with `r - 1` zeros inserted between neighbouring taps.
fn zero_inflate(w: &Tensor<f64>, r: usize) -> Tensor<f64> {
    let s = w.shape();
    let e = (s.h - 1) * r + 1;
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, e, e));
    for o in 0..s.n {
        for i in 0..s.c {
            for a in 0..s.h {
                for b in 0..s.w {
                    out.set(o, i, a * r, b * r, w.get(o, i, a, b));
                }
            }
        }
    }
    out
}

fn geometry() -> impl Strategy<Value = (usize, usize, usize, usize, usize, usize)> {
    // (kernel, stride, dilation, padding, height, width)
    (1usize..=4, 1usize..=2, 1usize..=4, 0usize..=4, 1usize..=9, 1usize..=9)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn output_size_formula_holds((k, s, r, p, h, w) in geometry()) {
        let geom = ConvGeom::new(k, k).with_stride(s).with_dilation(r).with_padding(p);
        let extent = (k - 1) * r + 1;
        let expected = |n: usize| (n + 2 * p >= extent).then(|| (n + 2 * p - extent) / s + 1);
        match (expected(h), expected(w)) {
            (Some(oh), Some(ow)) => {
                prop_assert_eq!(geom.output_size(h, w), Some((oh, ow)));
                let mut rng = ChaCha8Rng::seed_from_u64((k * 1000 + s * 100 + r * 10 + p) as u64);
                let x = random_tensor(Shape::new(1, 2, h, w), &mut rng, 1.0);
                let kernel = random_tensor(Shape::new(1, 2, k, k), &mut rng, 1.0);
                for algo in ALGOS {
                    prop_assert_eq!(conv(algo, &x, &kernel, None, geom).shape(), Shape::new(1, 1, oh, ow));
                }
            }
            _ => prop_assert_eq!(geom.output_size(h, w), None),
        }
    }

    #[test]
    fn fast_paths_match_direct((k, s, r, p, h, w) in geometry(), seed in any::<u64>(), reflect in any::<bool>()) {
        let mode = if reflect { PaddingMode::Reflect } else { PaddingMode::Zero };
        prop_assume!(!reflect || p < h.min(w));
        let geom = ConvGeom::new(k, k).with_stride(s).with_dilation(r).with_padding(p).with_padding_mode(mode);
        prop_assume!(geom.output_size(h, w).is_some());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(Shape::new(2, 3, h, w), &mut rng, 1.0);
        let kernel = random_tensor(Shape::new(4, 3, k, k), &mut rng, 1.0);
        let bias = random_tensor(Shape::new(1, 4, 1, 1), &mut rng, 1.0);
        let reference = conv(ConvAlgo::Direct, &x, &kernel, Some(&bias), geom);
        for algo in [ConvAlgo::Im2col, ConvAlgo::TapGemm] {
            prop_assert!(max_diff(&conv(algo, &x, &kernel, Some(&bias), geom), &reference) < 1e-10);
        }
        // Single precision agreement.
        let x32: Tensor<f32> = x.cast();
        let k32: Tensor<f32> = kernel.cast();
        let mut tape = Tape::<f32>::new().with_conv_algo(ConvAlgo::TapGemm);
        let (xv, kv) = (tape.constant(x32), tape.constant(k32));
        let y = tape.conv2d(xv, kv, None, geom).unwrap();
        let y: Tensor<f64> = tape.value(y).unwrap().cast();
        let unbiased = conv(ConvAlgo::Direct, &x, &kernel, None, geom);
        prop_assert!(max_diff(&y, &unbiased) < 1e-5);
    }

    #[test]
    fn transposed_fast_paths_match_direct(k in 1usize..=3, s in 1usize..=2, p in 0usize..=1, h in 1usize..=5, seed in any::<u64>()) {
        let geom = ConvGeom::new(k, k).with_stride(s).with_padding(p);
        prop_assume!(geom.transposed_output_size(h, h).is_some());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(Shape::new(2, 3, h, h), &mut rng, 1.0);
        let kernel = random_tensor(Shape::new(2, 3, k, k), &mut rng, 1.0);
        let reference = conv_t(ConvAlgo::Direct, &x, &kernel, geom);
        for algo in [ConvAlgo::Im2col, ConvAlgo::TapGemm] {
            prop_assert!(max_diff(&conv_t(algo, &x, &kernel, geom), &reference) < 1e-10);
        }
    }

    #[test]
    fn conv_is_linear_without_bias(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0, r in 1usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = Shape::new(2, 3, 7, 6);
        let x = random_tensor(shape, &mut rng, 1.0);
        let y = random_tensor(shape, &mut rng, 1.0);
        let kernel = random_tensor(Shape::new(2, 3, 3, 3), &mut rng, 1.0);
        let geom = ConvGeom::same(3, r);
        let mix = Tensor::from_vec(shape, x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
        for algo in ALGOS {
            let lhs = conv(algo, &mix, &kernel, None, geom);
            let cx = conv(algo, &x, &kernel, None, geom);
            let cy = conv(algo, &y, &kernel, None, geom);
            let rhs = Tensor::from_vec(lhs.shape(), cx.data().iter().zip(cy.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
            prop_assert!(max_diff(&lhs, &rhs) < 1e-10);
        }
    }

    #[test]
    fn dilation_equals_zero_inflated_kernel(seed in any::<u64>(), k in 2usize..=4, r in 2usize..=4, s in 1usize..=2, p in 0usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(Shape::new(1, 2, 12, 11), &mut rng, 1.0);
        let kernel = random_tensor(Shape::new(3, 2, k, k), &mut rng, 1.0);
        let dilated = ConvGeom::new(k, k).with_dilation(r).with_stride(s).with_padding(p);
        prop_assume!(dilated.output_size(12, 11).is_some());
        let inflated = zero_inflate(&kernel, r);
        let e = inflated.shape().h;
        let plain = ConvGeom::new(e, e).with_stride(s).with_padding(p);
        for algo in ALGOS {
            let a = conv(algo, &x, &kernel, None, dilated);
            let b = conv(ConvAlgo::Direct, &x, &inflated, None, plain);
            prop_assert_eq!(a.shape(), b.shape());
            prop_assert!(max_diff(&a, &b) < 1e-10);
        }
    }

    #[test]
    fn finite_inputs_give_finite_outputs(seed in any::<u64>(), scale in 1e-3f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = Shape::new(2, 3, 5, 5);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(random_tensor(shape, &mut rng, scale));
        let g = tape.constant(random_tensor(Shape::new(2, 1, 5, 5), &mut rng, scale));
        let w = tape.constant(random_tensor(Shape::new(3, 3, 3, 3), &mut rng, 1.0));
        let outs = [
            tape.conv2d(x, w, None, ConvGeom::same(3, 2)).unwrap(),
            tape.sigmoid(x).unwrap(),
            tape.relu(x).unwrap(),
            tape.channel_max(x).unwrap(),
            tape.spatial_gap(x).unwrap(),
            tape.laplacian(x).unwrap(),
            tape.mul_broadcast(x, g).unwrap(),
        ];
        for o in outs {
            prop_assert!(tape.value(o).unwrap().is_finite());
        }
        let big = tape.constant(Tensor::full(shape, 40.0));
        let s = tape.sigmoid(big).unwrap();
        prop_assert!(tape.value(s).unwrap().data().iter().all(|&v| v < 1.0 && v.is_finite()));
    }
}
