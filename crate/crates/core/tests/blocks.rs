use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rdanet::gradcheck::random_tensor;
use rdanet::nn::{zero_dense_block, ChannelAttention, ConvParams, DenseBlock, Hdrdam, Rdam, SpatialAttention};
use rdanet::{ConvGeom, ParamStore, Shape, Tape, Tensor, Var};

const PATTERN: [usize; 8] = [1, 2, 3, 4, 4, 3, 2, 1];

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Gives every bias a random value so no inner layer is degenerate.
fn randomize_biases(store: &mut ParamStore<f64>, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<_> = store.ids().filter(|&id| store.name(id).ends_with(".bias")).collect();
    for id in ids {
        let shape = store.get(id).shape();
        let data = random_tensor(shape, &mut r, 0.2).into_data();
        store.set_data(id, data).unwrap();
    }
}

fn run<F>(store: &ParamStore<f64>, x: &Tensor<f64>, f: F) -> Tensor<f64>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>, Var) -> rdanet::Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = f(&mut tape, store, xv).unwrap();
    tape.value(y).unwrap().clone()
}

#[test]
fn dense_block_preserves_shape() {
    let mut store = ParamStore::<f64>::new();
    let block = DenseBlock::standard(&mut store, &mut rng(0), "db", 64, 32).unwrap();
    let x = random_tensor(Shape::new(1, 64, 16, 16), &mut rng(1), 1.0);
    let y = run(&store, &x, |t, s, v| block.forward(t, s, v));
    assert_eq!(y.shape(), x.shape());
}

#[test]
fn dense_growth_law() {
    let mut store = ParamStore::<f64>::new();
    let (c, g) = (12, 5);
    for block in [
        DenseBlock::standard(&mut store, &mut rng(0), "db", c, g).unwrap(),
        DenseBlock::hybrid(&mut store, &mut rng(0), "hd", c, g, &PATTERN).unwrap(),
    ] {
        for (i, layer) in block.layers.iter().enumerate() {
            assert_eq!(layer.in_ch, c + i * g);
            assert_eq!(layer.out_ch, g);
            assert_eq!(store.get(layer.weight).shape(), Shape::new(g, c + i * g, 3, 3));
        }
        assert_eq!(block.layers[4].in_ch, c + 4 * g);
        assert_eq!((block.fusion.in_ch, block.fusion.out_ch), (c + 8 * g, c));
    }
}

#[test]
fn zero_dense_block_outputs_zero() {
    let mut store = ParamStore::<f64>::new();
    let block = DenseBlock::hybrid(&mut store, &mut rng(0), "hd", 8, 4, &PATTERN).unwrap();
    zero_dense_block(&block, &mut store);
    let x = random_tensor(Shape::new(2, 8, 9, 9), &mut rng(1), 1.0);
    let y = run(&store, &x, |t, s, v| block.forward(t, s, v));
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn hybrid_layers_keep_spatial_size() {
    let mut store = ParamStore::<f64>::new();
    let block = DenseBlock::hybrid(&mut store, &mut rng(0), "hd", 4, 2, &PATTERN).unwrap();
    assert_eq!(block.dilations(), PATTERN);
    for layer in &block.layers {
        let r = layer.geom.dilation.0;
        assert_eq!(layer.geom.padding, (r, r));
        assert_eq!(layer.geom.output_size(11, 13), Some((11, 13)));
    }
    let x = random_tensor(Shape::new(1, 4, 11, 13), &mut rng(1), 1.0);
    assert_eq!(run(&store, &x, |t, s, v| block.forward(t, s, v)).shape(), x.shape());
}

#[test]
fn dilation_rates_outside_range_rejected() {
    let mut store = ParamStore::<f64>::new();
    assert!(DenseBlock::hybrid(&mut store, &mut rng(0), "hd", 4, 2, &[1, 2, 3, 5, 4, 3, 2, 1]).is_err());
    assert!(DenseBlock::hybrid(&mut store, &mut rng(0), "hd", 4, 2, &[0, 2, 3, 4, 4, 3, 2, 1]).is_err());
    assert!(DenseBlock::hybrid(&mut store, &mut rng(0), "hd", 4, 2, &[1, 2, 3]).is_err());
}

#[test]
fn unit_rates_reduce_to_the_standard_block() {
    let mut s1 = ParamStore::<f64>::new();
    let mut s2 = ParamStore::<f64>::new();
    let standard = DenseBlock::standard(&mut s1, &mut rng(9), "db", 6, 3).unwrap();
    let hybrid = DenseBlock::hybrid(&mut s2, &mut rng(9), "db", 6, 3, &[1; 8]).unwrap();
    randomize_biases(&mut s1, 4);
    randomize_biases(&mut s2, 4);
    let x = random_tensor(Shape::new(2, 6, 7, 7), &mut rng(1), 1.0);
    let a = run(&s1, &x, |t, s, v| standard.forward(t, s, v));
    let b = run(&s2, &x, |t, s, v| hybrid.forward(t, s, v));
    assert_eq!(a, b);
}

#[test]
fn rate_four_layer_sees_nine_pixels_across() {
    let mut store = ParamStore::<f64>::new();
    let block = DenseBlock::hybrid(&mut store, &mut rng(0), "hd", 1, 1, &PATTERN).unwrap();
    let layer = &block.layers[3];
    assert_eq!(layer.geom.dilation, (4, 4));
    let probe = ConvParams::new(&mut store, &mut rng(1), "probe", 1, 1, layer.geom).unwrap();
    store.set_data(probe.weight, vec![1.0; 9]).unwrap();
    let mut x = Tensor::zeros(Shape::new(1, 1, 17, 17));
    x.set(0, 0, 8, 8, 1.0);
    let y = run(&store, &x, |t, s, v| probe.forward(t, s, v));
    let cols: Vec<usize> = (0..17).filter(|&w| (0..17).any(|h| y.get(0, 0, h, w) != 0.0)).collect();
    assert_eq!(cols.first().copied(), Some(4));
    assert_eq!(cols.last().copied(), Some(12));
    assert_eq!(cols.last().unwrap() - cols.first().unwrap() + 1, 9);
}

#[test]
fn spatial_attention_of_zeros() {
    let mut store = ParamStore::<f64>::new();
    let sab = SpatialAttention::new(&mut store, &mut rng(0), "sab").unwrap();
    let x = Tensor::zeros(Shape::new(1, 5, 6, 6));
    let map = run(&store, &x, |t, s, v| sab.map(t, s, v));
    assert_eq!(map.shape(), Shape::new(1, 1, 6, 6));
    assert!(map.data().iter().all(|&v| v == 0.5));
    let y = run(&store, &x, |t, s, v| sab.forward(t, s, v));
    assert_eq!(y.shape(), x.shape());
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn channel_attention_of_zeros() {
    let mut store = ParamStore::<f64>::new();
    let cab = ChannelAttention::new(&mut store, &mut rng(0), "cab", 16, 8).unwrap();
    let x = Tensor::zeros(Shape::new(2, 16, 5, 5));
    let gate = run(&store, &x, |t, s, v| cab.gate(t, s, v));
    assert_eq!(gate.shape(), Shape::new(2, 16, 1, 1));
    assert!(gate.data().iter().all(|&v| v == 0.5));
    let y = run(&store, &x, |t, s, v| cab.forward(t, s, v));
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn channel_ratio_must_divide_width() {
    let mut store = ParamStore::<f64>::new();
    assert!(ChannelAttention::new(&mut store, &mut rng(0), "cab", 12, 8).is_err());
}

#[test]
fn pooling_stage_is_linear() {
    let x = random_tensor(Shape::new(1, 3, 4, 4), &mut rng(2), 1.0);
    let x2 = x.map(|v| 2.0 * v);
    let mut tape = Tape::<f64>::new();
    let (a, b) = (tape.constant(x), tape.constant(x2));
    let (ga, gb) = (tape.spatial_gap(a).unwrap(), tape.spatial_gap(b).unwrap());
    let (ga, gb) = (tape.value(ga).unwrap(), tape.value(gb).unwrap());
    for (p, q) in ga.data().iter().zip(gb.data()) {
        assert!((2.0 * p - q).abs() < 1e-15);
    }
}

fn zeroed_rdam(seed: u64, c: usize) -> (ParamStore<f64>, Rdam) {
    let mut store = ParamStore::new();
    let m = Rdam::new(&mut store, &mut rng(seed), "rdam", c, 4).unwrap();
    randomize_biases(&mut store, seed + 1);
    zero_dense_block(&m.dense, &mut store);
    (store, m)
}

fn zeroed_hdrdam(seed: u64, c: usize) -> (ParamStore<f64>, Hdrdam) {
    let mut store = ParamStore::new();
    let m = Hdrdam::new(&mut store, &mut rng(seed), "hdrdam", c, 4, &PATTERN, 4).unwrap();
    randomize_biases(&mut store, seed + 1);
    zero_dense_block(&m.dense, &mut store);
    (store, m)
}

#[test]
fn residual_identity_is_exact() {
    let x = random_tensor(Shape::new(2, 8, 9, 7), &mut rng(3), 3.0);
    let (store, rdam) = zeroed_rdam(0, 8);
    assert_eq!(run(&store, &x, |t, s, v| rdam.forward(t, s, v)).data(), x.data());
    let (store, hdrdam) = zeroed_hdrdam(0, 8);
    assert_eq!(run(&store, &x, |t, s, v| hdrdam.forward(t, s, v)).data(), x.data());

    let x32: Tensor<f32> = x.cast();
    let (store, _) = zeroed_rdam(0, 8);
    let y = run32(&store.cast(), &x32, |t, s, v| rdam.forward(t, s, v));
    assert!(y.max_abs_diff(&x32).unwrap() < 1e-6);
    let (store, _) = zeroed_hdrdam(0, 8);
    let y = run32(&store.cast(), &x32, |t, s, v| hdrdam.forward(t, s, v));
    assert!(y.max_abs_diff(&x32).unwrap() < 1e-6);
}

fn run32<F>(store: &ParamStore<f32>, x: &Tensor<f32>, f: F) -> Tensor<f32>
where
    F: Fn(&mut Tape<f32>, &ParamStore<f32>, Var) -> rdanet::Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = f(&mut tape, store, xv).unwrap();
    tape.value(y).unwrap().clone()
}

#[test]
fn zero_inner_block_passes_gradient_through_skip() {
    let x = random_tensor(Shape::new(1, 8, 6, 6), &mut rng(5), 1.0);
    let upstream = random_tensor(x.shape(), &mut rng(6), 1.0);
    let (store, rdam) = zeroed_rdam(1, 8);
    let (store2, hdrdam) = zeroed_hdrdam(1, 8);
    for (store, which) in [(&store, 0), (&store2, 1)] {
        let mut tape = Tape::new();
        let xv = tape.variable(x.clone());
        let y = match which {
            0 => rdam.forward(&mut tape, store, xv).unwrap(),
            _ => hdrdam.forward(&mut tape, store, xv).unwrap(),
        };
        let u = tape.constant(upstream.clone());
        let p = tape.mul_broadcast(y, u).unwrap();
        let s = tape.sum_per_item(p).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(xv).unwrap().unwrap(), upstream.data());
        for (_, g) in tape.param_grads() {
            assert!(g.is_none_or(|g| g.iter().all(|v| v.is_finite())));
        }
    }
}

#[test]
fn hdrdam_matches_direct_composition() {
    let c = 8;
    let mut store = ParamStore::<f64>::new();
    let m = Hdrdam::new(&mut store, &mut rng(7), "hdrdam", c, 3, &[1; 8], 4).unwrap();
    randomize_biases(&mut store, 8);
    let x = random_tensor(Shape::new(2, c, 6, 6), &mut rng(9), 1.0);
    let expected = run(&store, &x, |t, s, v| m.forward(t, s, v));

    // Spelled out with raw tape operations.
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let mut feats = vec![xv];
    for layer in &m.dense.layers {
        let w = tape.constant(store.get(layer.weight).clone());
        let b = tape.constant(store.get(layer.bias).clone());
        let cat = tape.concat_channels(&feats).unwrap();
        let y = tape.conv2d(cat, w, Some(b), ConvGeom::same(3, 1)).unwrap();
        feats.push(tape.relu(y).unwrap());
    }
    let cat = tape.concat_channels(&feats).unwrap();
    let conv1 = |tape: &mut Tape<f64>, p: &ConvParams, x: Var| {
        let w = tape.constant(store.get(p.weight).clone());
        let b = tape.constant(store.get(p.bias).clone());
        tape.conv2d(x, w, Some(b), ConvGeom::new(1, 1)).unwrap()
    };
    let d = conv1(&mut tape, &m.dense.fusion, cat);
    let gap = tape.spatial_gap(d).unwrap();
    let h = conv1(&mut tape, &m.attention.reduce, gap);
    let h = tape.relu(h).unwrap();
    let e = conv1(&mut tape, &m.attention.expand, h);
    let gate = tape.sigmoid(e).unwrap();
    let a = tape.mul_broadcast(d, gate).unwrap();
    let out = tape.add(a, xv).unwrap();
    assert!(tape.value(out).unwrap().max_abs_diff(&expected).unwrap() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn modules_preserve_shape_and_gates_stay_open(seed in any::<u64>(), n in 1usize..=2, h in 1usize..=9, w in 1usize..=9, scale in 0.01f64..100.0) {
        let c = 8;
        let mut store = ParamStore::<f64>::new();
        let mut r = rng(seed);
        let rdam = Rdam::new(&mut store, &mut r, "rdam", c, 2).unwrap();
        let hdrdam = Hdrdam::new(&mut store, &mut r, "hdrdam", c, 2, &PATTERN, 4).unwrap();
        randomize_biases(&mut store, seed ^ 1);
        let x = random_tensor(Shape::new(n, c, h, w), &mut r, scale);
        let map = run(&store, &x, |t, s, v| rdam.attention.map(t, s, v));
        prop_assert!(map.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let gate = run(&store, &x, |t, s, v| hdrdam.attention.gate(t, s, v));
        prop_assert!(gate.data().iter().all(|&v| v > 0.0 && v < 1.0));
        for y in [
            run(&store, &x, |t, s, v| rdam.dense.forward(t, s, v)),
            run(&store, &x, |t, s, v| hdrdam.dense.forward(t, s, v)),
            run(&store, &x, |t, s, v| rdam.attention.forward(t, s, v)),
            run(&store, &x, |t, s, v| hdrdam.attention.forward(t, s, v)),
            run(&store, &x, |t, s, v| rdam.forward(t, s, v)),
            run(&store, &x, |t, s, v| hdrdam.forward(t, s, v)),
        ] {
            prop_assert_eq!(y.shape(), x.shape());
            prop_assert!(y.is_finite());
        }
    }
}
