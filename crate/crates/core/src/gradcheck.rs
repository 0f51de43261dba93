//! Finite-difference verification of every differentiable operation.
//!
//! Each check projects an operation's output onto a fixed random tensor to
//! obtain a scalar, then compares the tape's gradients for every input and
//! parameter against central differences of that scalar. Only forward
//! evaluations are used on the numeric side.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::conv::{ConvAlgo, ConvGeom, PaddingMode};
use crate::error::Result;
use crate::losses::{self, LossConfig, LossMode};
use crate::network::{ModelConfig, TwoStageNet};
use crate::nn::{ChannelAttention, DenseBlock, Hdrdam, Rdam, SpatialAttention};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Float, Shape, Tensor};

/// Central-difference estimate of `∂f/∂x` for every element of `x`.
pub fn finite_diff_grad<T: Float>(f: impl Fn(&Tensor<T>) -> T, x: &Tensor<T>, h: T) -> Tensor<T> {
    let mut probe = x.clone();
    let two_h = h + h;
    let mut out = Vec::with_capacity(x.data().len());
    for i in 0..x.data().len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / two_h);
    }
    Tensor::from_vec(x.shape(), out).expect("same shape as x")
}

/// `max|a - n| / max(|a|∞, |n|∞, floor)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-6);
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / scale
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    /// Worst relative error over all checked tensors.
    pub max_rel_error: f64,
    /// Number of scalar derivatives compared.
    pub elements: usize,
    /// Distance of the evaluation point from the nearest ReLU or max kink.
    pub kink_margin: Option<f64>,
}

impl GradCheck {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Relative error bound used by the suite.
pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-6;
/// Evaluation points closer than this to a kink are redrawn.
const MIN_KINK_MARGIN: f64 = 1e-4;

type Builder<'a> = dyn Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var> + 'a;

/// Checks `build`, whose inputs and parameters all live in `store`.
pub fn check(name: &str, store: &ParamStore<f64>, algo: ConvAlgo, build: &Builder<'_>) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let out_shape = {
        let mut tape = Tape::new().with_conv_algo(algo);
        let out = build(&mut tape, store)?;
        tape.shape(out)?
    };
    let weights = random_tensor(out_shape, &mut rng, 1.0);
    let objective = |tape: &mut Tape<f64>, store: &ParamStore<f64>| -> Result<Var> {
        let out = build(tape, store)?;
        let w = tape.constant(weights.clone());
        let p = tape.mul_broadcast(out, w)?;
        let s = tape.sum_per_item(p)?;
        tape.mean(s)
    };

    let mut tape = Tape::new().with_conv_algo(algo);
    let loss = objective(&mut tape, store)?;
    let ids: Vec<ParamId> = store.ids().collect();
    let vars: Vec<Var> = ids.iter().map(|&id| tape.param(store, id)).collect();
    tape.backward(loss)?;
    let kink_margin = tape.kink_margin();

    let mut worst = 0.0f64;
    let mut elements = 0;
    for (&id, &var) in ids.iter().zip(&vars) {
        let t = store.get(id);
        let analytic = tape
            .grad(var)?
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.data().len()]);
        let eval = |x: &Tensor<f64>| -> f64 {
            let mut perturbed = store.clone();
            perturbed.set_data(id, x.data().to_vec()).expect("same shape");
            let mut tape = Tape::new().with_conv_algo(algo);
            let loss = objective(&mut tape, &perturbed).expect("objective evaluates");
            tape.value(loss).and_then(Tensor::item).expect("scalar objective")
        };
        let scale = t.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let numeric = finite_diff_grad(eval, t, STEP * scale);
        let e = relative_error(&analytic, numeric.data());
        worst = worst.max(e);
        elements += analytic.len();
    }
    Ok(GradCheck {
        name: name.to_string(),
        max_rel_error: worst,
        elements,
        kink_margin,
    })
}

pub fn random_tensor<R: Rng>(shape: Shape, rng: &mut R, bound: f64) -> Tensor<f64> {
    let data = (0..shape.numel()).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::from_vec(shape, data).expect("length matches")
}

/// Values bounded away from zero so ReLU kinks are not straddled.
fn off_zero<R: Rng>(shape: Shape, rng: &mut R) -> Tensor<f64> {
    let data = (0..shape.numel())
        .map(|_| {
            let v: f64 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) { v } else { -v }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("length matches")
}

fn inputs(tensors: Vec<(&str, Tensor<f64>)>) -> (ParamStore<f64>, Vec<ParamId>) {
    let mut store = ParamStore::new();
    let ids = tensors.into_iter().map(|(n, t)| store.add(n, t)).collect();
    (store, ids)
}

/// Runs every check with the given convolution algorithm.
pub fn run_suite(algo: ConvAlgo) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut out = Vec::new();
    let x_shape = Shape::new(2, 3, 6, 6);

    // Convolutions over a grid of geometries.
    let geoms = [
        ("conv2d 3x3", ConvGeom::same(3, 1)),
        ("conv2d 3x3 dilation 2", ConvGeom::same(3, 2)),
        ("conv2d 2x2 stride 2", ConvGeom::new(2, 2).with_stride(2)),
        ("conv2d 3x3 stride 2 pad 1", ConvGeom::new(3, 3).with_stride(2).with_padding(1)),
        (
            "conv2d 3x3 reflect pad",
            ConvGeom::same(3, 1).with_padding_mode(PaddingMode::Reflect),
        ),
        ("conv2d 1x1", ConvGeom::new(1, 1)),
    ];
    for (name, g) in geoms {
        let (kh, kw) = g.kernel;
        let (store, ids) = inputs(vec![
            ("x", random_tensor(x_shape, &mut rng, 1.0)),
            ("w", random_tensor(Shape::new(4, 3, kh, kw), &mut rng, 0.5)),
            ("b", random_tensor(Shape::new(1, 4, 1, 1), &mut rng, 0.5)),
        ]);
        out.push(check(name, &store, algo, &|t, s| {
            let x = t.param(s, ids[0]);
            let w = t.param(s, ids[1]);
            let b = t.param(s, ids[2]);
            t.conv2d(x, w, Some(b), g)
        })?);
    }
    {
        let (store, ids) = inputs(vec![
            ("a", random_tensor(Shape::new(2, 2, 6, 6), &mut rng, 1.0)),
            ("b", random_tensor(Shape::new(2, 1, 6, 6), &mut rng, 1.0)),
            ("w", random_tensor(Shape::new(2, 3, 3, 3), &mut rng, 0.5)),
        ]);
        out.push(check("conv2d over concatenated inputs", &store, algo, &|t, s| {
            let a = t.param(s, ids[0]);
            let b = t.param(s, ids[1]);
            let w = t.param(s, ids[2]);
            t.conv2d_cat(&[a, b], w, None, ConvGeom::same(3, 1))
        })?);
    }
    for (name, g) in [
        ("conv_transpose2d 2x2 stride 2", ConvGeom::new(2, 2).with_stride(2)),
        ("conv_transpose2d 3x3 stride 2 pad 1", ConvGeom::new(3, 3).with_stride(2).with_padding(1)),
    ] {
        let (kh, kw) = g.kernel;
        let (store, ids) = inputs(vec![
            ("x", random_tensor(Shape::new(2, 3, 3, 3), &mut rng, 1.0)),
            ("w", random_tensor(Shape::new(2, 3, kh, kw), &mut rng, 0.5)),
            ("b", random_tensor(Shape::new(1, 2, 1, 1), &mut rng, 0.5)),
        ]);
        out.push(check(name, &store, algo, &|t, s| {
            let x = t.param(s, ids[0]);
            let w = t.param(s, ids[1]);
            let b = t.param(s, ids[2]);
            t.conv_transpose2d(x, w, Some(b), g)
        })?);
    }

    // Elementwise and reductions.
    type Unary = fn(&mut Tape<f64>, Var) -> Result<Var>;
    let unary: [(&str, Unary, bool); 12] = [
        ("relu", |t, x| t.relu(x), true),
        ("sigmoid", |t, x| t.sigmoid(x), false),
        ("square", |t, x| t.square(x), false),
        ("sqrt", |t, x| {
            let s = t.square(x)?;
            let s = t.add_scalar(s, 0.5)?;
            t.sqrt(s)
        }, false),
        ("scale", |t, x| t.scale(x, -1.7), false),
        ("spatial_gap", |t, x| t.spatial_gap(x), false),
        ("channel_mean", |t, x| t.channel_mean(x), false),
        ("channel_max", |t, x| t.channel_max(x), true),
        ("laplacian", |t, x| t.laplacian(x), false),
        ("reflect_pad", |t, x| t.reflect_pad(x, 9, 8), false),
        ("crop", |t, x| t.crop(x, 4, 5), false),
        ("sum_per_item", |t, x| t.sum_per_item(x), false),
    ];
    for (name, f, avoid_kinks) in unary {
        let x = if avoid_kinks {
            off_zero(x_shape, &mut rng)
        } else {
            random_tensor(x_shape, &mut rng, 1.0)
        };
        let (store, ids) = inputs(vec![("x", x)]);
        out.push(check(name, &store, algo, &|t, s| {
            let x = t.param(s, ids[0]);
            f(t, x)
        })?);
    }
    {
        let (store, ids) = inputs(vec![("x", random_tensor(x_shape, &mut rng, 1.0))]);
        out.push(check("mean", &store, algo, &|t, s| {
            let x = t.param(s, ids[0]);
            t.mean(x)
        })?);
    }

    type Binary = fn(&mut Tape<f64>, Var, Var) -> Result<Var>;
    let binary: [(&str, Shape, Binary); 6] = [
        ("add", x_shape, |t, a, b| t.add(a, b)),
        ("sub", x_shape, |t, a, b| t.sub(a, b)),
        ("mul_broadcast spatial", Shape::new(2, 1, 6, 6), |t, a, b| t.mul_broadcast(a, b)),
        ("mul_broadcast channel", Shape::new(2, 3, 1, 1), |t, a, b| t.mul_broadcast(a, b)),
        ("mul elementwise", x_shape, |t, a, b| t.mul_broadcast(a, b)),
        ("concat_channels", Shape::new(2, 2, 6, 6), |t, a, b| t.concat_channels(&[a, b, a])),
    ];
    for (name, bshape, f) in binary {
        let (store, ids) = inputs(vec![
            ("a", random_tensor(x_shape, &mut rng, 1.0)),
            ("b", random_tensor(bshape, &mut rng, 1.0)),
        ]);
        out.push(check(name, &store, algo, &|t, s| {
            let a = t.param(s, ids[0]);
            let b = t.param(s, ids[1]);
            f(t, a, b)
        })?);
    }

    // Losses on 1×1×5×5 tensors.
    let lshape = Shape::new(1, 1, 5, 5);
    for (name, mode) in [("mse_loss", LossMode::Mse), ("charbonnier_edge_loss", LossMode::CharbonnierEdge)] {
        let cfg = LossConfig {
            mode,
            ..Default::default()
        };
        let (store, ids) = inputs(vec![
            ("x", random_tensor(lshape, &mut rng, 1.0)),
            ("gt", random_tensor(lshape, &mut rng, 1.0)),
        ]);
        out.push(check(name, &store, algo, &|t, s| {
            let x = t.param(s, ids[0]);
            let gt = t.param(s, ids[1]);
            losses::stage_loss(t, x, gt, &cfg)
        })?);
    }
    {
        // Near x = gt the Charbonnier root stays smooth.
        let gt = random_tensor(lshape, &mut rng, 1.0);
        let x = gt.map(|v| v + 1e-4);
        let cfg = LossConfig {
            mode: LossMode::CharbonnierEdge,
            ..Default::default()
        };
        let (store, ids) = inputs(vec![("x", x), ("gt", gt)]);
        out.push(check("charbonnier_edge_loss near identity", &store, algo, &|t, s| {
            let x = t.param(s, ids[0]);
            let gt = t.param(s, ids[1]);
            losses::stage_loss(t, x, gt, &cfg)
        })?);
    }

    // Blocks, with the input stored alongside the block parameters.
    let width = 3;
    let growth = 2;
    let pattern = [1, 2, 3, 4, 4, 3, 2, 1];
    let mut block_check = |name: &str,
                           input: Shape,
                           make: &dyn Fn(&mut ParamStore<f64>, &mut ChaCha8Rng) -> Result<Box<Builder<'static>>>|
     -> Result<()> {
        for _ in 0..256 {
            let mut store = ParamStore::new();
            store.add("x", random_tensor(input, &mut rng, 1.0));
            let mut init = ChaCha8Rng::seed_from_u64(7);
            let f = make(&mut store, &mut init)?;
            // Zero-initialized biases would leave too many ReLU inputs at 0.
            for (id, pname, t) in store.clone().iter() {
                if pname.ends_with(".bias") {
                    store.set_data(id, random_tensor(t.shape(), &mut init, 0.1).into_data())?;
                }
            }
            let margin = {
                let mut tape = Tape::new().with_conv_algo(algo);
                f(&mut tape, &store)?;
                tape.kink_margin()
            };
            if margin.is_none_or(|m| m > MIN_KINK_MARGIN) {
                out.push(check(name, &store, algo, &*f)?);
                return Ok(());
            }
        }
        Err(crate::Error::Config(format!("{name}: no kink-free evaluation point found")))
    };
    block_check("spatial_attention", x_shape, &|s, r| {
        let m = SpatialAttention::new(s, r, "sab")?;
        Ok(Box::new(move |t, s| {
            let x = t.param(s, ParamId(0));
            m.forward(t, s, x)
        }))
    })?;
    block_check("channel_attention", x_shape, &|s, r| {
        let m = ChannelAttention::new(s, r, "cab", width, 3)?;
        Ok(Box::new(move |t, s| {
            let x = t.param(s, ParamId(0));
            m.forward(t, s, x)
        }))
    })?;
    block_check("dense_block", x_shape, &|s, r| {
        let m = DenseBlock::standard(s, r, "db", width, growth)?;
        Ok(Box::new(move |t, s| {
            let x = t.param(s, ParamId(0));
            m.forward(t, s, x)
        }))
    })?;
    block_check("hybrid_dilated_dense_block", x_shape, &|s, r| {
        let m = DenseBlock::hybrid(s, r, "hddb", width, growth, &pattern)?;
        Ok(Box::new(move |t, s| {
            let x = t.param(s, ParamId(0));
            m.forward(t, s, x)
        }))
    })?;
    block_check("rdam", x_shape, &|s, r| {
        let m = Rdam::new(s, r, "rdam", width, growth)?;
        Ok(Box::new(move |t, s| {
            let x = t.param(s, ParamId(0));
            m.forward(t, s, x)
        }))
    })?;
    block_check("hdrdam", x_shape, &|s, r| {
        let m = Hdrdam::new(s, r, "hdrdam", width, growth, &pattern, 3)?;
        Ok(Box::new(move |t, s| {
            let x = t.param(s, ParamId(0));
            m.forward(t, s, x)
        }))
    })?;
    let net_config = ModelConfig {
        modules: 3,
        sampling_depth: 1,
        base_width: 3,
        growth: 2,
        attention_ratio: 3,
        ..Default::default()
    };
    block_check("two-stage network", Shape::new(1, 1, 7, 7), &|s, r| {
        let net = TwoStageNet::new(&net_config, s, r)?;
        Ok(Box::new(move |t, s| {
            let y = t.param(s, ParamId(0));
            let (x1, x2) = net.forward(t, s, y)?;
            t.concat_channels(&[x1, x2])
        }))
    })?;
    Ok(out)
}
