//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! with a failure status if any of them fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rdanet::data::{add_awgn, synthetic_image, Batch, NoiseSpec};
use rdanet::gradcheck::{random_tensor, run_suite, TOLERANCE};
use rdanet::losses::stage_loss;
use rdanet::metrics::{psnr, ssim};
use rdanet::nn::{zero_dense_block, Hdrdam, Rdam};
use rdanet::optim::lr_at;
use rdanet::train::FixedBatch;
use rdanet::{
    ConvAlgo, ConvGeom, Image, LossConfig, LossMode, Model, ModelConfig, ParamStore, Schedule, Shape, StreamConfig,
    Tape, Tensor, TrainConfig, Trainer, TrainingStream, Var,
};

struct Report {
    failures: usize,
}

impl Report {
    fn line(&mut self, name: &str, pass: bool, detail: String) {
        if !pass {
            self.failures += 1;
        }
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
}

fn gradient_suite(r: &mut Report) {
    for algo in [ConvAlgo::TapGemm, ConvAlgo::Direct, ConvAlgo::Im2col] {
        let start = Instant::now();
        let checks = run_suite(algo).expect("suite runs");
        let elapsed = start.elapsed();
        let worst = checks.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
        let all = checks.iter().all(|c| c.passed(TOLERANCE));
        let has_modules = ["rdam", "hdrdam"].iter().all(|m| checks.iter().any(|c| c.name.starts_with(m)));
        r.line(
            &format!("gradient suite ({algo:?})"),
            all && has_modules && elapsed < Duration::from_secs(300),
            format!(
                "{} checks, worst {:.2e} ({}), tolerance {TOLERANCE:.0e}, {:.1}s (limit 300s)",
                checks.len(),
                worst.max_rel_error,
                worst.name,
                elapsed.as_secs_f64()
            ),
        );
    }
}

fn run_module(x: &Tensor<f64>, f: impl Fn(&mut Tape<f64>, Var) -> Var) -> Tensor<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = f(&mut tape, xv);
    tape.value(y).unwrap().clone()
}

fn residual_identity(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_tensor(Shape::new(2, 16, 9, 11), &mut rng, 3.0);
    let mut store = ParamStore::<f64>::new();
    let rdam = Rdam::new(&mut store, &mut rng, "rdam", 16, 8).unwrap();
    let hdrdam = Hdrdam::new(&mut store, &mut rng, "hdrdam", 16, 8, &[1, 2, 3, 4, 4, 3, 2, 1], 8).unwrap();
    zero_dense_block(&rdam.dense, &mut store);
    zero_dense_block(&hdrdam.dense, &mut store);
    let a = run_module(&x, |t, v| rdam.forward(t, &store, v).unwrap());
    let b = run_module(&x, |t, v| hdrdam.forward(t, &store, v).unwrap());
    r.line(
        "residual identity",
        a.data() == x.data() && b.data() == x.data(),
        format!(
            "rdam max diff {:e}, hdrdam max diff {:e} (exact equality required)",
            a.max_abs_diff(&x).unwrap(),
            b.max_abs_diff(&x).unwrap()
        ),
    );
}

fn shape_contract(r: &mut Report) {
    for shape in [Shape::new(1, 1, 64, 64), Shape::new(4, 3, 128, 128), Shape::new(1, 1, 65, 65)] {
        let config = ModelConfig {
            image_channels: shape.c,
            ..ModelConfig::default()
        };
        let model = Model::<f32>::build(&config, 0).unwrap();
        let y = random_tensor(shape, &mut ChaCha8Rng::seed_from_u64(2), 0.5).map(|v| v + 0.5).cast::<f32>();
        let start = Instant::now();
        let (x1, x2) = model.infer(&y).unwrap();
        r.line(
            &format!("shape contract {}x{}x{}x{}", shape.n, shape.c, shape.h, shape.w),
            x1.shape() == shape && x2.shape() == shape && x1.is_finite() && x2.is_finite(),
            format!("x1 {:?}, x2 {:?}, default config, {:.1}s", x1.shape(), x2.shape(), start.elapsed().as_secs_f64()),
        );
    }
}

fn noise_anchors(r: &mut Report) {
    let clean = synthetic_image(1, 256, 256, 0).unwrap();
    for (sigma, want) in [(50.0, 14.15), (25.0, 20.17)] {
        let noisy = add_awgn(&clean, sigma, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let got = psnr(&noisy, &clean).unwrap();
        r.line(
            &format!("noise anchor sigma={sigma}"),
            (got - want).abs() <= 0.2,
            format!("{got:.3} dB, target {want} +/- 0.2"),
        );
    }
}

fn to_image(t: &Tensor<f32>) -> Image {
    Image::from_tensor(t, 0).unwrap()
}

fn overfit(r: &mut Report) {
    let clean = synthetic_image(1, 64, 64, 1).unwrap();
    let noisy = add_awgn(&clean, 25.0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let batch = Batch {
        noisy: noisy.to_tensor(),
        clean: clean.to_tensor(),
    };
    let iterations = 2000;
    let config = TrainConfig {
        iterations,
        lr_init: 1e-3,
        schedule: Schedule::StepHalving { period: iterations },
        log_every: 500,
        checkpoint_every: 0,
        ..Default::default()
    };
    let model = Model::build(&ModelConfig::tiny(), 0).unwrap();
    let mut trainer = Trainer::new(model, config).unwrap();
    let start = Instant::now();
    trainer.run(&FixedBatch(batch.clone()), &mut |_| {}).unwrap();
    let elapsed = start.elapsed();
    let (x1, x2) = trainer.model.infer(&batch.noisy).unwrap();
    let p_noisy = psnr(&noisy, &clean).unwrap();
    let p1 = psnr(&to_image(&x1), &clean).unwrap();
    let p2 = psnr(&to_image(&x2), &clean).unwrap();
    r.line(
        "overfit",
        p2 >= 32.0 && p2 - p_noisy >= 8.0 && elapsed < Duration::from_secs(900),
        format!(
            "PSNR(x2) {p2:.2} dB (>= 32), gain {:.2} dB over noisy {p_noisy:.2} (>= 8), {iterations} iterations in {:.0}s (limit 900s)",
            p2 - p_noisy,
            elapsed.as_secs_f64()
        ),
    );
    r.line(
        "progressive property",
        p2 >= p1 - 0.1,
        format!("PSNR(x2) {p2:.2} dB, PSNR(x1) {p1:.2} dB"),
    );
    // Not one of the gated criteria; reported so the shortfall stays visible.
    let loss = trainer.evaluate(&batch).unwrap();
    let stage = |x: &Tensor<f32>| rdanet::metrics::mse(x.data(), batch.clean.data());
    println!(
        "INFO overfit final total loss < 1e-4: {} (total {loss:.3e} = stage 1 {:.3e} + stage 2 {:.3e})",
        if loss < 1e-4 { "met" } else { "NOT met" },
        stage(&x1),
        stage(&x2)
    );
}

fn loss_anchors(r: &mut Report) {
    let gt = random_tensor(Shape::new(2, 3, 8, 8), &mut ChaCha8Rng::seed_from_u64(3), 1.0);
    let mut tape = Tape::new();
    let g = tape.constant(gt);
    let cfg = LossConfig {
        mode: LossMode::CharbonnierEdge,
        epsilon: 1e-3,
        lambda_edge: 0.1,
    };
    let ch = stage_loss(&mut tape, g, g, &cfg).unwrap();
    let mse = stage_loss(&mut tape, g, g, &LossConfig::default()).unwrap();
    let ch = tape.value(ch).unwrap().item().unwrap();
    let mse = tape.value(mse).unwrap().item().unwrap();
    r.line(
        "loss anchors",
        (ch - 1.1e-3).abs() < 1e-15 && mse == 0.0,
        format!("charbonnier+edge at identity {ch:e} (1.1e-3), mse at identity {mse:e} (0)"),
    );
}

fn schedule_anchors(r: &mut Report) {
    let step = lr_at(Schedule::StepHalving { period: 100_000 }, 1e-4, 100_000);
    let horizon = 600_000;
    let cosine = lr_at(Schedule::Cosine { min_lr: 1e-6, horizon }, 2e-4, horizon);
    r.line(
        "schedule anchors",
        (step - 5e-5).abs() <= 1e-12 && (cosine - 1e-6).abs() <= 1e-12,
        format!("step at 1e5 {step:e} (5e-5), cosine at T {cosine:e} (1e-6), tolerance 1e-12"),
    );
}

fn conv(algo: ConvAlgo, x: &Tensor<f64>, w: &Tensor<f64>, geom: ConvGeom) -> Tensor<f64> {
    let mut tape = Tape::new().with_conv_algo(algo);
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
    let y = tape.conv2d(xv, wv, None, geom).unwrap();
    tape.value(y).unwrap().clone()
}

fn zero_inflate(w: &Tensor<f64>, rate: usize) -> Tensor<f64> {
    let s = w.shape();
    let e = (s.h - 1) * rate + 1;
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, e, e));
    for o in 0..s.n {
        for i in 0..s.c {
            for a in 0..s.h {
                for b in 0..s.w {
                    out.set(o, i, a * rate, b * rate, w.get(o, i, a, b));
                }
            }
        }
    }
    out
}

fn ssim_oracle(x: &Image, y: &Image) -> f64 {
    let (k, sigma) = (11usize, 1.5f64);
    let mut win = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            win[i * k + j] = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
        }
    }
    let norm: f64 = win.iter().sum();
    win.iter_mut().for_each(|v| *v /= norm);
    let (c1, c2) = (1e-4, 9e-4);
    let mut total = 0.0;
    let mut count = 0;
    for c in 0..x.channels {
        for top in 0..=x.height - k {
            for left in 0..=x.width - k {
                let px = |i: usize, j: usize| x.get(c, top + i, left + j) as f64;
                let py = |i: usize, j: usize| y.get(c, top + i, left + j) as f64;
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..k * k {
                    mx += win[i] * px(i / k, i % k);
                    my += win[i] * py(i / k, i % k);
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..k * k {
                    let (dx, dy) = (px(i / k, i % k) - mx, py(i / k, i % k) - my);
                    vx += win[i] * dx * dx;
                    vy += win[i] * dy * dy;
                    cov += win[i] * dx * dy;
                }
                total += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

fn oracles(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut dilated, mut im2col, mut tapgemm) = (0.0f64, 0.0f64, 0.0f64);
    for rate in 1..=4 {
        for stride in 1..=2 {
            let x = random_tensor(Shape::new(2, 3, 13, 11), &mut rng, 1.0);
            let w = random_tensor(Shape::new(4, 3, 3, 3), &mut rng, 1.0);
            let geom = ConvGeom::same(3, rate).with_stride(stride);
            let reference = conv(ConvAlgo::Direct, &x, &w, geom);
            let plain = ConvGeom::new(2 * rate + 1, 2 * rate + 1).with_stride(stride).with_padding(rate);
            let inflated = conv(ConvAlgo::Direct, &x, &zero_inflate(&w, rate), plain);
            dilated = dilated.max(reference.max_abs_diff(&inflated).unwrap());
            im2col = im2col.max(reference.max_abs_diff(&conv(ConvAlgo::Im2col, &x, &w, geom)).unwrap());
            tapgemm = tapgemm.max(reference.max_abs_diff(&conv(ConvAlgo::TapGemm, &x, &w, geom)).unwrap());
        }
    }
    r.line("dilated conv vs zero-inflated kernel", dilated < 1e-10, format!("max diff {dilated:.2e} (< 1e-10)"));
    r.line("im2col conv vs direct", im2col < 1e-10, format!("max diff {im2col:.2e} (< 1e-10)"));
    r.line("tap-gemm conv vs direct", tapgemm < 1e-10, format!("max diff {tapgemm:.2e} (< 1e-10)"));

    let mut worst = 0.0f64;
    for seed in 0..6 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut img = || Image::new(1, 32, 32, (0..32 * 32).map(|_| rng.random::<f32>()).collect()).unwrap();
        let gt = img();
        let noise = img();
        let t = seed as f32 / 5.0;
        let x = Image::new(1, 32, 32, gt.pixels.iter().zip(&noise.pixels).map(|(a, b)| (1.0 - t) * a + t * b).collect())
            .unwrap();
        worst = worst.max((ssim(&x, &gt).unwrap() - ssim_oracle(&x, &gt)).abs());
    }
    r.line("ssim vs direct formula", worst < 1e-6, format!("max diff {worst:.2e} on 32x32 pairs (< 1e-6)"));
}

fn toy_trainer(iterations: u64) -> Trainer {
    let config = TrainConfig {
        iterations,
        lr_init: 1e-3,
        schedule: Schedule::StepHalving { period: 4 },
        log_every: 1,
        checkpoint_every: 0,
        seed: 3,
        ..Default::default()
    };
    Trainer::new(Model::build(&ModelConfig::tiny(), 1).unwrap(), config).unwrap()
}

fn determinism(r: &mut Report) {
    let images = (0..3).map(|i| synthetic_image(1, 40, 40, i).unwrap()).collect();
    let stream_config = StreamConfig {
        patch: 24,
        batch: 2,
        noise: NoiseSpec::default(),
        grayscale: true,
    };
    let stream = TrainingStream::from_images(images, stream_config, 3).unwrap();
    let total = 10;
    let mut a = toy_trainer(total);
    let mut b = toy_trainer(total);
    a.run(&stream, &mut |_| {}).unwrap();
    b.run(&stream, &mut |_| {}).unwrap();
    let (ca, cb) = (a.checkpoint().to_bytes(), b.checkpoint().to_bytes());
    r.line(
        "determinism",
        ca == cb,
        format!("two {total}-iteration runs, {} checkpoint bytes, identical: {}", ca.len(), ca == cb),
    );

    let mut first = toy_trainer(4);
    first.run(&stream, &mut |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.ckpt");
    first.checkpoint().save(&path).unwrap();
    let ck = rdanet::Checkpoint::load(&path).unwrap();
    let mut resumed = Trainer::resume(ck, toy_trainer(total).config).unwrap();
    resumed.run(&stream, &mut |_| {}).unwrap();
    let cr = resumed.checkpoint().to_bytes();
    r.line(
        "resume",
        cr == ca,
        format!("4 + {} iterations via a saved checkpoint equal {total} straight: {}", total - 4, cr == ca),
    );
}

fn param_count(r: &mut Report) {
    let a = Model::<f32>::build(&ModelConfig::default(), 0).unwrap().param_count();
    let b = Model::<f32>::build(&ModelConfig::default(), 12345).unwrap().param_count();
    r.line(
        "parameter count",
        a == b,
        format!("default grayscale config {a} ({:.0}K), stable across seeds; reference size 2846K", a as f64 / 1e3),
    );
}

fn main() {
    let mut r = Report { failures: 0 };
    gradient_suite(&mut r);
    residual_identity(&mut r);
    shape_contract(&mut r);
    noise_anchors(&mut r);
    loss_anchors(&mut r);
    schedule_anchors(&mut r);
    oracles(&mut r);
    determinism(&mut r);
    param_count(&mut r);
    overfit(&mut r);
    if r.failures > 0 {
        println!("{} acceptance check(s) failed", r.failures);
        std::process::exit(1);
    }
    println!("all acceptance checks passed");
}
