//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 3 7`.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use neurotune::diffcore::{finite_diff_check, Conv2dSpec, Optimizer, OptimizerConfig, Padding};
use neurotune::evalharness::{cross_validate, paired_ttest, split_subject_kfold, train_run, CvContext, TrainConfig, Variant};
use neurotune::lora::{max_conv_rank, resolve_conv_rank, AdaptedModel, ConvRankPolicy, LoraConfig, TargetKind, SWEEP_RANKS};
use neurotune::modelzoo::{reference, Architecture, BatchInput, LayerKind, Model, ModelConfig, PreparedData};
use neurotune::signalprep::{bandpass, car, map_channels, notch, ChannelSource, Electrode, PipelineConfig, Recording, TrialSet};
use neurotune::synthdata::{generate, SynthSpec};
use neurotune::{seed, Graph, Mode, ParamStore, Tensor, Var};
use rand::Rng;
use rustfft::{num_complex::Complex64, FftPlanner};
use statrs::distribution::{ContinuousCDF, StudentsT};

type Check = Result<String, String>;

macro_rules! check {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err(format!($($arg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn model(name: &str) -> Model {
    Model::build(&reference::get(name).unwrap()).unwrap()
}

fn with_cls(name: &str, n_cls: usize) -> Model {
    let mut c = reference::get(name).unwrap();
    c.n_cls = n_cls;
    Model::build(&c).unwrap()
}

/// Largest power of two with `r(d+k) <= dk`, by linear search.
fn conv_rank_oracle(d: usize, k: usize) -> Option<usize> {
    let mut best = None;
    let mut r = 1;
    while r * (d + k) <= d * k {
        best = Some(r);
        r *= 2;
    }
    best
}

fn kind_subsets() -> Vec<BTreeSet<TargetKind>> {
    (1u8..8).map(|m| (0..3).filter(|i| m >> i & 1 == 1).map(|i| TargetKind::ALL[i]).collect()).collect()
}

fn c1_count_law() -> Check {
    let bases = [model("labram_tiny"), model("labram_desk"), model("neurogpt_encoder")];
    let start = Instant::now();
    let mut points = 0;
    for base in &bases {
        let head = base.config().head_spec().param_count(base.head_input(), base.n_cls());
        let convs: Vec<(usize, usize)> = base.layers().iter().filter(|l| l.kind == LayerKind::Conv).filter_map(|l| l.matrix_dims()).collect();
        let r_c = convs.iter().filter_map(|&(d, k)| conv_rank_oracle(d, k)).min();
        for kinds in kind_subsets() {
            if !kinds.iter().all(|t| base.layers().iter().any(|l| l.kind == t.layer_kind())) {
                continue;
            }
            for r in SWEEP_RANKS {
                let cfg = LoraConfig::new(kinds.iter().copied(), r);
                let am = ok(AdaptedModel::inject(base.clone(), &cfg, 0))?;
                let law: usize = base
                    .layers()
                    .iter()
                    .filter(|l| kinds.iter().any(|t| t.layer_kind() == l.kind))
                    .map(|l| {
                        let (d, k) = l.matrix_dims().unwrap();
                        let rank = if l.kind == LayerKind::Conv { r_c.unwrap() } else { r };
                        rank * (d + k)
                    })
                    .sum::<usize>()
                    + head;
                let enumerated: usize = am.model().params().iter().filter(|(_, p)| p.requires_grad).map(|(_, p)| p.value.data().len()).sum();
                let reported = am.trainable_param_count();
                check!(reported == law && law == enumerated, "{} {kinds:?} r={r}: reported {reported}, law {law}, enumerated {enumerated}", base.config().name);
                points += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check!(secs < 1.0, "grid took {secs:.2} s");
    Ok(format!("{points} grid points exact across 3 models in {secs:.2} s"))
}

fn c2_conv_rank() -> Check {
    for (name, want) in [("labram_desk", 4), ("labram_base", 4), ("neurogpt_encoder", 8), ("neurogpt_full_desk", 8)] {
        let got = ok(resolve_conv_rank(&model(name), ConvRankPolicy::AutoMaxPow2))?;
        check!(got == want, "{name}: r_c = {got}, expected {want}");
    }
    let mut rng = seed::rng(2024);
    for _ in 0..1000 {
        let (d, k) = (rng.random_range(2..5000usize), rng.random_range(2..5000usize));
        let r = ok(max_conv_rank(d, k))?;
        check!(r.is_power_of_two(), "({d},{k}) gave {r}");
        check!(r * (d + k) <= d * k && d * k < 2 * r * (d + k), "({d},{k}) gave {r}");
        check!(Some(r) == conv_rank_oracle(d, k), "({d},{k}) gave {r}");
    }
    Ok("r_c = 4 (LaBraM-like), 8 (NeuroGPT-like); 1000 random (d,k) pairs obey the bracket".into())
}

fn random_set(trials: usize, channels: usize, seconds: usize, seed_: u64) -> TrialSet {
    let mut rng = seed::rng(seed_);
    let n = 200 * seconds;
    let labels: Vec<usize> = (0..trials).map(|i| i % 2).collect();
    TrialSet {
        fs: 200.0,
        channels: SynthSpec { channels, ..SynthSpec::default() }.electrodes(),
        n_samples: n,
        n_classes: 2,
        labels,
        subjects: (0..trials).map(|i| format!("R{i}")).collect(),
        data: (0..trials * channels * n).map(|_| rng.random_range(-2.0..2.0)).collect(),
    }
}

fn randomize_b(am: &mut AdaptedModel, seed_: u64) {
    let mut rng = seed::rng(seed_);
    for (_, p) in am.model_mut().params_mut().iter_mut() {
        if p.name.ends_with(".lora.B") {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
        }
    }
}

fn batches(data: &PreparedData, size: usize) -> Vec<BatchInput> {
    let idx: Vec<usize> = (0..data.len()).collect();
    idx.chunks(size).map(|c| data.batch(c)).collect()
}

fn c3_merge() -> Check {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for (name, kinds) in [("labram_tiny", TargetKind::ALL.to_vec()), ("eegnet", vec![TargetKind::Conv])] {
        let base = model(name);
        let data = PreparedData::new(&random_set(100, 8, 4, 3), base.input_spec()).map_err(|e| e.to_string())?;
        let inputs = batches(&data, 25);
        let base_out: Vec<Tensor> = inputs.iter().map(|x| base.predict(x).unwrap()).collect();
        for kind in kinds {
            let fresh = ok(AdaptedModel::inject(base.clone(), &LoraConfig::new([kind], 2).with_dropout(0.3), 1))?;
            for (x, y0) in inputs.iter().zip(&base_out) {
                check!(fresh.model().predict(x).unwrap() == *y0, "{name} {kind:?}: zero-B logits differ from the base");
            }
            let mut am = fresh;
            randomize_b(&mut am, 4);
            let adapted: Vec<Tensor> = inputs.iter().map(|x| am.model().predict(x).unwrap()).collect();
            let merged = am.merge();
            for (x, ya) in inputs.iter().zip(&adapted) {
                let ym = merged.predict(x).unwrap();
                let n = ya.shape()[1];
                for (ra, rm) in ya.data().chunks(n).zip(ym.data().chunks(n)) {
                    let scale = ra.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                    let err = ra.iter().zip(rm).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale;
                    worst = worst.max(err);
                }
            }
            check!(adapted != base_out, "{name} {kind:?}: random B left logits unchanged");
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check!(worst <= 1e-9, "merged vs adapted relative error {worst:e}");
    check!(secs < 10.0, "took {secs:.1} s");
    Ok(format!("max relative error {worst:.1e} over 100 inputs per kind; zero-B bit-identical; {secs:.1} s"))
}

fn c4_frozen() -> Check {
    let base = model("labram_tiny");
    let data = PreparedData::new(&generate(&SynthSpec { subjects: 2, trials_per_subject: 16, ..SynthSpec::default() }).unwrap(), base.input_spec()).unwrap();
    let mut am = ok(AdaptedModel::inject(base.clone(), &LoraConfig::new(TargetKind::ALL, 2).with_dropout(0.1), 0))?;
    let mut opt = ok(Optimizer::new(OptimizerConfig::adam(1e-2)))?;
    let idx: Vec<usize> = (0..data.len()).collect();
    for step in 0..100u64 {
        let chunk: Vec<usize> = idx.iter().copied().skip((step as usize * 8) % data.len()).take(8).collect();
        let x = data.batch(&chunk);
        let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
        let m = am.model_mut();
        let mut g = Graph::new(Mode::Train, step);
        let y = ok(m.forward(&mut g, &x))?;
        let loss = ok(g.cross_entropy(y, &labels))?;
        let grads = ok(g.backward(loss))?;
        ok(opt.step(m.params_mut(), &grads))?;
        let updates = g.take_buffer_updates();
        m.apply_buffer_updates(updates);
    }
    let after = am.model().params();
    let (mut weights, mut biases) = (0, 0);
    for l in base.layers().iter().filter(|l| l.kind != LayerKind::Head) {
        if l.kind.is_adaptable() {
            let w = l.weight().unwrap();
            check!(after.get(w).value == base.params().get(w).value, "{} weight moved", l.name);
            weights += 1;
        }
        for id in l.base_params() {
            check!(after.get(id).value == base.params().get(id).value, "{} moved", base.params().get(id).name);
        }
        if let Some(b) = l.bias() {
            check!(after.get(b).value == base.params().get(b).value, "{} bias moved", l.name);
            biases += 1;
        }
    }
    let init = ok(AdaptedModel::inject(base.clone(), &LoraConfig::new(TargetKind::ALL, 2), 0))?;
    let moved = after.iter().filter(|(_, p)| p.name.contains(".lora.")).all(|(id, p)| p.value != init.model().params().get(id).value);
    check!(moved, "some adapter tensor did not train");
    Ok(format!("{weights} adapted weights and {biases} backbone biases bit-identical after 100 Adam steps"))
}

const H: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;

fn randn(shape: &[usize], s: u64) -> Tensor {
    let mut rng = seed::rng(s);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Runs the gradient check of `f` on fresh random parameters of `shapes`
/// and returns the worst relative error.
fn op_check(shapes: &[&[usize]], s: u64, f: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut store = ParamStore::new();
    let ids: Vec<_> = shapes.iter().enumerate().map(|(i, sh)| store.add(format!("p{i}"), randn(sh, s + i as u64), true)).collect();
    let report = finite_diff_check(&mut store, Mode::Train, s, H, |g, st| {
        let v: Vec<Var> = ids.iter().map(|&id| g.param(st, id)).collect();
        let y = f(g, &v);
        if g.shape(y).is_empty() {
            return Ok(y);
        }
        let r = g.input(randn(g.shape(y), s ^ 0x5eed));
        let p = g.mul(y, r)?;
        g.sum(p)
    })
    .unwrap();
    report.max_rel_error()
}

fn gradcheck_model() -> Result<f64, String> {
    let mut cfg: ModelConfig = reference::get("labram_tiny").unwrap();
    cfg.name = "gradcheck".into();
    let Architecture::LabramLike(l) = &mut cfg.arch else { unreachable!() };
    l.embed_dim = 16;
    l.depth = 1;
    l.heads = 2;
    l.mlp_dim = 16;
    l.max_patches = 4;
    l.time_embed_rows = 2;
    l.temporal_conv.out_chans = 2;
    l.temporal_conv.norm_groups = 1;
    let base = ok(Model::build(&cfg))?;
    let mut am = ok(AdaptedModel::inject(base, &LoraConfig::new(TargetKind::ALL, 2), 0))?;
    randomize_b(&mut am, 8);
    let m = am.model();
    let data = ok(PreparedData::new(&random_set(2, 2, 1, 9), m.input_spec()))?;
    let x = data.batch(&[0, 1]);
    let mut store = m.params().clone();
    let ids: Vec<_> = store.ids().collect();
    ids.into_iter().for_each(|id| store.set_requires_grad(id, true));
    let report = ok(finite_diff_check(&mut store, Mode::Train, 0, H, |g, s| {
        let y = m.forward_with(g, s, &x)?;
        g.cross_entropy(y, &[0, 1])
    }))?;
    Ok(report.max_rel_error())
}

fn c5_gradients() -> Check {
    let start = Instant::now();
    let strided = Conv2dSpec { stride: (2, 3), padding: Padding { top: 1, bottom: 0, left: 2, right: 1 }, groups: 1 };
    let grouped = Conv2dSpec { groups: 2, ..Conv2dSpec::default() };
    let mask = Tensor::new(vec![2, 3, 4], (0..24).map(|i| if i % 5 == 0 { -1e9 } else { 0.0 }).collect()).unwrap();
    let offset = randn(&[2, 3, 4], 99);
    let rm = vec![0.1, -0.2, 0.3];
    let rv = vec![1.0, 0.5, 2.0];
    let ops: Vec<(&str, f64)> = vec![
        ("matmul", op_check(&[&[2, 3, 4], &[4, 5]], 1, |g, v| g.matmul(v[0], v[1]).unwrap())),
        ("bmm", op_check(&[&[2, 3, 4], &[2, 4, 5]], 2, |g, v| g.bmm(v[0], v[1], false).unwrap())),
        ("bmm_t", op_check(&[&[2, 3, 4], &[2, 5, 4]], 3, |g, v| g.bmm(v[0], v[1], true).unwrap())),
        ("add", op_check(&[&[3, 4], &[3, 4]], 4, |g, v| g.add(v[0], v[1]).unwrap())),
        ("add_const", op_check(&[&[2, 3, 4]], 5, |g, v| g.add_const(v[0], &offset).unwrap())),
        ("mul", op_check(&[&[3, 4], &[3, 4]], 6, |g, v| g.mul(v[0], v[1]).unwrap())),
        ("scale", op_check(&[&[3, 4]], 7, |g, v| g.scale(v[0], -1.7).unwrap())),
        ("bias_add", op_check(&[&[2, 3, 4], &[3]], 8, |g, v| g.bias_add(v[0], v[1], 1).unwrap())),
        ("elu", op_check(&[&[3, 4]], 9, |g, v| g.elu(v[0]).unwrap())),
        ("gelu", op_check(&[&[3, 4]], 10, |g, v| g.gelu(v[0]).unwrap())),
        ("softmax", op_check(&[&[2, 3, 4]], 11, |g, v| {
            let a = g.add_const(v[0], &mask).unwrap();
            g.softmax(a).unwrap()
        })),
        ("layer_norm", op_check(&[&[2, 3, 5], &[5], &[5]], 12, |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap())),
        ("group_norm", op_check(&[&[2, 4, 2, 3], &[4], &[4]], 13, |g, v| g.group_norm(v[0], v[1], v[2], 2, 1e-5).unwrap())),
        ("batch_norm", op_check(&[&[4, 3, 2, 2], &[3], &[3]], 14, |g, v| {
            let stats = neurotune::diffcore::BnStats { buffer: 0, running_mean: &rm, running_var: &rv, momentum: 0.1 };
            g.batch_norm(v[0], v[1], v[2], stats, 1e-5).unwrap()
        })),
        ("dropout", op_check(&[&[3, 40]], 15, |g, v| g.dropout(v[0], 0.4).unwrap())),
        ("reshape", op_check(&[&[2, 3, 4]], 16, |g, v| g.reshape(v[0], &[6, 4]).unwrap())),
        ("permute", op_check(&[&[2, 3, 4]], 17, |g, v| g.permute(v[0], &[2, 0, 1]).unwrap())),
        ("mean_axis", op_check(&[&[2, 3, 4]], 18, |g, v| g.mean_axis(v[0], 1).unwrap())),
        ("weighted_sum", op_check(&[&[2, 3, 4]], 19, |g, v| g.weighted_sum(v[0], vec![0.5, 0.5, 0.0, 0.2, 0.3, 0.5]).unwrap())),
        ("select", op_check(&[&[2, 3, 4]], 20, |g, v| g.select(v[0], 1, 2).unwrap())),
        ("gather", op_check(&[&[5, 3]], 21, |g, v| g.gather(v[0], &[4, 0, 4, 2]).unwrap())),
        ("concat", op_check(&[&[2, 3, 4], &[2, 1, 4]], 22, |g, v| g.concat(&[v[0], v[1]], 1).unwrap())),
        ("sum", op_check(&[&[2, 3, 4]], 23, |g, v| g.sum(v[0]).unwrap())),
        ("cross_entropy", op_check(&[&[4, 3]], 24, |g, v| g.cross_entropy(v[0], &[0, 2, 1, 2]).unwrap())),
        ("conv2d", op_check(&[&[2, 3, 5, 9], &[4, 3, 2, 3]], 25, move |g, v| g.conv2d(v[0], v[1], strided).unwrap())),
        ("conv2d_grouped", op_check(&[&[2, 4, 3, 6], &[6, 2, 1, 3]], 26, move |g, v| g.conv2d(v[0], v[1], grouped).unwrap())),
        ("avg_pool2d", op_check(&[&[2, 3, 4, 11]], 27, |g, v| g.avg_pool2d(v[0], (2, 3), (1, 2)).unwrap())),
    ];
    let (worst_op, worst) = ops.iter().fold(("", 0.0f64), |acc, &(n, e)| if e > acc.1 { (n, e) } else { acc });
    check!(worst < GRAD_TOL, "op {worst_op} max relative error {worst:e}");
    let model_err = gradcheck_model()?;
    check!(model_err < GRAD_TOL, "conv/attention/FC model max relative error {model_err:e}");
    let secs = start.elapsed().as_secs_f64();
    check!(secs < 60.0, "took {secs:.1} s");
    Ok(format!("{} ops worst {worst:.1e} ({worst_op}); adapted conv/attention/FC model {model_err:.1e}; {secs:.1} s", ops.len()))
}

fn c6_heads() -> Check {
    // Widths: LaBraM 200 -> n; NeuroGPT 1024 (full) or 2x27x40 (encoder)
    // -> 256 -> 32 -> n.
    let mlp = |d_in: usize| d_in * 256 + 256 + 256 * 32 + 32 + 32 * 2 + 2;
    let want = [("labram_desk", 200 * 2 + 2), ("neurogpt_full_desk", mlp(1024)), ("neurogpt_encoder", mlp(2 * 27 * 40))];
    let mut got = Vec::new();
    for (name, closed) in want {
        let built = with_cls(name, 2).count_params().head;
        check!(built == closed, "{name}: built head {built}, closed form {closed}");
        got.push(built.to_string());
    }
    check!(got == ["402", "270690", "561506"], "head counts {got:?}");
    Ok(format!("heads {}", got.join(" / ")))
}

/// Two-sided p by Simpson quadrature of the Student-t density.
fn simpson_p(t: f64, df: f64) -> f64 {
    use statrs::function::gamma::ln_gamma;
    let c = (ln_gamma((df + 1.0) / 2.0) - ln_gamma(df / 2.0)).exp() / (df * std::f64::consts::PI).sqrt();
    let f = |x: f64| c * (1.0 + x * x / df).powf(-(df + 1.0) / 2.0);
    let n = 4000;
    let h = t.abs() / n as f64;
    let mut s = f(0.0) + f(t.abs());
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
    }
    1.0 - 2.0 * s * h / 3.0
}

fn c7_stats() -> Check {
    let mut rng = seed::rng(7);
    let dist = StudentsT::new(0.0, 1.0, 9.0).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let a: Vec<f64> = (0..10).map(|_| rng.random_range(0.3..0.95)).collect();
        let b: Vec<f64> = (0..10).map(|_| rng.random_range(0.3..0.95)).collect();
        let r = ok(paired_ttest(&a, &b))?;
        let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let mean = d.iter().sum::<f64>() / 10.0;
        let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0).sqrt();
        let t = mean / (sd / 10f64.sqrt());
        check!((r.t - t).abs() <= 1e-9 * t.abs().max(1.0), "t {} vs {t}", r.t);
        for oracle in [2.0 * dist.cdf(-t.abs()), simpson_p(t, 9.0)] {
            worst = worst.max((r.p - oracle).abs());
        }
        let s = ok(paired_ttest(&b, &a))?;
        check!(s.t == -r.t && s.p == r.p, "swapping arguments gave t {} p {}", s.t, s.p);
    }
    check!(worst < 1e-6, "p differs from the oracles by {worst:e}");
    let z = ok(paired_ttest(&[1.0, -1.0, 1.0, -1.0], &[0.0; 4]))?;
    check!(z.t == 0.0 && z.p == 1.0, "d = [1,-1,1,-1] gave t {} p {}", z.t, z.p);
    Ok(format!("100 vectors within {worst:.1e} of two oracles; t = 0, p = 1 exact; swap negates t"))
}

fn tone_amplitude(x: &[f64], f: f64, fs: f64) -> f64 {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    let bin = (f * x.len() as f64 / fs).round() as usize;
    2.0 * buf[bin].norm() / x.len() as f64
}

fn sine(f: f64, fs: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| (std::f64::consts::TAU * f * i as f64 / fs).sin()).collect()
}

fn c8_preprocessing() -> Check {
    let start = Instant::now();
    let mut lines = Vec::new();
    for cfg in [PipelineConfig::labram(), PipelineConfig::neurogpt()] {
        let (fs, n) = (cfg.fs, (cfg.fs * 20.0) as usize);
        let x = sine(50.0, fs, n);
        let y = ok(notch(&x, 50.0, fs, cfg.notch_q))?;
        let depth = -20.0 * (tone_amplitude(&y, 50.0, fs) / tone_amplitude(&x, 50.0, fs)).log10();
        check!(depth >= 20.0, "{:?}: notch depth {depth:.1} dB at {fs} Hz", cfg.style);
        lines.push(format!("notch {depth:.0} dB"));
        for f in [5.0, 10.0, 22.0, 35.0] {
            let y = ok(bandpass(&sine(f, fs, n), cfg.band.0, cfg.band.1, fs))?;
            let gain = tone_amplitude(&y, f, fs);
            check!((gain - 1.0).abs() <= 0.1, "{:?}: in-band {f} Hz gain {gain:.3}", cfg.style);
        }
    }
    let lab = PipelineConfig::labram();
    for f in [70.0, 80.0, 95.0] {
        let y = ok(bandpass(&sine(f, 200.0, 4000), lab.band.0, lab.band.1, 200.0))?;
        let att = -20.0 * tone_amplitude(&y, f, 200.0).log10();
        check!(att >= 20.0, "out-of-band {f} Hz attenuated only {att:.1} dB");
    }
    let mut rng = seed::rng(8);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let ch = rng.random_range(2..24usize);
        let ns = rng.random_range(1..300usize);
        let data: Vec<f64> = (0..ch * ns).map(|_| rng.random_range(-1e3..1e3)).collect();
        let rec = ok(Recording::new(data, 200.0, SynthSpec { channels: ch.min(22), ..SynthSpec::default() }.electrodes().into_iter().cycle().take(ch).enumerate().map(|(i, e)| Electrode::new(format!("{}{i}", e.label), e.position)).collect(), "s", None))?;
        let out = ok(car(&rec))?;
        for t in 0..ns {
            let mean = (0..ch).map(|c| out.row(c)[t]).sum::<f64>() / ch as f64;
            worst = worst.max(mean.abs());
        }
    }
    check!(worst < 1e-9, "CAR column mean {worst:e}");
    let mapped = adversarial_mapping(&mut rng)?;
    let secs = start.elapsed().as_secs_f64();
    check!(secs < 10.0, "took {secs:.1} s");
    Ok(format!("{}; in-band within 10%; out-of-band >= 20 dB; CAR mean {worst:.0e}; {mapped} mapped rows; {secs:.1} s", lines.join(", ")))
}

/// Targets placed exactly on, just inside and just outside the threshold,
/// equidistant between sources and on top of them.
fn adversarial_mapping(rng: &mut impl Rng) -> Result<usize, String> {
    let thr = 30.0;
    let mut rows = 0;
    for case in 0..200 {
        let n_src = rng.random_range(1..8usize);
        let mut src: Vec<Electrode> = (0..n_src)
            .map(|i| Electrode::new(format!("S{i}"), [rng.random_range(-60.0..60.0), rng.random_range(-60.0..60.0), rng.random_range(-60.0..60.0)]))
            .collect();
        if case % 3 == 0 && n_src > 1 {
            src[1].position = src[0].position;
        }
        let mut tgt = Vec::new();
        for (j, s) in src.iter().enumerate() {
            let p = s.position;
            tgt.push(Electrode::new(format!("on{j}"), p));
            tgt.push(Electrode::new(format!("edge{j}"), [p[0] + thr, p[1], p[2]]));
            tgt.push(Electrode::new(format!("out{j}"), [p[0], p[1] + thr * (1.0 + 1e-9), p[2]]));
        }
        if n_src > 1 {
            let (a, b) = (src[0].position, src[1].position);
            tgt.push(Electrode::new("mid", [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0, (a[2] + b[2]) / 2.0]));
        }
        tgt.push(Electrode::new("far", [500.0, 500.0, 500.0]));
        let ns = 5;
        let data: Vec<f64> = (0..n_src * ns).map(|v| v as f64 + 1.0).collect();
        let rec = ok(Recording::new(data, 100.0, src.clone(), "s", None))?;
        let (out, report) = ok(map_channels(&rec, &tgt, thr))?;
        check!(out.channels.iter().map(|e| &e.label).eq(tgt.iter().map(|e| &e.label)), "target order not preserved");
        for (t, e) in tgt.iter().enumerate() {
            let dist: Vec<f64> = src.iter().map(|s| (0..3).map(|i| (s.position[i] - e.position[i]).powi(2)).sum::<f64>().sqrt()).collect();
            let dmin = dist.iter().copied().fold(f64::INFINITY, f64::min);
            if dmin <= thr {
                let ties: Vec<usize> = (0..n_src).filter(|&i| dist[i] == dmin).collect();
                check!(ties.iter().any(|&i| out.row(t) == rec.row(i)), "case {case} {}: not copied from a nearest source", e.label);
                check!(matches!(report.entries[t].source, ChannelSource::Source { index, .. } if ties.contains(&index)), "case {case} {}: report disagrees", e.label);
            } else {
                check!(out.row(t).iter().all(|&v| v == 0.0), "case {case} {}: {dmin} mm away but not zero", e.label);
                check!(report.entries[t].source == ChannelSource::Zero, "case {case} {}: report not zero", e.label);
            }
            rows += 1;
        }
    }
    Ok(rows)
}

fn c9_subject_independence() -> Check {
    let mut rng = seed::rng(9);
    for plan_i in 0..10_000u64 {
        let n = rng.random_range(2..40usize);
        let k = rng.random_range(2..=n.min(12));
        let subjects: Vec<String> = (0..n).map(|i| format!("sub{i}")).collect();
        let trial_subjects: Vec<String> = subjects.iter().flat_map(|s| std::iter::repeat_n(s.clone(), rng.random_range(1..4))).collect();
        let plan = ok(split_subject_kfold(&subjects, k, plan_i))?;
        let mut val_count = std::collections::HashMap::new();
        for f in 0..k {
            let (tr, va) = ok(plan.split(&trial_subjects, f))?;
            let ts: BTreeSet<&str> = tr.iter().map(|&i| trial_subjects[i].as_str()).collect();
            let vs: BTreeSet<&str> = va.iter().map(|&i| trial_subjects[i].as_str()).collect();
            check!(ts.is_disjoint(&vs), "plan {plan_i} fold {f}: subjects overlap");
            check!(tr.len() + va.len() == trial_subjects.len(), "plan {plan_i} fold {f}: trials dropped");
            for s in vs {
                *val_count.entry(s.to_string()).or_insert(0) += 1;
            }
        }
        check!(val_count.len() == n && val_count.values().all(|&c| c == 1), "plan {plan_i}: a subject is not validated exactly once");
    }
    Ok("10000 plans: no overlap; every subject validated exactly once".into())
}

/// Pretrains on a differently seeded copy of the task, then shifts every
/// adaptable weight by a rank-one term of its own Frobenius norm, so the
/// backbone carries useful but miscalibrated features.
fn pretrained_perturbed() -> Result<(Model, f64), String> {
    let mut base = model("labram_tiny");
    let source = generate(&SynthSpec { seed: 100, ..SynthSpec::default() }).unwrap();
    let src = ok(PreparedData::new(&source, base.input_spec()))?;
    let idx: Vec<usize> = (0..src.len()).collect();
    let tc = TrainConfig { epochs: 30, optimizer: Some(OptimizerConfig::adam(2e-3)), ..TrainConfig::default() };
    let r = ok(train_run(&mut base, &src, &idx[..480], &idx[480..], &tc, 1, 0, String::new()))?;
    let mut rng = seed::rng(5);
    let targets: Vec<_> = base.layers().iter().filter(|l| l.kind.is_adaptable()).map(|l| (l.weight().unwrap(), l.matrix_dims().unwrap())).collect();
    for (w, (d, k)) in targets {
        let p = base.params_mut().get_mut(w);
        let fro = p.value.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let u: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt() * v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let data = p.value.data_mut();
        for i in 0..d {
            for j in 0..k {
                data[i * k + j] += fro * u[i] * v[j] / norm;
            }
        }
    }
    Ok((base, r.accuracy))
}

fn c10_peft() -> Check {
    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| e.to_string())?;
    pool.install(|| {
        let task = generate(&SynthSpec::default()).unwrap();
        let probe = model("labram_tiny");
        let data = ok(PreparedData::new(&task, probe.input_spec()))?;
        let (base, source_acc) = pretrained_perturbed()?;
        let plan = ok(split_subject_kfold(&data.subjects, 5, 0))?;
        let tc = TrainConfig { epochs: 20, optimizer: Some(OptimizerConfig::adam(2e-3)), ..TrainConfig::default() };
        let ctx = CvContext { base: &base, data: &data, data_id: "default-synth", plan: &plan, train: &tc, seed: 3, cache: None };
        let mut mean = Vec::new();
        for v in [Variant::HeadOnly, Variant::Full, Variant::Lora(LoraConfig::new(TargetKind::ALL, 2))] {
            let res = ok(cross_validate(&ctx, &v))?;
            check!(res.n_failed() == 0, "{} had failed folds", v.label());
            mean.push((res.summary().unwrap().mean, res.trainable_params()));
        }
        let total = base.count_params().total;
        let [(head, _), (full, _), (lora, lora_params)] = mean[..] else { unreachable!() };
        let frac = lora_params as f64 / total as f64;
        let secs = start.elapsed().as_secs_f64();
        check!(lora >= full - 0.02, "LoRA {lora:.3} more than 2 points below full {full:.3}");
        check!(frac < 0.10, "LoRA trains {:.1}% of parameters", 100.0 * frac);
        check!(full > head && lora > head, "head-only {head:.3} not beaten (full {full:.3}, LoRA {lora:.3})");
        check!(secs < 600.0, "took {secs:.0} s");
        Ok(format!(
            "5-fold mean acc: full {full:.3}, LoRA r=2 {lora:.3} ({lora_params}/{total} = {:.1}% trainable), head-only {head:.3}; source {source_acc:.2}; {secs:.0} s on one thread",
            100.0 * frac
        ))
    })
}

fn run_cli(args: &[&str], dir: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_neurotune")).args(args).current_dir(dir).output().map_err(|e| e.to_string())?;
    check!(out.status.success(), "neurotune {args:?} exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    Ok(())
}

fn c11_reproducible() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    run_cli(&["synth", "--out", "data", "--subjects", "4", "--trials", "8"], dir)?;
    let config = |out: &str| {
        serde_json::json!({
            "model": "labram_tiny", "data": "data", "seed": 11, "output_dir": out,
            "harness": { "folds": 2, "train": { "epochs": 2 }, "ablation": { "ranks": [1, 2], "dropout": 0.5 } }
        })
        .to_string()
    };
    std::fs::write(dir.join("a.json"), config("out_a")).unwrap();
    std::fs::write(dir.join("b.json"), config("out_b")).unwrap();
    run_cli(&["ablate", "--config", "a.json"], dir)?;
    run_cli(&["ablate", "--config", "b.json"], dir)?;
    let mut files: Vec<String> = std::fs::read_dir(dir.join("out_a")).unwrap().filter_map(|e| e.ok()).map(|e| e.file_name().to_string_lossy().into_owned()).filter(|n| n.ends_with(".csv")).collect();
    files.sort();
    check!(files.len() >= 5, "only {files:?} written");
    for f in &files {
        let a = std::fs::read(dir.join("out_a").join(f)).unwrap();
        let b = std::fs::read(dir.join("out_b").join(f)).unwrap();
        check!(a == b, "{f} differs between executions");
    }
    Ok(format!("{} aggregate CSVs byte-identical across two independent executions", files.len()))
}

fn main() {
    let only: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, fn() -> Check); 11] = [
        (1, "LoRA count law", c1_count_law),
        (2, "conv-rank rule", c2_conv_rank),
        (3, "merge equivalence", c3_merge),
        (4, "frozen-base invariant", c4_frozen),
        (5, "gradient correctness", c5_gradients),
        (6, "head arithmetic", c6_heads),
        (7, "paired t-test", c7_stats),
        (8, "preprocessing responses", c8_preprocessing),
        (9, "subject independence", c9_subject_independence),
        (10, "end-to-end PEFT property", c10_peft),
        (11, "ablation reproducibility", c11_reproducible),
    ];
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS [{n:2}] {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL [{n:2}] {name}: {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
