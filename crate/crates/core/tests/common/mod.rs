//! Shared oracles for the integration tests.
#![allow(dead_code)]

use perceptual_denoise::autodiff::functional::{
    self_attention, squeeze_excite, AttentionParams, SqueezeExciteParams,
};
use perceptual_denoise::autodiff::{ConvMode, ParamSet, Pass, Tape, Tensor, Var};
use perceptual_denoise::conformer::{ConformerConfig, MaskNet};
use perceptual_denoise::dsp::{Stft, StftConfig};
use perceptual_denoise::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let d: Vec<f64> = (0..n)
        .map(|_| {
            // Box-Muller keeps the test free of an extra distribution crate.
            let (u, v): (f64, f64) = (r.random::<f64>().max(1e-300), r.random());
            (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
        })
        .collect();
    Tensor::new(shape, d).unwrap()
}

/// Uniform in `[lo, hi]` with random sign when `signed`.
pub fn rand_away(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, signed: bool) -> Tensor {
    let n = shape.iter().product();
    let d = (0..n)
        .map(|_| {
            let m = lo + (hi - lo) * r.random::<f64>();
            if signed && r.random::<bool>() {
                -m
            } else {
                m
            }
        })
        .collect();
    Tensor::new(shape, d).unwrap()
}

pub fn scaled(t: Tensor, s: f64) -> Tensor {
    let shape = t.shape().to_vec();
    Tensor::new(&shape, t.into_data().into_iter().map(|v| v * s).collect()).unwrap()
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// A differentiable function of several tensors, checked through `sum(f(x) * R)`.
pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub f: Build,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Gradients with norm below this are compared absolutely; some are exactly
/// zero (a key bias under softmax) and differencing noise would dominate.
pub const GRAD_FLOOR: f64 = 1e-4;

/// `||a - n|| / max(||a||, ||n||, GRAD_FLOOR)`.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    norm(&d) / norm(a).max(norm(n)).max(GRAD_FLOOR)
}

fn projected(tape: &mut Tape, f: &Build, xs: &[Var], proj: &Tensor) -> Result<Var> {
    let y = f(tape, xs)?;
    let p = tape.constant(proj.clone());
    let m = tape.mul(y, p)?;
    Ok(tape.sum(m))
}

/// Largest relative error over the inputs between backprop and central differences.
pub fn fd_check(case: &Case, seed: u64) -> f64 {
    let mut r = rng(seed ^ 0x9e37_79b9);
    let mut probe = Tape::new();
    let vars: Vec<Var> = case
        .inputs
        .iter()
        .map(|t| probe.leaf(t.clone(), true))
        .collect();
    let y = (case.f)(&mut probe, &vars).unwrap_or_else(|e| panic!("{}: {e}", case.name));
    let proj = randn(&mut r, probe.shape(y));

    let mut tape = Tape::new();
    let vars: Vec<Var> = case
        .inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect();
    let loss = projected(&mut tape, &case.f, &vars, &proj).unwrap();
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| tape.grad(*v).unwrap().to_vec())
        .collect();

    let eval = |inputs: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let l = projected(&mut t, &case.f, &vs, &proj).unwrap();
        t.value(l).item()
    };
    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let mut xs = case.inputs.clone();
        let mut numeric = vec![0.0; a.len()];
        for j in 0..a.len() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&xs);
            xs[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&xs);
            xs[i].data_mut()[j] = orig;
            numeric[j] = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(a, &numeric));
    }
    worst
}

fn case(
    name: &'static str,
    inputs: Vec<Tensor>,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case {
        name,
        inputs,
        f: Box::new(f),
    }
}

/// One case per differentiable tape operation, with inputs drawn from `seed`.
pub fn op_cases(seed: u64) -> Vec<Case> {
    let mut r = rng(seed);
    let (b, t, c) = (2, 5, 4);
    let x3 = |r: &mut ChaCha8Rng| randn(r, &[b, t, c]);
    let mut v = vec![
        case("add", vec![x3(&mut r), x3(&mut r)], |tp, x| {
            tp.add(x[0], x[1])
        }),
        case("sub", vec![x3(&mut r), x3(&mut r)], |tp, x| {
            tp.sub(x[0], x[1])
        }),
        case("mul", vec![x3(&mut r), x3(&mut r)], |tp, x| {
            tp.mul(x[0], x[1])
        }),
        case("scale", vec![x3(&mut r)], |tp, x| Ok(tp.scale(x[0], -1.7))),
        case("add_scalar", vec![x3(&mut r)], |tp, x| {
            Ok(tp.add_scalar(x[0], 0.3))
        }),
        {
            let k = randn(&mut r, &[b, t, c]);
            case("add_const", vec![x3(&mut r)], move |tp, x| {
                tp.add_const(x[0], &k)
            })
        },
        case(
            "add_bias",
            vec![x3(&mut r), randn(&mut r, &[c])],
            |tp, x| tp.add_bias(x[0], x[1]),
        ),
        case(
            "mul_channels",
            vec![x3(&mut r), randn(&mut r, &[b, c])],
            |tp, x| tp.mul_channels(x[0], x[1]),
        ),
        case(
            "relu",
            vec![rand_away(&mut r, &[b, t, c], 0.05, 2.0, true)],
            |tp, x| Ok(tp.relu(x[0])),
        ),
        case("sigmoid", vec![x3(&mut r)], |tp, x| Ok(tp.sigmoid(x[0]))),
        case("swish", vec![x3(&mut r)], |tp, x| Ok(tp.swish(x[0]))),
        case("tanh", vec![x3(&mut r)], |tp, x| Ok(tp.tanh(x[0]))),
        case("exp", vec![x3(&mut r)], |tp, x| Ok(tp.exp(x[0]))),
        case(
            "abs",
            vec![rand_away(&mut r, &[b, t, c], 0.05, 2.0, true)],
            |tp, x| Ok(tp.abs(x[0])),
        ),
        case("square", vec![x3(&mut r)], |tp, x| Ok(tp.square(x[0]))),
        case(
            "log1p",
            vec![rand_away(&mut r, &[b, t, c], 0.0, 3.0, false)],
            |tp, x| Ok(tp.log1p(x[0])),
        ),
        case("softmax", vec![x3(&mut r)], |tp, x| Ok(tp.softmax(x[0]))),
        case("glu", vec![randn(&mut r, &[b, t, 2 * c])], |tp, x| {
            tp.glu(x[0])
        }),
        case("sum", vec![x3(&mut r)], |tp, x| Ok(tp.sum(x[0]))),
        case("mean", vec![x3(&mut r)], |tp, x| Ok(tp.mean(x[0]))),
        {
            // Offsets keep every difference away from the kink.
            let a = rand_away(&mut r, &[b, t, c], 0.05, 1.0, true);
            let base = randn(&mut r, &[b, t, c]);
            let other = Tensor::new(
                &[b, t, c],
                base.data()
                    .iter()
                    .zip(a.data())
                    .map(|(x, d)| x + d)
                    .collect(),
            )
            .unwrap();
            case("mean_abs_diff", vec![base, other], |tp, x| {
                tp.mean_abs_diff(x[0], x[1])
            })
        },
        case("mean_time", vec![x3(&mut r)], |tp, x| tp.mean_time(x[0])),
        case("select", vec![x3(&mut r)], |tp, x| tp.select(x[0], 7)),
        case("reshape", vec![x3(&mut r)], move |tp, x| {
            tp.reshape(x[0], &[b * t, c])
        }),
        case("crop_last", vec![x3(&mut r)], |tp, x| tp.crop_last(x[0], 3)),
        case("frames", vec![randn(&mut r, &[b, 23])], |tp, x| {
            tp.frames(x[0], 4)
        }),
        case(
            "linear",
            vec![x3(&mut r), randn(&mut r, &[c, 3]), randn(&mut r, &[3])],
            |tp, x| tp.linear(x[0], x[1], Some(x[2])),
        ),
        case(
            "bmm_nt",
            vec![randn(&mut r, &[b, t, c]), randn(&mut r, &[b, 3, c])],
            |tp, x| tp.bmm_nt(x[0], x[1]),
        ),
        {
            let targets: Vec<usize> = (0..b * t).map(|_| r.random_range(0..c)).collect();
            case("cross_entropy", vec![x3(&mut r)], move |tp, x| {
                tp.cross_entropy(x[0], &targets)
            })
        },
        case(
            "rnn_tanh",
            vec![
                x3(&mut r),
                scaled(randn(&mut r, &[c, 3]), 0.5),
                scaled(randn(&mut r, &[3, 3]), 0.5),
                randn(&mut r, &[3]),
            ],
            |tp, x| tp.rnn_tanh(x[0], x[1], x[2], x[3]),
        ),
        case(
            "layer_norm",
            vec![x3(&mut r), randn(&mut r, &[c]), randn(&mut r, &[c])],
            |tp, x| tp.layer_norm(x[0], x[1], x[2]),
        ),
        case(
            "batch_norm_train",
            vec![
                randn(&mut r, &[4, t, c]),
                randn(&mut r, &[c]),
                randn(&mut r, &[c]),
            ],
            |tp, x| Ok(tp.batch_norm_train(x[0], x[1], x[2], Some(2))?.0),
        ),
        {
            let mean: Vec<f64> = randn(&mut r, &[c]).data().to_vec();
            let var: Vec<f64> = rand_away(&mut r, &[c], 0.5, 2.0, false).data().to_vec();
            case(
                "batch_norm_eval",
                vec![x3(&mut r), randn(&mut r, &[c]), randn(&mut r, &[c])],
                move |tp, x| tp.batch_norm_eval(x[0], x[1], x[2], &mean, &var),
            )
        },
        case(
            "conv1d_depthwise",
            vec![x3(&mut r), randn(&mut r, &[3, c]), randn(&mut r, &[c])],
            |tp, x| tp.conv1d(x[0], x[1], Some(x[2]), ConvMode::Depthwise),
        ),
        case(
            "conv1d_pointwise",
            vec![x3(&mut r), randn(&mut r, &[c, 3]), randn(&mut r, &[3])],
            |tp, x| tp.conv1d(x[0], x[1], Some(x[2]), ConvMode::Pointwise),
        ),
        case(
            "conv1d_full",
            vec![x3(&mut r), randn(&mut r, &[3, c, 3]), randn(&mut r, &[3])],
            |tp, x| tp.conv1d(x[0], x[1], Some(x[2]), ConvMode::Full),
        ),
        case(
            "attention_core",
            vec![x3(&mut r), x3(&mut r), x3(&mut r), randn(&mut r, &[2, 7])],
            |tp, x| tp.attention_core(x[0], x[1], x[2], 2, Some((x[3], 3))),
        ),
        case(
            "attention_core_plain",
            vec![x3(&mut r), x3(&mut r), x3(&mut r)],
            |tp, x| tp.attention_core(x[0], x[1], x[2], 1, None),
        ),
    ];
    let mut attn_in = vec![x3(&mut r)];
    for _ in 0..4 {
        attn_in.push(scaled(randn(&mut r, &[c, c]), 0.5));
        attn_in.push(randn(&mut r, &[c]));
    }
    attn_in.push(randn(&mut r, &[2, 9]));
    v.push(case("self_attention", attn_in, |tp, x| {
        let p = AttentionParams {
            wq: x[1],
            bq: x[2],
            wk: x[3],
            bk: x[4],
            wv: x[5],
            bv: x[6],
            wo: x[7],
            bo: x[8],
            rel_bias: Some((x[9], 4)),
        };
        self_attention(tp, x[0], 2, &p, true)
    }));
    v.push(case(
        "squeeze_excite",
        vec![
            x3(&mut r),
            randn(&mut r, &[c, 2]),
            randn(&mut r, &[2]),
            randn(&mut r, &[2, c]),
            randn(&mut r, &[c]),
        ],
        |tp, x| {
            let p = SqueezeExciteParams {
                w_down: x[1],
                b_down: x[2],
                w_up: x[3],
                b_up: x[4],
            };
            squeeze_excite(tp, x[0], &p, 2)
        },
    ));
    {
        let stft = Stft::new(StftConfig {
            frame_len: 16,
            hop: 4,
            ..StftConfig::default()
        })
        .unwrap();
        let (frames, bins, n) = (6, 9, 28);
        let phase: Vec<f64> = (0..b * frames * bins)
            .map(|_| r.random_range(-3.0..3.0))
            .collect();
        let mag = rand_away(&mut r, &[b, frames, bins], 0.1, 1.0, false);
        v.push(case("istft", vec![mag], move |tp, x| {
            stft.synthesize_on_tape(tp, x[0], &phase, n)
        }));
    }
    v
}

/// Small block configuration for the full-block gradient check.
pub fn tiny_conformer() -> ConformerConfig {
    ConformerConfig {
        attention_dim: 8,
        num_blocks: 1,
        heads: 2,
        ffn_expansion: 2,
        conv_kernel: 3,
        se_factor: 4,
        rel_max_distance: 3,
        ..ConformerConfig::default()
    }
}

/// Gradient check of one Conformer block over its input and every block parameter.
pub fn fd_check_block(seed: u64) -> f64 {
    let cfg = tiny_conformer();
    let mut net = MaskNet::build(&cfg, 5, seed).unwrap();
    let mut r = rng(seed.wrapping_add(17));
    // Non-zero relative biases so their gradient path is exercised.
    let ids: Vec<_> = net.params().ids().collect();
    for id in &ids {
        if net.params().name(*id).ends_with("rel_bias") {
            let shape = net.params().get(*id).shape().to_vec();
            *net.params_mut().get_mut(*id) = scaled(randn(&mut r, &shape), 0.3);
        }
    }
    let x = randn(&mut r, &[4, 6, cfg.attention_dim]);
    let run = |params: &ParamSet,
               x: &Tensor,
               proj: Option<&Tensor>|
     -> (f64, Tensor, Option<(Vec<f64>, ParamSet)>) {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true);
        let xv = tape.leaf(x.clone(), true);
        let mut pass = Pass::train(Some(2));
        let y = net
            .conformer_block_forward(&mut tape, &bound, 0, xv, &mut pass)
            .unwrap();
        let ys = tape.value(y).clone();
        let Some(p) = proj else {
            return (0.0, ys, None);
        };
        let pc = tape.constant(p.clone());
        let m = tape.mul(y, pc).unwrap();
        let l = tape.sum(m);
        let lv = tape.value(l).item();
        tape.backward(l).unwrap();
        let mut ps = params.clone();
        ps.zero_grads();
        ps.collect_grads(&tape, &bound);
        (lv, ys, Some((tape.grad(xv).unwrap().to_vec(), ps)))
    };
    let (_, y0, _) = run(net.params(), &x, None);
    let proj = randn(&mut r, y0.shape());
    let (_, _, g) = run(net.params(), &x, Some(&proj));
    let (gx, gp) = g.unwrap();

    let mut worst: f64 = 0.0;
    let mut xs = x.clone();
    let mut nx = vec![0.0; gx.len()];
    for j in 0..gx.len() {
        let o = xs.data()[j];
        xs.data_mut()[j] = o + FD_STEP;
        let up = run(net.params(), &xs, Some(&proj)).0;
        xs.data_mut()[j] = o - FD_STEP;
        let down = run(net.params(), &xs, Some(&proj)).0;
        xs.data_mut()[j] = o;
        nx[j] = (up - down) / (2.0 * FD_STEP);
    }
    worst = worst.max(rel_err(&gx, &nx));
    let mut ps = net.params().clone();
    for id in ids {
        if !ps.is_trainable(id) || !ps.name(id).starts_with("blocks.") {
            continue;
        }
        let a = gp.grad(id).to_vec();
        let mut n = vec![0.0; a.len()];
        for j in 0..a.len() {
            let o = ps.get(id).data()[j];
            ps.get_mut(id).data_mut()[j] = o + FD_STEP;
            let up = run(&ps, &x, Some(&proj)).0;
            ps.get_mut(id).data_mut()[j] = o - FD_STEP;
            let down = run(&ps, &x, Some(&proj)).0;
            ps.get_mut(id).data_mut()[j] = o;
            n[j] = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(&a, &n));
    }
    worst
}

/// Coefficient-of-variation weights recomputed from the whole loss history.
pub fn cov_oracle(history: &[Vec<f64>]) -> Vec<f64> {
    let k = history[0].len();
    let steps = history.len();
    if steps < 2 {
        return vec![1.0 / k as f64; k];
    }
    let mut c = vec![0.0; k];
    for i in 0..k {
        let ratios: Vec<f64> = (0..steps)
            .map(|t| {
                if t == 0 {
                    1.0
                } else {
                    let prior = history[..t].iter().map(|h| h[i]).sum::<f64>() / t as f64;
                    history[t][i] / prior
                }
            })
            .collect();
        let mean = ratios.iter().sum::<f64>() / steps as f64;
        let var = ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / steps as f64;
        c[i] = var.sqrt() / mean;
    }
    let s: f64 = c.iter().sum();
    c.iter().map(|v| v / s).collect()
}

/// Minimizes `exp(-s) L + s` by Newton steps driven by tape gradients.
pub fn uncertainty_optimum(loss: f64) -> f64 {
    use perceptual_denoise::mtl::uncertainty_total;
    let mut s = 0.0;
    for _ in 0..100 {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::scalar(loss));
        let sv = tape.leaf(Tensor::scalar(s), true);
        let total = uncertainty_total(&mut tape, &[l], &[sv]).unwrap();
        tape.backward(total).unwrap();
        let g = tape.grad(sv).unwrap()[0];
        let h = loss * (-s).exp();
        s -= g / h;
        if g.abs() < 1e-15 {
            break;
        }
    }
    s
}

/// A tiny corpus shared by the tests of one binary.
pub fn tiny_corpus(train: usize, val: usize) -> &'static std::path::Path {
    use std::sync::OnceLock;
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let d = tempfile::tempdir().unwrap();
        let cfg = perceptual_denoise::corpus::CorpusConfig {
            train_size: train,
            val_size: val,
            duration_s: 1.0,
            ..Default::default()
        };
        perceptual_denoise::corpus::build_corpus(&cfg, d.path()).unwrap();
        d
    })
    .path()
}

/// Small, fast training config over `manifest`.
pub fn tiny_train_config(
    manifest: &std::path::Path,
    out: &std::path::Path,
) -> perceptual_denoise::trainer::TrainConfig {
    use perceptual_denoise::trainer::{LrSchedule, TrainConfig};
    TrainConfig {
        conformer: ConformerConfig {
            attention_dim: 16,
            num_blocks: 1,
            heads: 2,
            ffn_expansion: 2,
            conv_kernel: 3,
            se_factor: 4,
            rel_max_distance: 8,
            ..ConformerConfig::default()
        },
        epochs: 2,
        batch_size: 8,
        accumulation_steps: 2,
        bn_group: 2,
        lr_schedule: LrSchedule::Constant,
        manifest: manifest.to_path_buf(),
        checkpoint_dir: out.to_path_buf(),
        ..TrainConfig::default()
    }
}

/// Largest absolute difference between two parameter sets with equal layout.
pub fn max_param_diff(a: &ParamSet, b: &ParamSet) -> f64 {
    a.iter()
        .zip(b.iter())
        .flat_map(|((_, x, _), (_, y, _))| {
            x.data()
                .iter()
                .zip(y.data())
                .map(|(p, q)| (p - q).abs())
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}
