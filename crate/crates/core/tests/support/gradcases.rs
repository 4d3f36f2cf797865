//! Random finite-difference cases for every primitive and KD loss.

use clta_core::autodiff::{finite_difference, relative_error, Graph, NormAxes, NormStats, Var};
use clta_core::distill::{ancl_loss, gkd_loss, mkd_loss, tkd_loss, KdConfig, KdVariant};
use clta_core::seed;
use clta_core::{Result, Tensor};
use rand::Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-5;
const CASES_PER_OP: usize = 5;

type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;
type MakeCase = dyn Fn(&mut seed::Rng) -> (Vec<Tensor>, Box<Build>);

/// Random tensor with entries bounded away from 0 so ReLU kinks are never straddled.
fn rand_tensor(rng: &mut seed::Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let x: f64 = rng.gen_range(lo..hi);
            if x.abs() < 0.05 {
                x + 0.1
            } else {
                x
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// Reduces `out` to a scalar with fixed random weights so every output entry matters.
fn weighted_sum(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

fn eval(build: &Build, inputs: &[Tensor], weights: &Option<Tensor>) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t, true)).collect();
    let mut out = build(&mut g, &vars)?;
    if let Some(w) = weights {
        out = weighted_sum(&mut g, out, w)?;
    }
    Ok(g.scalar(out))
}

/// Worst relative error over all inputs.
fn check(build: &Build, inputs: &[Tensor], rng: &mut seed::Rng) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t, true)).collect();
    let out = build(&mut g, &vars).unwrap();
    let weights = (g.value(out).len() > 1).then(|| rand_tensor(rng, g.value(out).shape(), -1.0, 1.0));
    let loss = match &weights {
        Some(w) => weighted_sum(&mut g, out, w).unwrap(),
        None => out,
    };
    let grads = g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).unwrap().to_vec();
        let numeric = finite_difference(
            |x| {
                let mut probe = inputs.to_vec();
                probe[i] = x.clone();
                eval(build, &probe, &weights)
            },
            &inputs[i],
            H,
        )
        .unwrap();
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

struct Case {
    name: &'static str,
    make: Box<MakeCase>,
}

fn case(name: &'static str, make: impl Fn(&mut seed::Rng) -> (Vec<Tensor>, Box<Build>) + 'static) -> Case {
    Case { name, make: Box::new(make) }
}

fn dims(rng: &mut seed::Rng) -> (usize, usize) {
    (rng.gen_range(2..5), rng.gen_range(2..5))
}

fn unary(name: &'static str, lo: f64, hi: f64, op: fn(&mut Graph, Var) -> Result<Var>) -> Case {
    case(name, move |rng| {
        let (n, m) = dims(rng);
        (vec![rand_tensor(rng, &[n, m], lo, hi)], Box::new(move |g, v| op(g, v[0])))
    })
}

fn binary(name: &'static str, op: fn(&mut Graph, Var, Var) -> Result<Var>) -> Case {
    case(name, move |rng| {
        let (n, m) = dims(rng);
        (vec![rand_tensor(rng, &[n, m], -2.0, 2.0), rand_tensor(rng, &[n, m], -2.0, 2.0)], Box::new(move |g, v| op(g, v[0], v[1])))
    })
}

fn norm_case(name: &'static str, axes: NormAxes, fixed: bool) -> Case {
    case(name, move |rng| {
        let n = rng.gen_range(2..5);
        let c = 4;
        let s = rng.gen_range(1..4);
        let x = rand_tensor(rng, &[n, c, s], -2.0, 2.0);
        let gamma = rand_tensor(rng, &[c], 0.5, 1.5);
        let beta = rand_tensor(rng, &[c], -1.0, 1.0);
        let mean: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let var: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..2.0)).collect();
        (
            vec![x, gamma, beta],
            Box::new(move |g, v| {
                let stats = if fixed { NormStats::Fixed { mean: &mean, var: &var } } else { NormStats::Batch };
                g.normalize(v[0], v[1], v[2], axes, stats, 1e-5)
            }),
        )
    })
}

fn labels(rng: &mut seed::Rng, n: usize, m: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..m)).collect()
}

fn cases() -> Vec<Case> {
    vec![
        case("matmul", |rng| {
            let (n, k) = dims(rng);
            let m = rng.gen_range(2..5);
            (vec![rand_tensor(rng, &[n, k], -1.0, 1.0), rand_tensor(rng, &[k, m], -1.0, 1.0)], Box::new(|g, v| g.matmul(v[0], v[1])))
        }),
        case("conv2d", |rng| {
            let stride = rng.gen_range(1..3);
            let padding = rng.gen_range(0..2);
            let x = rand_tensor(rng, &[2, 2, 5, 5], -1.0, 1.0);
            let k = rand_tensor(rng, &[3, 2, 3, 3], -1.0, 1.0);
            (vec![x, k], Box::new(move |g, v| g.conv2d(v[0], v[1], stride, padding)))
        }),
        binary("add", Graph::add),
        binary("sub", Graph::sub),
        binary("mul", Graph::mul),
        unary("scale", -2.0, 2.0, |g, a| g.scale(a, -1.7)),
        case("add_row_bias", |rng| {
            let (n, m) = dims(rng);
            (vec![rand_tensor(rng, &[n, m], -1.0, 1.0), rand_tensor(rng, &[m], -1.0, 1.0)], Box::new(|g, v| g.add_row_bias(v[0], v[1])))
        }),
        case("add_channel_bias", |rng| {
            let (n, c) = dims(rng);
            (vec![rand_tensor(rng, &[n, c, 2, 2], -1.0, 1.0), rand_tensor(rng, &[c], -1.0, 1.0)], Box::new(|g, v| g.add_channel_bias(v[0], v[1])))
        }),
        unary("relu", -2.0, 2.0, Graph::relu),
        unary("sigmoid", -4.0, 4.0, Graph::sigmoid),
        unary("log_sigmoid", -6.0, 6.0, Graph::log_sigmoid),
        unary("log", 0.2, 3.0, Graph::log),
        unary("exp", -2.0, 2.0, Graph::exp),
        unary("sum", -2.0, 2.0, Graph::sum),
        unary("mean", -2.0, 2.0, Graph::mean),
        unary("sum_rows", -2.0, 2.0, Graph::sum_rows),
        unary("flatten", -2.0, 2.0, Graph::flatten),
        unary("reshape", -2.0, 2.0, |g, a| {
            let n = g.shape(a).iter().product();
            g.reshape(a, vec![n])
        }),
        case("avg_pool2d", |rng| {
            (vec![rand_tensor(rng, &[2, 2, 4, 4], -1.0, 1.0)], Box::new(|g, v| g.avg_pool2d(v[0], 2, 2)))
        }),
        case("global_avg_pool", |rng| {
            (vec![rand_tensor(rng, &[2, 3, 3, 2], -1.0, 1.0)], Box::new(|g, v| g.global_avg_pool(v[0])))
        }),
        case("concat", |rng| {
            let n = rng.gen_range(2..5);
            (
                vec![rand_tensor(rng, &[n, 2], -1.0, 1.0), rand_tensor(rng, &[n, 3], -1.0, 1.0)],
                Box::new(|g, v| g.concat(&[v[0], v[1]])),
            )
        }),
        case("slice_cols", |rng| {
            let n = rng.gen_range(2..5);
            (vec![rand_tensor(rng, &[n, 5], -1.0, 1.0)], Box::new(|g, v| g.slice_cols(v[0], 1, 3)))
        }),
        unary("softmax", -3.0, 3.0, |g, a| g.softmax(a, 1.0)),
        unary("softmax_tempered", -3.0, 3.0, |g, a| g.softmax(a, 2.5)),
        unary("log_softmax", -3.0, 3.0, |g, a| g.log_softmax(a, 1.0)),
        unary("log_softmax_tempered", -3.0, 3.0, |g, a| g.log_softmax(a, 0.5)),
        case("pick", |rng| {
            let (n, m) = dims(rng);
            let idx = labels(rng, n, m);
            (vec![rand_tensor(rng, &[n, m], -1.0, 1.0)], Box::new(move |g, v| g.pick(v[0], &idx)))
        }),
        case("cross_entropy", |rng| {
            let (n, m) = dims(rng);
            let idx = labels(rng, n, m);
            (vec![rand_tensor(rng, &[n, m], -3.0, 3.0)], Box::new(move |g, v| g.cross_entropy(v[0], &idx)))
        }),
        norm_case("batch_norm", NormAxes::PerChannel, false),
        norm_case("fixed_stats_norm", NormAxes::PerChannel, true),
        norm_case("layer_norm", NormAxes::PerSample, false),
        norm_case("group_norm", NormAxes::PerGroup(2), false),
        case("gkd", |rng| {
            let (n, m) = dims(rng);
            let t = rand_tensor(rng, &[n, m], -3.0, 3.0);
            let temp = rng.gen_range(0.5..4.0);
            (vec![rand_tensor(rng, &[n, m], -3.0, 3.0)], Box::new(move |g, v| gkd_loss(g, v[0], &t, temp)))
        }),
        case("tkd", |rng| {
            let n = rng.gen_range(2..5);
            let t1 = rand_tensor(rng, &[n, 2], -3.0, 3.0);
            let t2 = rand_tensor(rng, &[n, 3], -3.0, 3.0);
            let temp = rng.gen_range(0.5..4.0);
            (
                vec![rand_tensor(rng, &[n, 2], -3.0, 3.0), rand_tensor(rng, &[n, 3], -3.0, 3.0)],
                Box::new(move |g, v| tkd_loss(g, &[(v[0], &t1), (v[1], &t2)], temp)),
            )
        }),
        case("mkd", |rng| {
            let (n, m) = dims(rng);
            let t = rand_tensor(rng, &[n, m], -3.0, 3.0);
            (vec![rand_tensor(rng, &[n, m], -3.0, 3.0)], Box::new(move |g, v| mkd_loss(g, v[0], &t)))
        }),
        case("ancl", |rng| {
            let n = rng.gen_range(2..5);
            let main = rand_tensor(rng, &[n, 3], -3.0, 3.0);
            let aux = rand_tensor(rng, &[n, 2], -3.0, 3.0);
            let cfg = KdConfig { lambda_aux: Some(rng.gen_range(0.1..2.0)), ..KdConfig::new(KdVariant::Ancl, 2.0, 1.5) };
            (
                vec![rand_tensor(rng, &[n, 3], -3.0, 3.0), rand_tensor(rng, &[n, 2], -3.0, 3.0)],
                Box::new(move |g, v| ancl_loss(g, v[0], &main, v[1], Some(&aux), &cfg)),
            )
        }),
    ]
}

pub struct GradReport {
    pub cases: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

/// Runs every case and collects those whose relative error reaches [`TOL`].
pub fn run_all(seed: u64) -> GradReport {
    let mut rng = seed::rng(seed);
    let mut report = GradReport { cases: 0, worst: 0.0, failures: Vec::new() };
    for c in cases() {
        for k in 0..CASES_PER_OP {
            let (inputs, build) = (c.make)(&mut rng);
            let err = check(build.as_ref(), &inputs, &mut rng);
            report.cases += 1;
            report.worst = report.worst.max(err);
            if err.is_nan() || err >= TOL {
                report.failures.push(format!("{} case {k}: relative error {err:.3e}", c.name));
            }
        }
    }
    report
}
