//! Independent oracles shared by the core test targets and the acceptance
//! suite. Everything here recomputes a quantity the slow, obvious way.
#![allow(dead_code)]

use curio_core::diff::{adam_step, AdamState, LayerSpec, Sequential, Tape, Tensor, Var};
use curio_core::seed::rng_for;
use rand::Rng;

pub const FD_STEP: f64 = 1e-6;
pub const GRAD_TOLERANCE: f64 = 1e-4;

pub fn rng(seed: u64) -> impl Rng {
    rng_for(seed, 0x7e57)
}

pub fn uniform(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Uniform values kept at least `gap` away from every point in `kinks`.
pub fn away_from(rng: &mut impl Rng, n: usize, kinks: &[f64], gap: f64) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let v = rng.random_range(-2.0..2.0);
            if kinks.iter().all(|k| (v - k).abs() >= gap) {
                break v;
            }
        })
        .collect()
}

pub fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).expect("valid test tensor")
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `||a - n|| / max(||a|| + ||n||, 1e-6)`
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    norm(&diff) / (norm(analytic) + norm(numeric)).max(1e-6)
}

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> curio_core::Result<Var> + 'a;

/// Projects the output onto fixed weights so any op yields a scalar loss.
fn scalar_loss(tape: &mut Tape, out: Var, proj: &[f64]) -> curio_core::Result<Var> {
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(&shape, proj.to_vec())?;
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

fn eval(build: &Build, inputs: &[Tensor], proj: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = build(&mut tape, &vars).expect("forward");
    let l = scalar_loss(&mut tape, out, proj).expect("loss");
    tape.value(l)[0]
}

/// Worst relative error between tape gradients and central differences
/// over all inputs of one op instance.
pub fn check_op(build: &Build, inputs: &[Tensor], proj_seed: u64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(&t.clone().tracked())).collect();
    let out = build(&mut tape, &vars).expect("forward");
    let proj = uniform(&mut rng(proj_seed), tape.value(out).len(), -1.0, 1.0);
    let loss = scalar_loss(&mut tape, out, &proj).expect("loss");
    let grads = tape.backward(loss).expect("backward");
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("gradient for tracked input").to_vec();
        let mut numeric = vec![0.0; inputs[k].len()];
        for (j, g) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= FD_STEP;
            *g = (eval(build, &plus, &proj) - eval(build, &minus, &proj)) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

fn net_loss(net: &Sequential, x: &Tensor, proj: &[f64]) -> f64 {
    let y = net.infer(x).expect("infer");
    y.data().iter().zip(proj).map(|(a, b)| a * b).sum()
}

/// Same check for a whole layer stack, covering its input and every
/// parameter.
pub fn check_net(net: &Sequential, x: &Tensor, proj_seed: u64) -> f64 {
    let mut net = net.clone();
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, true);
    let xv = tape.leaf(&x.clone().tracked());
    let out = net.forward(&mut tape, &bound, xv).expect("forward");
    let proj = uniform(&mut rng(proj_seed), tape.value(out).len(), -1.0, 1.0);
    let loss = scalar_loss(&mut tape, out, &proj).expect("loss");
    let grads = tape.backward(loss).expect("backward");
    net.store_grads(&bound, &grads).expect("grads");

    let mut worst: f64 = 0.0;
    let gx = grads.get(xv).expect("input gradient").to_vec();
    let mut nx = vec![0.0; x.len()];
    for (j, g) in nx.iter_mut().enumerate() {
        let (mut p, mut m) = (x.clone(), x.clone());
        p.data_mut()[j] += FD_STEP;
        m.data_mut()[j] -= FD_STEP;
        *g = (net_loss(&net, &p, &proj) - net_loss(&net, &m, &proj)) / (2.0 * FD_STEP);
    }
    worst = worst.max(rel_err(&gx, &nx));
    for k in 0..net.params().len() {
        let analytic = net.params()[k].grad.clone().expect("param gradient");
        let mut numeric = vec![0.0; analytic.len()];
        for (j, g) in numeric.iter_mut().enumerate() {
            let (mut p, mut m) = (net.clone(), net.clone());
            p.params_mut()[k].data_mut()[j] += FD_STEP;
            m.params_mut()[k].data_mut()[j] -= FD_STEP;
            *g = (net_loss(&p, x, &proj) - net_loss(&m, x, &proj)) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Name and worst relative error of every op and layer kind over
/// `instances` random instances each.
pub fn gradient_suite(instances: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut results: Vec<(&'static str, f64)> = Vec::new();
    let mut record = |name: &'static str, err: f64| match results.iter_mut().find(|(n, _)| *n == name) {
        Some(r) => r.1 = r.1.max(err),
        None => results.push((name, err)),
    };
    for i in 0..instances as u64 {
        let mut r = rng(seed.wrapping_mul(1_000_003).wrapping_add(i));
        let s = 1000 + i;
        let n = r.random_range(1..4usize);
        let m = r.random_range(1..5usize);
        let k = r.random_range(1..5usize);
        let a = tensor(&[n, k], uniform(&mut r, n * k, -1.0, 1.0));
        let b = tensor(&[k, m], uniform(&mut r, k * m, -1.0, 1.0));
        let w = tensor(&[m, k], uniform(&mut r, m * k, -1.0, 1.0));
        let bias = tensor(&[m], uniform(&mut r, m, -1.0, 1.0));
        let x = tensor(&[n, k], uniform(&mut r, n * k, -2.0, 2.0));
        let y = tensor(&[n, k], uniform(&mut r, n * k, -2.0, 2.0));

        record("matmul", check_op(&|t, v| t.matmul(v[0], v[1]), &[a.clone(), b], s));
        record("linear", check_op(&|t, v| t.linear(v[0], v[1], v[2]), &[a, w, bias], s));
        record("add", check_op(&|t, v| t.add(v[0], v[1]), &[x.clone(), y.clone()], s));
        record("sub", check_op(&|t, v| t.sub(v[0], v[1]), &[x.clone(), y.clone()], s));
        record("mul", check_op(&|t, v| t.mul(v[0], v[1]), &[x.clone(), y.clone()], s));
        let gap = away_from(&mut r, n * k, &[0.0], 0.05);
        let y2 = tensor(&[n, k], x.data().iter().zip(&gap).map(|(a, g)| a + g).collect());
        record("minimum", check_op(&|t, v| t.minimum(v[0], v[1]), &[x.clone(), y2], s));
        let c = r.random_range(-3.0..3.0);
        record("scale", check_op(&|t, v| t.scale(v[0], c), &[x.clone()], s));
        record("add_scalar", check_op(&|t, v| t.add_scalar(v[0], c), &[x.clone()], s));
        let kinked = tensor(&[n, k], away_from(&mut r, n * k, &[0.0], 0.05));
        record("relu", check_op(&|t, v| t.relu(v[0]), &[kinked], s));
        record("tanh", check_op(&|t, v| t.tanh(v[0]), &[x.clone()], s));
        record("exp", check_op(&|t, v| t.exp(v[0]), &[x.clone()], s));
        let pos = tensor(&[n, k], uniform(&mut r, n * k, 0.5, 2.0));
        record("sqrt", check_op(&|t, v| t.sqrt(v[0]), &[pos], s));
        record("square", check_op(&|t, v| t.square(v[0]), &[x.clone()], s));
        let clamped = tensor(&[n, k], away_from(&mut r, n * k, &[-0.5, 0.5], 0.05));
        record("clamp", check_op(&|t, v| t.clamp(v[0], -0.5, 0.5), &[clamped], s));
        record("reshape", check_op(&|t, v| t.reshape(v[0], &[n * k]), &[x.clone()], s));
        record("log_softmax", check_op(&|t, v| t.log_softmax(v[0]), &[x.clone()], s));
        let idx: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        record("gather", check_op(&|t, v| t.gather(v[0], &idx), &[x.clone()], s));
        record("sum_rows", check_op(&|t, v| t.sum_rows(v[0]), &[x.clone()], s));
        record("sum", check_op(&|t, v| t.sum(v[0]), &[x.clone()], s));
        record("mean", check_op(&|t, v| t.mean(v[0]), &[x], s));

        let (ci, co) = (r.random_range(1..3usize), r.random_range(1..3usize));
        let ker = r.random_range(1..4usize);
        let stride = r.random_range(1..3usize);
        let hw = r.random_range(ker..ker + 4);
        let img = tensor(&[n, ci, hw, hw], uniform(&mut r, n * ci * hw * hw, -1.0, 1.0));
        let cw = tensor(&[co, ci, ker, ker], uniform(&mut r, co * ci * ker * ker, -1.0, 1.0));
        let cb = tensor(&[co], uniform(&mut r, co, -1.0, 1.0));
        record("conv2d", check_op(&|t, v| t.conv2d(v[0], v[1], v[2], stride), &[img, cw, cb], s));
        let win = r.random_range(1..3usize);
        let side = win * r.random_range(1..4usize);
        let pool_in = tensor(&[n, ci, side, side], uniform(&mut r, n * ci * side * side, -1.0, 1.0));
        record("mean_pool", check_op(&|t, v| t.mean_pool(v[0], win), &[pool_in], s));
        let norm_in = tensor(&[n, ci, 3, 3], uniform(&mut r, n * ci * 9, -1.0, 1.0));
        record("instance_norm", check_op(&|t, v| t.instance_norm(v[0]), &[norm_in], s));

        for (name, specs, shape, gains) in layer_cases(&mut r) {
            let net = Sequential::new(&shape, &specs, &gains, s).expect("layer case");
            let mut full = vec![n];
            full.extend_from_slice(&shape);
            let len = full.iter().product();
            let input = tensor(&full, uniform(&mut r, len, -1.0, 1.0));
            record(name, check_net(&net, &input, s));
        }
    }
    results
}

type LayerCase = (&'static str, Vec<LayerSpec>, Vec<usize>, Vec<f64>);

/// One small stack per layer kind, randomized in size.
fn layer_cases(r: &mut impl Rng) -> Vec<LayerCase> {
    let c = r.random_range(1..3usize);
    let d = r.random_range(2..5usize);
    let o = r.random_range(1..4usize);
    vec![
        ("layer:dense", vec![LayerSpec::Dense { inputs: d, outputs: o }], vec![d], vec![1.0]),
        (
            "layer:conv2d",
            vec![LayerSpec::Conv2d { in_channels: c, out_channels: o, kernel: 2, stride: 1 }],
            vec![c, 4, 4],
            vec![1.0],
        ),
        (
            "layer:relu",
            vec![LayerSpec::Dense { inputs: d, outputs: o }, LayerSpec::Relu],
            vec![d],
            vec![1.0],
        ),
        ("layer:tanh", vec![LayerSpec::Tanh], vec![d], vec![]),
        (
            "layer:flatten",
            vec![LayerSpec::Flatten, LayerSpec::Dense { inputs: c * 9, outputs: o }],
            vec![c, 3, 3],
            vec![1.0],
        ),
        ("layer:spatial_mean_pool", vec![LayerSpec::SpatialMeanPool { window: 2 }], vec![c, 4, 4], vec![]),
        ("layer:instance_norm", vec![LayerSpec::InstanceNorm], vec![c, 3, 3], vec![]),
    ]
}

/// Advantages as the explicit discounted sum of TD errors.
pub fn gae_oracle(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: &[f64],
    gamma: f64,
    lambda: f64,
) -> Vec<f64> {
    let e = bootstrap.len();
    let steps = rewards.len() / e;
    let next_value = |t: usize, env: usize| {
        if t + 1 < steps {
            values[(t + 1) * e + env]
        } else {
            bootstrap[env]
        }
    };
    let delta = |t: usize, env: usize| {
        let i = t * e + env;
        let live = if dones[i] { 0.0 } else { 1.0 };
        rewards[i] + gamma * live * next_value(t, env) - values[i]
    };
    let mut adv = vec![0.0; rewards.len()];
    for env in 0..e {
        for t in 0..steps {
            let mut total = 0.0;
            let mut weight = 1.0;
            for u in t..steps {
                total += weight * delta(u, env);
                if dones[u * e + env] {
                    break;
                }
                weight *= gamma * lambda;
            }
            adv[t * e + env] = total;
        }
    }
    adv
}

/// Textbook single-pass Pearson formula.
pub fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy): (f64, f64) = (x.iter().sum(), y.iter().sum());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

pub fn reward_diff_oracle(r: &[f64]) -> Vec<Vec<f64>> {
    r.iter().map(|a| r.iter().map(|b| (a - b).abs()).collect()).collect()
}

pub fn distance_oracle(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|a| {
            rows.iter()
                .map(|b| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
                .collect()
        })
        .collect()
}

/// Two-pass population mean and variance.
pub fn moments_oracle(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Scalar Adam recursion for a fixed gradient sequence.
pub fn adam_oracle(p0: f64, grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) -> f64 {
    let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
    for (t, g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        p -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
    }
    p
}

/// Runs the library Adam on a single scalar with the given gradients.
pub fn adam_library(p0: f64, grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) -> f64 {
    let mut ps = [Tensor::scalar(p0).expect("finite").tracked()];
    let mut st = AdamState::with_hyper(lr, b1, b2, eps, &ps);
    for g in grads {
        ps[0].grad = Some(vec![*g]);
        adam_step(&mut st, &mut ps).expect("adam");
    }
    ps[0].data()[0]
}
