//! Finite-difference gradient checks in `f64`.

use idl_core::nn::model::{forward_batch, init_params_with};
use idl_core::nn::{BoundParams, DepAudioNetParams, ModelDims, OutputMode, Tape, Var};
use idl_core::rng::seeded;
use idl_core::rng::SeededRng;
use rand::seq::SliceRandom;
use rand::Rng;

/// Central-difference step.
pub const STEP: f64 = 1e-4;
/// Largest accepted relative error between analytic and numeric gradients.
pub const GRAD_TOL: f64 = 1e-5;
/// Inputs closer than this to a ReLU or max-pool switch point are redrawn so
/// the finite difference never straddles a kink.
pub const KINK_MARGIN: f64 = 1e-3;

pub fn uniform(rng: &mut SeededRng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Denominator floor of [`rel_err`]. Central differences carry roughly
/// `1e-16 / STEP` of rounding noise, so gradients that vanish analytically
/// (a bias feeding straight into batchnorm) must not be compared relatively.
pub const SCALE_FLOOR: f64 = 1e-6;

/// `‖a − b‖ / max(‖a‖, ‖b‖, SCALE_FLOOR)`, taken per tensor.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied()));
    diff / scale.max(SCALE_FLOOR)
}

#[derive(Clone, Debug)]
pub struct Leaf {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
}

impl Leaf {
    pub fn new(shape: &[usize], value: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        Self {
            shape: shape.to_vec(),
            value,
        }
    }

    pub fn random(rng: &mut SeededRng, shape: &[usize], lo: f64, hi: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, uniform(rng, n, lo, hi))
    }
}

fn eval<F>(leaves: &[Leaf], build: &F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves
        .iter()
        .map(|l| tape.leaf(l.shape.clone(), l.value.clone(), true))
        .collect();
    let out = build(&mut tape, &vars);
    tape.value(out)[0]
}

/// Worst per-leaf relative error of the tape gradient against central
/// differences of the scalar built by `build`.
pub fn check_leaves<F>(leaves: &[Leaf], build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves
        .iter()
        .map(|l| tape.leaf(l.shape.clone(), l.value.clone(), true))
        .collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out).expect("scalar output");
    let mut worst: f64 = 0.0;
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(vars[k]).expect("leaf gradient").to_vec();
        let mut numeric = Vec::with_capacity(leaf.value.len());
        let mut probe = leaves.to_vec();
        for i in 0..leaf.value.len() {
            let x0 = leaf.value[i];
            probe[k].value[i] = x0 + STEP;
            let up = eval(&probe, &build);
            probe[k].value[i] = x0 - STEP;
            let down = eval(&probe, &build);
            probe[k].value[i] = x0;
            numeric.push((up - down) / (2.0 * STEP));
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

pub fn tiny_dims() -> ModelDims {
    ModelDims {
        n_mels: 4,
        frames: 12,
        channels: 3,
        hidden: 3,
        kernel: 3,
        pool: 3,
        dropout: 0.25,
    }
}

/// Which head and loss a composed check runs.
#[derive(Clone, Copy, Debug)]
pub enum Composed {
    /// Embeddings of `2n` segments, loss between the two halves.
    Idl { tau: f64 },
    /// Probabilities against fixed targets.
    Bce,
}

struct ModelEval {
    tape: Tape<f64>,
    loss: Var,
    params: BoundParams,
    /// Smallest distance of any ReLU input or max-pool winner from a switch point.
    margin: f64,
}

fn model_loss(
    params: &DepAudioNetParams<f64>,
    input: &[f64],
    batch: usize,
    kind: Composed,
    train: bool,
    seed: u64,
) -> ModelEval {
    let mut tape = Tape::new();
    let mode = match kind {
        Composed::Idl { .. } => OutputMode::Embed,
        Composed::Bce => OutputMode::Classify,
    };
    let pass = forward_batch(&mut tape, params, input.to_vec(), batch, mode, train, seed).unwrap();
    let loss = match kind {
        Composed::Idl { tau } => {
            let n = batch / 2;
            let f = tape.rows(pass.output, 0, n);
            let f_hat = tape.rows(pass.output, n, n);
            tape.idl_loss(f, f_hat, tau)
        }
        Composed::Bce => {
            let targets: Vec<f64> = (0..batch).map(|i| (i % 2) as f64).collect();
            tape.bce(pass.output, &targets)
        }
    };
    let pre = tape.value(pass.pre_relu);
    let mut margin = pre.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    let d = params.dims;
    for row in pre.chunks(d.frames) {
        for w in row.chunks_exact(d.pool) {
            let mut s: Vec<f64> = w.iter().map(|v| v.max(0.0)).collect();
            s.sort_by(|a, b| b.total_cmp(a));
            if s[0] > 0.0 {
                margin = margin.min(s[0] - s[1]);
            }
        }
    }
    ModelEval {
        tape,
        loss,
        params: pass.params,
        margin,
    }
}

/// Draws a random instance of the full network and checks every trainable
/// parameter. Returns `None` when the instance sits too close to a kink.
pub fn check_model(seed: u64, batch: usize, kind: Composed, train: bool) -> Option<f64> {
    let dims = tiny_dims();
    let mut params: DepAudioNetParams<f64> = init_params_with(&dims, seed);
    let mut rng = seeded(seed ^ 0x5eed);
    if !train {
        params.bn_running_mean.data = uniform(&mut rng, dims.channels, -0.3, 0.3);
        params.bn_running_var.data = uniform(&mut rng, dims.channels, 0.5, 2.0);
    }
    // widen the recurrent and head weights past the small init range
    for (name, t) in params.tensors_mut() {
        if name.starts_with("lstm") || name.starts_with("fc") || name == "bn.gamma" {
            for v in &mut t.data {
                *v += rng.random_range(-0.5..0.5);
            }
        }
    }
    let input = uniform(&mut rng, batch * dims.segment_len(), -1.0, 1.0);
    let dropout_seed = seed.wrapping_mul(31);

    let mut base = model_loss(&params, &input, batch, kind, train, dropout_seed);
    if base.margin < KINK_MARGIN {
        return None;
    }
    let grads = base.tape.backward(base.loss).unwrap();
    let vars = base.params.named();
    let mut worst: f64 = 0.0;
    for (name, var) in vars {
        if matches!(kind, Composed::Idl { .. }) && name.starts_with("fc") {
            // the classifier head is not on the embedding path
            assert!(grads.get(var).is_none_or(|g| g.iter().all(|&v| v == 0.0)));
            continue;
        }
        let analytic = grads.get(var).expect("parameter gradient").to_vec();
        let n = analytic.len();
        let mut numeric = Vec::with_capacity(n);
        for i in 0..n {
            let at = |delta: f64| {
                let mut p = params.clone();
                let t = p
                    .tensors_mut()
                    .into_iter()
                    .find(|(nm, _)| *nm == name)
                    .unwrap()
                    .1;
                t.data[i] += delta;
                let e = model_loss(&p, &input, batch, kind, train, dropout_seed);
                e.tape.value(e.loss)[0]
            };
            let up = at(STEP);
            let down = at(-STEP);
            numeric.push((up - down) / (2.0 * STEP));
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    Some(worst)
}

/// Scalar projection with fixed random weights, so every output element
/// receives a distinct upstream gradient.
fn project(tape: &mut Tape<f64>, x: Var, seed: u64) -> Var {
    let n = tape.value(x).len();
    let w = uniform(&mut seeded(seed ^ 0xf00d), n, -1.0, 1.0);
    tape.weighted_sum(x, w)
}

pub fn conv1d(s: u64) -> f64 {
    let mut rng = seeded(100 + s);
    let (b, cin, cout, t, k) = (2, rng.random_range(1..4), rng.random_range(1..4), 7, 3);
    let pad = (s % 2) as usize;
    let leaves = [
        Leaf::random(&mut rng, &[b, cin, t], -1.0, 1.0),
        Leaf::random(&mut rng, &[cout, cin, k], -1.0, 1.0),
        Leaf::random(&mut rng, &[cout], -1.0, 1.0),
    ];
    check_leaves(&leaves, |tape, v| {
        let y = tape.conv1d(v[0], v[1], v[2], pad);
        project(tape, y, s)
    })
}

pub fn batch_norm_train(s: u64) -> f64 {
    let mut rng = seeded(200 + s);
    let (b, c, t) = (3, 2, 5);
    let leaves = [
        Leaf::random(&mut rng, &[b, c, t], -2.0, 2.0),
        Leaf::random(&mut rng, &[c], 0.5, 1.5),
        Leaf::random(&mut rng, &[c], -0.5, 0.5),
    ];
    check_leaves(&leaves, |tape, v| {
        let (y, _, _) = tape.batch_norm_train(v[0], v[1], v[2]);
        project(tape, y, s)
    })
}

pub fn batch_norm_eval(s: u64) -> f64 {
    let mut rng = seeded(300 + s);
    let (b, c, t) = (2, 3, 4);
    let mean = uniform(&mut rng, c, -0.5, 0.5);
    let var = uniform(&mut rng, c, 0.5, 2.0);
    let leaves = [
        Leaf::random(&mut rng, &[b, c, t], -2.0, 2.0),
        Leaf::random(&mut rng, &[c], 0.5, 1.5),
        Leaf::random(&mut rng, &[c], -0.5, 0.5),
    ];
    check_leaves(&leaves, |tape, v| {
        let y = tape.batch_norm_eval(v[0], v[1], v[2], &mean, &var);
        project(tape, y, s)
    })
}

pub fn relu(s: u64) -> f64 {
    let mut rng = seeded(400 + s);
    // every input at least 0.05 away from zero
    let value: Vec<f64> = (0..12)
        .map(|_| {
            let m: f64 = rng.random_range(0.05..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    check_leaves(&[Leaf::new(&[2, 2, 3], value)], |tape, v| {
        let y = tape.relu(v[0]);
        project(tape, y, s)
    })
}

pub fn max_pool(s: u64) -> f64 {
    let mut rng = seeded(500 + s);
    // distinct values 0.01 apart, so no window has a near tie
    let mut value: Vec<f64> = (0..2 * 2 * 9).map(|i| i as f64 * 0.01).collect();
    value.shuffle(&mut rng);
    check_leaves(&[Leaf::new(&[2, 2, 9], value)], |tape, v| {
        let y = tape.max_pool1d(v[0], 3);
        project(tape, y, s)
    })
}

pub fn dropout(s: u64) -> f64 {
    let mut rng = seeded(600 + s);
    let keep = 0.8;
    let mask: Vec<f64> = (0..10)
        .map(|_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect();
    let leaves = [Leaf::random(&mut rng, &[2, 5], -1.0, 1.0)];
    check_leaves(&leaves, |tape, v| {
        let y = tape.mask(v[0], mask.clone());
        project(tape, y, s)
    })
}

pub fn lstm(s: u64) -> f64 {
    let mut rng = seeded(700 + s);
    let (b, t, i, h) = (2, 4, 3, rng.random_range(2..4));
    let leaves = [
        Leaf::random(&mut rng, &[b, t, i], -1.0, 1.0),
        Leaf::random(&mut rng, &[4 * h, i], -0.8, 0.8),
        Leaf::random(&mut rng, &[4 * h, h], -0.8, 0.8),
        Leaf::random(&mut rng, &[4 * h], -0.5, 0.5),
    ];
    check_leaves(&leaves, |tape, v| {
        let y = tape.lstm(v[0], v[1], v[2], v[3]);
        project(tape, y, s)
    })
}

/// Two LSTM layers over a transposed conv-style input, reduced to the last step.
pub fn stacked_lstm(s: u64) -> f64 {
    let mut rng = seeded(750 + s);
    let (b, c, t, h) = (2, 3, 5, 2);
    let leaves = [
        Leaf::random(&mut rng, &[b, c, t], -1.0, 1.0),
        Leaf::random(&mut rng, &[4 * h, c], -0.8, 0.8),
        Leaf::random(&mut rng, &[4 * h, h], -0.8, 0.8),
        Leaf::random(&mut rng, &[4 * h], -0.5, 0.5),
        Leaf::random(&mut rng, &[4 * h, h], -0.8, 0.8),
        Leaf::random(&mut rng, &[4 * h, h], -0.8, 0.8),
        Leaf::random(&mut rng, &[4 * h], -0.5, 0.5),
    ];
    check_leaves(&leaves, |tape, v| {
        let seq = tape.transpose12(v[0]);
        let h1 = tape.lstm(seq, v[1], v[2], v[3]);
        let h2 = tape.lstm(h1, v[4], v[5], v[6]);
        let last = tape.last_step(h2);
        project(tape, last, s)
    })
}

pub fn linear(s: u64) -> f64 {
    let mut rng = seeded(800 + s);
    let (b, i, o) = (3, 4, rng.random_range(1..4));
    let leaves = [
        Leaf::random(&mut rng, &[b, i], -1.0, 1.0),
        Leaf::random(&mut rng, &[o, i], -1.0, 1.0),
        Leaf::random(&mut rng, &[o], -1.0, 1.0),
    ];
    check_leaves(&leaves, |tape, v| {
        let y = tape.linear(v[0], v[1], v[2]);
        project(tape, y, s)
    })
}

pub fn sigmoid(s: u64) -> f64 {
    let mut rng = seeded(900 + s);
    let leaves = [Leaf::random(&mut rng, &[6, 1], -3.0, 3.0)];
    check_leaves(&leaves, |tape, v| {
        let y = tape.sigmoid(v[0]);
        project(tape, y, s)
    })
}

pub fn bce(s: u64) -> f64 {
    let mut rng = seeded(950 + s);
    let leaves = [Leaf::random(&mut rng, &[6, 1], -3.0, 3.0)];
    let targets: Vec<f64> = (0..6).map(|i| (i % 2) as f64).collect();
    check_leaves(&leaves, |tape, v| {
        let p = tape.sigmoid(v[0]);
        tape.bce(p, &targets)
    })
}

pub fn l2_normalize(s: u64) -> f64 {
    let mut rng = seeded(1000 + s);
    let leaves = [Leaf::random(&mut rng, &[3, 4], -1.0, 1.0)];
    check_leaves(&leaves, |tape, v| {
        let y = tape.l2_normalize(v[0]);
        project(tape, y, s)
    })
}

/// Loss over normalized random rows; batch size and temperature vary with `s`.
pub fn idl_loss(s: u64) -> f64 {
    let (n, tau) = [(2, 1.0), (3, 10.0), (4, 10.0), (5, 1.0)][s as usize % 4];
    let mut rng = seeded(1100 + s);
    let d = 4;
    let leaves = [
        Leaf::random(&mut rng, &[n, d], -1.0, 1.0),
        Leaf::random(&mut rng, &[n, d], -1.0, 1.0),
    ];
    check_leaves(&leaves, |tape, v| {
        let f = tape.l2_normalize(v[0]);
        let f_hat = tape.l2_normalize(v[1]);
        tape.idl_loss(f, f_hat, tau)
    })
}

pub type Case = fn(u64) -> f64;

pub const LAYER_CASES: [(&str, Case); 13] = [
    ("conv1d", conv1d),
    ("batchnorm/train", batch_norm_train),
    ("batchnorm/eval", batch_norm_eval),
    ("relu", relu),
    ("maxpool", max_pool),
    ("dropout", dropout),
    ("lstm", lstm),
    ("stacked lstm", stacked_lstm),
    ("linear", linear),
    ("sigmoid", sigmoid),
    ("bce", bce),
    ("l2 normalize", l2_normalize),
    ("idl loss", idl_loss),
];

/// Checks `wanted` kink-free instances of the full network, drawing seeds from
/// `first` upwards. Returns the worst error and the seeds used.
pub fn composed(
    kind: Composed,
    train: bool,
    batch: usize,
    first: u64,
    wanted: usize,
) -> (f64, Vec<u64>) {
    let mut used = Vec::new();
    let mut worst: f64 = 0.0;
    let mut seed = first;
    while used.len() < wanted {
        assert!(
            seed < first + 50 * wanted as u64,
            "too many instances near a kink"
        );
        if let Some(err) = check_model(seed, batch, kind, train) {
            worst = worst.max(err);
            used.push(seed);
        }
        seed += 1;
    }
    (worst, used)
}
