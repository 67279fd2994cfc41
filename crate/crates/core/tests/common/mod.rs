//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use metaprune::model::{Mask, ModelArch, ModelParams};
use metaprune::pruning::PruneTarget;
use metaprune::tensor::{Tape, Var};
use metaprune::Result;
use rand::seq::index;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Values bounded away from zero so ReLU and |x| kinks stay out of the
/// finite-difference stencil.
pub fn away_from_zero(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.5);
            if rng.gen::<bool>() { m } else { -m }
        })
        .collect()
}

/// One gradient-check case: input shapes and a graph over the inputs.
pub struct GradCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub build: Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>,
}

fn case(name: &'static str, shapes: Vec<Vec<usize>>, build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> GradCase {
    GradCase { name, shapes, build: Box::new(build) }
}

/// The `i`-th case cycles through every primitive with random dimensions.
pub fn grad_case(i: usize, rng: &mut impl Rng) -> GradCase {
    fn d(rng: &mut impl Rng, lo: usize, hi: usize) -> usize {
        rng.gen_range(lo..=hi)
    }
    match i % 18 {
        0 => {
            let (m, k, n) = (d(rng, 1, 5), d(rng, 1, 5), d(rng, 1, 5));
            case("matmul", vec![vec![m, k], vec![k, n]], |t, v| t.matmul(v[0], v[1]))
        }
        1 => {
            let (b, m, k, n) = (d(rng, 1, 3), d(rng, 1, 4), d(rng, 1, 4), d(rng, 1, 4));
            case("bmm", vec![vec![b, m, k], vec![b, k, n]], |t, v| t.bmm(v[0], v[1]))
        }
        2 => {
            let (a, b, c) = (d(rng, 1, 3), d(rng, 1, 4), d(rng, 1, 4));
            case("transpose_last2", vec![vec![a, b, c]], |t, v| t.transpose_last2(v[0]))
        }
        3 => {
            let (a, b, c, e) = (d(rng, 1, 3), d(rng, 1, 3), d(rng, 1, 3), d(rng, 1, 3));
            case("swap_axes12", vec![vec![a, b, c, e]], |t, v| t.swap_axes12(v[0]))
        }
        4 => {
            let (a, b) = (d(rng, 1, 4), d(rng, 1, 4));
            case("reshape", vec![vec![a, b]], move |t, v| t.reshape(v[0], vec![b, a]))
        }
        5 => {
            let s = vec![d(rng, 1, 4), d(rng, 1, 4)];
            case("add", vec![s.clone(), s], |t, v| t.add(v[0], v[1]))
        }
        6 => {
            let s = vec![d(rng, 1, 4), d(rng, 1, 4)];
            case("mul", vec![s.clone(), s], |t, v| t.mul(v[0], v[1]))
        }
        7 => {
            let c = rng.gen_range(-2.0..2.0);
            case("scale", vec![vec![d(rng, 1, 4), d(rng, 1, 4)]], move |t, v| Ok(t.scale(v[0], c)))
        }
        8 => {
            let (a, b, c) = (d(rng, 1, 3), d(rng, 1, 4), d(rng, 1, 3));
            case("add_bcast", vec![vec![a, b, c], vec![b]], |t, v| t.add_bcast(v[0], v[1], 1))
        }
        9 => {
            let (a, b, c) = (d(rng, 1, 3), d(rng, 1, 4), d(rng, 1, 3));
            case("mul_bcast", vec![vec![a, b, c], vec![b, c]], |t, v| t.mul_bcast(v[0], v[1], 1))
        }
        10 => case("relu", vec![vec![d(rng, 1, 4), d(rng, 1, 5)]], |t, v| Ok(t.relu(v[0]))),
        11 => case("softmax", vec![vec![d(rng, 1, 4), d(rng, 1, 5)]], |t, v| Ok(t.softmax(v[0]))),
        12 => {
            let axis = d(rng, 0, 2);
            case("mean_axis", vec![vec![d(rng, 1, 3), d(rng, 1, 3), d(rng, 1, 3)]], move |t, v| t.mean_axis(v[0], axis))
        }
        13 => case("sum", vec![vec![d(rng, 1, 4), d(rng, 1, 4)]], |t, v| Ok(t.sum(v[0]))),
        14 => case("mean", vec![vec![d(rng, 1, 4), d(rng, 1, 4)]], |t, v| Ok(t.mean(v[0]))),
        15 => case("sum_abs", vec![vec![d(rng, 1, 4), d(rng, 1, 4)]], |t, v| Ok(t.sum_abs(v[0]))),
        16 => {
            let (b, k) = (d(rng, 1, 5), d(rng, 2, 5));
            let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..k)).collect();
            case("cross_entropy", vec![vec![b, k]], move |t, v| t.cross_entropy(v[0], &labels))
        }
        _ => {
            let (b, ci, co, s) = (d(rng, 1, 2), d(rng, 1, 2), d(rng, 1, 3), d(rng, 2, 4));
            let k = if rng.gen::<bool>() { 3 } else { 1 };
            case("conv2d", vec![vec![b, ci, s, s], vec![co, ci, k, k]], |t, v| t.conv2d(v[0], v[1]))
        }
    }
}

/// Scalarizes `out` with fixed random weights so every output element
/// contributes a distinct coefficient.
fn project(tape: &mut Tape, out: Var, weights: &[f64]) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(shape, weights.to_vec())?;
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

/// Largest relative error between reverse-mode and central-difference
/// gradients (step 1e-5) over all inputs of the case.
pub fn grad_rel_error(c: &GradCase, rng: &mut impl Rng) -> Result<f64> {
    let inputs: Vec<Vec<f64>> = c.shapes.iter().map(|s| away_from_zero(rng, s.iter().product())).collect();
    let eval = |inputs: &[Vec<f64>], weights: Option<&[f64]>| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars =
            c.shapes.iter().zip(inputs).map(|(s, x)| tape.variable(s.clone(), x.clone())).collect::<Result<Vec<_>>>()?;
        let out = (c.build)(&mut tape, &vars)?;
        let loss = match weights {
            Some(w) => project(&mut tape, out, w)?,
            None => out,
        };
        Ok((tape, vars, loss))
    };
    let (probe, _, out) = eval(&inputs, None)?;
    let weights: Vec<f64> = (0..probe.value(out).len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (tape, vars, loss) = eval(&inputs, Some(&weights))?;
    let grads = tape.backward(loss)?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);
        for j in 0..x.len() {
            let at = |delta: f64| -> Result<f64> {
                let mut moved = inputs.clone();
                moved[i][j] += delta;
                let (t, _, l) = eval(&moved, Some(&weights))?;
                Ok(t.value(l)[0])
            };
            let numeric = (at(h)? - at(-h)?) / (2.0 * h);
            let a = analytic[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-2);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Eq. 1 written out term by term, without the max shift.
pub fn direct_vote_distribution(votes: &[usize], tau: f64) -> Vec<f64> {
    let e: Vec<f64> = votes.iter().map(|&v| (v as f64 / tau).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// Exact inclusion probabilities of sequential sampling without replacement:
/// enumerate every ordered draw sequence of length `keep`.
pub fn sequential_inclusion(p: &[f64], keep: usize) -> Vec<f64> {
    fn walk(p: &[f64], left: usize, taken: &mut Vec<usize>, prob: f64, out: &mut [f64]) {
        if left == 0 {
            for &i in taken.iter() {
                out[i] += prob;
            }
            return;
        }
        let rest: f64 = (0..p.len()).filter(|i| !taken.contains(i)).map(|i| p[i]).sum();
        for i in 0..p.len() {
            if taken.contains(&i) || p[i] == 0.0 {
                continue;
            }
            taken.push(i);
            walk(p, left - 1, taken, prob * p[i] / rest, out);
            taken.pop();
        }
    }
    let mut out = vec![0.0; p.len()];
    walk(p, keep, &mut Vec::new(), 1.0, &mut out);
    out
}

/// Small instances of each architecture so random-model properties stay fast.
pub fn small_archs(num_classes: usize) -> Vec<ModelArch> {
    vec![
        ModelArch::Mlp { input_dim: 16, hidden: vec![6, 5], num_classes },
        ModelArch::ConvNet { in_channels: 1, side: 4, kernel: 3, filters: vec![4, 3], num_classes },
        ModelArch::Transformer { side: 4, patch: 2, d_model: 4, head_dim: 2, heads: vec![3, 2], mlp: vec![5, 4], num_classes },
    ]
}

pub fn random_batch(arch: &ModelArch, b: usize, rng: &mut impl Rng) -> metaprune::tensor::Tensor {
    let n = arch.input_numel();
    let data = (0..b * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let shape = match arch {
        ModelArch::Mlp { input_dim, .. } => vec![b, *input_dim],
        ModelArch::ConvNet { in_channels, side, .. } => vec![b, *in_channels, *side, *side],
        ModelArch::Transformer { side, .. } => vec![b, 1, *side, *side],
    };
    metaprune::tensor::Tensor::new(shape, data).unwrap()
}

/// Uniformly random non-empty subset per layer.
pub fn random_mask(widths: &[usize], rng: &mut impl Rng) -> Mask {
    let kept = widths
        .iter()
        .map(|&n| {
            let k = rng.gen_range(1..=n);
            index::sample(rng, n, k).into_vec()
        })
        .collect();
    Mask::new(widths.to_vec(), kept).unwrap()
}

pub fn random_model(arch: &ModelArch, seed: u64) -> ModelParams {
    ModelParams::build(arch, seed).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn target(r: f64) -> PruneTarget {
    PruneTarget::new(r).unwrap()
}

/// A 3-class task on 4×4 images, small enough for full pruning runs.
pub fn tiny_task(seed: u64) -> metaprune::taskgen::DatasetSplit {
    use metaprune::taskgen::{build_taxonomy, materialize_dataset, DataConfig, TaskSpec};
    let tax = build_taxonomy(2, 3, 8, seed).unwrap();
    let cfg = DataConfig { side: 4, noise: 0.1, jitter: 0.0, train_per_class: 20, val_per_class: 10, test_per_class: 10 };
    materialize_dataset(&TaskSpec { id: 0, classes: vec![0, 1, 3], data_seed: seed }, &tax, &cfg).unwrap()
}

/// A record with random mask and weights over `pretrained`.
pub fn random_record(pretrained: &ModelArch, task_id: u64, method: &str, seed: u64) -> metaprune::zoo::ZooRecord {
    use metaprune::zoo::{RecordMeta, ZooRecord};
    let mut rng = rng(seed);
    let mask = random_mask(&pretrained.widths(), &mut rng);
    let classes: Vec<usize> = index::sample(&mut rng, 64, 3).into_vec();
    let params = random_model(&pretrained.with_num_classes(3), seed).shrink_to_mask(&mask).unwrap();
    let meta = RecordMeta {
        method: method.into(),
        criterion: "activation".into(),
        r: 0.9,
        iterations: 500,
        accuracy: rng.gen_range(0.0..1.0),
        seed,
    };
    ZooRecord::new(task_id, classes, pretrained, mask, &params, meta).unwrap()
}

/// Seconds-scale experiment: small universe, short schedules.
pub fn tiny_experiment() -> metaprune::experiment::ExperimentConfig {
    let mut cfg = metaprune::experiment::ExperimentConfig::default();
    for (s, k, v) in [
        ("universe", "branching", "2"),
        ("universe", "depth", "4"),
        ("universe", "num_tasks", "24"),
        ("universe", "classes_per_task", "3"),
        ("universe", "train_per_class", "30"),
        ("universe", "val_per_class", "10"),
        ("universe", "test_per_class", "10"),
        ("pretrain", "iters", "150"),
        ("ifp", "iters", "60"),
        ("ifp", "period", "5"),
        ("ifp", "score_batch", "30"),
        ("mvp", "iters", "10"),
        ("mvp", "eval_tasks", "2"),
        ("ablate", "iters", "0,10"),
        ("ablate", "neighbours", "1,2"),
        ("ablate", "temperatures", "1"),
        ("ablate", "group_iters", "10"),
    ] {
        cfg.set(s, k, v).unwrap();
    }
    cfg
}
