//! Central finite-difference checks of reverse-mode gradients.

use std::collections::BTreeMap;

use lupi_core::autodiff::{Tape, Var};
use lupi_core::losses::{
    color_free_from, cross_modal_triplet, dual_triplet, identity_loss, total_loss, triplet_term, LossConfig,
};
use lupi_core::model::{forward, EmbeddingBatch, ModelConfig, ModelParams};
use lupi_core::tensor::Tensor;
use lupi_core::{Modality, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Gradient magnitudes below this are compared on an absolute scale.
pub const FLOOR: f64 = 1e-4;

pub type Build = for<'t> fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>;

pub struct Case {
    pub name: &'static str,
    pub inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    pub build: Build,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn eval(build: Build, inputs: &[Tensor]) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    build(&tape, &vars).expect("case evaluates").item()
}

/// Largest relative error over every element of every input.
pub fn check(build: Build, inputs: &[Tensor]) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&tape, &vars).expect("case evaluates");
    let grads = tape.backward(&out).expect("scalar output");
    let mut worst: f64 = 0.0;
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(var);
        for j in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= STEP;
            let numeric = (eval(build, &plus) - eval(build, &minus)) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    worst
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero by 0.1, random sign.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let t = uniform(rng, shape, 0.1, 1.0);
    let signs: Vec<f64> = (0..t.len())
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    Tensor::new(shape.to_vec(), t.data().iter().zip(signs).map(|(v, s)| v * s).collect()).unwrap()
}

/// A random weighting so upstream gradients are not all ones.
fn weighted<'t>(t: &Var<'t>, w: &Var<'t>) -> Result<Var<'t>> {
    Ok(t.mul(w)?.sum())
}

const LABELS: [usize; 6] = [0, 0, 1, 1, 2, 2];

fn batch<'t>(features: Var<'t>, logits: Var<'t>, modality: Modality) -> EmbeddingBatch<'t> {
    EmbeddingBatch {
        features: features.l2_normalize(),
        raw: features,
        logits,
        labels: LABELS.to_vec(),
        modality,
    }
}

pub fn layer_cases() -> Vec<Case> {
    vec![
        Case {
            name: "matmul",
            inputs: |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 2], -1.0, 1.0), uniform(r, &[3, 2], -1.0, 1.0)],
            build: |_, v| weighted(&v[0].matmul(&v[1])?, &v[2]),
        },
        Case {
            name: "add_bias",
            inputs: |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)],
            build: |_, v| weighted(&v[0].add_bias(&v[1])?, &v[2]),
        },
        Case {
            name: "add_sub_scale",
            inputs: |r| vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 3], -1.0, 1.0)],
            build: |_, v| weighted(&v[0].add(&v[1])?.sub(&v[1].scale(2.5))?.add_scalar(0.7), &v[2]),
        },
        Case {
            name: "mul",
            inputs: |r| vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[], -1.0, 1.0)],
            build: |_, v| Ok(v[0].mul(&v[1])?.mul(&v[2])?.sum()),
        },
        Case {
            name: "relu",
            inputs: |r| vec![off_zero(r, &[3, 4]), uniform(r, &[3, 4], -1.0, 1.0)],
            build: |_, v| weighted(&v[0].relu(), &v[1]),
        },
        Case {
            name: "max_scalar",
            inputs: |r| vec![off_zero(r, &[3, 4]), uniform(r, &[3, 4], -1.0, 1.0)],
            build: |_, v| weighted(&v[0].add_scalar(0.05).max_scalar(0.05), &v[1]),
        },
        Case {
            name: "abs",
            inputs: |r| vec![off_zero(r, &[3, 4]), uniform(r, &[3, 4], -1.0, 1.0)],
            build: |_, v| weighted(&v[0].abs(), &v[1]),
        },
        Case {
            name: "exp_log",
            inputs: |r| vec![uniform(r, &[3, 3], 0.2, 2.0), uniform(r, &[3, 3], -1.0, 1.0)],
            build: |_, v| weighted(&v[0].log()?.add(&v[0].scale(0.3).exp())?, &v[1]),
        },
        Case {
            name: "sqrt_clamped",
            inputs: |r| vec![uniform(r, &[3, 3], 0.1, 2.0), uniform(r, &[3, 3], -1.0, 1.0)],
            build: |_, v| weighted(&v[0].sqrt_clamped(1e-12), &v[1]),
        },
        Case {
            name: "row_reductions",
            inputs: |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0)],
            build: |_, v| weighted(&v[0].sum_last(), &v[1])?.add(&v[0].mean_last().mul(&v[1])?.mean()),
        },
        Case {
            name: "softmax",
            inputs: |r| vec![uniform(r, &[3, 5], -2.0, 2.0), uniform(r, &[3, 5], -1.0, 1.0)],
            build: |_, v| weighted(&v[0].softmax()?, &v[1]),
        },
        Case {
            name: "log_softmax",
            inputs: |r| vec![uniform(r, &[3, 5], -2.0, 2.0), uniform(r, &[3, 5], -1.0, 1.0)],
            build: |_, v| weighted(&v[0].log_softmax()?, &v[1]),
        },
        Case {
            name: "l2_normalize",
            inputs: |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)],
            build: |_, v| weighted(&v[0].l2_normalize(), &v[1]),
        },
        Case {
            name: "pairwise_sq_euclidean",
            inputs: |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[5, 4], -1.0, 1.0), uniform(r, &[3, 5], -1.0, 1.0)],
            build: |_, v| weighted(&v[0].pairwise_sq_euclidean(&v[1])?, &v[2]),
        },
        Case {
            name: "gather",
            inputs: |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)],
            build: |_, v| weighted(&v[0].gather(&[(0, 1), (2, 3), (1, 0), (0, 1)])?, &v[1]),
        },
        Case {
            name: "reshape_concat",
            inputs: |r| vec![uniform(r, &[2, 6], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[6, 4], -1.0, 1.0)],
            build: |_, v| weighted(&Var::concat_rows(&[v[0].reshape(vec![3, 4])?, v[1].clone()])?, &v[2]),
        },
        Case {
            name: "conv2d",
            inputs: |r| {
                vec![
                    uniform(r, &[2, 2, 4, 3], -1.0, 1.0),
                    uniform(r, &[3, 2, 3, 3], -1.0, 1.0),
                    uniform(r, &[3], -1.0, 1.0),
                    uniform(r, &[2, 3, 4, 3], -1.0, 1.0),
                ]
            },
            build: |_, v| weighted(&v[0].conv2d(&v[1], &v[2])?, &v[3]),
        },
        Case {
            name: "avg_pool2",
            inputs: |r| vec![uniform(r, &[2, 2, 4, 6], -1.0, 1.0), uniform(r, &[2, 2, 2, 3], -1.0, 1.0)],
            build: |_, v| weighted(&v[0].avg_pool2()?, &v[1]),
        },
        Case {
            name: "global_avg_pool",
            inputs: |r| vec![uniform(r, &[2, 3, 2, 3], -1.0, 1.0), uniform(r, &[2, 3], -1.0, 1.0)],
            build: |_, v| weighted(&v[0].global_avg_pool()?, &v[1]),
        },
    ]
}

fn feats(r: &mut ChaCha8Rng) -> Tensor {
    uniform(r, &[6, 4], -1.0, 1.0)
}

fn logits(r: &mut ChaCha8Rng) -> Tensor {
    uniform(r, &[6, 3], -2.0, 2.0)
}

pub fn loss_cases() -> Vec<Case> {
    vec![
        Case {
            name: "triplet_term",
            inputs: |r| vec![feats(r), feats(r), feats(r)],
            build: |_, v| {
                let [a, p, n] = [0, 1, 2].map(|i| v[i].l2_normalize());
                Ok(triplet_term(&a, &LABELS, &p, &LABELS, &n, &LABELS, 0.8)?.loss)
            },
        },
        Case {
            name: "dual_triplet",
            inputs: |r| vec![feats(r), feats(r), feats(r), logits(r)],
            build: |_, v| {
                let fv = batch(v[0].clone(), v[3].clone(), Modality::Visible);
                let ft = batch(v[1].clone(), v[3].clone(), Modality::Infrared);
                let fz = batch(v[2].clone(), v[3].clone(), Modality::Intermediate);
                dual_triplet(&fv, &ft, &fz, 0.8)
            },
        },
        Case {
            name: "cross_modal_triplet",
            inputs: |r| vec![feats(r), feats(r), logits(r)],
            build: |_, v| {
                let fv = batch(v[0].clone(), v[2].clone(), Modality::Visible);
                let ft = batch(v[1].clone(), v[2].clone(), Modality::Infrared);
                cross_modal_triplet(&fv, &ft, 0.8)
            },
        },
        Case {
            name: "color_free_kl",
            inputs: |r| vec![feats(r), logits(r), feats(r), logits(r)],
            build: |_, v| {
                let (fv, fz) = (v[0].l2_normalize(), v[2].l2_normalize());
                color_free_from(&fv, &v[1], &fz, &v[3], 0.5, 10.0)
            },
        },
        Case {
            name: "color_free_abs",
            inputs: |r| vec![feats(r), logits(r), feats(r), logits(r)],
            build: |_, v| {
                let (fv, fz) = (v[0].l2_normalize(), v[2].l2_normalize());
                color_free_from(&fv, &v[1], &fz, &v[3], 0.5, 0.0)
            },
        },
        Case {
            name: "identity_loss",
            inputs: |r| vec![logits(r)],
            build: |_, v| identity_loss(&v[0], &LABELS),
        },
        Case {
            name: "total_loss",
            inputs: |r| vec![feats(r), logits(r), feats(r), logits(r), feats(r), logits(r)],
            build: |_, v| {
                let fv = batch(v[0].clone(), v[1].clone(), Modality::Visible);
                let ft = batch(v[2].clone(), v[3].clone(), Modality::Infrared);
                let fz = batch(v[4].clone(), v[5].clone(), Modality::Intermediate);
                let cfg = LossConfig {
                    margin: 0.8,
                    lambda: 2.0,
                    cf_threshold: 10.0,
                    ..LossConfig::default()
                };
                Ok(total_loss(&fv, &ft, Some(&fz), &cfg)?.0)
            },
        },
    ]
}

/// Outcome of checking one random instance.
pub struct Instance {
    pub name: String,
    pub err: f64,
}

/// The layer and loss suites over `seeds` random instances each.
pub fn run_suite(seeds: u64) -> Vec<Instance> {
    let mut out = Vec::new();
    for case in layer_cases().into_iter().chain(loss_cases()) {
        for seed in 0..seeds {
            let mut r = super::rng(1000 + seed);
            let inputs = (case.inputs)(&mut r);
            out.push(Instance {
                name: format!("{}#{seed}", case.name),
                err: check(case.build, &inputs),
            });
        }
    }
    out
}

const MODEL: ModelConfig = ModelConfig {
    dim: 4,
    num_classes: 3,
    stem_width: 2,
    trunk_width: 3,
};

fn model_objective<'t>(b: &EmbeddingBatch<'t>, weights: &Tensor) -> Var<'t> {
    let tape = b.features.tape();
    let w = tape.constant(weights.clone());
    let logit_w = tape.constant(Tensor::full(b.logits.shape(), 0.3));
    weighted(&b.features, &w).unwrap().add(&weighted(&b.logits, &logit_w).unwrap()).unwrap()
}

fn model_value(params: &ModelParams, input: &Tensor, modality: Modality, weights: &Tensor) -> f64 {
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    let b = forward(&bound, &tape.constant(input.clone()), modality).unwrap();
    model_objective(&b, weights).item()
}

/// Full network forward (features and logits) checked against every
/// parameter element and every input pixel.
pub fn check_model(seed: u64, modality: Modality) -> f64 {
    let mut r = super::rng(5000 + seed);
    let params = ModelParams::init(seed, MODEL).unwrap();
    // Random biases so no bias starts at exactly zero.
    let mut tensors: BTreeMap<String, Tensor> = params.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    for t in tensors.values_mut() {
        for v in t.data_mut() {
            *v += r.random_range(-0.1..0.1);
        }
    }
    let params = ModelParams::from_tensors(MODEL, tensors.clone()).unwrap();
    let input = uniform(&mut r, &[2, modality.channels(), 4, 4], 0.0, 1.0);
    let weights = uniform(&mut r, &[2, MODEL.dim], -1.0, 1.0);
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let x = tape.leaf(input.clone());
    let grads = tape.backward(&model_objective(&forward(&bound, &x, modality).unwrap(), &weights)).unwrap();
    let (param_grads, input_grad) = (bound.gradients(&grads), grads.wrt(&x));
    let value = |p: &ModelParams, x: &Tensor| model_value(p, x, modality, &weights);
    let mut worst: f64 = 0.0;
    for (name, t) in &tensors {
        let g = &param_grads[name];
        for j in 0..t.len() {
            let shifted = |delta: f64| {
                let mut ts = tensors.clone();
                ts.get_mut(name).unwrap().data_mut()[j] += delta;
                value(&ModelParams::from_tensors(MODEL, ts).unwrap(), &input)
            };
            let numeric = (shifted(STEP) - shifted(-STEP)) / (2.0 * STEP);
            worst = worst.max(rel_err(g.data()[j], numeric));
        }
    }
    for j in 0..input.len() {
        let shifted = |delta: f64| {
            let mut x = input.clone();
            x.data_mut()[j] += delta;
            value(&params, &x)
        };
        let numeric = (shifted(STEP) - shifted(-STEP)) / (2.0 * STEP);
        worst = worst.max(rel_err(input_grad.data()[j], numeric));
    }
    worst
}
