//! Central finite differences and the gradient verification suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::net::{BackboneConfig, ModelConfig, StaircaseModel};
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tape::{Fault, Tape, Var};
use crate::tensor::Tensor;

/// Central-difference estimate `(f(x + h e_k) - f(x - h e_k)) / 2h` for every
/// coordinate `k`.
pub fn finite_diff_grad<T: Scalar>(
    mut f: impl FnMut(&Tensor<T>) -> Result<T>,
    at: &Tensor<T>,
    h: T,
) -> Result<Tensor<T>> {
    if !(h > T::zero()) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut x = at.clone();
    let mut grad = Tensor::zeros(at.shape());
    for k in 0..at.len() {
        let orig = x.data()[k];
        x.data_mut()[k] = orig + h;
        let plus = f(&x)?;
        x.data_mut()[k] = orig - h;
        let minus = f(&x)?;
        x.data_mut()[k] = orig;
        grad.data_mut()[k] = (plus - minus) / (h + h);
    }
    Ok(grad)
}

/// `||a - b|| / max(||a||, ||b||)` in the Euclidean norm; zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckRow {
    pub name: String,
    pub instances: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub rows: Vec<GradCheckRow>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(GradCheckRow::passed)
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub instances: usize,
    pub seed: u64,
    pub step: f64,
    /// Finite-difference step for the end-to-end model. Smaller than `step`
    /// because the model has many more ReLU kinks a probe can straddle.
    pub model_step: f64,
    pub op_tolerance: f64,
    pub model_tolerance: f64,
    #[doc(hidden)]
    pub fault: Option<Fault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { instances: 20, seed: 0x5eed, step: 1e-5, model_step: 1e-6, op_tolerance: 1e-4, model_tolerance: 1e-3, fault: None }
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Compares tape gradients of `probe(build(inputs))` against finite
/// differences for every input. The probe is a squared error against a fixed
/// random target so every output coordinate carries a distinct weight.
fn check_op(inputs: &[Tensor<f64>], build: &Build, scalar_out: bool, opts: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Result<f64> {
    let new_tape = || opts.fault.map_or_else(Tape::new, Tape::with_fault);
    let out_len = {
        let mut tape = new_tape();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let y = build(&mut tape, &vars)?;
        tape.value(y).len()
    };
    let target = random(rng, &[out_len]);
    let loss_on = |tape: &mut Tape<f64>, y: Var| -> Result<Var> {
        if scalar_out {
            return Ok(y);
        }
        let flat = tape.reshape(y, &[out_len])?;
        let t = tape.constant(target.clone());
        tape.mse_loss(flat, t)
    };

    let mut tape = new_tape();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let y = build(&mut tape, &vars)?;
    let loss = loss_on(&mut tape, y)?;
    let mut store = ParamStore::new();
    let grads = tape.backward(loss, &mut store)?;

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (k, input) in inputs.iter().enumerate() {
        analytic.extend_from_slice(grads.get(vars[k]).expect("tracked leaf").data());
        let fd = finite_diff_grad(
            |x| {
                let mut tape = new_tape();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, t)| tape.constant(if i == k { x.clone() } else { t.clone() }))
                    .collect();
                let y = build(&mut tape, &vars)?;
                let l = loss_on(&mut tape, y)?;
                Ok(tape.value(l).data()[0])
            },
            input,
            opts.step,
        )?;
        numeric.extend_from_slice(fd.data());
    }
    Ok(relative_error(&analytic, &numeric))
}

struct OpCase {
    name: &'static str,
    scalar_out: bool,
    make: fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
    build: Box<Build>,
}

fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "conv2d",
            scalar_out: false,
            make: |r| {
                let c = r.random_range(1..=3);
                let o = r.random_range(1..=3);
                let k = [1, 3][r.random_range(0..2)];
                let h = r.random_range(k..=6);
                vec![random(r, &[2, c, h, h + 1]), random(r, &[o, c, k, k]), random(r, &[o])]
            },
            build: Box::new(|t, v| {
                let stride = 1 + t.value(v[0]).shape()[2] % 2;
                let pad = t.value(v[1]).shape()[2] / 2;
                t.conv2d(v[0], v[1], Some(v[2]), stride, pad)
            }),
        },
        OpCase {
            name: "relu",
            scalar_out: false,
            make: |r| vec![random(r, &[3, 7])],
            build: Box::new(|t, v| Ok(t.relu(v[0]))),
        },
        OpCase {
            name: "global_avg_pool",
            scalar_out: false,
            make: |r| vec![random(r, &[2, 3, 4, 5])],
            build: Box::new(|t, v| t.global_avg_pool(v[0])),
        },
        OpCase {
            name: "linear",
            scalar_out: false,
            make: |r| vec![random(r, &[3, 5]), random(r, &[4, 5]), random(r, &[4])],
            build: Box::new(|t, v| t.linear(v[0], v[1], v[2])),
        },
        OpCase {
            name: "add",
            scalar_out: false,
            make: |r| vec![random(r, &[2, 3, 2, 2]), random(r, &[2, 3, 2, 2])],
            build: Box::new(|t, v| t.add(v[0], v[1])),
        },
        OpCase {
            name: "mse_loss",
            scalar_out: true,
            make: |r| vec![random(r, &[7]), random(r, &[7])],
            build: Box::new(|t, v| t.mse_loss(v[0], v[1])),
        },
        OpCase {
            name: "reshape",
            scalar_out: false,
            make: |r| vec![random(r, &[2, 6])],
            build: Box::new(|t, v| t.reshape(v[0], &[3, 4])),
        },
        OpCase {
            name: "sum",
            scalar_out: true,
            make: |r| vec![random(r, &[9])],
            build: Box::new(|t, v| Ok(t.sum(v[0]))),
        },
        OpCase {
            name: "affine",
            scalar_out: false,
            make: |r| vec![random(r, &[5])],
            build: Box::new(|t, v| Ok(t.affine(v[0], -1.75, 0.5))),
        },
    ]
}

/// Tiny staircase model used for the end-to-end check: two stages of 4 and 8
/// channels on 8x8 inputs.
pub fn tiny_model(seed: u64) -> Result<StaircaseModel<f64>> {
    let cfg = ModelConfig::staircase(BackboneConfig::plain(4, &[4, 8]), vec!["tiny".into()]);
    StaircaseModel::build(&cfg, seed)
}

fn end_to_end_error(seed: u64, opts: &GradCheckOptions) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = tiny_model(seed)?;
    // Zero biases behind a dead ReLU leave pre-activations exactly on the
    // kink, where one-sided and central differences disagree. Checking at a
    // jittered point avoids that.
    for p in model.params_mut().iter_mut() {
        let jitter = random(&mut rng, p.value.shape());
        p.value.data_mut().iter_mut().zip(jitter.data()).for_each(|(v, j)| *v += 0.1 * j);
    }
    let images = random(&mut rng, &[2, 3, 8, 8]);
    let labels = random(&mut rng, &[2]);
    let new_tape = || opts.fault.map_or_else(Tape::new, Tape::with_fault);

    let loss_of = |m: &StaircaseModel<f64>, tape: &mut Tape<f64>, track: bool| -> Result<Var> {
        let x = tape.constant(images.clone());
        let y = m.forward(tape, x, 0, track)?;
        let l = tape.constant(labels.clone());
        tape.mse_loss(y, l)
    };

    let mut analytic_store = model.params().clone();
    let mut tape = new_tape();
    let loss = loss_of(&model, &mut tape, true)?;
    tape.backward(loss, &mut analytic_store)?;

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut probe = model.clone();
    for id in model.params().ids() {
        analytic.extend_from_slice(analytic_store.get(id).grad.data());
        let at = model.params().get(id).value.clone();
        let fd = finite_diff_grad(
            |v| {
                probe.params_mut().get_mut(id).value = v.clone();
                let mut tape = new_tape();
                let l = loss_of(&probe, &mut tape, false)?;
                Ok(tape.value(l).data()[0])
            },
            &at,
            opts.model_step,
        )?;
        probe.params_mut().get_mut(id).value = at;
        numeric.extend_from_slice(fd.data());
    }
    Ok(relative_error(&analytic, &numeric))
}

/// Runs every differentiable op plus the tiny end-to-end model through the
/// finite-difference oracle. Each op appears exactly once in the report.
pub fn run_grad_check(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rows = Vec::new();
    for case in op_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ fxhash(case.name));
        let mut worst: f64 = 0.0;
        for _ in 0..opts.instances {
            let inputs = (case.make)(&mut rng);
            let err = check_op(&inputs, case.build.as_ref(), case.scalar_out, opts, &mut rng)?;
            worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
        }
        rows.push(GradCheckRow {
            name: case.name.into(),
            instances: opts.instances,
            max_rel_err: worst,
            tolerance: opts.op_tolerance,
        });
    }
    let e2e_instances = opts.instances.clamp(1, 3);
    let mut worst: f64 = 0.0;
    for k in 0..e2e_instances {
        worst = worst.max(end_to_end_error(opts.seed.wrapping_add(k as u64), opts)?);
    }
    rows.push(GradCheckRow {
        name: "staircase_end_to_end".into(),
        instances: e2e_instances,
        max_rel_err: worst,
        tolerance: opts.model_tolerance,
    });
    Ok(GradCheckReport { rows })
}

fn fxhash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3))
}
