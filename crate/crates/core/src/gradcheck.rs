//! Finite-difference verification of every differentiable operation.
//!
//! Each check builds random inputs, contracts the op's output with a random
//! weight tensor to get a scalar, and compares the tape's gradient for every
//! input against central differences of the same scalar.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{build_model, ModelConfig, Variant};
use crate::tasks::{self, LabelMap, TaskSpec};
use crate::tensor::{finite_diff_gradient, max_relative_error, Result, Tape, Tensor, Var, REL_ERR_FLOOR};

/// Central-difference step used by every check.
pub const FD_EPS: f64 = 1e-5;
/// Step for re-measuring a coordinate that missed tolerance at [`FD_EPS`].
///
/// ReLU and max-pool kinks occasionally sit within `FD_EPS` of a random
/// point; the central difference then averages two one-sided slopes and
/// matches neither. The coordinate must still pass at this smaller step.
pub const FD_EPS_FINE: f64 = 1e-7;
/// Tolerance for smooth primitives.
pub const SMOOTH_TOL: f64 = 1e-6;
/// Tolerance for piecewise-smooth operations and whole-network checks.
pub const KINKED_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Check {
    Conv2d,
    Conv2dStrided,
    BatchNormTrain,
    BatchNormEval,
    Relu,
    Sigmoid,
    LogSoftmax,
    ElementwiseMul,
    ConcatChannels,
    MaxPool2,
    UpsampleNearest2,
    NormalizeChannels,
    SegLoss,
    DepthLoss,
    NormalLoss,
    TotalLoss,
    MtanModel,
    DenseModel,
}

impl Check {
    pub const ALL: [Check; 18] = [
        Check::Conv2d,
        Check::Conv2dStrided,
        Check::BatchNormTrain,
        Check::BatchNormEval,
        Check::Relu,
        Check::Sigmoid,
        Check::LogSoftmax,
        Check::ElementwiseMul,
        Check::ConcatChannels,
        Check::MaxPool2,
        Check::UpsampleNearest2,
        Check::NormalizeChannels,
        Check::SegLoss,
        Check::DepthLoss,
        Check::NormalLoss,
        Check::TotalLoss,
        Check::MtanModel,
        Check::DenseModel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Check::Conv2d => "conv2d",
            Check::Conv2dStrided => "conv2d_strided",
            Check::BatchNormTrain => "batch_norm_train",
            Check::BatchNormEval => "batch_norm_eval",
            Check::Relu => "relu",
            Check::Sigmoid => "sigmoid",
            Check::LogSoftmax => "log_softmax",
            Check::ElementwiseMul => "elementwise_mul",
            Check::ConcatChannels => "concat_channels",
            Check::MaxPool2 => "max_pool2",
            Check::UpsampleNearest2 => "upsample_nearest2",
            Check::NormalizeChannels => "normalize_channels",
            Check::SegLoss => "seg_loss",
            Check::DepthLoss => "depth_loss",
            Check::NormalLoss => "normal_loss",
            Check::TotalLoss => "total_loss",
            Check::MtanModel => "mtan_model",
            Check::DenseModel => "dense_model",
        }
    }

    pub fn from_name(name: &str) -> Option<Check> {
        Check::ALL.into_iter().find(|c| c.name() == name)
    }

    /// Smooth ops must agree to [`SMOOTH_TOL`]; ReLU is held to it too
    /// because random inputs never land on its kink.
    pub fn tolerance(self) -> f64 {
        match self {
            Check::MaxPool2 | Check::DepthLoss | Check::MtanModel | Check::DenseModel => KINKED_TOL,
            _ => SMOOTH_TOL,
        }
    }

    /// Network checks differentiate thousands of coordinates; they run fewer
    /// random models by default than the cheap primitive checks.
    pub fn is_model(self) -> bool {
        matches!(self, Check::MtanModel | Check::DenseModel)
    }
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub check: Check,
    pub instances: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// Coordinates re-measured at [`FD_EPS_FINE`] across all instances.
    pub refined: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Outcome of comparing one analytic gradient with finite differences.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Measurement {
    pub max_rel_err: f64,
    pub refined: usize,
}

impl Measurement {
    fn merge(self, other: Measurement) -> Measurement {
        Measurement {
            max_rel_err: self.max_rel_err.max(other.max_rel_err),
            refined: self.refined + other.refined,
        }
    }
}

/// Relative error of `analytic` against central differences of `f` at `x`.
/// Coordinates over `tol` at [`FD_EPS`] are re-measured at [`FD_EPS_FINE`].
pub fn measure(analytic: &[f64], mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, tol: f64) -> Measurement {
    let mut numeric = finite_diff_gradient(&mut f, x, FD_EPS).into_data();
    let floor = REL_ERR_FLOOR * numeric.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    let mut refined = 0;
    let mut probe = x.clone();
    for k in 0..numeric.len() {
        let (a, n) = (analytic[k], numeric[k]);
        if (a - n).abs() / a.abs().max(n.abs()).max(floor) < tol {
            continue;
        }
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + FD_EPS_FINE;
        let up = f(&probe);
        probe.data_mut()[k] = orig - FD_EPS_FINE;
        let down = f(&probe);
        probe.data_mut()[k] = orig;
        numeric[k] = (up - down) / (2.0 * FD_EPS_FINE);
        refined += 1;
    }
    Measurement {
        max_rel_err: max_relative_error(analytic, &numeric),
        refined,
    }
}

/// Compare tape gradients with central differences for a scalar built from `inputs`.
pub fn compare_gradients(
    inputs: &[Tensor],
    tol: f64,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<Measurement> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = Measurement::default();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        let m = measure(
            analytic.data(),
            |probe| {
                let mut tape = Tape::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| tape.param(if j == i { probe.clone() } else { t.clone() }))
                    .collect();
                let out = build(&mut tape, &vars).expect("perturbed rebuild succeeds");
                tape.value(out).data()[0]
            },
            &inputs[i],
            tol,
        );
        worst = worst.merge(m);
    }
    Ok(worst)
}

/// `sum(y * weights)` so every output element carries a distinct gradient.
pub fn project(tape: &mut Tape, y: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(y, w)?;
    Ok(tape.sum(prod))
}

fn normal(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(dims.to_vec(), data).expect("valid dims")
}

fn unit_normals(rng: &mut ChaCha8Rng, b: usize, h: usize, w: usize) -> Tensor {
    let raw = normal(rng, &[b, 3, h, w]);
    crate::tensor::kernels::normalize_channels(&raw).expect("rank 4").0
}

/// Run one check on `instances` random cases derived from `seed`.
pub fn run_check(check: Check, instances: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (check as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut worst = Measurement::default();
    for _ in 0..instances {
        worst = worst.merge(run_instance(check, &mut rng)?);
    }
    Ok(CheckReport {
        check,
        instances,
        max_rel_err: worst.max_rel_err,
        tolerance: check.tolerance(),
        refined: worst.refined,
    })
}

fn run_instance(check: Check, rng: &mut ChaCha8Rng) -> Result<Measurement> {
    let tol = check.tolerance();
    match check {
        Check::Conv2d => {
            let (x, w, b) = (normal(rng, &[2, 3, 8, 8]), normal(rng, &[4, 3, 3, 3]), normal(rng, &[4]));
            let r = normal(rng, &[2, 4, 8, 8]);
            compare_gradients(&[x, w, b], tol, |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 1, 1)?;
                project(t, y, &r)
            })
        }
        Check::Conv2dStrided => {
            let (x, w, b) = (normal(rng, &[1, 2, 7, 7]), normal(rng, &[3, 2, 3, 3]), normal(rng, &[3]));
            let r = normal(rng, &[1, 3, 3, 3]);
            compare_gradients(&[x, w, b], tol, |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 2, 0)?;
                project(t, y, &r)
            })
        }
        Check::BatchNormTrain => {
            let x = normal(rng, &[2, 4, 4, 4]);
            let gamma = normal(rng, &[4]);
            let beta = normal(rng, &[4]);
            let r = normal(rng, &[2, 4, 4, 4]);
            compare_gradients(&[x, gamma, beta], tol, |t, v| {
                let (y, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
                project(t, y, &r)
            })
        }
        Check::BatchNormEval => {
            let x = normal(rng, &[2, 4, 4, 4]);
            let gamma = normal(rng, &[4]);
            let beta = normal(rng, &[4]);
            let mean: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let var: Vec<f64> = (0..4).map(|_| rng.random_range(0.5..2.0)).collect();
            let r = normal(rng, &[2, 4, 4, 4]);
            compare_gradients(&[x, gamma, beta], tol, |t, v| {
                let y = t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)?;
                project(t, y, &r)
            })
        }
        Check::Relu => {
            // Keep samples away from the kink so central differences are exact.
            let x = normal(rng, &[2, 3, 4, 4]).map(|v| if v.abs() < 1e-3 { v + 0.01 } else { v });
            let r = normal(rng, &[2, 3, 4, 4]);
            compare_gradients(&[x], tol, |t, v| {
                let y = t.relu(v[0]);
                project(t, y, &r)
            })
        }
        Check::Sigmoid => {
            let x = normal(rng, &[2, 3, 4, 4]).map(|v| 3.0 * v);
            let r = normal(rng, &[2, 3, 4, 4]);
            compare_gradients(&[x], tol, |t, v| {
                let y = t.sigmoid(v[0]);
                project(t, y, &r)
            })
        }
        Check::LogSoftmax => {
            let x = normal(rng, &[2, 5, 3, 3]).map(|v| 2.0 * v);
            let r = normal(rng, &[2, 5, 3, 3]);
            compare_gradients(&[x], tol, |t, v| {
                let y = t.log_softmax_channels(v[0])?;
                project(t, y, &r)
            })
        }
        Check::ElementwiseMul => {
            let (a, b) = (normal(rng, &[2, 3, 4, 4]), normal(rng, &[2, 3, 4, 4]));
            let r = normal(rng, &[2, 3, 4, 4]);
            compare_gradients(&[a, b], tol, |t, v| {
                let y = t.mul(v[0], v[1])?;
                project(t, y, &r)
            })
        }
        Check::ConcatChannels => {
            let (a, b) = (normal(rng, &[2, 3, 4, 4]), normal(rng, &[2, 5, 4, 4]));
            let r = normal(rng, &[2, 8, 4, 4]);
            compare_gradients(&[a, b], tol, |t, v| {
                let y = t.concat_channels(v[0], v[1])?;
                project(t, y, &r)
            })
        }
        Check::MaxPool2 => {
            let x = normal(rng, &[1, 2, 6, 6]);
            let r = normal(rng, &[1, 2, 3, 3]);
            compare_gradients(&[x], tol, |t, v| {
                let y = t.max_pool2(v[0])?;
                project(t, y, &r)
            })
        }
        Check::UpsampleNearest2 => {
            let x = normal(rng, &[1, 2, 3, 3]);
            let r = normal(rng, &[1, 2, 6, 6]);
            compare_gradients(&[x], tol, |t, v| {
                let y = t.upsample_nearest2(v[0])?;
                project(t, y, &r)
            })
        }
        Check::NormalizeChannels => {
            let x = normal(rng, &[2, 3, 3, 3]);
            let r = normal(rng, &[2, 3, 3, 3]);
            compare_gradients(&[x], tol, |t, v| {
                let y = t.normalize_channels(v[0])?;
                project(t, y, &r)
            })
        }
        Check::SegLoss => {
            let logits = normal(rng, &[2, 4, 3, 3]);
            let ids: Vec<i32> = (0..18).map(|_| rng.random_range(-1..4)).collect();
            let labels = LabelMap::segmentation(2, 3, 3, ids.iter().map(|&i| (i >= 0).then_some(i as u32)).collect())
                .expect("valid labels");
            let labels = if labels.valid_count() == 0 {
                LabelMap::segmentation(2, 3, 3, vec![Some(0); 18]).expect("valid labels")
            } else {
                labels
            };
            compare_gradients(&[logits], tol, |t, v| {
                let lp = t.log_softmax_channels(v[0])?;
                tasks::seg_loss(t, lp, &labels)
            })
        }
        Check::DepthLoss => {
            let pred = normal(rng, &[2, 1, 3, 3]);
            let gt = normal(rng, &[2, 1, 3, 3]);
            let valid: Vec<bool> = (0..18).map(|i| i % 5 != 0).collect();
            let labels = LabelMap::depth(gt, valid).expect("valid labels");
            compare_gradients(&[pred], tol, |t, v| tasks::depth_loss(t, v[0], &labels))
        }
        Check::NormalLoss => {
            let raw = normal(rng, &[2, 3, 3, 3]);
            let gt = unit_normals(rng, 2, 3, 3);
            let labels = LabelMap::normals(gt, vec![true; 18]).expect("valid labels");
            compare_gradients(&[raw], tol, |t, v| {
                let n = t.normalize_channels(v[0])?;
                tasks::normal_loss(t, n, &labels)
            })
        }
        Check::TotalLoss => {
            let (a, b) = (normal(rng, &[1, 1, 2, 2]), normal(rng, &[1, 1, 2, 2]));
            let weights = [rng.random_range(0.0..2.0), rng.random_range(0.0..2.0)];
            let (ra, rb) = (normal(rng, &[1, 1, 2, 2]), normal(rng, &[1, 1, 2, 2]));
            compare_gradients(&[a, b], tol, |t, v| {
                let la = project(t, v[0], &ra)?;
                let lb = project(t, v[1], &rb)?;
                tasks::total_loss(t, &[la, lb], &weights)
            })
        }
        Check::MtanModel => model_instance(Variant::Mtan, tol, rng),
        Check::DenseModel => model_instance(Variant::Dense, tol, rng),
    }
}

/// Whole-network check on a two-task toy model: every parameter's gradient of
/// `seg_loss + depth_loss` against central differences.
fn model_instance(variant: Variant, tol: f64, rng: &mut ChaCha8Rng) -> Result<Measurement> {
    let classes = 3;
    let config = ModelConfig {
        variant,
        widths: vec![3, 4],
        input_channels: 2,
        tasks: vec![TaskSpec::segmentation(classes), TaskSpec::depth()],
    };
    let mut model = build_model(&config, rng.random()).expect("toy config is valid");
    // Random affine BN parameters exercise more of the chain than the identity init.
    for name in model.params().names().map(str::to_owned).collect::<Vec<_>>() {
        if name.ends_with(".gamma") || name.ends_with(".beta") || name.ends_with(".bias") {
            let mut t = model.params().get(&name).expect("listed").clone();
            let offset = if name.ends_with(".gamma") { 1.0 } else { 0.0 };
            t.data_mut().iter_mut().for_each(|v| *v = offset + rng.random_range(-0.5..0.5));
            model.params_mut().set(&name, t).expect("same shape");
        }
    }
    let (b, h, w) = (2, 8, 8);
    let x = normal(rng, &[b, 2, h, w]);
    let seg = LabelMap::segmentation(
        b,
        h,
        w,
        (0..b * h * w).map(|_| Some(rng.random_range(0..classes as u32))).collect(),
    )
    .expect("valid labels");
    let depth = LabelMap::depth(normal(rng, &[b, 1, h, w]), vec![true; b * h * w]).expect("valid labels");
    let labels = [seg, depth];

    let base = model.params().flatten();
    let loss_of = |flat: &[f64]| -> f64 {
        let mut m = model.clone();
        m.params_mut().unflatten(flat).expect("same length");
        let mut session = m.session(crate::model::Mode::Train);
        let out = session.forward(&x).expect("forward");
        let loss = tasks::task_losses(session.tape_mut(), &out.predictions, &labels, m.config().tasks.as_slice())
            .and_then(|ls| tasks::total_loss(session.tape_mut(), &ls, &[1.0, 1.0]))
            .expect("loss");
        session.tape().value(loss).data()[0]
    };

    let mut session = model.session(crate::model::Mode::Train);
    let out = session.forward(&x)?;
    let losses = tasks::task_losses(session.tape_mut(), &out.predictions, &labels, &config.tasks)?;
    let total = tasks::total_loss(session.tape_mut(), &losses, &[1.0, 1.0])?;
    let grads = session.tape().backward(total)?;
    let analytic = session.flat_param_grads(&grads);

    let flat = Tensor::new(vec![base.len()], base.clone())?;
    Ok(measure(&analytic, |p| loss_of(p.data()), &flat, tol))
}

/// Run every check (or only `only`) and collect reports.
pub fn run_suite(only: Option<Check>, instances: usize, model_instances: usize, seed: u64) -> Result<Vec<CheckReport>> {
    Check::ALL
        .into_iter()
        .filter(|c| only.is_none_or(|o| o == *c))
        .map(|c| run_check(c, if c.is_model() { model_instances } else { instances }, seed))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes_on_a_few_instances() {
        for report in run_suite(None, 3, 1, 7).unwrap() {
            println!("{:<20} {:.3e} (tol {:.0e})", report.check.name(), report.max_rel_err, report.tolerance);
            assert!(report.passed(), "{} failed: {:e}", report.check.name(), report.max_rel_err);
        }
    }

    #[test]
    fn kinks_near_the_probe_are_remeasured() {
        // relu(x) at 3e-6: the 1e-5 central difference straddles the kink.
        let x = Tensor::scalar(3e-6);
        let relu = |t: &Tensor| t.data()[0].max(0.0);
        let m = measure(&[1.0], relu, &x, 1e-4);
        assert_eq!(m.refined, 1);
        assert!(m.max_rel_err < 1e-9);
        // A wrong gradient still fails after re-measurement.
        let m = measure(&[2.0], relu, &x, 1e-4);
        assert!(m.max_rel_err > 0.4);
    }

    #[test]
    fn names_round_trip() {
        for c in Check::ALL {
            assert_eq!(Check::from_name(c.name()), Some(c));
        }
        assert_eq!(Check::from_name("nope"), None);
    }
}
