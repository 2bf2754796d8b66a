//! Task weights for the multi-task objective: equal weighting and Dynamic
//! Weight Average (DWA).
//!
//! DWA weights task `k` in epoch `t` by
//! `lambda_k(t) = K * exp(w_k / T) / sum_i exp(w_i / T)` where
//! `w_k = L_k(t-1) / L_k(t-2)` is the ratio of the task's last two epoch-average
//! losses. The first two epochs use `w_k = 1`, i.e. equal weights.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Below this an epoch-average loss counts as solved and its ratio is pinned to 1.
pub const ZERO_LOSS_GUARD: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WeightingError {
    #[error("DWA temperature must be positive and finite, got {0}")]
    Temperature(f64),
    #[error("at least one task is required")]
    NoTasks,
    #[error("task index {task} out of range for {tasks} tasks")]
    TaskOutOfRange { task: usize, tasks: usize },
    #[error("loss {value} recorded for task {task} is not a finite non-negative number")]
    BadLoss { task: usize, value: f64 },
    #[error("no losses recorded for task {0} this epoch")]
    MissingTaskData(usize),
    #[error("DWA weighting needs its loss history state")]
    MissingState,
    #[error("weighting state has {got} tasks, expected {expected}")]
    TaskCount { expected: usize, got: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WeightingScheme {
    Equal,
    Dwa { temperature: f64 },
}

impl WeightingScheme {
    pub fn validate(&self) -> Result<(), WeightingError> {
        match *self {
            WeightingScheme::Dwa { temperature } if !(temperature > 0.0 && temperature.is_finite()) => {
                Err(WeightingError::Temperature(temperature))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for WeightingScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightingScheme::Equal => f.write_str("equal"),
            WeightingScheme::Dwa { temperature } => write!(f, "dwa(T={temperature})"),
        }
    }
}

impl FromStr for WeightingScheme {
    type Err = String;

    /// `equal`, `dwa` (T = 2) or `dwa:<T>`.
    fn from_str(s: &str) -> Result<Self, String> {
        match s.split_once(':') {
            None if s == "equal" => Ok(WeightingScheme::Equal),
            None if s == "dwa" => Ok(WeightingScheme::Dwa { temperature: 2.0 }),
            Some(("dwa", t)) => t
                .parse()
                .map(|temperature| WeightingScheme::Dwa { temperature })
                .map_err(|e| format!("bad DWA temperature {t:?}: {e}")),
            _ => Err(format!("unknown weighting {s:?} (expected equal, dwa or dwa:<T>)")),
        }
    }
}

/// `K`-scaled softmax of `w / T`, computed with max subtraction.
pub fn dwa_weights(w: &[f64], temperature: f64) -> Vec<f64> {
    let k = w.len() as f64;
    let max = w.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / temperature));
    let exps: Vec<f64> = w.iter().map(|&v| (v / temperature - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| k * e / total).collect()
}

/// Loss history and current weights for DWA.
#[derive(Clone, Debug, PartialEq)]
pub struct DwaState {
    pub(crate) temperature: f64,
    pub(crate) sums: Vec<f64>,
    pub(crate) counts: Vec<u64>,
    /// Average of the most recent completed epoch.
    pub(crate) last: Option<Vec<f64>>,
    /// Average of the epoch before that.
    pub(crate) before_last: Option<Vec<f64>>,
    pub(crate) w: Vec<f64>,
    pub(crate) lambda: Vec<f64>,
    /// Completed epochs.
    pub(crate) epochs: u64,
}

impl DwaState {
    pub fn new(tasks: usize, temperature: f64) -> Result<Self, WeightingError> {
        WeightingScheme::Dwa { temperature }.validate()?;
        if tasks == 0 {
            return Err(WeightingError::NoTasks);
        }
        Ok(DwaState {
            temperature,
            sums: vec![0.0; tasks],
            counts: vec![0; tasks],
            last: None,
            before_last: None,
            w: vec![1.0; tasks],
            lambda: vec![1.0; tasks],
            epochs: 0,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.lambda.len()
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    /// Relative descending rates behind the current weights.
    pub fn w(&self) -> &[f64] {
        &self.w
    }

    /// Number of completed epochs; the current epoch is `epochs() + 1`.
    pub fn epochs(&self) -> u64 {
        self.epochs
    }

    pub fn record_batch_loss(&mut self, task: usize, value: f64) -> Result<(), WeightingError> {
        let tasks = self.num_tasks();
        if task >= tasks {
            return Err(WeightingError::TaskOutOfRange { task, tasks });
        }
        if !value.is_finite() || value < 0.0 {
            return Err(WeightingError::BadLoss { task, value });
        }
        self.sums[task] += value;
        self.counts[task] += 1;
        Ok(())
    }

    /// Close the current epoch and compute the weights for the next one.
    pub fn end_epoch(&mut self) -> Result<(), WeightingError> {
        if let Some(task) = self.counts.iter().position(|&c| c == 0) {
            return Err(WeightingError::MissingTaskData(task));
        }
        let averages: Vec<f64> = self.sums.iter().zip(&self.counts).map(|(s, &c)| s / c as f64).collect();
        self.before_last = self.last.replace(averages);
        self.epochs += 1;

        // Weights for epoch t = epochs + 1 use the ratio of epochs t-1 and t-2.
        self.w = match (&self.last, &self.before_last) {
            (Some(last), Some(before)) => last
                .iter()
                .zip(before)
                .map(|(l, b)| if *b < ZERO_LOSS_GUARD { 1.0 } else { l / b })
                .collect(),
            _ => vec![1.0; self.num_tasks()],
        };
        self.lambda = dwa_weights(&self.w, self.temperature);
        self.sums.fill(0.0);
        self.counts.fill(0);
        Ok(())
    }
}

/// Weights for the current step under `scheme`.
pub fn current_weights(
    scheme: WeightingScheme,
    state: Option<&DwaState>,
    tasks: usize,
) -> Result<Vec<f64>, WeightingError> {
    match scheme {
        WeightingScheme::Equal => Ok(vec![1.0; tasks]),
        WeightingScheme::Dwa { .. } => {
            let state = state.ok_or(WeightingError::MissingState)?;
            if state.num_tasks() != tasks {
                return Err(WeightingError::TaskCount {
                    expected: tasks,
                    got: state.num_tasks(),
                });
            }
            Ok(state.lambda.clone())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Reference values from a 40-digit evaluation of the K-scaled softmax
    // (mpmath): 2 e^{w/2} / (e^{1/2} + e^{1}) for w = 1, 2.
    const LAMBDA_K2_T2: [f64; 2] = [0.755081337596290870722198868508983042, 1.244918662403709129277801131491016957];

    fn run_epoch(state: &mut DwaState, losses: &[f64]) {
        for (k, &l) in losses.iter().enumerate() {
            state.record_batch_loss(k, l).unwrap();
        }
        state.end_epoch().unwrap();
    }

    #[test]
    fn epoch_average_is_the_mean_of_recorded_batches() {
        let mut s = DwaState::new(1, 2.0).unwrap();
        for v in [1.0, 2.0, 3.0] {
            s.record_batch_loss(0, v).unwrap();
        }
        s.end_epoch().unwrap();
        assert_eq!(s.last.as_deref(), Some(&[2.0][..]));
    }

    #[test]
    fn empty_epoch_is_rejected() {
        let mut s = DwaState::new(2, 2.0).unwrap();
        assert_eq!(s.end_epoch(), Err(WeightingError::MissingTaskData(0)));
        s.record_batch_loss(0, 1.0).unwrap();
        assert_eq!(s.end_epoch(), Err(WeightingError::MissingTaskData(1)));
    }

    #[test]
    fn interleaved_tasks_accumulate_independently() {
        let mut s = DwaState::new(2, 2.0).unwrap();
        for (t, v) in [(0, 1.0), (1, 10.0), (0, 3.0), (1, 30.0), (1, 20.0)] {
            s.record_batch_loss(t, v).unwrap();
        }
        s.end_epoch().unwrap();
        assert_eq!(s.last.as_deref(), Some(&[2.0, 20.0][..]));
    }

    #[test]
    fn non_finite_losses_are_rejected() {
        let mut s = DwaState::new(2, 2.0).unwrap();
        assert!(matches!(s.record_batch_loss(0, f64::NAN), Err(WeightingError::BadLoss { .. })));
        assert!(matches!(s.record_batch_loss(1, f64::INFINITY), Err(WeightingError::BadLoss { .. })));
        assert!(matches!(s.record_batch_loss(2, 1.0), Err(WeightingError::TaskOutOfRange { .. })));
    }

    #[test]
    fn first_two_epochs_weigh_equally() {
        let mut s = DwaState::new(3, 2.0).unwrap();
        assert_eq!(s.lambda(), &[1.0, 1.0, 1.0]);
        run_epoch(&mut s, &[5.0, 0.1, 2.0]);
        assert_eq!(s.lambda(), &[1.0, 1.0, 1.0]);
        run_epoch(&mut s, &[1.0, 0.1, 4.0]);
        assert_ne!(s.lambda(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn equal_descent_rates_give_unit_weights() {
        let mut s = DwaState::new(3, 2.0).unwrap();
        run_epoch(&mut s, &[4.0, 2.0, 1.0]);
        run_epoch(&mut s, &[2.0, 1.0, 0.5]);
        for l in s.lambda() {
            assert!((l - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn two_task_reference_value() {
        let direct = dwa_weights(&[1.0, 2.0], 2.0);
        let mut s = DwaState::new(2, 2.0).unwrap();
        run_epoch(&mut s, &[1.0, 1.0]);
        run_epoch(&mut s, &[1.0, 2.0]);
        assert_eq!(s.w(), &[1.0, 2.0]);
        for (got, want) in direct.iter().chain(s.lambda()).zip(LAMBDA_K2_T2.iter().cycle()) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
        let weights = current_weights(WeightingScheme::Dwa { temperature: 2.0 }, Some(&s), 2).unwrap();
        assert_eq!(weights, s.lambda());
    }

    #[test]
    fn large_temperature_flattens_weights() {
        for l in dwa_weights(&[1.0, 2.0], 1e6) {
            assert!((l - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn solved_task_gets_neutral_ratio() {
        let mut s = DwaState::new(2, 2.0).unwrap();
        run_epoch(&mut s, &[0.0, 1.0]);
        run_epoch(&mut s, &[0.0, 0.5]);
        assert_eq!(s.w(), &[1.0, 0.5]);
    }

    #[test]
    fn scheme_selection() {
        assert_eq!(current_weights(WeightingScheme::Equal, None, 3).unwrap(), vec![1.0; 3]);
        let fresh = DwaState::new(4, 2.0).unwrap();
        let dwa = WeightingScheme::Dwa { temperature: 2.0 };
        assert_eq!(current_weights(dwa, Some(&fresh), 4).unwrap(), vec![1.0; 4]);
        assert_eq!(current_weights(dwa, None, 4), Err(WeightingError::MissingState));
        assert!(DwaState::new(2, 0.0).is_err());
        assert!(DwaState::new(2, f64::NAN).is_err());
        assert_eq!("dwa:3.5".parse::<WeightingScheme>(), Ok(WeightingScheme::Dwa { temperature: 3.5 }));
        assert_eq!("equal".parse::<WeightingScheme>(), Ok(WeightingScheme::Equal));
        assert!("uncertainty".parse::<WeightingScheme>().is_err());
    }

    fn loss_streams() -> impl Strategy<Value = (usize, Vec<Vec<f64>>)> {
        (1usize..6).prop_flat_map(|k| (Just(k), prop::collection::vec(prop::collection::vec(0.1f64..10.0, k), 2..6)))
    }

    proptest! {
        #[test]
        fn weights_sum_to_task_count((k, epochs) in loss_streams(), t in 0.5f64..10.0) {
            let mut s = DwaState::new(k, t).unwrap();
            for losses in &epochs {
                run_epoch(&mut s, losses);
                let total: f64 = s.lambda().iter().sum();
                prop_assert!((total - k as f64).abs() < 1e-9);
                prop_assert!(s.lambda().iter().all(|l| *l > 0.0));
                prop_assert!(s.w().iter().all(|w| *w > 0.0));
            }
        }

        #[test]
        fn permuting_tasks_permutes_weights((k, epochs) in loss_streams(), shift in 0usize..5) {
            let perm: Vec<usize> = (0..k).map(|i| (i + shift) % k).collect();
            let mut a = DwaState::new(k, 2.0).unwrap();
            let mut b = DwaState::new(k, 2.0).unwrap();
            for losses in &epochs {
                run_epoch(&mut a, losses);
                let permuted: Vec<f64> = perm.iter().map(|&i| losses[i]).collect();
                run_epoch(&mut b, &permuted);
            }
            for (j, &i) in perm.iter().enumerate() {
                // Summation order differs, so allow rounding.
                prop_assert!((b.lambda()[j] - a.lambda()[i]).abs() <= 1e-12 * a.lambda()[i].max(1.0));
            }
        }

        #[test]
        fn common_scaling_leaves_weights_unchanged(
            (k, epochs) in loss_streams(),
            exponent in -8i32..8,
        ) {
            // Power-of-two factors scale exactly, so ratios are bit-identical.
            let c = 2f64.powi(exponent);
            let mut a = DwaState::new(k, 2.0).unwrap();
            let mut b = DwaState::new(k, 2.0).unwrap();
            for losses in &epochs {
                run_epoch(&mut a, losses);
                let scaled: Vec<f64> = losses.iter().map(|l| l * c).collect();
                run_epoch(&mut b, &scaled);
            }
            prop_assert_eq!(a.w(), b.w());
            prop_assert_eq!(a.lambda(), b.lambda());
        }

        #[test]
        fn raising_one_rate_raises_its_weight(
            w in prop::collection::vec(0.1f64..3.0, 2..6),
            bump in 1e-3f64..2.0,
            t in 0.5f64..5.0,
        ) {
            let before = dwa_weights(&w, t);
            let mut raised = w.clone();
            raised[0] += bump;
            let after = dwa_weights(&raised, t);
            prop_assert!(after[0] > before[0]);
        }
    }
}
