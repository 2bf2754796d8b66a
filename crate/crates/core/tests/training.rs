mod common;

use std::fs;
use std::path::Path;

use mtan::checkpoint::Checkpoint;
use mtan::config::{TaskKindName, TrainConfig};
use mtan::data::{load_batch, SceneConfig};
use mtan::model::{Mode, Variant};
use mtan::tensor::Tensor;
use mtan::train::{self, resume, Run, TrainError, CHECKPOINT_FILE, LOG_FILE, REPORT_FILE};
use mtan::weighting::WeightingScheme;

fn tiny(dir: &Path) -> TrainConfig {
    TrainConfig {
        widths: vec![3, 4],
        scene: SceneConfig {
            height: 8,
            width: 8,
            ..Default::default()
        },
        n_train: 12,
        n_val: 5,
        batch_size: 2,
        total_steps: 10,
        lr_halve_at: 6,
        dwa_epoch_len: 2,
        eval_every: 5,
        weighting: WeightingScheme::Dwa { temperature: 2.0 },
        out_dir: dir.to_owned(),
        ..TrainConfig::default()
    }
}

fn param_bits(run: &Run) -> Vec<u64> {
    run.model().params().flatten().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn single_step_run_leaves_a_loadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = TrainConfig {
        total_steps: 1,
        lr_halve_at: 1,
        eval_every: 0,
        ..tiny(dir.path())
    };
    let outcome = train::train(config).unwrap();
    let log = fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    let rows: Vec<&str> = log.lines().skip(1).collect();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].starts_with("train,1,"));
    let ckpt = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    let restored = Run::from_checkpoint(&ckpt).unwrap();
    assert_eq!(restored.step_count(), 1);
    assert!(restored.is_finished());
    assert_eq!(param_bits(&restored), param_bits(&outcome.run));
    assert!(dir.path().join(REPORT_FILE).exists());
}

#[test]
fn stan_matches_single_task_mtan() {
    let dir = tempfile::tempdir().unwrap();
    let base = TrainConfig {
        tasks: vec![TaskKindName::Depth],
        weighting: WeightingScheme::Equal,
        ..tiny(dir.path())
    };
    let mut stan = Run::new(TrainConfig {
        variant: Variant::Stan,
        ..base.clone()
    })
    .unwrap();
    let mut mtan = Run::new(TrainConfig {
        variant: Variant::Mtan,
        ..base
    })
    .unwrap();
    for _ in 0..4 {
        let (a, b) = (stan.step().unwrap(), mtan.step().unwrap());
        assert_eq!(a.losses, b.losses);
    }
    assert_eq!(param_bits(&stan), param_bits(&mtan));
}

#[test]
fn evaluation_is_repeatable_and_matches_a_brute_force_pass() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = Run::new(tiny(dir.path())).unwrap();
    for _ in 0..3 {
        run.step().unwrap();
    }
    let first = run.evaluate().unwrap();
    let second = run.evaluate().unwrap();
    assert!(common::report_matches(&first, &second.values()));

    // All five validation samples in one batch, scored by the oracle.
    let indices: Vec<u64> = run.split().val.clone().collect();
    assert_eq!(indices.len(), 5);
    let batch = load_batch(&run.config().scene, &indices, run.specs()).unwrap();
    let mut session = run.model().session(Mode::Eval);
    let out = session.forward(&batch.input).unwrap();
    let preds: Vec<Tensor> = out.predictions.iter().map(|v| session.tape().value(*v).clone()).collect();
    let oracle = common::brute_report(&preds, &batch.labels, run.specs());
    for (got, want) in first.values().iter().zip(&oracle) {
        let (got, want) = (got.unwrap(), want.unwrap());
        assert!((got - want).abs() <= 1e-12 * (1.0 + want.abs()), "{got} vs {want}");
    }
}

#[test]
fn lr_is_halved_from_the_configured_step() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = Run::new(tiny(dir.path())).unwrap();
    for step in 1..=8 {
        let record = run.step().unwrap();
        let want = if step >= 6 { 0.0005 } else { 0.001 };
        assert_eq!(record.lr, want, "step {step}");
    }
}

#[test]
fn save_load_continue_equals_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let mut straight = Run::new(tiny(dir.path())).unwrap();
    let mut interrupted = Run::new(tiny(dir.path())).unwrap();
    for _ in 0..5 {
        straight.step().unwrap();
        interrupted.step().unwrap();
    }
    let bytes = interrupted.checkpoint().encode().unwrap();
    let mut resumed = Run::from_checkpoint(&Checkpoint::decode(&bytes).unwrap()).unwrap();
    for _ in 0..5 {
        let (a, b) = (straight.step().unwrap(), resumed.step().unwrap());
        assert_eq!(a, b);
    }
    assert_eq!(param_bits(&straight), param_bits(&resumed));
}

#[test]
fn resumed_log_matches_an_uninterrupted_log() {
    let full = tempfile::tempdir().unwrap();
    train::train(tiny(full.path())).unwrap();
    let want = fs::read_to_string(full.path().join(LOG_FILE)).unwrap();

    // Crash after step 7: the checkpoint is from step 5, the log runs past it.
    let crashed = tempfile::tempdir().unwrap();
    let mut run = Run::new(tiny(crashed.path())).unwrap();
    for _ in 0..5 {
        run.step().unwrap();
    }
    let ckpt_path = crashed.path().join(CHECKPOINT_FILE);
    run.checkpoint().save(&ckpt_path).unwrap();
    let partial: Vec<&str> = want.lines().take(1 + 7 + 1).collect();
    fs::write(crashed.path().join(LOG_FILE), partial.join("\n") + "\n").unwrap();

    let outcome = resume(&ckpt_path, Some(crashed.path().to_owned())).unwrap();
    assert_eq!(outcome.run.step_count(), 10);
    let got = fs::read_to_string(crashed.path().join(LOG_FILE)).unwrap();
    assert_eq!(got, want);
}

#[test]
fn identical_runs_write_identical_logs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    train::train(tiny(a.path())).unwrap();
    train::train(tiny(b.path())).unwrap();
    let read = |d: &Path| fs::read(d.join(LOG_FILE)).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn divergence_aborts_and_keeps_the_last_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = TrainConfig {
        lr: 1e300,
        eval_every: 1,
        total_steps: 50,
        ..tiny(dir.path())
    };
    match train::train(config) {
        Err(TrainError::NonFiniteLoss { step, value, checkpoint }) => {
            assert!(!value.is_finite());
            assert!(step >= 2);
            let path = checkpoint.expect("a checkpoint was written before the failure");
            let run = Run::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
            assert_eq!(run.step_count(), step - 1);
        }
        other => panic!("expected a non-finite loss, got {other:?}"),
    }
}
