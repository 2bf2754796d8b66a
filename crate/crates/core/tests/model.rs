use mtan::model::{attention_module, build_model, Group, Mode, ModelConfig, MtanModel, Resample, Variant, BN_EPS};
use mtan::tasks::{task_losses, LabelMap, TaskSpec};
use mtan::tensor::kernels;
use mtan::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn seg() -> TaskSpec {
    TaskSpec::segmentation(5)
}

fn config(variant: Variant, widths: &[usize], tasks: Vec<TaskSpec>) -> ModelConfig {
    ModelConfig {
        variant,
        widths: widths.to_vec(),
        input_channels: 3,
        tasks,
    }
}

fn three_tasks() -> Vec<TaskSpec> {
    vec![seg(), TaskSpec::depth(), TaskSpec::normals()]
}

fn input(b: usize, h: usize, seed: u64) -> Tensor {
    Tensor::uniform(vec![b, 3, h, h], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn total(variant: Variant, tasks: Vec<TaskSpec>) -> usize {
    build_model(&config(variant, &[8, 16], tasks), 0).unwrap().param_count().total
}

// Closed-form counts: conv = Cout*Cin*k*k + Cout, BN = 2*C, with widths [8, 16]
// and 3 input channels. Backbone 10872, attention tower 6872, dense tower
// 15816, heads 45 (5 classes), 9 (depth) and 27 (normals).
#[test]
fn parameter_counts_match_closed_form() {
    assert_eq!(total(Variant::Mtan, vec![seg(), TaskSpec::depth()]), 24670);
    assert_eq!(total(Variant::Mtan, three_tasks()), 31569);
    assert_eq!(total(Variant::Split, vec![seg(), TaskSpec::depth()]), 10926);
    assert_eq!(total(Variant::Split, three_tasks()), 10953);
    assert_eq!(total(Variant::Dense, vec![seg(), TaskSpec::depth()]), 42558);
    assert_eq!(total(Variant::Dense, three_tasks()), 58401);
    assert_eq!(total(Variant::Stan, vec![seg()]), 17789);
    assert_eq!(total(Variant::Stan, vec![TaskSpec::depth()]), 17753);
    assert_eq!(total(Variant::Stan, vec![TaskSpec::normals()]), 17771);

    let count = build_model(&config(Variant::Mtan, &[8, 16], three_tasks()), 0).unwrap().param_count();
    assert_eq!(count.backbone, 10872);
    assert_eq!(count.towers, vec![6872; 3]);
    assert_eq!(count.heads, vec![45, 9, 27]);
    assert_eq!(count.backbone + count.towers.iter().sum::<usize>() + count.heads.iter().sum::<usize>(), count.total);
}

#[test]
fn each_task_adds_one_tower_and_head() {
    let one = total(Variant::Mtan, vec![seg()]);
    let two = total(Variant::Mtan, vec![seg(), TaskSpec::depth()]);
    let three = total(Variant::Mtan, three_tasks());
    assert_eq!(two - one, 6872 + 9);
    assert_eq!(three - two, 6872 + 27);
}

#[test]
fn variant_ordering() {
    let mtan = total(Variant::Mtan, three_tasks());
    let split = total(Variant::Split, three_tasks());
    let stans: usize = three_tasks().into_iter().map(|t| total(Variant::Stan, vec![t])).sum();
    assert!(split < mtan && mtan < stans, "{split} {mtan} {stans}");
    assert!(mtan < total(Variant::Dense, three_tasks()));
}

#[test]
fn stan_requires_one_task() {
    assert!(build_model(&config(Variant::Stan, &[4], vec![seg(), TaskSpec::depth()]), 0).is_err());
    let stan = build_model(&config(Variant::Stan, &[4, 6], vec![seg()]), 0).unwrap();
    assert_eq!(stan.towers().len(), 1);
    assert!(build_model(&config(Variant::Mtan, &[], vec![seg()]), 0).is_err());
    assert!(build_model(&config(Variant::Mtan, &[4, 0], vec![seg()]), 0).is_err());
    assert!(build_model(&config(Variant::Mtan, &[4], vec![]), 0).is_err());
}

#[test]
fn towers_span_every_backbone_block() {
    let model = build_model(&config(Variant::Mtan, &[4, 6, 8], three_tasks()), 0).unwrap();
    assert_eq!(model.backbone().blocks.len(), 6);
    for tower in model.towers() {
        assert_eq!(tower.len(), 6);
    }
    let resamples: Vec<_> = (1..6)
        .map(|j| attention_module(&model, 0, j).unwrap().f_weights(model.params()).unwrap().1)
        .collect();
    assert_eq!(
        resamples,
        vec![Resample::Pool, Resample::Pool, Resample::Identity, Resample::Upsample, Resample::Upsample]
    );
    assert!(attention_module(&model, 0, 0).unwrap().f_weights(model.params()).is_none());
}

#[test]
fn output_shapes_and_unit_normals() {
    for variant in [Variant::Mtan, Variant::Split, Variant::Dense] {
        let model = build_model(&config(variant, &[4, 8], three_tasks()), 3).unwrap();
        let mut session = model.session(Mode::Train);
        let out = session.forward(&input(2, 32, 1)).unwrap();
        let tape = session.tape();
        assert_eq!(tape.value(out.predictions[0]).dims(), &[2, 5, 32, 32]);
        assert_eq!(tape.value(out.predictions[1]).dims(), &[2, 1, 32, 32]);
        let normals = tape.value(out.predictions[2]);
        assert_eq!(normals.dims(), &[2, 3, 32, 32]);
        let hw = 32 * 32;
        for b in 0..2 {
            for p in 0..hw {
                let n: f64 = (0..3).map(|c| normals.data()[(b * 3 + c) * hw + p].powi(2)).sum();
                assert!((n.sqrt() - 1.0).abs() < 1e-12, "{variant} b{b} p{p}: {n}");
            }
        }
        // Log-probabilities exponentiate to a distribution.
        let lp = tape.value(out.predictions[0]);
        let s: f64 = (0..5).map(|c| lp.data()[c * hw].exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn bad_inputs_are_rejected() {
    let model = build_model(&config(Variant::Mtan, &[4, 8], vec![seg()]), 0).unwrap();
    assert!(model.session(Mode::Eval).forward(&input(1, 6, 0)).is_err());
    let two_channel = Tensor::zeros(vec![1, 2, 8, 8]).unwrap();
    assert!(model.session(Mode::Eval).forward(&two_channel).is_err());
}

fn conv_bn(x: &Tensor, w: &mtan::model::ConvBnWeights, padding: usize) -> Tensor {
    let y = kernels::conv2d(x, &w.weight, &w.bias, 1, padding).unwrap();
    kernels::batch_norm_train(&y, &w.gamma, &w.beta, BN_EPS).unwrap().0.output
}

/// Recompute the first two attention modules of task 0 directly from the
/// kernels and compare with the tape.
#[test]
fn attention_matches_straight_line_computation() {
    let model = build_model(&config(Variant::Mtan, &[4, 6], vec![seg(), TaskSpec::depth()]), 5).unwrap();
    let mut session = model.session(Mode::Train);
    let out = session.forward(&input(2, 8, 9)).unwrap();
    let tape = session.tape();
    let params = model.params();

    let mut prev: Option<Tensor> = None;
    for j in 0..4 {
        let module = attention_module(&model, 1, j).unwrap();
        let u = tape.value(out.taps[j].u);
        let p = tape.value(out.taps[j].p);
        let g_in = match (&prev, module.f_weights(params)) {
            (None, None) => u.clone(),
            (Some(prev), Some((fw, resample))) => {
                let f = kernels::relu(&conv_bn(prev, &fw, 1));
                let f = match resample {
                    Resample::Pool => kernels::max_pool2(&f).unwrap().0,
                    Resample::Upsample => kernels::upsample_nearest2(&f).unwrap(),
                    Resample::Identity => f,
                };
                kernels::concat_channels(u, &f).unwrap()
            }
            _ => panic!("wiring mismatch at block {j}"),
        };
        let g = kernels::relu(&conv_bn(&g_in, &module.g_weights(params), 0));
        let mask = kernels::sigmoid(&conv_bn(&g, &module.h_weights(params), 0));
        let attended = kernels::mul(&mask, p).unwrap();

        let got = &out.attention[1][j];
        for (a, b) in tape.value(got.mask).data().iter().zip(mask.data()) {
            assert!((a - b).abs() < 1e-12, "mask at block {j}");
        }
        for (a, b) in tape.value(got.attended).data().iter().zip(attended.data()) {
            assert!((a - b).abs() < 1e-12, "attended at block {j}");
        }
        prev = Some(attended);
    }
}

#[test]
fn masks_lie_strictly_inside_the_unit_interval() {
    let model = build_model(&config(Variant::Mtan, &[4, 8], three_tasks()), 2).unwrap();
    let mut session = model.session(Mode::Train);
    let out = session.forward(&input(2, 16, 4)).unwrap();
    for task in &out.attention {
        for module in task {
            assert!(session.tape().value(module.mask).data().iter().all(|&m| m > 0.0 && m < 1.0));
        }
    }
}

fn saturated(logit: f64) -> MtanModel {
    let mut model = build_model(&config(Variant::Mtan, &[4, 8], three_tasks()), 6).unwrap();
    model.force_mask_logits(logit);
    model
}

#[test]
fn saturated_masks_pass_or_block_features() {
    let x = input(2, 16, 8);
    for mode in [Mode::Train, Mode::Eval] {
        let open = saturated(40.0);
        let mut session = open.session(mode);
        let out = session.forward(&x).unwrap();
        let tape = session.tape();
        for task in &out.attention {
            for (j, module) in task.iter().enumerate() {
                assert!(tape.value(module.mask).data().iter().all(|m| (m - 1.0).abs() <= 1e-17));
                let p = tape.value(out.taps[j].p);
                for (a, b) in tape.value(module.attended).data().iter().zip(p.data()) {
                    assert!((a - b).abs() <= 1e-15);
                }
            }
        }

        let closed = saturated(-40.0);
        let mut session = closed.session(mode);
        let out = session.forward(&x).unwrap();
        for task in &out.attention {
            for module in task {
                assert!(session.tape().value(module.attended).data().iter().all(|a| a.abs() < 1e-15));
            }
        }
    }
}

#[test]
fn open_masks_reduce_to_the_split_baseline() {
    let open = saturated(40.0);
    let mut split = build_model(&config(Variant::Split, &[4, 8], three_tasks()), 99).unwrap();
    let copied = split.copy_matching_from(&open);
    assert_eq!(copied, split.params().len());
    let x = input(2, 16, 10);
    for mode in [Mode::Train, Mode::Eval] {
        let mut a = open.session(mode);
        let out_a = a.forward(&x).unwrap();
        let mut b = split.session(mode);
        let out_b = b.forward(&x).unwrap();
        for (pa, pb) in out_a.predictions.iter().zip(&out_b.predictions) {
            for (va, vb) in a.tape().value(*pa).data().iter().zip(b.tape().value(*pb).data()) {
                assert!((va - vb).abs() <= 1e-10, "{mode:?}: {va} vs {vb}");
            }
        }
    }
}

#[test]
fn construction_and_forward_are_deterministic() {
    let cfg = config(Variant::Mtan, &[4, 8], three_tasks());
    let (a, b) = (build_model(&cfg, 17).unwrap(), build_model(&cfg, 17).unwrap());
    assert_eq!(a.params().flatten(), b.params().flatten());
    assert_ne!(a.params().flatten(), build_model(&cfg, 18).unwrap().params().flatten());
    let x = input(2, 16, 3);
    let (mut sa, mut sb) = (a.session(Mode::Train), b.session(Mode::Train));
    let (oa, ob) = (sa.forward(&x).unwrap(), sb.forward(&x).unwrap());
    for (pa, pb) in oa.predictions.iter().zip(&ob.predictions) {
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(sa.tape().value(*pa)), bits(sb.tape().value(*pb)));
    }
}

/// Gradient of task `task`'s loss alone, paired with each parameter's group.
fn single_task_grads(model: &MtanModel, task: usize, seed: u64) -> Vec<(Group, Vec<f64>)> {
    let (b, h) = (2, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = input(b, h, seed);
    let n = b * h * h;
    let ids = (0..n).map(|i| Some((i % 5) as u32)).collect();
    let depth = Tensor::uniform(vec![b, 1, h, h], 1.0, 2.0, &mut rng).unwrap();
    let mut nd = vec![0.0; 3 * n];
    for bi in 0..b {
        for p in 0..h * h {
            nd[(bi * 3 + 2) * h * h + p] = 1.0;
        }
    }
    let labels = vec![
        LabelMap::segmentation(b, h, h, ids).unwrap(),
        LabelMap::depth(depth, vec![true; n]).unwrap(),
        LabelMap::normals(Tensor::new(vec![b, 3, h, h], nd).unwrap(), vec![true; n]).unwrap(),
    ];
    let mut session = model.session(Mode::Train);
    let out = session.forward(&x).unwrap();
    let losses = task_losses(session.tape_mut(), &out.predictions, &labels, &model.config().tasks).unwrap();
    let grads = session.tape().backward(losses[task]).unwrap();
    let per_param = session.param_grads(&grads);
    model
        .params()
        .iter()
        .zip(per_param)
        .map(|((_, group, _), g)| (group, g.into_data()))
        .collect()
}

#[test]
fn task_losses_only_reach_their_own_tower_and_head() {
    for variant in [Variant::Mtan, Variant::Dense, Variant::Split] {
        let model = build_model(&config(variant, &[4, 8], three_tasks()), 21).unwrap();
        for task in 0..3 {
            let grads = single_task_grads(&model, task, 30 + task as u64);
            let mut backbone_norm = 0.0;
            for (group, g) in &grads {
                match group {
                    Group::Tower(k) | Group::Head(k) if *k != task => {
                        assert!(g.iter().all(|&v| v == 0.0), "{variant} task {task} leaks into {group:?}");
                    }
                    Group::Backbone => backbone_norm += g.iter().map(|v| v * v).sum::<f64>(),
                    _ => {}
                }
            }
            assert!(backbone_norm > 0.0, "{variant} task {task} never reaches the backbone");
        }
    }
}
