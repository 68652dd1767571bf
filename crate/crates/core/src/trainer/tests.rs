use super::*;
use crate::data::synthetic::{toy12, toy8, PlantedPartition};
use crate::graph::fixtures;

fn small(variant: Variant) -> RunConfig {
    RunConfig {
        variant,
        widths: vec![8, 6],
        phi_w_hidden: 4,
        batch_size: 4,
        pretrain_iters: 6,
        meta_iters: 6,
        eval_every: 3,
        seed: 11,
        ..RunConfig::default()
    }
}

fn max_diff(a: &GilParameters, b: &GilParameters) -> f64 {
    a.blocks()
        .iter()
        .zip(b.blocks())
        .map(|(x, y)| x.max_abs_diff(y))
        .fold(0.0, f64::max)
}

#[test]
fn config_round_trips_through_toml() {
    let mut cfg = small(Variant::GcnJointTrainVal);
    cfg.d_p_override = Some(4);
    cfg.meta_grad_mode = MetaGradMode::Full;
    let text = cfg.to_toml();
    assert!(text.contains("variant = \"gcn_joint_train_val\""));
    assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
}

#[test]
fn config_rejects_unknown_keys_and_bad_values() {
    assert!(RunConfig::from_toml("learning_rate = 0.1").is_err());
    assert!(RunConfig::from_toml("inner_steps = 6").is_err());
    assert!(RunConfig::from_toml("dropout = 1.0").is_err());
    assert!(RunConfig::from_toml("widths = []").is_err());
    let err = "gcn".parse::<Variant>().unwrap_err().to_string();
    assert!(err.contains("gcn_train_only") && err.contains("max_pool"));
    for v in Variant::ALL {
        assert_eq!(v.name().parse::<Variant>().unwrap(), v);
    }
}

#[test]
fn variants_map_to_architectures() {
    use crate::model::{Encoder, Pooling, Weighting};
    let arch = |v| small(v).architecture(10, 3, 4);
    assert_eq!(arch(Variant::Full).readout, Readout::Relation(Weighting::Reachability));
    assert_eq!(arch(Variant::FeFr).readout, Readout::Relation(Weighting::Uniform));
    assert_eq!(arch(Variant::RawFeaturesOnly).encoder, Encoder::Raw);
    assert_eq!(arch(Variant::GcnTrainOnly).readout, Readout::Linear);
    let widths = |v| match arch(v).encoder {
        Encoder::Chebyshev { widths, .. } => widths,
        Encoder::Raw => unreachable!(),
    };
    assert_eq!(widths(Variant::Conv1), vec![8]);
    assert_eq!(widths(Variant::Conv3), vec![8, 6, 6]);
    assert!(matches!(
        arch(Variant::MaxPool).encoder,
        Encoder::Chebyshev { pooling: Pooling::Max, .. }
    ));
}

#[test]
fn sampler_covers_every_node_each_epoch() {
    let ids: Vec<usize> = (100..110).collect();
    let mut s = EpochSampler::new(&ids, 5);
    for _ in 0..4 {
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_batch(4)).collect();
        seen.sort_unstable();
        assert_eq!(seen, ids);
    }
    let mut r = sampler::rng(0);
    assert_eq!(sample_with_replacement(&[1, 2], 5, &mut r), vec![1, 2]);
    let draw = sample_with_replacement(&ids, 6, &mut r);
    assert_eq!(draw.len(), 6);
    assert!(draw.iter().all(|d| ids.contains(d)));
}

#[test]
fn zero_step_sizes_leave_parameters_unchanged() {
    let bundle = toy12();
    let cfg = RunConfig {
        alpha: 0.0,
        beta: 0.0,
        ..small(Variant::Full)
    };
    let exp = Experiment::new(&bundle, cfg).unwrap();
    let p = exp.init_params();
    let (adapted, loss) = exp.inner_update(&p, &bundle.split.train, 0, Phase::Inner).unwrap();
    assert!(loss > 0.0);
    assert_eq!(adapted, p);
    let step = exp.meta_step(&p, &bundle.split.train, &bundle.split.val, 0).unwrap();
    assert_eq!(step.params, p);
}

#[test]
fn meta_step_without_inner_update_is_a_validation_step() {
    let bundle = toy12();
    for mode in [MetaGradMode::FirstOrder, MetaGradMode::Full] {
        let cfg = RunConfig {
            alpha: 0.0,
            beta: 0.1,
            meta_grad_mode: mode,
            ..small(Variant::Full)
        };
        let exp = Experiment::new(&bundle, cfg).unwrap();
        let p = exp.init_params();
        let val = &bundle.split.val;
        let step = exp.meta_step(&p, &bundle.split.train, val, 3).unwrap();
        let (_, g) = exp
            .loss_and_grad(&p, val, true, exp.train_mode(3, Phase::Meta, 0))
            .unwrap();
        let plain = p.sgd_step(&g, 0.1);
        assert!(max_diff(&step.params, &plain) < 1e-10, "{mode:?}");
    }
}

#[test]
fn second_order_term_scales_with_alpha() {
    let bundle = toy8();
    let gap = |alpha: f64| {
        let grads = |mode| {
            let cfg = RunConfig {
                alpha,
                dropout: 0.0,
                meta_grad_mode: mode,
                ..small(Variant::Full)
            };
            let exp = Experiment::new(&bundle, cfg).unwrap();
            let p = exp.init_params();
            exp.meta_gradient(&p, &bundle.split.train, &bundle.split.val, 0)
                .unwrap()
                .2
        };
        let a = grads(MetaGradMode::FirstOrder);
        let b = grads(MetaGradMode::Full);
        a.iter().zip(&b).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f64::max)
    };
    let (big, tiny) = (gap(1e-2), gap(1e-3));
    assert!(big > 0.0);
    // The gap is linear in α to leading order.
    assert!((big / tiny - 10.0).abs() < 1.0, "{big} {tiny}");
}

#[test]
fn two_inner_steps_compose() {
    let bundle = toy12();
    let one = Experiment::new(&bundle, RunConfig { alpha: 0.05, ..small(Variant::Full) }).unwrap();
    let two = Experiment::new(
        &bundle,
        RunConfig {
            alpha: 0.05,
            inner_steps: 2,
            ..small(Variant::Full)
        },
    )
    .unwrap();
    let p = one.init_params();
    let q = &bundle.split.train;
    let (direct, _) = two.inner_update(&p, q, 4, Phase::Inner).unwrap();
    let (_, g0) = one.loss_and_grad(&p, q, true, one.train_mode(4, Phase::Inner, 0)).unwrap();
    let mid = p.sgd_step(&g0, 0.05);
    let (_, g1) = one.loss_and_grad(&mid, q, true, one.train_mode(4, Phase::Inner, 1)).unwrap();
    assert_eq!(direct, mid.sgd_step(&g1, 0.05));
}

#[test]
fn uniform_model_starts_near_chance() {
    let bundle = toy12();
    let exp = Experiment::new(&bundle, small(Variant::FeFr)).unwrap();
    let p = exp.init_params();
    let e = exp.evaluate(&p, &bundle.split.test, false).unwrap();
    assert!(e.loss >= 0.0);
    assert!((e.loss - 3f64.ln()).abs() < 0.5, "{}", e.loss);
}

#[test]
fn runs_are_deterministic_for_every_variant() {
    let bundle = toy12();
    for v in Variant::ALL {
        let exp = Experiment::new(&bundle, small(v)).unwrap();
        let a = exp.run().unwrap();
        let b = exp.run().unwrap();
        assert_eq!(a.params, b.params, "{v}");
        assert_eq!(a.test.predictions, b.test.predictions);
        assert_eq!(a.curve.len(), 3);
        assert!(a.test.accuracy.is_finite());
        assert!(a.records.iter().all(|r| r.loss.is_finite()));
    }
}

#[test]
fn joint_variant_supervises_validation_nodes() {
    let bundle = toy12();
    let exp = Experiment::new(&bundle, small(Variant::GcnJointTrainVal)).unwrap();
    assert_eq!(exp.supervised().len(), 6 + 3);
    let exp = Experiment::new(&bundle, small(Variant::GcnTrainOnly)).unwrap();
    assert_eq!(exp.supervised(), &bundle.split.train[..]);
}

#[test]
fn resolved_config_records_the_horizon() {
    let bundle = toy12();
    let exp = Experiment::new(&bundle, small(Variant::Full)).unwrap();
    let dp = exp.config().d_p_override.unwrap();
    assert_eq!(dp, estimate_dp(&bundle.graph, 100, 11));
    assert_eq!(exp.table().unwrap().steps(), dp);
}

#[test]
fn separable_graph_is_learned_exactly() {
    let bundle = PlantedPartition {
        p_in: 0.3,
        p_out: 0.0,
        signal: 0.9,
        noise: 0.02,
        train_per_class: 3,
        val: 12,
        ..PlantedPartition::new(60, 3, 21)
    }
    .generate()
    .unwrap();
    let cfg = RunConfig {
        widths: vec![16, 16],
        batch_size: 9,
        pretrain_iters: 60,
        meta_iters: 40,
        alpha: 0.01,
        beta: 0.01,
        eval_every: 20,
        ..RunConfig::default()
    };
    let out = Experiment::new(&bundle, cfg).unwrap().run().unwrap();
    assert_eq!(out.test.accuracy, 1.0, "{:?}", out.test.per_class);
}

#[test]
fn buckets_accumulate_by_distance() {
    let g = fixtures::path(6);
    let b = step_buckets(&g, &[0], &[1, 2, 3, 5], &[true, false, true, true]);
    let rows: Vec<_> = b.iter().map(|s| (s.steps, s.count, s.correct)).collect();
    assert_eq!(
        rows,
        vec![
            (Some(1), 1, 1),
            (Some(2), 1, 0),
            (Some(3), 1, 1),
            (Some(4), 0, 0),
            (Some(5), 1, 1)
        ]
    );
    assert_eq!(b[1].cumulative_accuracy(), 0.5);
    assert_eq!(b[4].cumulative_accuracy(), 0.75);

    let g = fixtures::unlabeled(4, &[(0, 1)]);
    let b = step_buckets(&g, &[0], &[1, 3], &[true, false]);
    assert_eq!(b[0].steps, Some(1));
    assert_eq!(b.len(), 2);
    assert_eq!(b.last().unwrap().steps, None);
    assert_eq!(b.last().unwrap().cumulative_count, 2);
}

#[test]
fn divergence_is_reported_with_context() {
    let bundle = toy12();
    let cfg = RunConfig {
        lr_pretrain: 1e200,
        momentum: 0.0,
        ..small(Variant::GcnTrainOnly)
    };
    let err = Experiment::new(&bundle, cfg).unwrap().run().unwrap_err();
    assert!(err.is_numeric(), "{err}");
}
