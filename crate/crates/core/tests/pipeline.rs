use suml_core::datagen::View;
use suml_core::mining::Selection;
use suml_core::losses::NegativeSet;
use suml_core::model::{EncoderStack, ModelSpec};
use suml_core::numerics::RealVector;
use suml_core::pipeline::{
    build_corpus, evaluate_fpv, read_metrics, run_ablation_grid, run_experiment, stage2_stacks,
    write_experiment, GridSpec, Method, Schedule, TpvMode,
};
use suml_core::{Error, ExperimentConfig};

fn quick() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.n_fpv_train = 48;
    cfg.data.n_fpv_test = 64;
    cfg.data.n_tpv_train = 96;
    cfg.data.n_tpv_test = 32;
    cfg.train.epochs_stage1 = 2;
    cfg.train.epochs_stage2 = 3;
    cfg
}

#[test]
fn fpv_only_logs_zero_view_terms_and_keeps_tpv() {
    let mut cfg = quick();
    cfg.train.method = Method::FpvOnly;
    let r = run_experiment(&cfg).unwrap();
    assert_eq!(r.metrics.len(), 3);
    for m in &r.metrics {
        assert_eq!((m.loss_t, m.loss_aw, m.loss_m), (0.0, 0.0, 0.0));
        assert_eq!(m.loss_total, m.loss_f);
        assert_eq!(m.stage, 2);
    }
    assert!(r.tpv.same_parameters(&r.stage1.stack));
}

#[test]
fn methods_share_the_stage1_prefix() {
    let mut a = quick();
    a.train.method = Method::FpvOnly;
    let mut b = quick();
    b.train.method = Method::SumL;
    let (ra, rb) = (run_experiment(&a).unwrap(), run_experiment(&b).unwrap());
    assert!(ra.stage1.stack.same_parameters(&rb.stage1.stack));
    assert_eq!(ra.stage1.records, rb.stage1.records);
}

#[test]
fn saturated_gate_selects_nothing() {
    let mut cfg = quick();
    cfg.world.noun_overlap_fraction = 0.0;
    cfg.loss.theta = 1.0;
    let r = run_experiment(&cfg).unwrap();
    for m in &r.metrics {
        assert_eq!(m.selected_pair_fraction, 0.0);
        assert_eq!(m.loss_aw, 0.0);
        assert!(m.loss_m != 0.0);
    }
    cfg.loss.theta = 1.01;
    assert!(run_experiment(&cfg).unwrap_err().to_string().contains("theta"));
}

#[test]
fn written_metrics_parse_and_recombine() {
    let cfg = quick();
    let r = run_experiment(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_experiment(&r, dir.path()).unwrap();
    let back = read_metrics(&dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(back, r.metrics);
    let l = &cfg.loss;
    for m in &back {
        let total = m.loss_f + l.w_t * m.loss_t + l.w_aw * m.loss_aw + l.w_m * m.loss_m;
        assert!((total - m.loss_total).abs() <= 1e-9);
        assert!((0.0..=1.0).contains(&m.selected_pair_fraction));
    }
}

#[test]
fn single_cell_grid_matches_run_experiment() {
    let cfg = quick();
    let grid = GridSpec {
        methods: vec![Method::SumL],
        tpv_modes: vec![TpvMode::Trainable],
        seeds: vec![0],
    };
    let g = run_ablation_grid(&cfg, &grid).unwrap();
    let r = run_experiment(&cfg).unwrap();
    assert_eq!(g.cells.len(), 1);
    assert_eq!(g.cells[0], r.summary);
    assert_eq!(g.rows[0].mean_fpv_acc, r.summary.final_fpv_test_acc);
    assert_eq!(g.rows[0].std_fpv_acc, 0.0);
}

#[test]
fn preset_grids_enumerate_and_reproduce() {
    let cfg = quick();
    let tasks = run_ablation_grid(&cfg, &GridSpec::task_combinations(vec![0, 1])).unwrap();
    let again = run_ablation_grid(&cfg, &GridSpec::task_combinations(vec![0, 1])).unwrap();
    assert_eq!(tasks.rows.len(), 4);
    let means = |g: &suml_core::pipeline::GridResult| g.rows.iter().map(|r| r.mean_fpv_acc).collect::<Vec<_>>();
    assert_eq!(means(&tasks), means(&again));
    let methods: Vec<Method> = tasks.rows.iter().map(|r| r.method).collect();
    assert_eq!(
        methods,
        [Method::FpvOnly, Method::SumLNoMultimodal, Method::SumL, Method::SumLNoWeighting]
    );

    let modes = run_ablation_grid(&cfg, &GridSpec::tpv_encoder_variants(vec![0])).unwrap();
    let modes: Vec<TpvMode> = modes.rows.iter().map(|r| r.tpv_mode).collect();
    assert_eq!(
        modes,
        [TpvMode::Trainable, TpvMode::Frozen, TpvMode::SharedWeights, TpvMode::SameInit]
    );
    assert_eq!(run_ablation_grid(&cfg, &GridSpec::baselines(vec![0])).unwrap().rows.len(), 4);

    let dir = tempfile::tempdir().unwrap();
    tasks.write_summary_csv(&dir.path().join("s.csv")).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("s.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("method,tpv_mode,seed,final_fpv_acc"));
    assert_eq!(lines.count(), 8);
}

#[test]
fn stage2_modes_set_up_stacks() {
    let mut cfg = quick();
    let corpus = build_corpus(&cfg).unwrap();
    let stage1 = suml_core::pipeline::pretrain_tpv(&cfg, &corpus.tpv_train).unwrap();

    cfg.train.tpv_mode = TpvMode::Frozen;
    assert!(stage2_stacks(&cfg, stage1.stack.clone()).tpv().frozen);

    cfg.train.tpv_mode = TpvMode::SharedWeights;
    let shared = stage2_stacks(&cfg, stage1.stack.clone());
    assert!(shared.is_shared());
    assert!(shared.fpv.same_parameters(&stage1.stack));

    cfg.train.tpv_mode = TpvMode::SameInit;
    let same = stage2_stacks(&cfg, stage1.stack.clone());
    assert!(same.fpv.same_parameters(same.tpv()));
    assert!(!same.tpv().same_parameters(&stage1.stack));
}

#[test]
fn every_method_and_option_trains() {
    for method in [
        Method::FpvOnly,
        Method::TypicalCl,
        Method::Triplet,
        Method::SumL,
        Method::SumLNoWeighting,
        Method::SumLNoMultimodal,
    ] {
        let mut cfg = quick();
        cfg.train.method = method;
        let r = run_experiment(&cfg).unwrap();
        assert!(r.metrics.iter().all(|m| m.loss_total.is_finite()), "{}", method.name());
    }
    let mut cfg = quick();
    cfg.train.negative_set_mode = NegativeSet::FullBatch;
    cfg.train.selection = Selection::TopFraction(0.5);
    cfg.train.schedule = Schedule::Step { step: 2, gamma: 0.1 };
    let r = run_experiment(&cfg).unwrap();
    assert!(r.metrics.iter().all(|m| (m.selected_pair_fraction - 0.5).abs() < 0.2));
}

#[test]
fn evaluation_examples() {
    let cfg = quick();
    let corpus = build_corpus(&cfg).unwrap();
    let world = &corpus.world;
    let classes = world.spec.n_classes();
    let mut stack = EncoderStack::init(View::Fpv, &ModelSpec::default(), world.spec.feat_dim, world.spec.text_dim, classes, 5);

    // Perfect logits for one sample: the task head ignores its input.
    let sample = &corpus.fpv_test[..1];
    let head = &mut stack.g.layers[0];
    head.weight = suml_core::numerics::RealMatrix::zeros(head.weight.rows(), head.weight.cols());
    let mut bias = vec![0.0; classes];
    bias[sample[0].action_id] = 5.0;
    head.bias = RealVector::new(bias).unwrap();
    assert_eq!(evaluate_fpv(&stack, sample).unwrap(), 1.0);

    assert!(matches!(evaluate_fpv(&stack, &[]), Err(Error::EmptySet)));

    // Random initialization: chance level over the actions present.
    let mut big = cfg.clone();
    big.data.n_fpv_test = 3000;
    let test = build_corpus(&big).unwrap().fpv_test;
    let fresh = EncoderStack::init(View::Fpv, &ModelSpec::default(), world.spec.feat_dim, world.spec.text_dim, classes, 9);
    let acc = evaluate_fpv(&fresh, &test).unwrap();
    assert_eq!(acc, evaluate_fpv(&fresh, &test).unwrap());
    let p = 1.0 / (world.spec.n_verbs * world.spec.n_nouns) as f64;
    let sd = (p * (1.0 - p) / test.len() as f64).sqrt();
    assert!(acc <= p + 3.0 * sd + 0.03, "acc {acc} vs chance {p}");
}
