//! Small end-to-end runs through generation, training, checkpoints and the
//! benchmark harness with reduced model widths.

use crowdfm_core::bernstein::BasisMatrix;
use crowdfm_core::config::RunConfig;
use crowdfm_core::eval::{run_benchmark, suite_worlds, PlannerKit, Variant, VariantFactory};
use crowdfm_core::flow::{train_flow, FlowModel, FlowNetConfig, FlowTrainConfig};
use crowdfm_core::guidance::CostConfig;
use crowdfm_core::oracle::generate_records;
use crowdfm_core::scene::{read_dataset, write_dataset};
use crowdfm_core::scorer::{evaluate_scorer, train_scorer, Scorer, ScorerConfig, ScorerTrainConfig};
use crowdfm_core::sim::SimConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_flow() -> FlowNetConfig {
    FlowNetConfig {
        d_model: 16,
        unet_channels: vec![8, 16],
        point_hidden: 8,
        time_dim: 8,
        fusion_layers: 1,
        dyn_layers: 1,
        ..FlowNetConfig::default()
    }
}

fn small_scorer() -> ScorerConfig {
    ScorerConfig {
        d_model: 16,
        trans_layers: 1,
        dyn_layers: 1,
        point_hidden: 8,
        traj_hidden: 8,
        ..ScorerConfig::default()
    }
}

#[test]
fn generate_train_save_and_benchmark() {
    let cfg = RunConfig::default();
    let basis = cfg.basis().unwrap();
    let gen = cfg.gen_config();
    let (flow_recs, stats) = generate_records(5, 12, false, &basis, &gen).unwrap();
    let (scorer_recs, _) = generate_records(5, 6, true, &basis, &gen).unwrap();
    assert_eq!((flow_recs.len(), stats.records), (12, 12));
    assert!(scorer_recs.iter().all(|r| r.expert_waypoints.is_some()));
    assert!(flow_recs
        .iter()
        .all(|f| scorer_recs.iter().all(|s| s.scene_id != f.scene_id)));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("flow.jsonl");
    write_dataset(&flow_recs, &path).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), flow_recs);

    let mut flow = FlowModel::for_dataset(small_flow(), &flow_recs, 2).unwrap();
    let tcfg = FlowTrainConfig {
        steps: 12,
        batch_records: 4,
        ..FlowTrainConfig::default()
    };
    let log = train_flow(&mut flow, &flow_recs, &tcfg, |_, _, _| Ok(())).unwrap();
    assert_eq!(log.len(), 12);

    // a reloaded checkpoint samples bit for bit the same
    let ckpt = dir.path().join("flow.ckpt");
    flow.save(&ckpt).unwrap();
    let again = FlowModel::load(&ckpt).unwrap();
    let scenario = &flow_recs[0].scenario;
    let sample = |m: &FlowModel| {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        m.sample_candidates(scenario, 4, 3, 5.0, &CostConfig::default(), &basis, &mut rng)
            .unwrap()
    };
    assert_eq!(sample(&flow), sample(&again));

    let mut gen_cfg = cfg.candidate_gen();
    gen_cfg.k = 4;
    gen_cfg.steps = 3;
    gen_cfg.refine.max_iters = 20;
    let mut scorer = Scorer::new(small_scorer(), 4, 1).unwrap();
    let scfg = ScorerTrainConfig {
        steps: 3,
        batch_records: 2,
        ..ScorerTrainConfig::default()
    };
    let steps = train_scorer(&mut scorer, &flow, &scorer_recs[..4], &gen_cfg, &basis, &scfg, |_, _| Ok(())).unwrap();
    assert!(steps.iter().all(|s| s.loss.is_finite()));
    let ev = evaluate_scorer(&scorer, &flow, &scorer_recs[4..], &gen_cfg, &basis, 0).unwrap();
    assert!((0.0..=1.0).contains(&ev.accuracy) && ev.chance > 0.0);

    let kit = PlannerKit {
        flow: &flow,
        scorer: Some(&scorer),
        gen: gen_cfg,
        weights: cfg.eval.weights,
        basis: &basis,
    };
    let worlds = suite_worlds("mixed", 3, 1).unwrap();
    let sim = SimConfig {
        timeout: 1.0,
        ..cfg.sim_config()
    };
    let fa = VariantFactory {
        kit: &kit,
        variant: Variant::Guided,
    };
    let fb = VariantFactory {
        kit: &kit,
        variant: Variant::RefineScorer,
    };
    let variants = [(Variant::Guided, &fa as _), (Variant::RefineScorer, &fb as _)];
    let a = run_benchmark(&worlds, &variants, 1, 9, &sim, "t").unwrap();
    let b = run_benchmark(&worlds, &variants, 1, 9, &sim, "t").unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.report.episodes.len(), 6);
    assert!(a.latencies.iter().all(|(_, l)| l.is_some_and(|l| l.mean_ms > 0.0)));
}

#[test]
fn default_basis_matches_config() {
    let cfg = RunConfig::default();
    assert_eq!(cfg.basis().unwrap(), BasisMatrix::canonical());
}
