use crowdfm_core::bernstein::BasisMatrix;
use crowdfm_core::flow::{bimodal_toy, toy_mode, train_flow, FlowModel, FlowNetConfig, FlowTrainConfig};
use crowdfm_core::guidance::CostConfig;
use crowdfm_core::scene::SceneConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn sampling_keeps_both_modes() {
    let scene = SceneConfig::default();
    let cfg = FlowNetConfig::default();
    let records = bimodal_toy(64, 1.5, &scene, cfg.order, 7);
    let mut model = FlowModel::for_dataset(cfg, &records, 3).unwrap();
    let train = FlowTrainConfig {
        steps: 300,
        seed: 1,
        ..FlowTrainConfig::default()
    };
    let t = std::time::Instant::now();
    train_flow(&mut model, &records, &train, |_, _, _| Ok(())).unwrap();
    eprintln!("train {:.1}s", t.elapsed().as_secs_f64());
    let basis = BasisMatrix::canonical();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let scenario = &records[0].scenario;
    let mut left = 0;
    let mut near = 0;
    let mut total = 0;
    while total < 1000 {
        let c = model
            .sample_candidates(scenario, 10, 5, 0.0, &CostConfig::default(), &basis, &mut rng)
            .unwrap();
        for s in &c {
            left += toy_mode(s) as usize;
            near += ((s.cy.last().unwrap().abs() - 1.5).abs() < 0.5) as usize;
            total += 1;
        }
    }
    let frac = left as f64 / total as f64;
    let near = near as f64 / total as f64;
    eprintln!("left fraction {frac:.3}, near a mode {near:.3}, over {total}");
    assert!((0.25..=0.75).contains(&frac), "left fraction {frac}");
    // samples land on the clusters, not between them
    assert!(near >= 0.8, "only {near} of samples near a mode");
}
