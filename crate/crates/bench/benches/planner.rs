use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use crowdfm_bench::dense_scenario;
use crowdfm_core::bernstein::{eval_trajectory, BasisMatrix, TrajectoryCoeffs};
use crowdfm_core::config::RunConfig;
use crowdfm_core::flow::{FlowModel, Standardization};
use crowdfm_core::guidance::{collision_cost_and_grad, refine_all, Obstacles};
use crowdfm_core::scorer::{generate_candidates, Scorer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn kernels(c: &mut Criterion) {
    let basis = BasisMatrix::canonical();
    let line = TrajectoryCoeffs::line(10, [0.0, 0.0], [4.0, 0.5]);
    c.bench_function("eval_trajectory", |b| {
        b.iter(|| eval_trajectory(black_box(&line), &basis, true).unwrap())
    });

    let cfg = RunConfig::default();
    let scenario = dense_scenario(3);
    let obs = Obstacles::from_scenario(&scenario, true);
    let cost = cfg.refine.cost_config();
    c.bench_function("collision_cost_and_grad", |b| {
        b.iter(|| collision_cost_and_grad(black_box(&line), &basis, &obs, &cost))
    });
}

fn pipeline(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let basis = cfg.basis().unwrap();
    let scenario = dense_scenario(3);
    let flow = FlowModel::new(cfg.flow.clone(), Standardization::identity(cfg.flow.dim()), 0).unwrap();
    let scorer = Scorer::new(cfg.scorer.clone(), cfg.flow.num_candidates, 0).unwrap();
    let gen = cfg.candidate_gen();
    let cost = cfg.refine.cost_config();

    let mut g = c.benchmark_group("plan");
    g.sample_size(20);
    g.bench_function("encode", |b| b.iter(|| flow.encode_context(black_box(&scenario)).unwrap()));
    g.bench_function("sample_k10_steps5", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        b.iter(|| {
            flow.sample_candidates(&scenario, gen.k, gen.steps, gen.lambda, &cost, &basis, &mut rng)
                .unwrap()
        })
    });
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let raw = flow
        .sample_candidates(&scenario, gen.k, gen.steps, gen.lambda, &cost, &basis, &mut rng)
        .unwrap();
    g.bench_function("refine_k10", |b| b.iter(|| refine_all(black_box(&raw), &scenario, &basis, &gen.refine).unwrap()));
    let set = generate_candidates(&flow, &scenario, &gen, &basis, &mut rng).unwrap();
    g.bench_function("score_k10", |b| b.iter(|| scorer.score_candidates(black_box(&set), &scenario).unwrap()));
    g.finish();
}

criterion_group!(benches, kernels, pipeline);
criterion_main!(benches);
