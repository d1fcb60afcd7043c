//! Parallel-versus-sequential throughput on the three hot paths: periodic
//! cell homogenization, plate forward solves, and transport-map sampling.
//!
//! Run with `cargo bench` (the default feature set enables the thread
//! pool); the sequential baselines call the `*_seq` execution helpers, so
//! one run shows both sides.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::Rng;

use ttreliab::exec;
use ttreliab::micromech::{solve_rve, PhaseProperties, RveGrid};
use ttreliab::seeds::SeedNode;

fn rve_inputs(n: usize) -> Vec<(f64, f64, f64)> {
    let mut rng = SeedNode::new(11).rng();
    (0..n)
        .map(|_| {
            (
                rng.gen_range(0.4..0.7),
                rng.gen_range(50.0..80.0),
                rng.gen_range(2.0..5.0),
            )
        })
        .collect()
}

fn solve_one(input: &(f64, f64, f64), resolution: usize) -> f64 {
    let grid = RveGrid::disk(resolution, input.0).unwrap();
    let phases = PhaseProperties::with_moduli(input.1, input.2);
    solve_rve(&grid, &phases).unwrap().c_hom[(0, 0)]
}

fn bench_rve_batch(c: &mut Criterion) {
    let inputs = rve_inputs(32);
    let mut group = c.benchmark_group("rve_batch_32_res16");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| exec::map(&inputs, |i| solve_one(i, 16)))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| exec::map_seq(&inputs, |i| solve_one(i, 16)))
    });
    group.finish();
}

fn bench_plate_batch(c: &mut Criterion) {
    use nalgebra::DMatrix;
    use ttreliab::macrofem::{assemble_solve, generate_plate_mesh, LoadCase};
    use ttreliab::micromech::isotropic_stiffness_2d;

    let mesh = generate_plate_mesh(200.0, 100.0, 15.0, 24).unwrap();
    let load = LoadCase::uniaxial(1000.0, 33.0);
    let moduli: Vec<f64> = {
        let mut rng = SeedNode::new(13).rng();
        (0..32).map(|_| rng.gen_range(15_000.0..25_000.0)).collect()
    };
    let solve = |e_eff: f64| {
        let c: DMatrix<f64> = isotropic_stiffness_2d(e_eff, 0.3);
        assemble_solve(&mesh, |_| c.clone(), &load).unwrap().max_von_mises
    };
    let mut group = c.benchmark_group("plate_batch_32_ref24");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| exec::map(&moduli, |&e| solve(e)))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| exec::map_seq(&moduli, |&e| solve(e)))
    });
    group.finish();
}

fn bench_transport_sampling(c: &mut Criterion) {
    use ttreliab::dirt::{BridgingKind, DeepTransport, DirtConfig, SmoothedIndicator, TargetResponse};

    let d = 12usize;
    let model = move |th: &[f64]| {
        let qoi = th.iter().sum::<f64>() / (d as f64).sqrt();
        TargetResponse { log_likelihood: 0.0, qoi }
    };
    let config = DirtConfig {
        bridging: BridgingKind::SmoothedIndicator(SmoothedIndicator {
            threshold: 3.0,
            scale: 3.0,
            gamma_star: 50.0,
            n_levels: 5,
        }),
        seed: 17,
        ..DirtConfig::default()
    };
    let transport = DeepTransport::build(&model, d, &config).unwrap().transport;
    let draw = |t: &DeepTransport, i: usize| {
        let mut rng = SeedNode::new(19).index(i as u64).rng();
        let u: Vec<f64> = (0..d).map(|_| rng.gen::<f64>()).collect();
        let mut theta = vec![0.0; d];
        t.map_from_uniform(&u, &mut theta)
    };
    let mut group = c.benchmark_group("transport_draw_4096_d12");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter_batched(
            || transport.clone(),
            |t| exec::map_range(4096, |i| draw(&t, i)),
            BatchSize::LargeInput,
        )
    });
    group.bench_function("sequential", |b| {
        b.iter_batched(
            || transport.clone(),
            |t| exec::map_range_seq(4096, |i| draw(&t, i)),
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, bench_rve_batch, bench_plate_batch, bench_transport_sampling);
criterion_main!(benches);
