use criterion::{black_box, criterion_group, criterion_main, Criterion};
use csvto::benchmarks::quadrotor::{ObstacleVariant, QuadrotorParams, QuadrotorTask};
use csvto::benchmarks::toy2d::Toy2D;
use csvto::geometry::projection_matrix;
use csvto::problem::eval_constraints;
use csvto::solver::{augment, csvto_step, particle_geometry, SolverConfig};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn quadrotor_setup(n: usize) -> (csvto::ProblemDef, Vec<csvto::AugmentedParticle>) {
    let task = QuadrotorTask::new(QuadrotorParams::default(), ObstacleVariant::None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let problem = task.problem(task.sample_start(&mut rng), 0.0);
    let init = task.initial_particles(&problem, n, &mut rng).unwrap();
    let particles = augment(&problem, &init);
    (problem, particles)
}

fn projection(c: &mut Criterion) {
    let (problem, particles) = quadrotor_setup(1);
    let jacobian = eval_constraints(&problem, &particles[0]).unwrap().jacobian;
    c.bench_function("projection/quadrotor", |b| b.iter(|| projection_matrix(black_box(&jacobian)).unwrap()));

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dense = DMatrix::from_fn(20, 60, |_, _| rng.gen_range(-1.0..1.0));
    c.bench_function("projection/dense_20x60", |b| b.iter(|| projection_matrix(black_box(&dense)).unwrap()));
}

fn geometry(c: &mut Criterion) {
    let (problem, particles) = quadrotor_setup(1);
    c.bench_function("particle_geometry/quadrotor", |b| {
        b.iter(|| particle_geometry(&problem, black_box(&particles[0]), 1e-6).unwrap())
    });
}

fn step(c: &mut Criterion) {
    let (problem, particles) = quadrotor_setup(8);
    let cfg = SolverConfig::quadrotor();
    c.bench_function("csvto_step/quadrotor_8", |b| {
        b.iter(|| csvto_step(black_box(&particles), &problem, &cfg, 1.0).unwrap())
    });

    let toy = Toy2D::default().problem();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let init: Vec<_> = (0..20)
        .map(|_| Toy2D::particle(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)))
        .collect();
    let toy_particles = augment(&toy, &init);
    let toy_cfg = SolverConfig {
        num_particles: 20,
        ..SolverConfig::quadrotor()
    };
    c.bench_function("csvto_step/toy2d_20", |b| {
        b.iter(|| csvto_step(black_box(&toy_particles), &toy, &toy_cfg, 1.0).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = projection, geometry, step
}
criterion_main!(benches);
