use csvto::benchmarks::quadrotor::{ObstacleVariant, QuadrotorParams, QuadrotorTask};
use csvto::benchmarks::toy2d::Toy2D;
use csvto::mpc::{mpc_run, Environment, Planner};
use csvto::mppi::{mppi_step, MppiConfig};
use csvto::problem::{assemble_defects, eval_constraints};
use csvto::solver::{augment, csvto_step, solve, SolverConfig};
use csvto::{AugmentedParticle, ProblemDef, TrajectoryParticle};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Components of `J·v` along the row-space directions of `J` whose Gram
/// eigenvalue survives the truncation.
fn retained_normal_component(j: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    let eig = (j * j.transpose()).symmetric_eigen();
    let jv = j * v;
    let mut sq = 0.0;
    for (i, &s) in eig.eigenvalues.iter().enumerate() {
        if s >= 1e-6 {
            sq += eig.eigenvectors.column(i).dot(&jv).powi(2);
        }
    }
    sq.sqrt()
}

fn check_decomposition(problem: &ProblemDef, particles: &[AugmentedParticle], cfg: &SolverConfig, tol: f64) {
    let out = csvto_step(particles, problem, cfg, 1.0).unwrap();
    for (i, p) in particles.iter().enumerate() {
        let j = eval_constraints(problem, p).unwrap().jacobian;
        let phi = &out.tangent_directions[i];
        let phi_c = &out.feasibility_steps[i];
        let normal = retained_normal_component(&j, phi);
        assert!(normal <= tol * phi.norm().max(1e-12), "normal part {normal} of |φ| {}", phi.norm());
        let overlap = phi_c.dot(phi).abs();
        assert!(overlap <= tol * phi_c.norm() * phi.norm() + 1e-14, "overlap {overlap}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn toy_directions_are_tangent_and_orthogonal_to_feasibility(
        pts in proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..8)
    ) {
        let problem = Toy2D::default().problem();
        let init: Vec<_> = pts.iter().map(|&(x, y)| Toy2D::particle(x, y)).collect();
        let cfg = SolverConfig { num_particles: init.len(), ..SolverConfig::quadrotor() };
        check_decomposition(&problem, &augment(&problem, &init), &cfg, 1e-6);
    }

    #[test]
    fn updates_respect_box_bounds(seed in 0u64..1000) {
        let task = QuadrotorTask::new(QuadrotorParams::default(), ObstacleVariant::None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut problem = task.problem(task.sample_start(&mut rng), 0.0);
        problem.bounds.control_min.fill(-1.0);
        problem.bounds.control_max.fill(1.0);
        let init = task.initial_particles(&problem, 3, &mut rng).unwrap();
        let cfg = SolverConfig { num_particles: 3, ..SolverConfig::quadrotor() };
        let out = solve(&problem, &init, 2, false, &cfg).unwrap();
        for p in &out.particles {
            let u = p.particle.controls();
            prop_assert!(u.iter().all(|v| (-1.0..=1.0).contains(v)));
            let x = p.particle.states();
            for t in 0..x.nrows() {
                prop_assert!(x[(t, 0)].abs() <= 5.0 && x[(t, 1)].abs() <= 5.0);
            }
        }
    }
}

fn quadrotor_setup(variant: ObstacleVariant, seed: u64, n: usize) -> (QuadrotorTask, ProblemDef, Vec<TrajectoryParticle>) {
    let task = QuadrotorTask::new(QuadrotorParams::default(), variant).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let problem = task.problem(task.sample_start(&mut rng), 0.0);
    let init = task.initial_particles(&problem, n, &mut rng).unwrap();
    (task, problem, init)
}

#[test]
fn quadrotor_directions_are_tangent() {
    for variant in [ObstacleVariant::None, ObstacleVariant::Static] {
        let (_, problem, init) = quadrotor_setup(variant, 3, 4);
        let cfg = SolverConfig { num_particles: 4, ..SolverConfig::quadrotor() };
        check_decomposition(&problem, &augment(&problem, &init), &cfg, 1e-6);
    }
}

#[test]
fn solve_is_deterministic() {
    let (_, problem, init) = quadrotor_setup(ObstacleVariant::Static, 5, 4);
    let cfg = SolverConfig { num_particles: 4, ..SolverConfig::quadrotor() };
    let a = solve(&problem, &init, 5, true, &cfg).unwrap();
    let b = solve(&problem, &init, 5, true, &cfg).unwrap();
    assert_eq!(a.particles, b.particles);
    assert_eq!(a.best_index, b.best_index);
    assert_eq!(a.diagnostics, b.diagnostics);
}

#[test]
fn mppi_rollouts_have_zero_defects() {
    let (task, problem, _) = quadrotor_setup(ObstacleVariant::None, 6, 1);
    let mut cfg = MppiConfig {
        num_samples: 16,
        ..MppiConfig::default()
    };
    cfg.noise_std = task.control_std().iter().cloned().collect();
    let nominal = DMatrix::from_fn(task.horizon, 4, |_, c| if c == 0 { task.params.hover_thrust() } else { 0.0 });
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let step = mppi_step(&nominal, &problem, &cfg, &mut rng).unwrap();
    let f = task.dynamics();
    let defects = assemble_defects(&step.best, &problem.initial_state, &f).unwrap();
    assert!(defects.iter().all(|d| *d == 0.0));
    assert!((step.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn reported_violation_is_surface_error_of_executed_state() {
    let (task, mut problem, init) = quadrotor_setup(ObstacleVariant::None, 2, 4);
    let mut env = task.env(problem.initial_state.clone());
    let cfg = SolverConfig {
        num_particles: 4,
        warm_start_iterations: 10,
        ..SolverConfig::quadrotor()
    };
    let trace = mpc_run(&mut env, &mut problem, &cfg, init, 4).unwrap();
    assert!(trace.completed());
    for s in &trace.steps {
        let height = task.surface.value(&nalgebra::Vector2::new(s.state[0], s.state[1]));
        assert_eq!(s.violations[0], (s.state[2] - height).abs());
    }
    assert_eq!(trace.steps.last().unwrap().state, env.state());
}

/// Records the obstacle row of the first planned timestep each call.
struct ObstacleProbe {
    seen: Vec<f64>,
}

impl Planner for ObstacleProbe {
    fn plan(&mut self, problem: &ProblemDef, _step: usize) -> csvto::Result<TrajectoryParticle> {
        let layout = problem.layout;
        // Every planned state sits at the origin.
        let traj = TrajectoryParticle::zeros(layout);
        self.seen.push(problem.inequalities[0].values(&traj)[0]);
        Ok(traj)
    }

    fn advance(&mut self) -> csvto::Result<()> {
        Ok(())
    }
}

#[test]
fn dynamic_obstacle_is_frozen_at_plan_time() {
    let task = QuadrotorTask::new(QuadrotorParams::default(), ObstacleVariant::Dynamic).unwrap();
    let x0 = task.start_state(-4.0, -4.0);
    let mut problem = task.problem(x0.clone(), 0.0);
    let mut env = task.env(x0);
    let mut probe = ObstacleProbe { seen: Vec::new() };
    csvto::mpc::receding_horizon(&mut env, &mut problem, &mut probe, 3);
    let origin = nalgebra::Vector2::zeros();
    for (k, v) in probe.seen.iter().enumerate() {
        let expected = task.cylinder_at(k as f64 * task.params.dt).value_at(&origin);
        assert!((v - expected).abs() < 1e-12, "step {k}: {v} vs {expected}");
    }
    assert_ne!(probe.seen[0], probe.seen[2]);
}

#[test]
fn planner_and_simulator_share_dynamics() {
    let (task, problem, init) = quadrotor_setup(ObstacleVariant::None, 9, 1);
    let mut env = task.env(problem.initial_state.clone());
    for t in 0..task.horizon {
        env.step(&init[0].control(t)).unwrap();
        assert_eq!(env.state(), init[0].state(t));
    }
}
