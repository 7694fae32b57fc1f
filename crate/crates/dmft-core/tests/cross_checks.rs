use dmft_core::activation::Activation;
use dmft_core::eos::{discrete_blocks, iterate_mean_field, variance_discrete, variance_reduced, EosConfig};
use dmft_core::finite_net::{Dataset, LossReduction};
use dmft_core::grid::TimeGrid;
use dmft_core::report::{compare, CurveTable, Thresholds};
use dmft_core::saddle::{solve_saddle, SaddleConfig};
use dmft_core::two_layer::linear_saddle;
use dmft_core::whitened::{online_map, WhitenedTheory};

#[test]
fn sampled_linear_saddle_matches_the_exact_trajectory() {
    let grid = TimeGrid::gradient_flow(0.1, 15).unwrap();
    let cfg = SaddleConfig {
        hidden_layers: 1,
        gamma: 1.0,
        activation: Activation::Linear,
        reduction: LossReduction::Sum,
        mc_samples: 40_000,
        damping: 0.4,
        tol: 1e-4,
        max_iters: 10,
        seed: 5,
    };
    let ds = Dataset::single_point(4, 1.0, None).unwrap();
    let sampled = solve_saddle(&cfg, &ds, &grid).unwrap();
    let exact = linear_saddle(1.0, 1.0, &grid);
    for (t, want) in exact.errors.iter().enumerate() {
        let got = sampled.order.errors[(0, t)];
        assert!((got - want).abs() < 0.02, "t = {t}: {got} vs {want}");
    }
}

#[test]
fn online_and_offline_share_one_curve() {
    let grid = TimeGrid::gradient_flow(0.05, 30).unwrap();
    let theory = WhitenedTheory::new(0.5, 1.0, &grid).unwrap();
    for d in [4, 16] {
        let online = online_map(&theory, d, 128).unwrap();
        let offline = theory.expected_loss(d, 128).unwrap();
        assert_eq!(online.total, offline.total);
    }
}

#[test]
fn eos_solvers_agree_below_threshold() {
    let traj = iterate_mean_field(&EosConfig::new(0.2, 1.0, 1.0, 20)).unwrap();
    let blocks = discrete_blocks(&traj).unwrap();
    let dense = variance_discrete(&blocks, &traj).unwrap();
    let reduced = variance_reduced(&blocks, &traj).unwrap();
    for (a, b) in dense.kernel.iter().zip(&reduced.kernel) {
        assert!((a - b).abs() <= 1e-6 * (1.0 + a.abs()), "{a} vs {b}");
    }
}

#[test]
fn theory_curve_survives_csv_and_compares_to_itself() {
    let grid = TimeGrid::gradient_flow(0.05, 21).unwrap();
    let loss = WhitenedTheory::new(2.0, 1.0, &grid).unwrap().expected_loss(8, 256).unwrap().total;

    let mut theory = CurveTable::new("time", grid.times());
    theory.push_theory("loss", loss.clone()).unwrap();
    let mut ens = CurveTable::new("time", grid.times());
    ens.push_ensemble("loss", loss.clone(), vec![1e-3; loss.len()]).unwrap();

    let mut buf = Vec::new();
    theory.write_csv(&mut buf).unwrap();
    let back = CurveTable::read_csv(buf.as_slice()).unwrap();
    assert_eq!(back.column("theory_loss").unwrap(), loss.as_slice());

    let cmp = compare(&back, &ens, &Thresholds::default()).unwrap();
    assert!(cmp.pass);
    assert_eq!(cmp.get("loss").unwrap().max_abs_z, 0.0);
}
