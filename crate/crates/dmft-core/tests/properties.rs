use dmft_core::eos::mean_field_step;
use dmft_core::report::{compare, z_score, CurveTable, Thresholds};
use proptest::prelude::*;

fn table_from(values: &[f64]) -> CurveTable {
    let axis: Vec<f64> = (0..values.len()).map(|i| i as f64 * 0.05).collect();
    let mut t = CurveTable::new("time", axis);
    t.push_ensemble("q", values.to_vec(), values.iter().map(|v| v.abs() + 1e-3).collect()).unwrap();
    t
}

proptest! {
    #[test]
    fn csv_round_trip_is_bit_exact(values in prop::collection::vec(-1e12f64..1e12, 1..40)) {
        let t = table_from(&values);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let back = CurveTable::read_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(back.column("ens_q").unwrap(), values.as_slice());
    }

    #[test]
    fn z_score_is_antisymmetric(a in -1e3f64..1e3, b in -1e3f64..1e3, se in 1e-6f64..10.0) {
        prop_assert_eq!(z_score(a, b, se), -z_score(b, a, se));
    }

    #[test]
    fn shifting_the_ensemble_by_more_than_three_se_fails(values in prop::collection::vec(0.1f64..10.0, 2..20)) {
        let mut theory = CurveTable::new("time", (0..values.len()).map(|i| i as f64).collect());
        theory.push_theory("q", values.clone()).unwrap();
        let mut ens = CurveTable::new("time", (0..values.len()).map(|i| i as f64).collect());
        ens.push_ensemble("q", values.iter().map(|v| v + 1.0).collect(), vec![0.1; values.len()]).unwrap();
        prop_assert!(!compare(&theory, &ens, &Thresholds::default()).unwrap().pass);
    }

    #[test]
    fn interpolating_point_is_fixed(k in 0.1f64..5.0, eta in 0.01f64..0.5, gamma in 0.1f64..5.0) {
        // Δ = 0 stays put and K does not move
        let y = 1.0;
        let (f, k2) = mean_field_step(y, k, y, eta, gamma);
        prop_assert!((f - y).abs() < 1e-12);
        prop_assert!((k2 - k).abs() < 1e-12);
    }
}

#[test]
fn path_round_trip_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("curve.csv");
    let t = table_from(&[1.0, 0.5, 0.25]);
    t.write_path(&path).unwrap();
    let back = CurveTable::read_path(&path).unwrap();
    assert_eq!(back.column("se_q"), t.column("se_q"));
}
