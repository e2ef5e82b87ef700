use difflocal_wasm::{combination_view, learning_curve, msd_sweep};

#[test]
fn learning_curve_settles_near_theory() {
    let c = learning_curve(0.01, 5, 0.0, 20000, 1).unwrap();
    assert_eq!(c.blocks().len(), c.msd_db().len());
    assert!(c.blocks().len() <= 402);
    assert!(c.msd_db()[0] > c.steady_db() + 10.0);
    assert!(
        (c.steady_db() - c.theory_db()).abs() < 1.0,
        "{} vs {}",
        c.steady_db(),
        c.theory_db()
    );
}

#[test]
fn sweep_over_local_steps_orders_theory() {
    let s = msd_sweep("local-steps", vec![1.0, 10.0], 0.01, 1, 1.0, 2000, 3).unwrap();
    assert_eq!(s.values(), vec![1.0, 10.0]);
    let t = s.theory_db();
    assert!(t[1] > t[0]);
    assert!(msd_sweep("rho", vec![1.0], 0.01, 1, 1.0, 100, 3).is_err());
}

#[test]
fn combination_view_is_doubly_stochastic_and_respects_pattern() {
    let v = combination_view(0.5, 9, 4).unwrap();
    let k = v.agents();
    let (e, a) = (v.effective(), v.active());
    for r in 0..k {
        let row: f64 = (0..k).map(|c| e[r * k + c]).sum();
        let col: f64 = (0..k).map(|c| e[c * k + r]).sum();
        assert!((row - 1.0).abs() < 1e-12 && (col - 1.0).abs() < 1e-12);
        if a[r] == 0 {
            assert_eq!(e[r * k + r], 1.0);
        }
    }
    let x = v.expected();
    assert!((0..k).all(|r| (0..k).all(|c| (x[r * k + c] - x[c * k + r]).abs() < 1e-15)));
}

#[test]
fn invalid_parameters_are_reported() {
    assert!(learning_curve(-1.0, 1, 0.5, 100, 1).is_err());
    assert!(combination_view(1.5, 1, 0).is_err());
}
