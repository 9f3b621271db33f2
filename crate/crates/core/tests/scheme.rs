mod common;

use common::*;

#[test]
fn heat_run_is_second_order() {
    let errs: Vec<f64> = [32, 64, 128].iter().map(|&n| heat_run_error(n)).collect();
    let o = orders(&errs);
    eprintln!("heat errors {errs:?}, orders {o:?}");
    assert!(o.iter().all(|&p| p >= 1.8), "orders {o:?}");
}

#[test]
fn stationary_profile_residual_shrinks() {
    let res: Vec<f64> = [100, 200, 400].iter().map(|&n| stationarity_residual(n)).collect();
    let o = orders(&res);
    eprintln!("stationarity residuals {res:?}, orders {o:?}");
    assert!(o.iter().all(|&p| p >= 1.0), "orders {o:?}");
}

#[test]
fn entropy_identities_under_pure_diffusion() {
    let coarse = entropy_run(256);
    let fine = entropy_run(512);
    eprintln!(
        "residuals {} → {}, rates {} / {}, drift {}, clipped {}",
        coarse.residual, fine.residual, coarse.rate, fine.rate, fine.mass_drift, fine.clipped
    );
    assert!(fine.residual <= 0.05);
    assert!(coarse.residual / fine.residual >= 1.8);
    assert!(fine.rate >= 1.9);
    assert!(fine.mass_drift <= 1e-8);
    assert!(fine.clipped <= 1e-10);
}
