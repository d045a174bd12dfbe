mod common;

use common::{dv, toy};
use nalgebra::DVector;
use pssf_core::barrier::BarrierFunction;
use pssf_core::kfun::ComparisonFunction;
use pssf_core::pssf::{
    check_compatibility, delta_bound, direct_transported_floor, issf_gamma, jacobian_check, make_certificate,
    make_projected_certificate, verify_certificate, BarrierProjection, CertificateStatus, CompatiblePair,
    DeltaTrace, Projection,
};
use pssf_core::scenario::{run_simulation, Scenario, ScenarioConfig};

fn lin(k: f64) -> ComparisonFunction {
    ComparisonFunction::linear(k).unwrap()
}

#[test]
fn toy_pair_is_compatible_and_jacobian_is_exact() {
    let t = toy::build(1.0, 0.1);
    let samples = toy::grid(15);
    let pair = CompatiblePair {
        barrier: &t.barrier,
        projection: &t.projection,
        h_proj: &toy::h_proj,
        sigma_lower: lin(1.0),
        sigma_upper: lin(1.0),
    };
    let rep = check_compatibility(&pair, &samples);
    assert!(rep.passed(), "{rep:?}");
    assert!(rep.worst_lower_slack.abs() < 1e-15 && rep.worst_upper_slack.abs() < 1e-15);
    assert!(jacobian_check(&t.projection, &samples, 1e-6) < 1e-8);
}

#[test]
fn toy_projected_delta_equals_barrier_delta() {
    // h_Π ∘ Π = h, so measuring δ through Π or through h must agree.
    let t = toy::build(1.0, 0.1);
    let traj = toy::rollout(&t, &dv(&[0.3, -0.5]), 2.0, 1e-3);
    let direct = DeltaTrace::along(&traj, &t.barrier, &t.true_sys, &t.nominal, None);
    let projected = toy::projected_delta_bar(&t, &traj);
    let bar_delta = delta_bound(&direct).unwrap();
    assert!((bar_delta - projected).abs() <= 1e-12 * bar_delta);
    assert!(bar_delta > 0.0);
}

#[test]
fn toy_certificate_holds_from_grid() {
    let t = toy::build(1.0, 0.1);
    let mut worst = f64::INFINITY;
    for x0 in toy::grid(11) {
        let traj = toy::rollout(&t, &x0, 3.0, 1e-3);
        let delta_bar = toy::projected_delta_bar(&t, &traj);
        let cert = make_projected_certificate(&lin(t.k), &lin(1.0), &lin(1.0), delta_bar).unwrap();
        let rep = verify_certificate(&traj, &t.barrier, &cert);
        assert!(rep.passed(), "x0 = {x0:?}: {rep:?}");
        worst = worst.min(rep.margin);
    }
    assert!(worst < 0.1, "the toy should come close to its floor, margin {worst}");
}

#[test]
fn scaled_compatible_pair_transports_to_the_same_floor() {
    // h_Π(y) = 2(1 − y) sandwiches h with σ̲ = σ̄ = Linear(2). The projected
    // disturbance doubles, and σ̄⁻¹ halves the inflation back.
    let t = toy::build(1.0, 0.1);
    let h_proj2 = |y: &DVector<f64>| 2.0 * (1.0 - y[0]);
    let pair = CompatiblePair {
        barrier: &t.barrier,
        projection: &t.projection,
        h_proj: &h_proj2,
        sigma_lower: lin(2.0),
        sigma_upper: lin(2.0),
    };
    assert!(check_compatibility(&pair, &toy::grid(9)).passed());

    let traj = toy::rollout(&t, &dv(&[0.0, 0.9]), 3.0, 1e-3);
    let delta_bar = toy::projected_delta_bar(&t, &traj);
    let cert2 = make_projected_certificate(&lin(t.k), &lin(1.0), &lin(2.0), 2.0 * delta_bar).unwrap();
    let cert1 = make_certificate(&lin(t.k), delta_bar).unwrap();
    assert!((cert2.floor - cert1.floor).abs() <= 1e-15);
    let gamma = issf_gamma(&lin(t.k), &lin(1.0)).unwrap();
    let direct = direct_transported_floor(&lin(2.0), &gamma, 2.0 * delta_bar).unwrap();
    assert_eq!(direct, cert2.floor);
    assert!(verify_certificate(&traj, &t.barrier, &cert2).passed());
}

#[test]
fn understated_certificate_is_reported_as_failure() {
    let t = toy::build(1.0, 0.1);
    let traj = toy::rollout(&t, &dv(&[1.0, 0.0]), 3.0, 1e-3);
    let delta_bar = toy::projected_delta_bar(&t, &traj);
    let honest = make_certificate(&lin(t.k), delta_bar).unwrap();
    let understated = make_certificate(&lin(t.k), 0.5 * delta_bar).unwrap();
    assert!(verify_certificate(&traj, &t.barrier, &honest).passed());
    let rep = verify_certificate(&traj, &t.barrier, &understated);
    assert_eq!(rep.status, CertificateStatus::Fail);
    assert!(rep.margin < -1e-3);
}

#[test]
fn barrier_projection_reproduces_benchmark_delta_trace() {
    let mut cfg = ScenarioConfig {
        learning: None,
        ..Default::default()
    };
    cfg.run.duration = 1.0;
    let scenario = Scenario::build(&cfg).unwrap();
    let out = run_simulation(&cfg, None).unwrap();
    let proj = BarrierProjection(&scenario.barrier);
    let traj = &out.no_learning.trajectory;
    for (j, (x, u)) in traj.states.iter().zip(&traj.inputs).enumerate() {
        let zero = DVector::zeros(4);
        let dy = pssf_core::pssf::projected_dynamics(&proj, &scenario.true_sys, x, u, &zero)
            - pssf_core::pssf::projected_dynamics(&proj, &scenario.nominal_sys, x, u, &zero);
        let d = out.no_learning.trace.delta[j];
        assert!((dy[0] - d).abs() <= 1e-12 * d.abs().max(1.0), "sample {j}");
        assert_eq!(proj.map(x)[0], scenario.barrier.value(x));
    }
}
