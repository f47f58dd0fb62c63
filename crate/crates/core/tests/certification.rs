use photherm::apparatus::{Apparatus, DetectionModel, SourceModel};
use photherm::certify::{certify, certify_run, CertifyOptions};
use photherm::hamiltonian::HamiltonianSpec;
use photherm::{Distinguishability, Execution, ModeOccupation};
use proptest::prelude::*;

fn input() -> ModeOccupation {
    ModeOccupation::new(vec![1, 1, 1, 0]).unwrap()
}

fn lossy_apparatus(jitter: f64) -> Apparatus {
    Apparatus {
        source: SourceModel::at_pump_power(5.0, 0.425),
        detection: DetectionModel::uniform(4, 0.2).unwrap(),
        mesh_jitter: jitter,
    }
}

#[test]
fn convergence_trace_is_consistent() {
    let opts = CertifyOptions { shots: 40_000, batches: 8, seed: 2, ..Default::default() };
    let run =
        certify_run(&HamiltonianSpec::hopping(4), 1.0, &input(), &Distinguishability::Distinguishable, &opts, None)
            .unwrap();
    assert_eq!(run.convergence.len(), 8);
    let last = run.convergence.last().unwrap();
    assert_eq!(last.p1, run.result.p1);
    assert_eq!(last.f_lower, run.result.f_lower);
    assert!((last.inv_sqrt_t - 1.0 / 40_000f64.sqrt()).abs() < 1e-15);
    assert!(run.convergence.windows(2).all(|w| w[1].inv_sqrt_t < w[0].inv_sqrt_t && w[1].records1 > w[0].records1));
}

#[test]
fn apparatus_runs_are_reproducible_and_policy_free() {
    let app = lossy_apparatus(0.05);
    let spec = HamiltonianSpec::hopping(4);
    let model = Distinguishability::from_overlap(&input(), 0.9).unwrap();
    let seq = CertifyOptions { shots: 30_000, batches: 3, seed: 8, exec: Execution::Sequential, ..Default::default() };
    let par = CertifyOptions { exec: Execution::Parallel, ..seq.clone() };
    let a = certify(&spec, 1.0, &input(), &model, &seq, Some(&app)).unwrap();
    let b = certify(&spec, 1.0, &input(), &model, &par, Some(&app)).unwrap();
    assert_eq!(a, b);
    assert!(a.k1 < 30_000, "loss must cost records");
}

#[test]
fn noise_lowers_the_bound() {
    let spec = HamiltonianSpec::hopping(4);
    let model = Distinguishability::Indistinguishable;
    let opts = CertifyOptions { shots: 60_000, batches: 4, seed: 1, ..Default::default() };
    let clean = certify(&spec, 1.0, &input(), &model, &opts, Some(&lossy_apparatus(0.0))).unwrap();
    let noisy = certify(&spec, 1.0, &input(), &model, &opts, Some(&lossy_apparatus(0.15))).unwrap();
    assert!(noisy.f_lower < clean.f_lower, "{} vs {}", noisy.f_lower, clean.f_lower);
    assert!(noisy.p2 > clean.p2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn bound_never_exceeds_revival_estimate(t in 0.0f64..3.0, q in 0.0f64..=1.0, seed in 0u64..1000) {
        let model = Distinguishability::from_overlap(&input(), q).unwrap();
        let opts = CertifyOptions { shots: 5_000, seed, ..Default::default() };
        let r = certify(&HamiltonianSpec::hopping(4), t, &input(), &model, &opts, None).unwrap();
        prop_assert!(r.f_lower <= r.p1);
        prop_assert!((0.0..=1.0).contains(&r.p2));
        let w = r.witness_threshold.unwrap();
        prop_assert!(w > 0.0 && w <= 1.0 + 1e-12);
        prop_assert_eq!(r.entangled, Some(r.f_lower > w));
    }
}
