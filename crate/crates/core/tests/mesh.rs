use photherm::apparatus::{compose, mesh_decompose, mesh_perturb};
use photherm::linalg::{amplitude_fidelity, haar_random, unitarity_error};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn decomposition_round_trips(m in 2usize..=10, seed in 0u64..100_000) {
        let u = haar_random(m, seed).unwrap();
        let mesh = mesh_decompose(&u).unwrap();
        prop_assert_eq!(mesh.cells.len(), m * (m - 1) / 2);
        prop_assert!(compose(&mesh).unwrap().max_abs_diff(&u).unwrap() < 1e-9);
    }

    #[test]
    fn perturbed_meshes_stay_unitary(m in 2usize..=8, seed in 0u64..100_000, sd in 0.0f64..0.5) {
        let u = haar_random(m, seed).unwrap();
        let v = mesh_perturb(&mesh_decompose(&u).unwrap(), sd, seed).unwrap();
        prop_assert!(unitarity_error(&v).unwrap() < 1e-10);
        let f = amplitude_fidelity(&u, &v).unwrap();
        prop_assert!(f <= 1.0 + 1e-12 && f > 0.0);
    }
}
