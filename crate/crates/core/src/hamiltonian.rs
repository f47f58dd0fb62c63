//! Quadratic bosonic Hamiltonians on `m` modes and their propagators `e^{-iHt}`.

use serde::{Deserialize, Serialize};

use crate::error::{dim, domain, Result};
use crate::linalg::{expm, haar_random, logm_unitary, ComplexMatrix, HermitianMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Ring: mode `m` couples back to mode 1.
    #[default]
    Periodic,
    Open,
}

fn default_coupling() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HamiltonianSpec {
    /// Equal nearest-neighbour hopping.
    Hopping {
        m: usize,
        #[serde(default = "default_coupling")]
        coupling: f64,
        #[serde(default)]
        boundary: Boundary,
    },
    /// The Hermitian generator of a Haar-random unitary, so that `e^{-iH} = V`.
    LongRangeFromHaar {
        m: usize,
        seed: u64,
    },
    Explicit {
        matrix: HermitianMatrix,
    },
}

impl HamiltonianSpec {
    pub fn hopping(m: usize) -> Self {
        HamiltonianSpec::Hopping { m, coupling: 1.0, boundary: Boundary::Periodic }
    }

    pub fn modes(&self) -> usize {
        match self {
            HamiltonianSpec::Hopping { m, .. } | HamiltonianSpec::LongRangeFromHaar { m, .. } => *m,
            HamiltonianSpec::Explicit { matrix } => matrix.dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes() < 2 {
            return Err(dim(format!("a Hamiltonian needs at least 2 modes, got {}", self.modes())));
        }
        if let HamiltonianSpec::Hopping { coupling, .. } = self {
            if !coupling.is_finite() {
                return Err(domain(format!("coupling {coupling} is not finite")));
            }
        }
        Ok(())
    }
}

pub fn build(spec: &HamiltonianSpec) -> Result<HermitianMatrix> {
    spec.validate()?;
    match spec {
        HamiltonianSpec::Hopping { m, coupling, boundary } => {
            let m = *m;
            let c = *coupling;
            let linked = |i: usize, j: usize| {
                let d = i.abs_diff(j);
                d == 1 || (*boundary == Boundary::Periodic && m > 2 && d == m - 1)
            };
            let h = ComplexMatrix::from_fn(m, m, |i, j| if linked(i, j) { c.into() } else { 0.0.into() })?;
            HermitianMatrix::new(h)
        }
        HamiltonianSpec::LongRangeFromHaar { m, seed } => logm_unitary(&haar_random(*m, *seed)?),
        HamiltonianSpec::Explicit { matrix } => Ok(matrix.clone()),
    }
}

/// `e^{-iHt}`; negative `t` runs the evolution backwards.
pub fn evolution(spec: &HamiltonianSpec, t: f64) -> Result<ComplexMatrix> {
    if !t.is_finite() {
        return Err(domain(format!("time {t} is not finite")));
    }
    Ok(expm(&build(spec)?, t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::is_unitary;
    use std::f64::consts::PI;

    fn shift(m: usize) -> ComplexMatrix {
        ComplexMatrix::from_fn(m, m, |i, j| if (j + 1) % m == i { 1.0.into() } else { 0.0.into() }).unwrap()
    }

    #[test]
    fn ring_adjacency() {
        let h = build(&HamiltonianSpec::hopping(4)).unwrap();
        let h = h.matrix();
        for i in 0..4 {
            for j in 0..4 {
                let want = if (i + 1) % 4 == j || (j + 1) % 4 == i { 1.0 } else { 0.0 };
                assert_eq!(h.get(i, j).re, want, "({i},{j})");
                assert_eq!(h.get(i, j).im, 0.0);
            }
        }
        let two = build(&HamiltonianSpec::hopping(2)).unwrap();
        assert_eq!(two.matrix().get(0, 1).re, 1.0);
        let open = build(&HamiltonianSpec::Hopping { m: 4, coupling: 0.5, boundary: Boundary::Open }).unwrap();
        assert_eq!(open.matrix().get(0, 3).re, 0.0);
        assert_eq!(open.matrix().get(2, 3).re, 0.5);
    }

    #[test]
    fn ring_is_translation_invariant() {
        for m in [3, 4, 7] {
            let h = build(&HamiltonianSpec::hopping(m)).unwrap();
            let s = shift(m);
            let hs = h.matrix() * &s;
            let sh = &s * h.matrix();
            assert!(hs.max_abs_diff(&sh).unwrap() < 1e-15);
        }
    }

    #[test]
    fn ring_period() {
        let spec = HamiltonianSpec::hopping(4);
        assert!(evolution(&spec, 0.0).unwrap().max_abs_diff(&ComplexMatrix::identity(4)).unwrap() < 1e-14);
        let u = evolution(&spec, PI).unwrap();
        let phase = u.get(0, 0);
        assert!((phase.norm() - 1.0).abs() < 1e-10);
        let scaled = ComplexMatrix::identity(4).scale(phase);
        assert!(u.max_abs_diff(&scaled).unwrap() < 1e-10);
    }

    #[test]
    fn haar_generator_round_trip() {
        for seed in 0..10 {
            let spec = HamiltonianSpec::LongRangeFromHaar { m: 4, seed };
            let u = evolution(&spec, 1.0).unwrap();
            let v = haar_random(4, seed).unwrap();
            assert!(u.max_abs_diff(&v).unwrap() < 1e-8);
        }
        let h = build(&HamiltonianSpec::LongRangeFromHaar { m: 4, seed: 1 }).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert!(h.matrix().get(i, j).norm() > 1e-6);
                }
            }
        }
    }

    #[test]
    fn time_reversal_and_unitarity() {
        let specs = [HamiltonianSpec::hopping(5), HamiltonianSpec::LongRangeFromHaar { m: 5, seed: 3 }];
        for spec in &specs {
            for t in [0.2, 1.0, 2.0, 5.0] {
                let u = evolution(spec, t).unwrap();
                assert!(is_unitary(&u, 1e-10).unwrap());
                let back = evolution(spec, -t).unwrap();
                assert!(u.dagger().max_abs_diff(&back).unwrap() < 1e-10);
            }
        }
    }

    #[test]
    fn explicit_and_validation() {
        let h = HermitianMatrix::diagonal(&[1.0, -2.0, 0.5]).unwrap();
        let spec = HamiltonianSpec::Explicit { matrix: h.clone() };
        assert_eq!(build(&spec).unwrap(), h);
        assert!(build(&HamiltonianSpec::hopping(1)).is_err());
        assert!(build(&HamiltonianSpec::Hopping { m: 3, coupling: f64::NAN, boundary: Boundary::Periodic }).is_err());
        assert!(evolution(&HamiltonianSpec::hopping(3), f64::INFINITY).is_err());
    }

    #[test]
    fn spec_serde() {
        let spec: HamiltonianSpec = serde_json::from_str(r#"{"kind":"hopping","m":4}"#).unwrap();
        assert_eq!(spec, HamiltonianSpec::hopping(4));
        let spec: HamiltonianSpec = serde_json::from_str(r#"{"kind":"long_range_from_haar","m":4,"seed":7}"#).unwrap();
        assert_eq!(spec.modes(), 4);
        assert!(serde_json::from_str::<HamiltonianSpec>(r#"{"kind":"hopping","m":4,"x":1}"#).is_err());
    }
}
