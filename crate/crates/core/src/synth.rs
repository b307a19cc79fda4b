//! Seeded synthetic adapters for tests, examples and sweeps.
//!
//! With a decay `d`, the product has singular values `scale·d^i` and the
//! stored factors are `B = U·S^½·M`, `A = M⁻¹·S^½·Vᵀ` for random orthonormal
//! `U`, `V` and a mixing matrix `M = Q·diag(c)`. `Q` is the orthogonal factor
//! of `I + mixing·G` for Gaussian `G`, so `mixing = 0` stores the SVD factors
//! directly and larger values spread each singular direction over several
//! native components. Without a decay both factors are i.i.d. Gaussian.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{householder_qr, matmul, transpose};
use crate::matrix::Matrix;
use crate::tensor_store::{AdapterContainer, LoraAdapter};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub m: usize,
    pub n: usize,
    pub rank: usize,
    pub layers: usize,
    pub seed: u64,
    /// Geometric singular-value decay in `(0, 1]`; `None` for i.i.d. factors.
    pub decay: Option<f64>,
    pub mixing: f64,
    /// Leading singular value (or factor standard deviation without a decay).
    pub scale: f64,
}

impl SynthSpec {
    pub fn new(m: usize, n: usize, rank: usize, layers: usize, seed: u64) -> Self {
        Self {
            m,
            n,
            rank,
            layers,
            seed,
            decay: Some(0.8),
            mixing: 0.5,
            scale: 1.0,
        }
    }

    pub fn with_decay(mut self, decay: Option<f64>) -> Self {
        self.decay = decay;
        self
    }

    pub fn with_mixing(mut self, mixing: f64) -> Self {
        self.mixing = mixing;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 || self.rank > self.m.min(self.n) {
            return Err(Error::InvalidConfig(format!(
                "rank {} must be in 1..=min({}, {})",
                self.rank, self.m, self.n
            )));
        }
        if let Some(d) = self.decay {
            if !(d > 0.0 && d <= 1.0) {
                return Err(Error::InvalidConfig(format!("decay {d} is outside (0, 1]")));
            }
        }
        if !(self.mixing >= 0.0 && self.mixing.is_finite()) {
            return Err(Error::InvalidConfig(format!("mixing {} must be non-negative", self.mixing)));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::InvalidConfig(format!("scale {} must be positive", self.scale)));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Orthonormal `rows×k` matrix (row-major) with column signs fixed so that
/// `R` has a non-negative diagonal.
fn orthonormal(rows: usize, k: usize, a: &[f64]) -> Vec<f64> {
    let (mut q, r) = householder_qr(rows, k, a);
    for j in 0..k {
        if r[j * k + j] < 0.0 {
            for i in 0..rows {
                q[i * k + j] = -q[i * k + j];
            }
        }
    }
    q
}

/// One adapter drawn from `rng`.
pub fn synthesize_adapter(name: &str, spec: &SynthSpec, rng: &mut impl Rng) -> Result<LoraAdapter> {
    spec.validate()?;
    let (m, n, r) = (spec.m, spec.n, spec.rank);
    let Some(decay) = spec.decay else {
        let b = gaussian(rng, m * r).into_iter().map(|v| v * spec.scale).collect::<Vec<_>>();
        let a = gaussian(rng, r * n).into_iter().map(|v| v * spec.scale).collect::<Vec<_>>();
        return LoraAdapter::new(name, Matrix::from_f64(m, r, &b), Matrix::from_f64(r, n, &a));
    };

    let u = orthonormal(m, r, &gaussian(rng, m * r));
    let v = orthonormal(n, r, &gaussian(rng, n * r));
    let roots: Vec<f64> = (0..r).map(|i| (spec.scale * decay.powi(i as i32)).sqrt()).collect();

    let mut mix = gaussian(rng, r * r);
    for (idx, g) in mix.iter_mut().enumerate() {
        *g = spec.mixing * *g + if idx / r == idx % r { 1.0 } else { 0.0 };
    }
    let q = orthonormal(r, r, &mix);
    let c: Vec<f64> = (0..r).map(|_| 2f64.powf(rng.random_range(-1.0..=1.0))).collect();

    // B = U·S^½·Q·diag(c)
    let mut sq = q.clone();
    for i in 0..r {
        for j in 0..r {
            sq[i * r + j] *= roots[i] * c[j];
        }
    }
    let b = matmul(m, r, r, &u, &sq);
    // A = diag(1/c)·Qᵀ·S^½·Vᵀ
    let mut qt = transpose(r, r, &q);
    for i in 0..r {
        for j in 0..r {
            qt[i * r + j] *= roots[j] / c[i];
        }
    }
    let a = matmul(r, r, n, &qt, &transpose(n, r, &v));
    LoraAdapter::new(name, Matrix::from_f64(m, r, &b), Matrix::from_f64(r, n, &a))
}

/// `spec.layers` adapters named `layers.<i>.proj`, all drawn from one seeded stream.
pub fn synthesize_container(spec: &SynthSpec) -> Result<AdapterContainer> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let adapters = (0..spec.layers)
        .map(|i| synthesize_adapter(&format!("layers.{i}.proj"), spec, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    AdapterContainer::new(adapters, Default::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::svd_split::economy_svd_of_product;

    #[test]
    fn spectrum_follows_decay() {
        for mixing in [0.0, 0.5, 2.0] {
            let spec = SynthSpec::new(64, 48, 6, 1, 3).with_mixing(mixing);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let ad = synthesize_adapter("x", &spec, &mut rng).unwrap();
            let svd = economy_svd_of_product(&ad).unwrap();
            for (i, s) in svd.singular_values.iter().enumerate() {
                assert!((s - 0.8f64.powi(i as i32)).abs() < 1e-5, "{mixing} {i} {s}");
            }
        }
    }

    #[test]
    fn seeded_and_named() {
        let spec = SynthSpec::new(16, 12, 3, 3, 9);
        let x = synthesize_container(&spec).unwrap();
        let y = synthesize_container(&spec).unwrap();
        assert_eq!(x, y);
        assert_eq!(x.adapters()[2].layer_name, "layers.2.proj");
        assert_ne!(x, synthesize_container(&SynthSpec { seed: 10, ..spec }).unwrap());
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(SynthSpec::new(4, 4, 5, 1, 0).validate().is_err());
        assert!(SynthSpec::new(4, 4, 2, 1, 0).with_decay(Some(0.0)).validate().is_err());
        assert!(SynthSpec::new(4, 4, 2, 1, 0).with_decay(None).validate().is_ok());
    }
}
