use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Scalar, Tensor};

/// Fixed `d' × d` matrix with orthonormal rows that lifts a steering vector
/// into the model width. `None` rows means the identity (`d' == d`).
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionMatrix {
    steer_dim: usize,
    d_model: usize,
    rows: Option<Vec<f64>>,
    pub seed: u64,
}

/// Orthonormalizes a seeded Gaussian matrix with two passes of modified
/// Gram-Schmidt.
pub fn make_projection(steer_dim: usize, d_model: usize, seed: u64) -> Result<ProjectionMatrix> {
    if steer_dim > d_model {
        return Err(Error::SteerDimTooLarge {
            steer_dim,
            d_model,
        });
    }
    if steer_dim == 0 {
        return Err(Error::Injection("steer_dim must be at least 1".into()));
    }
    if steer_dim == d_model {
        return Ok(ProjectionMatrix {
            steer_dim,
            d_model,
            rows: None,
            seed,
        });
    }
    let mut rng = SeededRng::derive(seed, 0x5052_4f4a);
    let d = d_model;
    let mut w: Vec<f64> = (0..steer_dim * d).map(|_| rng.normal()).collect();
    for i in 0..steer_dim {
        for _pass in 0..2 {
            for j in 0..i {
                let dot: f64 = (0..d).map(|c| w[i * d + c] * w[j * d + c]).sum();
                for c in 0..d {
                    w[i * d + c] -= dot * w[j * d + c];
                }
            }
        }
        let norm = (0..d).map(|c| w[i * d + c].powi(2)).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::Numerical("degenerate projection draw".into()));
        }
        for c in 0..d {
            w[i * d + c] /= norm;
        }
    }
    Ok(ProjectionMatrix {
        steer_dim,
        d_model,
        rows: Some(w),
        seed,
    })
}

impl ProjectionMatrix {
    pub fn steer_dim(&self) -> usize {
        self.steer_dim
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn is_identity(&self) -> bool {
        self.rows.is_none()
    }

    /// Dense `d' × d` matrix (the identity when `d' == d`).
    pub fn matrix<S: Scalar>(&self) -> Tensor<S> {
        let d = self.d_model;
        match &self.rows {
            Some(w) => Tensor::from_fn(&[self.steer_dim, d], |i| S::of(w[i])),
            None => Tensor::from_fn(&[d, d], |i| if i / d == i % d { S::one() } else { S::zero() }),
        }
    }

    /// `z · W`.
    pub fn up_project<S: Scalar>(&self, z: &[S]) -> Result<Vec<S>> {
        if z.len() != self.steer_dim {
            return Err(Error::shape(
                "up_project",
                format!("vector of {} vs steer_dim {}", z.len(), self.steer_dim),
            ));
        }
        let Some(w) = &self.rows else {
            return Ok(z.to_vec());
        };
        let d = self.d_model;
        let mut out = vec![0.0f64; d];
        for (i, &zi) in z.iter().enumerate() {
            let zi = zi.as_f64();
            for c in 0..d {
                out[c] += zi * w[i * d + c];
            }
        }
        Ok(out.into_iter().map(S::of).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_width_is_identity() {
        let p = make_projection(6, 6, 3).unwrap();
        assert!(p.is_identity());
        let z = [1.0f32, -2.0, 3.0, 0.5, 0.0, 7.0];
        assert_eq!(p.up_project(&z).unwrap(), z.to_vec());
    }

    #[test]
    fn rejects_wide_vectors() {
        assert!(matches!(
            make_projection(17, 16, 0),
            Err(Error::SteerDimTooLarge { .. })
        ));
    }

    #[test]
    fn rows_orthonormal_and_norm_preserving() {
        let p = make_projection(8, 16, 11).unwrap();
        let w = p.matrix::<f64>();
        for i in 0..8 {
            for j in 0..8 {
                let dot: f64 = (0..16).map(|c| w.at(i, c) * w.at(j, c)).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-6);
            }
        }
        let mut rng = SeededRng::new(1);
        for _ in 0..100 {
            let z: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
            let up = p.up_project(&z).unwrap();
            let n0 = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            let n1 = up.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n1 - n0).abs() / n0 < 1e-6);
        }
    }
}
