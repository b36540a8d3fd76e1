//! Whitened carrier directions.
//!
//! A corpus of clean embeddings fixes a mean `m` and a ZCA whitening matrix
//! `W = (C + r I)^(-1/2)`. Carriers are orthonormal directions in the whitened
//! space; bit `i` of an embedding `e` reads the sign of `a_i . W (e - m)`.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::format::{Reader, Writer};

pub const RIDGE_FRACTION: f64 = 1e-4;
const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct CarrierSet {
    mean: DVector<f64>,
    whitening: DMatrix<f64>,
    carriers: DMatrix<f64>,
    /// `carriers * whitening`, cached for projection.
    projector: DMatrix<f64>,
    seed: u64,
}

impl CarrierSet {
    /// Fits the whitening on `corpus` (one embedding per entry) and draws `k` carriers.
    pub fn whiten(corpus: &[Vec<f64>], k: usize, seed: u64) -> Result<Self> {
        let m = corpus.len();
        let d = corpus.first().map(Vec::len).unwrap_or(0);
        if d == 0 {
            return Err(Error::param("empty embedding corpus"));
        }
        if m < d {
            return Err(Error::param(format!("corpus of {m} embeddings is smaller than D={d}")));
        }
        if k == 0 || k > d {
            return Err(Error::param(format!("carrier count {k} must be in [1, {d}]")));
        }
        if corpus.iter().any(|e| e.len() != d) {
            return Err(Error::Shape {
                expected: format!("{d} features"),
                actual: "ragged corpus".into(),
            });
        }
        let data = DMatrix::from_fn(m, d, |i, j| corpus[i][j]);
        let mean = data.row_mean().transpose();
        let mut centered = data;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.tr_mul(&centered) / m as f64;
        let trace = cov.trace();
        if !(trace > 0.0 && trace.is_finite()) {
            return Err(Error::Conditioning(format!("corpus covariance trace is {trace}")));
        }
        let ridge = RIDGE_FRACTION * trace / d as f64;
        let regularized = cov + DMatrix::identity(d, d) * ridge;
        let eig = SymmetricEigen::new(regularized);
        let (lo, hi) = eig
            .eigenvalues
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if !(lo > 0.0) || hi / lo > MAX_CONDITION {
            return Err(Error::Conditioning(format!(
                "regularized covariance eigenvalues span [{lo}, {hi}]"
            )));
        }
        let inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.sqrt()));
        let whitening = &eig.eigenvectors * inv_sqrt * eig.eigenvectors.transpose();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = DMatrix::from_fn(d, k, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z
        });
        let carriers = orthonormal_columns(raw).transpose();
        CarrierSet::from_parts(mean, whitening, carriers, seed)
    }

    fn from_parts(
        mean: DVector<f64>,
        whitening: DMatrix<f64>,
        carriers: DMatrix<f64>,
        seed: u64,
    ) -> Result<Self> {
        let projector = &carriers * &whitening;
        Ok(CarrierSet {
            mean,
            whitening,
            carriers,
            projector,
            seed,
        })
    }

    pub fn k(&self) -> usize {
        self.carriers.nrows()
    }

    pub fn dim(&self) -> usize {
        self.carriers.ncols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Carrier `i` as a unit vector in whitened space.
    pub fn carrier(&self, i: usize) -> Vec<f64> {
        self.carriers.row(i).iter().copied().collect()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn whitening(&self) -> &DMatrix<f64> {
        &self.whitening
    }

    fn check(&self, embedding: &[f64]) -> Result<()> {
        if embedding.len() != self.dim() {
            return Err(Error::Shape {
                expected: format!("{} features", self.dim()),
                actual: format!("{} features", embedding.len()),
            });
        }
        Ok(())
    }

    /// `W (e - m)`.
    pub fn whiten_embedding(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        self.check(embedding)?;
        let centered = DVector::from_column_slice(embedding) - &self.mean;
        Ok((&self.whitening * centered).as_slice().to_vec())
    }

    /// Signed projections `a_i . W (e - m)`, one per carrier.
    pub fn project(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        self.check(embedding)?;
        let centered = DVector::from_column_slice(embedding) - &self.mean;
        Ok((&self.projector * centered).as_slice().to_vec())
    }

    /// Gradient of `upstream . project(e)` with respect to `e`.
    pub fn project_vjp(&self, upstream: &[f64]) -> Result<Vec<f64>> {
        if upstream.len() != self.k() {
            return Err(Error::Shape {
                expected: format!("{} projections", self.k()),
                actual: format!("{}", upstream.len()),
            });
        }
        Ok(self
            .projector
            .tr_mul(&DVector::from_column_slice(upstream))
            .as_slice()
            .to_vec())
    }

    const MAGIC: &'static [u8; 4] = b"LMCS";

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new(Self::MAGIC, 1);
        w.u32(self.k() as u32);
        w.u32(self.dim() as u32);
        w.u64(self.seed);
        w.f64s(self.mean.as_slice());
        w.f64s(self.whitening.as_slice());
        w.f64s(self.carriers.as_slice());
        w.write_to(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = Reader::open(path, Self::MAGIC, 1)?;
        let k = r.u32()? as usize;
        let d = r.u32()? as usize;
        let seed = r.u64()?;
        if k == 0 || d == 0 || k > d {
            return Err(r.fail(format!("invalid carrier header k={k}, D={d}")));
        }
        let mean = DVector::from_vec(r.f64s(d)?);
        let whitening = DMatrix::from_vec(d, d, r.f64s(d * d)?);
        let carriers = DMatrix::from_vec(k, d, r.f64s(k * d)?);
        r.finish()?;
        CarrierSet::from_parts(mean, whitening, carriers, seed)
    }
}

/// Modified Gram-Schmidt with one reorthogonalization pass.
fn orthonormal_columns(mut m: DMatrix<f64>) -> DMatrix<f64> {
    for j in 0..m.ncols() {
        for _ in 0..2 {
            for i in 0..j {
                let proj = m.column(i).dot(&m.column(j));
                let qi = m.column(i).into_owned();
                m.column_mut(j).axpy(-proj, &qi, 1.0);
            }
        }
        let norm = m.column(j).norm();
        m.column_mut(j).scale_mut(1.0 / norm);
    }
    m
}
