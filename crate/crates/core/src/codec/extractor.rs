use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{LatentGrid, Shape};

/// Optional input invariances of the extractor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorOptions {
    /// Average first-layer weights with their horizontal mirror image, so the
    /// features ignore left-right flips.
    pub flip_invariant: bool,
    /// Standardize the input grid to zero mean and unit variance first.
    pub standardize: bool,
}

impl Default for ExtractorOptions {
    fn default() -> Self {
        ExtractorOptions {
            flip_invariant: true,
            standardize: true,
        }
    }
}

const STANDARDIZE_EPS: f64 = 1e-8;

/// Fixed `tanh` two-layer network mapping a grid to a `D`-dimensional embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    shape: Shape,
    w1: DMatrix<f64>,
    b1: DVector<f64>,
    w2: DMatrix<f64>,
    b2: DVector<f64>,
    options: ExtractorOptions,
    seed: u64,
}

struct Forward {
    input: DVector<f64>,
    hidden: DVector<f64>,
    output: DVector<f64>,
    scale: f64,
}

impl FeatureExtractor {
    pub fn build(
        shape: Shape,
        hidden_dim: usize,
        output_dim: usize,
        seed: u64,
        options: ExtractorOptions,
    ) -> Result<Self> {
        if output_dim < 1 || hidden_dim < 1 {
            return Err(Error::param(format!(
                "extractor dimensions must be positive, got hidden={hidden_dim}, D={output_dim}"
            )));
        }
        let n = shape.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gauss = |rows: usize, cols: usize, scale: f64| {
            DMatrix::from_fn(rows, cols, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
        };
        let mut w1 = gauss(hidden_dim, n, 1.0 / (n as f64).sqrt());
        let b1 = gauss(hidden_dim, 1, 1.0 / (n as f64).sqrt()).column(0).into_owned();
        let w2 = gauss(output_dim, hidden_dim, 1.0 / (hidden_dim as f64).sqrt());
        let b2 = gauss(output_dim, 1, 1.0 / (hidden_dim as f64).sqrt()).column(0).into_owned();
        if options.flip_invariant {
            let original = w1.clone();
            for c in 0..shape.channels {
                for y in 0..shape.height {
                    for x in 0..shape.width {
                        let i = shape.index(c, y, x);
                        let j = shape.index(c, y, shape.width - 1 - x);
                        for h in 0..hidden_dim {
                            w1[(h, i)] = 0.5 * (original[(h, i)] + original[(h, j)]);
                        }
                    }
                }
            }
        }
        Ok(FeatureExtractor {
            shape,
            w1,
            b1,
            w2,
            b2,
            options,
            seed,
        })
    }

    pub fn input_shape(&self) -> Shape {
        self.shape
    }

    pub fn output_dim(&self) -> usize {
        self.w2.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn options(&self) -> ExtractorOptions {
        self.options
    }

    pub fn first_layer(&self) -> (&DMatrix<f64>, &DVector<f64>) {
        (&self.w1, &self.b1)
    }

    pub fn second_layer(&self) -> (&DMatrix<f64>, &DVector<f64>) {
        (&self.w2, &self.b2)
    }

    fn check(&self, image: &LatentGrid) -> Result<()> {
        if image.shape() != self.shape {
            return Err(Error::Shape {
                expected: self.shape.to_string(),
                actual: image.shape().to_string(),
            });
        }
        Ok(())
    }

    fn forward(&self, image: &LatentGrid) -> Forward {
        let (input, scale) = if self.options.standardize {
            let m = image.mean();
            let s = (image.variance() + STANDARDIZE_EPS).sqrt();
            (
                DVector::from_iterator(image.len(), image.values().iter().map(|v| (v - m) / s)),
                s,
            )
        } else {
            (DVector::from_column_slice(image.values()), 1.0)
        };
        let hidden = (&self.w1 * &input + &self.b1).map(f64::tanh);
        let output = &self.w2 * &hidden + &self.b2;
        Forward {
            input,
            hidden,
            output,
            scale,
        }
    }

    /// The embedding `E_w` of an image.
    pub fn extract(&self, image: &LatentGrid) -> Result<Vec<f64>> {
        self.check(image)?;
        Ok(self.forward(image).output.as_slice().to_vec())
    }

    /// Gradient of `upstream . extract(image)` with respect to the image.
    pub fn extract_vjp(&self, image: &LatentGrid, upstream: &[f64]) -> Result<LatentGrid> {
        self.check(image)?;
        if upstream.len() != self.output_dim() {
            return Err(Error::Shape {
                expected: format!("{} features", self.output_dim()),
                actual: format!("{} features", upstream.len()),
            });
        }
        let f = self.forward(image);
        let g = DVector::from_column_slice(upstream);
        let mut g_pre = self.w2.tr_mul(&g);
        for (gp, h) in g_pre.iter_mut().zip(f.hidden.iter()) {
            *gp *= 1.0 - h * h;
        }
        let g_in = self.w1.tr_mul(&g_pre);
        let grad: Vec<f64> = if self.options.standardize {
            let n = g_in.len() as f64;
            let g_mean = g_in.sum() / n;
            let gz = g_in.dot(&f.input) / n;
            g_in.iter()
                .zip(f.input.iter())
                .map(|(gi, zi)| (gi - g_mean - zi * gz) / f.scale)
                .collect()
        } else {
            g_in.as_slice().to_vec()
        };
        LatentGrid::from_vec(self.shape, grad)
            .map_err(|_| Error::Degenerate("non-finite extractor gradient".into()))
    }
}
