//! Radial basis function interpolation with an affine tail.
//!
//! The fitted map is `chi -> sum_m psi(||chi - chi_m||) alpha_m + b0 + B chi`,
//! with the weights and tail coefficients determined by the interpolation
//! conditions at the sample points plus moment conditions on the weights
//! (the standard symmetric saddle system).

use super::{SampleSet, SurrogateError};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RbfKernel {
    Gaussian,
    Multiquadric,
    ThinPlate,
}

impl RbfKernel {
    pub fn eval(&self, r: f64, shape: f64) -> f64 {
        match self {
            RbfKernel::Gaussian => {
                let t = r / shape;
                (-t * t).exp()
            }
            RbfKernel::Multiquadric => (r * r + shape * shape).sqrt(),
            RbfKernel::ThinPlate => {
                if r == 0.0 {
                    0.0
                } else {
                    r * r * (r / shape).ln()
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbfModel {
    pub kernel: RbfKernel,
    pub shape: f64,
    /// Training inputs, one per basis function.
    pub centers: Vec<Vec<f64>>,
    /// Per-center weight vectors (one value per output dimension).
    pub weights: Vec<Vec<f64>>,
    pub tail_bias: Vec<f64>,
    /// Affine tail matrix, `output_dim x input_dim`.
    pub tail_matrix: Vec<Vec<f64>>,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl RbfModel {
    pub(crate) fn validate(&self) -> Result<(), SurrogateError> {
        if !(self.shape > 0.0 && self.shape.is_finite()) {
            return Err(SurrogateError::InvalidModel(format!(
                "kernel shape {} must be finite and > 0",
                self.shape
            )));
        }
        if self.centers.len() != self.weights.len() {
            return Err(SurrogateError::InvalidModel(format!(
                "{} centers but {} weight vectors",
                self.centers.len(),
                self.weights.len()
            )));
        }
        if self.centers.iter().any(|c| c.len() != self.input_dim) {
            return Err(SurrogateError::InvalidModel(
                "center dimension mismatch".into(),
            ));
        }
        if self.weights.iter().any(|w| w.len() != self.output_dim)
            || self.tail_bias.len() != self.output_dim
            || self.tail_matrix.len() != self.output_dim
            || self.tail_matrix.iter().any(|r| r.len() != self.input_dim)
        {
            return Err(SurrogateError::InvalidModel(
                "weight or tail dimension mismatch".into(),
            ));
        }
        Ok(())
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Median pairwise distance between the training inputs, the default kernel
/// shape when none is given.
fn median_pairwise_distance(inputs: &[Vec<f64>]) -> f64 {
    let mut distances = Vec::with_capacity(inputs.len() * (inputs.len() - 1) / 2);
    for i in 0..inputs.len() {
        for j in i + 1..inputs.len() {
            distances.push(distance(&inputs[i], &inputs[j]));
        }
    }
    distances.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distances[distances.len() / 2]
}

/// Fits the interpolant to a sample set by solving the symmetric system
///
/// ```text
///   [ K + ridge I   P ] [ weights ]   [ outputs ]
///   [ P'            0 ] [ tail    ] = [ 0       ]
/// ```
///
/// where `K` holds the kernel values between sample inputs and `P` the
/// affine tail columns `[1, chi']`. With zero ridge the fit interpolates the
/// samples exactly; a small ridge tolerates near-duplicate centers.
pub fn fit_rbf(
    set: &SampleSet,
    kernel: RbfKernel,
    shape: Option<f64>,
    ridge: f64,
) -> Result<RbfModel, SurrogateError> {
    let m = set.len();
    if m < 2 {
        return Err(SurrogateError::NotEnoughSamples { have: m, need: 2 });
    }
    let d = set.input_dim;
    let out = set.output_dim;
    let inputs: Vec<Vec<f64>> = set.samples.iter().map(|s| s.input.flatten()).collect();

    for i in 0..m {
        for j in i + 1..m {
            if distance(&inputs[i], &inputs[j]) == 0.0 {
                return Err(SurrogateError::DuplicateCenters { first: i, second: j });
            }
        }
    }

    let shape = match shape {
        Some(s) if s > 0.0 && s.is_finite() => s,
        Some(s) => {
            return Err(SurrogateError::InvalidModel(format!(
                "kernel shape {s} must be finite and > 0"
            )))
        }
        None => median_pairwise_distance(&inputs),
    };

    let size = m + d + 1;
    let mut system = DMatrix::zeros(size, size);
    for i in 0..m {
        for j in 0..m {
            system[(i, j)] = kernel.eval(distance(&inputs[i], &inputs[j]), shape);
        }
        system[(i, i)] += ridge;
        system[(i, m)] = 1.0;
        system[(m, i)] = 1.0;
        for k in 0..d {
            system[(i, m + 1 + k)] = inputs[i][k];
            system[(m + 1 + k, i)] = inputs[i][k];
        }
    }
    let mut rhs = DMatrix::zeros(size, out);
    for (i, sample) in set.samples.iter().enumerate() {
        for (k, &v) in sample.output.iter().enumerate() {
            rhs[(i, k)] = v;
        }
    }

    let lu = system.clone().lu();
    let mut solution = match lu.solve(&rhs) {
        Some(mut solution) => {
            // One step of iterative refinement keeps center residuals near
            // machine precision even when the kernel matrix is badly
            // conditioned.
            let residual = &rhs - &system * &solution;
            if let Some(correction) = lu.solve(&residual) {
                solution += correction;
            }
            Some(solution)
        }
        None => None,
    };
    if solution.is_none() {
        // Affinely degenerate centers (all on a lower-dimensional flat) make
        // the tail columns rank-deficient while the interpolation conditions
        // stay consistent; the minimum-norm least-squares solution still
        // interpolates.
        let svd = system.clone().svd(true, true);
        solution = svd.solve(&rhs, 1e-12).ok();
    }
    let solution = solution.filter(|s| s.iter().all(|v| v.is_finite())).ok_or_else(|| {
        SurrogateError::SingularSystem(
            "interpolation system is singular (duplicate centers or degenerate affine tail)"
                .into(),
        )
    })?;
    let residual = (&rhs - &system * &solution).amax();
    let scale = rhs.amax().max(1.0);
    if ridge == 0.0 && residual > 1e-6 * scale {
        return Err(SurrogateError::SingularSystem(format!(
            "interpolation conditions unsatisfied (residual {residual:.3e})"
        )));
    }

    let weights: Vec<Vec<f64>> = (0..m)
        .map(|i| (0..out).map(|k| solution[(i, k)]).collect())
        .collect();
    let tail_bias: Vec<f64> = (0..out).map(|k| solution[(m, k)]).collect();
    let tail_matrix: Vec<Vec<f64>> = (0..out)
        .map(|k| (0..d).map(|j| solution[(m + 1 + j, k)]).collect())
        .collect();

    Ok(RbfModel {
        kernel,
        shape,
        centers: inputs,
        weights,
        tail_bias,
        tail_matrix,
        input_dim: d,
        output_dim: out,
    })
}

/// Evaluates the interpolant at a flattened input.
pub fn eval_rbf_flat(model: &RbfModel, chi: &[f64]) -> Result<Vec<f64>, SurrogateError> {
    if chi.len() != model.input_dim {
        return Err(SurrogateError::DimensionMismatch {
            expected: model.input_dim,
            got: chi.len(),
        });
    }
    let mut value = model.tail_bias.clone();
    for (row, v) in model.tail_matrix.iter().zip(value.iter_mut()) {
        *v += row.iter().zip(chi).map(|(b, x)| b * x).sum::<f64>();
    }
    for (center, weight) in model.centers.iter().zip(&model.weights) {
        let basis = model.kernel.eval(distance(center, chi), model.shape);
        for (v, w) in value.iter_mut().zip(weight) {
            *v += basis * w;
        }
    }
    Ok(value)
}
