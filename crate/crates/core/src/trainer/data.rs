use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::model::Targets;
use super::TrainError;
use crate::seed::rng_from_seed;

/// Number of label dimensions of the polynomial dataset: one per subset of
/// the nine monomials `x^a y^b`, `a, b ∈ {0, 1, 2}`.
pub const POLYNOMIAL_OUTPUTS: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// One sample per row.
    pub inputs: DMatrix<f64>,
    pub targets: Targets,
}

impl Dataset {
    pub fn new(inputs: DMatrix<f64>, targets: Targets) -> Result<Self, TrainError> {
        if inputs.nrows() != targets.len() {
            return Err(TrainError::ShapeMismatch(format!(
                "{} inputs but {} targets",
                inputs.nrows(),
                targets.len()
            )));
        }
        Ok(Dataset { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(rows),
            targets: self.targets.select(rows),
        }
    }

    /// First `n` rows and the remainder.
    pub fn split(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        (self.select(&head), self.select(&tail))
    }
}

/// `n` images of `h x w` i.i.d. uniform pixels in `[0, 1]` with uniform random labels.
pub fn gen_random_dataset(n: usize, h: usize, w: usize, n_classes: usize, seed: u64) -> Dataset {
    let mut rng = rng_from_seed(seed);
    let mut pixels = Vec::with_capacity(n * h * w);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        pixels.extend((0..h * w).map(|_| rng.random::<f64>()));
        labels.push(rng.random_range(0..n_classes));
    }
    Dataset {
        inputs: DMatrix::from_row_slice(n, h * w, &pixels),
        targets: Targets::Classes(labels),
    }
}

/// Whether monomial `x^a y^b` is a term of polynomial `p`: bit `3a + b` of `p`.
pub fn polynomial_has_term(p: usize, a: usize, b: usize) -> bool {
    (p >> (3 * a + b)) & 1 == 1
}

/// Row `p` of the label is polynomial `p` evaluated at the input.
pub fn polynomial_labels(x: f64, y: f64) -> Vec<f64> {
    let mut terms = [0.0; 9];
    for a in 0..3 {
        for b in 0..3 {
            terms[3 * a + b] = x.powi(a as i32) * y.powi(b as i32);
        }
    }
    (0..POLYNOMIAL_OUTPUTS)
        .map(|p| {
            (0..9)
                .filter(|&bit| (p >> bit) & 1 == 1)
                .map(|bit| terms[bit])
                .sum()
        })
        .collect()
}

/// Inputs `(x, y) ~ N(0, 1)^2`; 512-dimensional labels, one per polynomial
/// with 0/1 coefficients over exponents `{0, 1, 2}`.
pub fn gen_polynomial_dataset(n: usize, seed: u64) -> Dataset {
    let mut rng = rng_from_seed(seed);
    let mut inputs = DMatrix::zeros(n, 2);
    let mut labels = DMatrix::zeros(n, POLYNOMIAL_OUTPUTS);
    for i in 0..n {
        let x: f64 = StandardNormal.sample(&mut rng);
        let y: f64 = StandardNormal.sample(&mut rng);
        inputs[(i, 0)] = x;
        inputs[(i, 1)] = y;
        for (p, v) in polynomial_labels(x, y).into_iter().enumerate() {
            labels[(i, p)] = v;
        }
    }
    Dataset {
        inputs,
        targets: Targets::Values(labels),
    }
}

/// Noisy class prototypes: each class has a random template in `[0, 1]^dim`
/// and samples are the template plus Gaussian noise of standard deviation
/// `noise`, clipped to `[0, 1]`. The same `seed` gives the same templates, so
/// train and test sets should use one call split with [`Dataset::split`].
pub fn gen_prototype_dataset(
    n: usize,
    dim: usize,
    n_classes: usize,
    noise: f64,
    seed: u64,
) -> Dataset {
    let mut rng = rng_from_seed(seed);
    let templates: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| (0..dim).map(|_| rng.random::<f64>()).collect())
        .collect();
    let normal = Normal::new(0.0, noise).expect("noise must be finite and non-negative");
    let mut pixels = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let c = rng.random_range(0..n_classes);
        pixels.extend(
            templates[c]
                .iter()
                .map(|&t| (t + normal.sample(&mut rng)).clamp(0.0, 1.0)),
        );
        labels.push(c);
    }
    Dataset {
        inputs: DMatrix::from_row_slice(n, dim, &pixels),
        targets: Targets::Classes(labels),
    }
}

/// Two classes separated by a random hyperplane through the origin, with a
/// margin of `margin` enforced by rejection.
pub fn gen_linear_dataset(n: usize, dim: usize, margin: f64, seed: u64) -> Dataset {
    let mut rng = rng_from_seed(seed);
    let normal: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = normal.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut pixels = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    while labels.len() < n {
        let x: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let side = x.iter().zip(&normal).map(|(a, b)| a * b).sum::<f64>() / norm;
        if side.abs() < margin {
            continue;
        }
        pixels.extend(x);
        labels.push(usize::from(side > 0.0));
    }
    Dataset {
        inputs: DMatrix::from_row_slice(n, dim, &pixels),
        targets: Targets::Classes(labels),
    }
}
