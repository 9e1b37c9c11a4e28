#![allow(dead_code)]

use ccbym2::data::{sampling_correction, CaseControlData, DesignMatrix, INTERCEPT};
use ccbym2::math::inv_logit;
use ccbym2::sampler::LogDensity;
use ccbym2::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Observations with an intercept, one continuous and one binary covariate,
/// spread over a `rows x cols` lattice and `n_large` large areas.
pub fn fixture(n: usize, rows: usize, cols: usize, n_large: usize, seed: u64) -> CaseControlData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = rows * cols;
    let mut vals = Vec::new();
    for _ in 0..n {
        vals.extend([1.0, rng.random_range(-2.0..2.0), f64::from(rng.random_bool(0.4) as u8)]);
    }
    let x = DesignMatrix::new(vec![INTERCEPT.into(), "a".into(), "b".into()], n, vals).unwrap();
    let y = (0..n).map(|_| u8::from(rng.random_bool(0.3))).collect();
    let small = (0..n).map(|i| i % l).collect();
    let large = (0..n).map(|i| i % n_large).collect();
    let corr = (0..n_large)
        .map(|j| sampling_correction(10 + j, 40, 0.05 + 0.1 * j as f64).unwrap())
        .collect();
    CaseControlData::new(y, x, small, l, large, corr).unwrap()
}

/// Dense Laplacian `D - W` built straight from an edge list.
pub fn dense_laplacian(l: usize, edges: &[(usize, usize)]) -> nalgebra::DMatrix<f64> {
    let mut q = nalgebra::DMatrix::zeros(l, l);
    for &(a, b) in edges {
        q[(a, a)] += 1.0;
        q[(b, b)] += 1.0;
        q[(a, b)] -= 1.0;
        q[(b, a)] -= 1.0;
    }
    q
}

/// Central finite-difference gradient.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    (0..x.len())
        .map(|k| {
            y[k] = x[k] + h;
            let up = f(&y);
            y[k] = x[k] - h;
            let down = f(&y);
            y[k] = x[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Independent standard normals.
pub struct StdNormal(pub usize);

impl LogDensity for StdNormal {
    fn dim(&self) -> usize {
        self.0
    }
    fn log_density_grad(&self, q: &[f64], grad: &mut [f64]) -> Result<f64> {
        for (g, v) in grad.iter_mut().zip(q) {
            *g = -v;
        }
        Ok(-0.5 * q.iter().map(|v| v * v).sum::<f64>())
    }
}

/// Zero-mean Gaussian with a 2x2 covariance.
pub struct Gaussian2 {
    pub precision: [[f64; 2]; 2],
}

impl Gaussian2 {
    pub fn with_covariance(c: [[f64; 2]; 2]) -> Self {
        let det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
        Gaussian2 { precision: [[c[1][1] / det, -c[0][1] / det], [-c[1][0] / det, c[0][0] / det]] }
    }
}

impl LogDensity for Gaussian2 {
    fn dim(&self) -> usize {
        2
    }
    fn log_density_grad(&self, q: &[f64], grad: &mut [f64]) -> Result<f64> {
        let p = &self.precision;
        grad[0] = -(p[0][0] * q[0] + p[0][1] * q[1]);
        grad[1] = -(p[1][0] * q[0] + p[1][1] * q[1]);
        Ok(0.5 * (q[0] * grad[0] + q[1] * grad[1]))
    }
}

/// Plain logistic regression with independent normal priors on the coefficients.
pub struct Logistic {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<u8>,
    pub prior_sd: f64,
}

impl Logistic {
    pub fn log_density(&self, beta: &[f64]) -> f64 {
        let mut lp: f64 = beta.iter().map(|b| -0.5 * (b / self.prior_sd).powi(2)).sum();
        for (row, &y) in self.x.iter().zip(&self.y) {
            let eta: f64 = row.iter().zip(beta).map(|(a, b)| a * b).sum();
            let p = inv_logit(eta);
            lp += if y == 1 { p.ln() } else { (1.0 - p).ln() };
        }
        lp
    }
}

impl LogDensity for Logistic {
    fn dim(&self) -> usize {
        self.x[0].len()
    }
    fn log_density_grad(&self, beta: &[f64], grad: &mut [f64]) -> Result<f64> {
        for (g, b) in grad.iter_mut().zip(beta) {
            *g = -b / (self.prior_sd * self.prior_sd);
        }
        for (row, &y) in self.x.iter().zip(&self.y) {
            let eta: f64 = row.iter().zip(beta).map(|(a, b)| a * b).sum();
            let r = f64::from(y) - inv_logit(eta);
            for (g, a) in grad.iter_mut().zip(row) {
                *g += r * a;
            }
        }
        Ok(self.log_density(beta))
    }
}

/// Logit with offset and iid area effects `sigma * phi`, Cauchy priors placed
/// directly on the coefficients and a half-normal scale.
///
/// Position: `beta (p), phi (L), log sigma`.
pub struct OffsetLogitIid {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<u8>,
    pub area: Vec<usize>,
    pub n_areas: usize,
    pub offset: f64,
    pub cauchy_scales: Vec<f64>,
}

impl LogDensity for OffsetLogitIid {
    fn dim(&self) -> usize {
        self.cauchy_scales.len() + self.n_areas + 1
    }

    fn log_density_grad(&self, q: &[f64], grad: &mut [f64]) -> Result<f64> {
        let p = self.cauchy_scales.len();
        let (beta, rest) = q.split_at(p);
        let (phi, w) = rest.split_at(self.n_areas);
        let sigma = w[0].exp();
        grad.fill(0.0);
        let mut lp = 0.0;
        for k in 0..p {
            let s = self.cauchy_scales[k];
            let z = beta[k] / s;
            lp += -(std::f64::consts::PI * s).ln() - (z * z).ln_1p();
            grad[k] = -2.0 * z / (s * (1.0 + z * z));
        }
        for (a, f) in phi.iter().enumerate() {
            lp += -0.5 * f * f;
            grad[p + a] = -f;
        }
        // half-normal on sigma with the log Jacobian
        lp += -0.5 * sigma * sigma + w[0];
        grad[p + self.n_areas] = 1.0 - sigma * sigma;
        for i in 0..self.y.len() {
            let a = self.area[i];
            let eta = self.offset + self.x[i].iter().zip(beta).map(|(u, b)| u * b).sum::<f64>() + sigma * phi[a];
            let pr = inv_logit(eta);
            lp += if self.y[i] == 1 { pr.ln() } else { (-pr).ln_1p() };
            let r = f64::from(self.y[i]) - pr;
            for k in 0..p {
                grad[k] += r * self.x[i][k];
            }
            grad[p + a] += r * sigma;
            grad[p + self.n_areas] += r * sigma * phi[a];
        }
        Ok(lp)
    }
}
