//! Small dense-math helpers and parameter-set plumbing shared by the graph
//! encoder and the Q-network.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Uniform Xavier/Glorot initialization.
    pub fn xavier<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
        Matrix { rows, cols, data }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self · x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `selfᵀ · y`
    pub fn t_matvec(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr != 0.0 {
                axpy(&mut out, yr, self.row(r));
            }
        }
        out
    }

    /// `self += alpha · u vᵀ`
    pub fn add_outer(&mut self, alpha: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (r, &ur) in u.iter().enumerate() {
            let s = alpha * ur;
            if s != 0.0 {
                axpy(&mut self.data[r * self.cols..(r + 1) * self.cols], s, v);
            }
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha · x`
pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

/// Numerically stable softmax.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return vec![0.0; xs.len()];
    }
    let exps: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn random_normal_vec<R: Rng + ?Sized>(n: usize, scale: f64, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

/// A collection of named parameter groups that can be visited flat.
///
/// Gradients share the parameter type: a gradient is a `zeros_like` copy
/// accumulated in place.
pub trait ParamSet: Clone {
    fn groups(&self) -> Vec<(String, &[f64])>;
    fn groups_mut(&mut self) -> Vec<(String, &mut [f64])>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, g) in z.groups_mut() {
            g.fill(0.0);
        }
        z
    }

    fn num_params(&self) -> usize {
        self.groups().iter().map(|(_, g)| g.len()).sum()
    }

    /// `self += alpha · other`
    fn add_scaled(&mut self, alpha: f64, other: &Self) {
        let src = other.groups();
        for ((_, dst), (_, s)) in self.groups_mut().into_iter().zip(src) {
            axpy(dst, alpha, s);
        }
    }

    /// SHA-256 over every parameter's bit pattern, in group order.
    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, g) in self.groups() {
            h.update(name.as_bytes());
            for x in g {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn is_finite(&self) -> bool {
        self.groups().iter().all(|(_, g)| g.iter().all(|x| x.is_finite()))
    }
}

/// First-order optimizers over a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Sgd
    }
}

impl OptimizerConfig {
    pub fn adam() -> Self {
        OptimizerConfig::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer<P: ParamSet> {
    config: OptimizerConfig,
    lr: f64,
    moments: Option<(P, P)>,
    t: u64,
}

impl<P: ParamSet> Optimizer<P> {
    pub fn new(config: OptimizerConfig, lr: f64) -> Self {
        Optimizer { config, lr, moments: None, t: 0 }
    }

    /// Descend along `grad` (a loss gradient).
    pub fn step(&mut self, params: &mut P, grad: &P) {
        match self.config {
            OptimizerConfig::Sgd => params.add_scaled(-self.lr, grad),
            OptimizerConfig::Adam { beta1, beta2, eps } => {
                self.t += 1;
                let (m, v) = self.moments.get_or_insert_with(|| (grad.zeros_like(), grad.zeros_like()));
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                let lr = self.lr;
                for ((((_, p), (_, g)), (_, mg)), (_, vg)) in params
                    .groups_mut()
                    .into_iter()
                    .zip(grad.groups())
                    .zip(m.groups_mut())
                    .zip(v.groups_mut())
                {
                    for i in 0..p.len() {
                        mg[i] = beta1 * mg[i] + (1.0 - beta1) * g[i];
                        vg[i] = beta2 * vg[i] + (1.0 - beta2) * g[i] * g[i];
                        let mhat = mg[i] / bc1;
                        let vhat = vg[i] / bc2;
                        p[i] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_and_transpose() {
        let m = Matrix { rows: 2, cols: 3, data: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0] };
        assert_eq!(m.matvec(&[1.0, 0.0, -1.0]), vec![-2.0, -2.0]);
        assert_eq!(m.t_matvec(&[1.0, 1.0]), vec![5.0, 7.0, 9.0]);
        let mut z = Matrix::zeros(2, 3);
        z.add_outer(2.0, &[1.0, 0.5], &[1.0, 2.0, 3.0]);
        assert_eq!(z.data, vec![2.0, 4.0, 6.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1.0, 2.0, 3.0, f64::NEG_INFINITY]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(p[3], 0.0);
    }
}
