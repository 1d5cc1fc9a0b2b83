//! Single-layer multi-head graph attention with mean pooling.
//!
//! For node features `x_i` and undirected neighborhoods `N(i)` (self-loop
//! included):
//!
//! ```text
//! z_i      = tanh(P x_i + b)
//! h_i^k    = W_k z_i
//! e_ij^k   = LeakyReLU(a_src^k · h_i^k + a_dst^k · h_j^k)
//! α_ij^k   = softmax over j ∈ N(i) of e_ij^k
//! o_i      = ‖_k Σ_j α_ij^k h_j^k
//! output   = mean_i o_i
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{KgError, KnowledgeGraph};
use crate::lm::{mean_embedding, ProposalModel};
use crate::nn::{axpy, dot, leaky_relu, softmax, Matrix, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub proj_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub slope: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { input_dim: 64, proj_dim: 64, heads: 4, head_dim: 16, slope: 0.2 }
    }
}

impl EncoderConfig {
    pub fn output_dim(&self) -> usize {
        self.heads * self.head_dim
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEncoderParams {
    pub config: EncoderConfig,
    pub proj: Matrix,
    pub proj_bias: Vec<f64>,
    pub w: Vec<Matrix>,
    pub a_src: Vec<Vec<f64>>,
    pub a_dst: Vec<Vec<f64>>,
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    pub features: Vec<Vec<f64>>,
    pub neighbors: Vec<Vec<usize>>,
    pub z: Vec<Vec<f64>>,
    /// `h[k][i]`
    pub h: Vec<Vec<Vec<f64>>>,
    /// Pre-activation logits `m[k][i][n]` for the n-th neighbor of i.
    pub logits: Vec<Vec<Vec<f64>>>,
    /// `alpha[k][i][n]`
    pub alpha: Vec<Vec<Vec<f64>>>,
    pub output: Vec<f64>,
}

impl ParamSet for GraphEncoderParams {
    fn groups(&self) -> Vec<(String, &[f64])> {
        let mut g: Vec<(String, &[f64])> = vec![("enc.proj".into(), &self.proj.data), ("enc.proj_bias".into(), &self.proj_bias)];
        for k in 0..self.config.heads {
            g.push((format!("enc.w{k}"), &self.w[k].data));
            g.push((format!("enc.a_src{k}"), &self.a_src[k]));
            g.push((format!("enc.a_dst{k}"), &self.a_dst[k]));
        }
        g
    }

    fn groups_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut g: Vec<(String, &mut [f64])> =
            vec![("enc.proj".into(), &mut self.proj.data), ("enc.proj_bias".into(), &mut self.proj_bias)];
        for (k, ((w, s), d)) in self.w.iter_mut().zip(self.a_src.iter_mut()).zip(self.a_dst.iter_mut()).enumerate() {
            g.push((format!("enc.w{k}"), &mut w.data));
            g.push((format!("enc.a_src{k}"), s));
            g.push((format!("enc.a_dst{k}"), d));
        }
        g
    }
}

fn glorot_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    Matrix::xavier(1, n, rng).data
}

impl GraphEncoderParams {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Self {
        let proj = Matrix::xavier(config.proj_dim, config.input_dim, rng);
        let w = (0..config.heads).map(|_| Matrix::xavier(config.head_dim, config.proj_dim, rng)).collect();
        let a_src = (0..config.heads).map(|_| glorot_vec(config.head_dim, rng)).collect();
        let a_dst = (0..config.heads).map(|_| glorot_vec(config.head_dim, rng)).collect();
        GraphEncoderParams { config, proj, proj_bias: vec![0.0; config.proj_dim], w, a_src, a_dst }
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    /// Forward pass over explicit node features and neighbor lists. Self
    /// loops are added where missing; neighbor order does not matter.
    pub fn forward(&self, features: &[Vec<f64>], neighbors: &[Vec<usize>]) -> Result<EncoderTrace, KgError> {
        let cfg = &self.config;
        if let Some(bad) = features.iter().find(|f| f.len() != cfg.input_dim) {
            return Err(KgError::ShapeMismatch { expected: cfg.input_dim, got: bad.len() });
        }
        if neighbors.len() != features.len() {
            return Err(KgError::ShapeMismatch { expected: features.len(), got: neighbors.len() });
        }
        let n = features.len();
        let neighbors: Vec<Vec<usize>> = neighbors
            .iter()
            .enumerate()
            .map(|(i, ns)| {
                let mut v = ns.clone();
                v.push(i);
                v.sort_unstable();
                v.dedup();
                v
            })
            .collect();
        let z: Vec<Vec<f64>> = features
            .iter()
            .map(|x| {
                let mut u = self.proj.matvec(x);
                axpy(&mut u, 1.0, &self.proj_bias);
                u.iter().map(|v| v.tanh()).collect()
            })
            .collect();
        let mut output = vec![0.0; cfg.output_dim()];
        let mut hs = Vec::with_capacity(cfg.heads);
        let mut all_logits = Vec::with_capacity(cfg.heads);
        let mut all_alpha = Vec::with_capacity(cfg.heads);
        for k in 0..cfg.heads {
            let h: Vec<Vec<f64>> = z.iter().map(|zi| self.w[k].matvec(zi)).collect();
            let s: Vec<f64> = h.iter().map(|hi| dot(&self.a_src[k], hi)).collect();
            let t: Vec<f64> = h.iter().map(|hi| dot(&self.a_dst[k], hi)).collect();
            let mut logits = Vec::with_capacity(n);
            let mut alpha = Vec::with_capacity(n);
            let out_k = &mut output[k * cfg.head_dim..(k + 1) * cfg.head_dim];
            for i in 0..n {
                let m: Vec<f64> = neighbors[i].iter().map(|&j| s[i] + t[j]).collect();
                let e: Vec<f64> = m.iter().map(|&x| leaky_relu(x, cfg.slope)).collect();
                let a = softmax(&e);
                for (&j, &aij) in neighbors[i].iter().zip(&a) {
                    axpy(out_k, aij / n as f64, &h[j]);
                }
                logits.push(m);
                alpha.push(a);
            }
            hs.push(h);
            all_logits.push(logits);
            all_alpha.push(alpha);
        }
        Ok(EncoderTrace {
            features: features.to_vec(),
            neighbors,
            z,
            h: hs,
            logits: all_logits,
            alpha: all_alpha,
            output,
        })
    }

    pub fn encode_nodes(&self, features: &[Vec<f64>], neighbors: &[Vec<usize>]) -> Result<Vec<f64>, KgError> {
        Ok(self.forward(features, neighbors)?.output)
    }

    /// Accumulate `∂L/∂params` into `grads` given `∂L/∂output`.
    pub fn backward(&self, trace: &EncoderTrace, grad_out: &[f64], grads: &mut GraphEncoderParams) {
        let cfg = &self.config;
        let n = trace.z.len();
        if n == 0 {
            return;
        }
        let mut dz = vec![vec![0.0; cfg.proj_dim]; n];
        for k in 0..cfg.heads {
            let go: Vec<f64> = grad_out[k * cfg.head_dim..(k + 1) * cfg.head_dim].iter().map(|g| g / n as f64).collect();
            let h = &trace.h[k];
            let mut dh = vec![vec![0.0; cfg.head_dim]; n];
            let mut ds = vec![0.0; n];
            let mut dt = vec![0.0; n];
            for i in 0..n {
                let nb = &trace.neighbors[i];
                let alpha = &trace.alpha[k][i];
                let dalpha: Vec<f64> = nb.iter().map(|&j| dot(&go, &h[j])).collect();
                let mean: f64 = alpha.iter().zip(&dalpha).map(|(a, d)| a * d).sum();
                for (idx, &j) in nb.iter().enumerate() {
                    axpy(&mut dh[j], alpha[idx], &go);
                    let de = alpha[idx] * (dalpha[idx] - mean);
                    let dm = if trace.logits[k][i][idx] > 0.0 { de } else { de * cfg.slope };
                    ds[i] += dm;
                    dt[j] += dm;
                }
            }
            for i in 0..n {
                axpy(&mut grads.a_src[k], ds[i], &h[i]);
                axpy(&mut grads.a_dst[k], dt[i], &h[i]);
                axpy(&mut dh[i], ds[i], &self.a_src[k]);
                axpy(&mut dh[i], dt[i], &self.a_dst[k]);
                grads.w[k].add_outer(1.0, &dh[i], &trace.z[i]);
                axpy(&mut dz[i], 1.0, &self.w[k].t_matvec(&dh[i]));
            }
        }
        for i in 0..n {
            let du: Vec<f64> = dz[i].iter().zip(&trace.z[i]).map(|(d, z)| d * (1.0 - z * z)).collect();
            grads.proj.add_outer(1.0, &du, &trace.features[i]);
            axpy(&mut grads.proj_bias, 1.0, &du);
        }
    }
}

/// Node features (mean token embedding of each entity) and undirected
/// neighbor lists for `graph`, nodes in sorted order.
pub fn graph_inputs<M: ProposalModel + ?Sized>(graph: &KnowledgeGraph, embedder: &M) -> (Vec<Vec<f64>>, Vec<Vec<usize>>) {
    let nodes: Vec<&str> = graph.nodes().into_iter().collect();
    let index_of = |name: &str| nodes.binary_search(&name).expect("node present");
    let features = nodes
        .iter()
        .map(|name| {
            let toks: Vec<String> = name.split_whitespace().map(String::from).collect();
            mean_embedding(embedder, &toks)
        })
        .collect();
    let mut neighbors = vec![Vec::new(); nodes.len()];
    for t in graph.triples() {
        let (s, o) = (index_of(t.subject()), index_of(t.object()));
        neighbors[s].push(o);
        neighbors[o].push(s);
    }
    for ns in &mut neighbors {
        ns.sort_unstable();
        ns.dedup();
    }
    (features, neighbors)
}

/// Pooled graph vector; the zero vector for an empty graph.
pub fn encode_graph<M: ProposalModel + ?Sized>(
    graph: &KnowledgeGraph,
    embedder: &M,
    params: &GraphEncoderParams,
) -> Result<Vec<f64>, KgError> {
    if embedder.embedding_dim() != params.config.input_dim {
        return Err(KgError::ShapeMismatch { expected: params.config.input_dim, got: embedder.embedding_dim() });
    }
    let (features, neighbors) = graph_inputs(graph, embedder);
    params.encode_nodes(&features, &neighbors)
}
