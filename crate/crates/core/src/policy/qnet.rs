//! Q-network: a state vector (graph encoding, or a projected query
//! embedding for the ablation) and an action vector feed one hidden layer
//! and a scalar output.
//!
//! ```text
//! s   = encode(G)                 | tanh(S e_query + b_s)
//! a   = tanh(A e_action + b_a)
//! hid = tanh(U_s s + U_a a + c)
//! Q   = w · hid + b
//! ```

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PolicyError;
use crate::checkpoint::{CheckpointError, Container, TensorData};
use crate::kg::{graph_inputs, EncoderConfig, EncoderTrace, GraphEncoderParams, KnowledgeGraph};
use crate::lm::{mean_embedding, ProposalModel};
use crate::nn::{axpy, dot, Matrix, ParamSet};

const KIND: &str = "qnet";

/// What the network sees as state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StateMode {
    /// Knowledge-graph encoding.
    #[default]
    Graph,
    /// Embedding of the most recent sentence only.
    Query,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QNetConfig {
    pub state: StateMode,
    pub encoder: EncoderConfig,
    pub action_dim: usize,
    pub hidden_dim: usize,
}

impl Default for QNetConfig {
    fn default() -> Self {
        QNetConfig { state: StateMode::Graph, encoder: EncoderConfig::default(), action_dim: 64, hidden_dim: 64 }
    }
}

impl QNetConfig {
    /// Dimensions at the scale of the published model: roughly 1.8e5
    /// trainable parameters over 256-dimensional token embeddings.
    pub fn reference() -> Self {
        QNetConfig {
            state: StateMode::Graph,
            encoder: EncoderConfig { input_dim: 256, proj_dim: 256, heads: 4, head_dim: 64, slope: 0.2 },
            action_dim: 128,
            hidden_dim: 64,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.encoder.output_dim()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StateEncoder {
    Graph(GraphEncoderParams),
    Query { proj: Matrix, bias: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QNetworkParams {
    pub config: QNetConfig,
    pub state: StateEncoder,
    pub action_proj: Matrix,
    pub action_bias: Vec<f64>,
    pub hidden_state: Matrix,
    pub hidden_action: Matrix,
    pub hidden_bias: Vec<f64>,
    pub out: Vec<f64>,
    pub out_bias: Vec<f64>,
}

impl ParamSet for QNetworkParams {
    fn groups(&self) -> Vec<(String, &[f64])> {
        let mut g: Vec<(String, &[f64])> = match &self.state {
            StateEncoder::Graph(enc) => enc.groups(),
            StateEncoder::Query { proj, bias } => vec![("query.proj".into(), &proj.data), ("query.bias".into(), bias)],
        };
        g.push(("action.proj".into(), &self.action_proj.data));
        g.push(("action.bias".into(), &self.action_bias));
        g.push(("hidden.state".into(), &self.hidden_state.data));
        g.push(("hidden.action".into(), &self.hidden_action.data));
        g.push(("hidden.bias".into(), &self.hidden_bias));
        g.push(("out.weight".into(), &self.out));
        g.push(("out.bias".into(), &self.out_bias));
        g
    }

    fn groups_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut g: Vec<(String, &mut [f64])> = match &mut self.state {
            StateEncoder::Graph(enc) => enc.groups_mut(),
            StateEncoder::Query { proj, bias } => {
                vec![("query.proj".into(), &mut proj.data), ("query.bias".into(), bias)]
            }
        };
        g.push(("action.proj".into(), &mut self.action_proj.data));
        g.push(("action.bias".into(), &mut self.action_bias));
        g.push(("hidden.state".into(), &mut self.hidden_state.data));
        g.push(("hidden.action".into(), &mut self.hidden_action.data));
        g.push(("hidden.bias".into(), &mut self.hidden_bias));
        g.push(("out.weight".into(), &mut self.out));
        g.push(("out.bias".into(), &mut self.out_bias));
        g
    }
}

/// Model-ready state features.
#[derive(Debug, Clone, PartialEq)]
pub enum StateInput {
    Graph { features: Vec<Vec<f64>>, neighbors: Vec<Vec<usize>> },
    Query(Vec<f64>),
}

impl StateInput {
    pub fn build<M: ProposalModel + ?Sized>(mode: StateMode, graph: &KnowledgeGraph, query: &[String], embedder: &M) -> Self {
        match mode {
            StateMode::Graph => {
                let (features, neighbors) = graph_inputs(graph, embedder);
                StateInput::Graph { features, neighbors }
            }
            StateMode::Query => StateInput::Query(mean_embedding(embedder, query)),
        }
    }
}

enum StateTrace {
    Graph(EncoderTrace),
    Query { input: Vec<f64> },
}

/// Cached state-side activations, reusable across candidate actions.
pub struct StateVector {
    pub value: Vec<f64>,
    trace: StateTrace,
}

fn tanh_affine(m: &Matrix, b: &[f64], x: &[f64]) -> Vec<f64> {
    let mut u = m.matvec(x);
    axpy(&mut u, 1.0, b);
    u.iter().map(|v| v.tanh()).collect()
}

fn tanh_grad(dy: &[f64], y: &[f64]) -> Vec<f64> {
    dy.iter().zip(y).map(|(d, y)| d * (1.0 - y * y)).collect()
}

impl QNetworkParams {
    pub fn new<R: Rng + ?Sized>(config: QNetConfig, rng: &mut R) -> Self {
        let d = config.encoder.input_dim;
        let s = config.state_dim();
        let state = match config.state {
            StateMode::Graph => StateEncoder::Graph(GraphEncoderParams::new(config.encoder, rng)),
            StateMode::Query => StateEncoder::Query { proj: Matrix::xavier(s, d, rng), bias: vec![0.0; s] },
        };
        QNetworkParams {
            config,
            state,
            action_proj: Matrix::xavier(config.action_dim, d, rng),
            action_bias: vec![0.0; config.action_dim],
            hidden_state: Matrix::xavier(config.hidden_dim, s, rng),
            hidden_action: Matrix::xavier(config.hidden_dim, config.action_dim, rng),
            hidden_bias: vec![0.0; config.hidden_dim],
            out: Matrix::xavier(1, config.hidden_dim, rng).data,
            out_bias: vec![0.0],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.config.encoder.input_dim
    }

    pub fn state_vector(&self, input: &StateInput) -> Result<StateVector, PolicyError> {
        match (&self.state, input) {
            (StateEncoder::Graph(enc), StateInput::Graph { features, neighbors }) => {
                let trace = enc.forward(features, neighbors)?;
                Ok(StateVector { value: trace.output.clone(), trace: StateTrace::Graph(trace) })
            }
            (StateEncoder::Query { proj, bias }, StateInput::Query(e)) => {
                if e.len() != proj.cols {
                    return Err(PolicyError::Shape { expected: proj.cols, got: e.len() });
                }
                Ok(StateVector { value: tanh_affine(proj, bias, e), trace: StateTrace::Query { input: e.clone() } })
            }
            _ => Err(PolicyError::StateModeMismatch),
        }
    }

    fn action_hidden(&self, state: &[f64], action_emb: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let a = tanh_affine(&self.action_proj, &self.action_bias, action_emb);
        let mut u = self.hidden_state.matvec(state);
        axpy(&mut u, 1.0, &self.hidden_action.matvec(&a));
        axpy(&mut u, 1.0, &self.hidden_bias);
        (a, u.iter().map(|v| v.tanh()).collect())
    }

    /// Q for one action embedding given a cached state vector.
    pub fn q_from_state(&self, state: &StateVector, action_emb: &[f64]) -> f64 {
        let (_, hid) = self.action_hidden(&state.value, action_emb);
        dot(&self.out, &hid) + self.out_bias[0]
    }

    pub fn q(&self, input: &StateInput, action_emb: &[f64]) -> Result<f64, PolicyError> {
        if action_emb.len() != self.input_dim() {
            return Err(PolicyError::Shape { expected: self.input_dim(), got: action_emb.len() });
        }
        Ok(self.q_from_state(&self.state_vector(input)?, action_emb))
    }

    /// Returns Q and accumulates `upstream(Q) · ∂Q/∂θ` into `grads`.
    pub fn q_with_grad(
        &self,
        input: &StateInput,
        action_emb: &[f64],
        upstream: impl FnOnce(f64) -> f64,
        grads: &mut QNetworkParams,
    ) -> Result<f64, PolicyError> {
        let sv = self.state_vector(input)?;
        let (a, hid) = self.action_hidden(&sv.value, action_emb);
        let q = dot(&self.out, &hid) + self.out_bias[0];
        self.backward(&sv, action_emb, &a, &hid, upstream(q), grads);
        Ok(q)
    }

    fn backward(&self, sv: &StateVector, action_emb: &[f64], a: &[f64], hid: &[f64], g: f64, grads: &mut QNetworkParams) {
        axpy(&mut grads.out, g, hid);
        grads.out_bias[0] += g;
        let dhid: Vec<f64> = self.out.iter().map(|w| w * g).collect();
        let dpre = tanh_grad(&dhid, hid);
        grads.hidden_state.add_outer(1.0, &dpre, &sv.value);
        grads.hidden_action.add_outer(1.0, &dpre, a);
        axpy(&mut grads.hidden_bias, 1.0, &dpre);
        let da = tanh_grad(&self.hidden_action.t_matvec(&dpre), a);
        grads.action_proj.add_outer(1.0, &da, action_emb);
        axpy(&mut grads.action_bias, 1.0, &da);
        let ds = self.hidden_state.t_matvec(&dpre);
        match (&self.state, &sv.trace, &mut grads.state) {
            (StateEncoder::Graph(enc), StateTrace::Graph(trace), StateEncoder::Graph(genc)) => enc.backward(trace, &ds, genc),
            (StateEncoder::Query { .. }, StateTrace::Query { input }, StateEncoder::Query { proj, bias }) => {
                let du = tanh_grad(&ds, &sv.value);
                proj.add_outer(1.0, &du, input);
                axpy(bias, 1.0, &du);
            }
            _ => unreachable!("gradient buffer built with zeros_like"),
        }
    }

    pub fn to_container(&self, extra_config: &str) -> Container {
        let mut c = Container::new(KIND);
        c.text("qnet_config", serde_json::to_string(&self.config).expect("config serializes"));
        c.text("train_config", extra_config);
        for (name, g) in self.groups() {
            c.push(name, vec![g.len() as u64], TensorData::F64(g.to_vec()));
        }
        c
    }

    /// Returns the parameters and the echoed training config text.
    pub fn from_container(c: &Container) -> Result<(Self, String), PolicyError> {
        c.expect_kind(KIND)?;
        let config: QNetConfig = serde_json::from_str(c.get_text("qnet_config")?)
            .map_err(|e| CheckpointError::BadSection { name: "qnet_config".into(), reason: e.to_string() })?;
        let mut params = QNetworkParams::new(config, &mut crate::seed::rng_from_seed(0));
        for (name, g) in params.groups_mut() {
            let (_, data) = c.get_f64(&name)?;
            if data.len() != g.len() {
                return Err(CheckpointError::BadSection { name, reason: "length mismatch".into() }.into());
            }
            g.copy_from_slice(data);
        }
        Ok((params, c.get_text("train_config")?.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>, extra_config: &str) -> Result<(), PolicyError> {
        Ok(self.to_container(extra_config).save(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, String), PolicyError> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Q-value of `action` in the state formed by `graph` and the latest
/// sentence `query`.
pub fn q_value<M: ProposalModel + ?Sized>(
    params: &QNetworkParams,
    graph: &KnowledgeGraph,
    query: &[String],
    action: &crate::lm::Candidate,
    embedder: &M,
) -> Result<f64, PolicyError> {
    if embedder.embedding_dim() != params.input_dim() {
        return Err(PolicyError::Shape { expected: params.input_dim(), got: embedder.embedding_dim() });
    }
    let input = StateInput::build(params.config.state, graph, query, embedder);
    params.q(&input, &mean_embedding(embedder, &action.tokens))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::random_normal_vec;
    use crate::seed::rng_from_seed;

    fn tiny(state: StateMode) -> QNetConfig {
        QNetConfig {
            state,
            encoder: EncoderConfig { input_dim: 4, proj_dim: 3, heads: 2, head_dim: 2, slope: 0.2 },
            action_dim: 3,
            hidden_dim: 5,
        }
    }

    fn graph_input(rng: &mut crate::seed::SeededRng) -> StateInput {
        StateInput::Graph {
            features: (0..3).map(|_| random_normal_vec(4, 1.0, rng)).collect(),
            neighbors: vec![vec![1], vec![0, 2], vec![1]],
        }
    }

    #[test]
    fn zero_output_layer_gives_bias() {
        let mut rng = rng_from_seed(1);
        let mut p = QNetworkParams::new(tiny(StateMode::Graph), &mut rng);
        p.out.fill(0.0);
        p.out_bias[0] = 0.37;
        let x = graph_input(&mut rng);
        assert_eq!(p.q(&x, &[0.1, 0.2, 0.3, 0.4]).unwrap(), 0.37);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for mode in [StateMode::Graph, StateMode::Query] {
            let mut rng = rng_from_seed(2);
            let p = QNetworkParams::new(tiny(mode), &mut rng);
            let x = match mode {
                StateMode::Graph => graph_input(&mut rng),
                StateMode::Query => StateInput::Query(random_normal_vec(4, 1.0, &mut rng)),
            };
            let e = random_normal_vec(4, 1.0, &mut rng);
            let mut grads = p.zeros_like();
            p.q_with_grad(&x, &e, |_| 1.0, &mut grads).unwrap();
            let analytic: Vec<f64> = grads.groups().into_iter().flat_map(|(_, g)| g.to_vec()).collect();
            for (flat, &a) in analytic.iter().enumerate() {
                let eval = |delta: f64| {
                    let mut q = p.clone();
                    let mut f = flat;
                    for (_, g) in q.groups_mut() {
                        if f < g.len() {
                            g[f] += delta;
                            break;
                        }
                        f -= g.len();
                    }
                    q.q(&x, &e).unwrap()
                };
                let numeric = (eval(1e-6) - eval(-1e-6)) / 2e-6;
                let err = (a - numeric).abs();
                assert!(err < 1e-9 || err / a.abs().max(numeric.abs()) < 1e-4, "{mode:?} param {flat}: {a} vs {numeric}");
            }
        }
    }

    #[test]
    fn reference_size_is_same_order_as_published() {
        let p = QNetworkParams::new(QNetConfig::reference(), &mut rng_from_seed(0));
        let n = p.num_params();
        assert!((100_000..1_000_000).contains(&n), "{n}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = QNetworkParams::new(tiny(StateMode::Graph), &mut rng_from_seed(3));
        let c = Container::decode(&p.to_container("{\"gamma\":0.99}").encode()).unwrap();
        let (back, extra) = QNetworkParams::from_container(&c).unwrap();
        assert_eq!(back, p);
        assert_eq!(extra, "{\"gamma\":0.99}");
    }
}
