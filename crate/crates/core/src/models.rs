//! Heterogeneous feature extractors and the bias-free classifier head.
//!
//! Every extractor maps `input_dim` inputs to `feature_dim` (K) features, so
//! prototypes from different architectures live in one space. Hidden layers
//! are ReLU; the last layer is linear so features can take any sign.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Gradients, Graph, Tensor, Var};
use crate::rng::{self, Stream};

pub const MAX_ZOO_SIZE: usize = 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("zoo size must be in 1..={MAX_ZOO_SIZE}, got {0}")]
    ZooSize(usize),
    #[error("expected input of dimension {expected}, got {got}")]
    InputDim { expected: usize, got: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorSpec {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub feature_dim: usize,
}

impl ExtractorSpec {
    /// Single linear map from inputs to features, no hidden layer.
    pub fn linear_probe(input_dim: usize, feature_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_widths: Vec::new(),
            feature_dim,
        }
    }

    /// `(fan_in, fan_out)` for every layer, last one ending at `feature_dim`.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_widths.len() + 1);
        let mut fan_in = self.input_dim;
        for &w in &self.hidden_widths {
            dims.push((fan_in, w));
            fan_in = w;
        }
        dims.push((fan_in, self.feature_dim));
        dims
    }

    pub fn num_parameters(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Builds `zoo_size` MLP extractors of depth 1..=zoo_size hidden layers.
///
/// Member `j` has `j + 1` hidden layers whose width grows with `j`; the seed
/// jitters widths by a few units so different seeds give different zoos.
pub fn build_zoo(
    zoo_size: usize,
    input_dim: usize,
    feature_dim: usize,
    seed: u64,
) -> Result<Vec<ExtractorSpec>, ModelError> {
    if !(1..=MAX_ZOO_SIZE).contains(&zoo_size) {
        return Err(ModelError::ZooSize(zoo_size));
    }
    let mut rng = rng::stream(seed, Stream::Zoo, zoo_size as u64, 0);
    Ok((0..zoo_size)
        .map(|j| {
            let base = 24 + 8 * j;
            let hidden_widths = (0..=j).map(|_| base + rng.random_range(0..4)).collect();
            ExtractorSpec {
                input_dim,
                hidden_widths,
                feature_dim,
            }
        })
        .collect())
}

/// Architecture index of client `client` in a zoo of `zoo_size` members.
pub fn architecture_for_client(client: usize, zoo_size: usize) -> usize {
    client % zoo_size
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `[fan_out × fan_in]`
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Linear head `φ ∈ R^{C×K}`; logits are exactly `φ · f`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub phi: Tensor,
}

impl ClassifierHead {
    pub fn classes(&self) -> usize {
        self.phi.rows()
    }

    /// Row `c`, the class-`c` proxy vector.
    pub fn proxy(&self, class: usize) -> &[f64] {
        self.phi.row(class)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub architecture: usize,
    pub spec: ExtractorSpec,
    pub layers: Vec<DenseLayer>,
    pub head: ClassifierHead,
}

/// Graph handles for one model's parameters.
#[derive(Debug, Clone)]
pub struct BoundModel {
    layers: Vec<(Var, Var)>,
    phi: Var,
}

impl BoundModel {
    /// Wraps leaves created elsewhere, in [`ModelState::parameters`] order.
    pub fn from_vars(vars: &[Var]) -> Self {
        assert!(vars.len() % 2 == 1, "expected (W, b) pairs followed by phi");
        let (pairs, phi) = vars.split_at(vars.len() - 1);
        Self {
            layers: pairs.chunks(2).map(|p| (p[0], p[1])).collect(),
            phi: phi[0],
        }
    }

    pub fn phi(&self) -> Var {
        self.phi
    }

    /// Features `[b × K]` for a batch `x: [b × input_dim]`.
    pub fn features(&self, graph: &mut Graph, x: Var) -> Result<Var, ModelError> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = graph.linear(h, w)?;
            h = graph.add_row(h, b)?;
            if i < last {
                h = graph.relu(h);
            }
        }
        Ok(h)
    }

    /// Logits `[b × C]` for features `[b × K]`.
    pub fn logits(&self, graph: &mut Graph, features: Var) -> Result<Var, ModelError> {
        Ok(graph.linear(features, self.phi)?)
    }
}

/// Draws fresh parameters for `spec` with a `classes`-way head.
///
/// Weights are uniform in `±sqrt(6 / fan_in)` for ReLU layers and
/// `±sqrt(3 / fan_in)` for the linear feature layer and the head; biases
/// start at zero.
pub fn init_parameters(architecture: usize, spec: &ExtractorSpec, classes: usize, seed: u64) -> ModelState {
    let mut rng = rng::stream(seed, Stream::ModelInit, architecture as u64, 0);
    let dims = spec.layer_dims();
    let last = dims.len() - 1;
    let layers = dims
        .iter()
        .enumerate()
        .map(|(i, &(fan_in, fan_out))| {
            let gain = if i < last { 6.0 } else { 3.0 };
            DenseLayer {
                weight: uniform_matrix(&mut rng, fan_out, fan_in, (gain / fan_in as f64).sqrt()),
                bias: Tensor::zeros(vec![fan_out]),
            }
        })
        .collect();
    let k = spec.feature_dim;
    let head = ClassifierHead {
        phi: uniform_matrix(&mut rng, classes, k, (3.0 / k as f64).sqrt()),
    };
    ModelState {
        architecture,
        spec: spec.clone(),
        layers,
        head,
    }
}

fn uniform_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Tensor {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite positive bound");
    let values = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::matrix(rows, cols, values).expect("shape matches")
}

impl ModelState {
    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    pub fn classes(&self) -> usize {
        self.head.classes()
    }

    /// Parameter tensors in binding order: `(W, b)` per layer, then `φ`.
    pub fn parameters(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .chain(std::iter::once(&self.head.phi))
            .collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .chain(std::iter::once(&mut self.head.phi))
            .collect()
    }

    /// Copies parameters into `graph` as leaves (trainable or constant).
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> BoundModel {
        let mut leaf = |t: &Tensor| {
            if trainable {
                graph.param(t.clone())
            } else {
                graph.constant(t.clone())
            }
        };
        let layers = self
            .layers
            .iter()
            .map(|l| (leaf(&l.weight), leaf(&l.bias)))
            .collect();
        let phi = leaf(&self.head.phi);
        BoundModel { layers, phi }
    }

    /// Plain gradient-descent step using gradients of a bound copy.
    pub fn apply_gradients(&mut self, bound: &BoundModel, grads: &Gradients, learning_rate: f64) {
        let vars: Vec<Var> = bound
            .layers
            .iter()
            .flat_map(|&(w, b)| [w, b])
            .chain(std::iter::once(bound.phi))
            .collect();
        for (param, var) in self.parameters_mut().into_iter().zip(vars) {
            let g = grads.wrt(var);
            for (p, gk) in param.values_mut().iter_mut().zip(g) {
                *p -= learning_rate * gk;
            }
        }
    }

    /// Features for each row of `inputs: [n × input_dim]`, without recording gradients.
    pub fn features(&self, inputs: &Tensor) -> Result<Tensor, ModelError> {
        if inputs.cols() != self.spec.input_dim {
            return Err(ModelError::InputDim {
                expected: self.spec.input_dim,
                got: inputs.cols(),
            });
        }
        let mut graph = Graph::new();
        let bound = self.bind(&mut graph, false);
        let x = graph.constant(inputs.clone());
        let f = bound.features(&mut graph, x)?;
        Ok(graph.value(f).clone())
    }
}

/// `f(x; θ)` for a single input vector.
pub fn forward_features(state: &ModelState, x: &[f64]) -> Result<Vec<f64>, ModelError> {
    if x.len() != state.spec.input_dim {
        return Err(ModelError::InputDim {
            expected: state.spec.input_dim,
            got: x.len(),
        });
    }
    let inputs = Tensor::matrix(1, x.len(), x.to_vec())?;
    Ok(state.features(&inputs)?.into_values())
}

/// `φ · features`, no bias.
pub fn forward_logits(state: &ModelState, features: &[f64]) -> Result<Vec<f64>, ModelError> {
    let k = state.feature_dim();
    if features.len() != k {
        return Err(ModelError::InputDim {
            expected: k,
            got: features.len(),
        });
    }
    let mut graph = Graph::new();
    let phi = graph.constant(state.head.phi.clone());
    let f = graph.constant(Tensor::vector(features.to_vec()));
    let logits = graph.matvec(phi, f)?;
    Ok(graph.value(logits).values().to_vec())
}
