//! Finite-difference verification of every term of the client objective.
//!
//! Each instance draws a toy extractor with one ReLU hidden layer, a batch
//! with at least two classes and a random anchor set, then compares the
//! analytic gradient of one loss node (with respect to all model
//! parameters) against central differences. The graph is built by
//! [`fed::build_objective`], the same code clients train with.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{self, AutodiffError, Graph, Tensor, Var};
use crate::fed::{self, FedError, LossTerms, LossWeights, Target};
use crate::models::{self, BoundModel, ExtractorSpec, ModelError};
use crate::proto::{AnchorSet, ProtoError};

pub const TOLERANCE: f64 = 1e-4;
pub const EPS: f64 = 1e-5;

/// Hidden pre-activations closer to zero than this are redrawn, so that a
/// central difference never straddles the ReLU kink.
const KINK_GUARD: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub instances: usize,
    pub seed: u64,
    /// Multiplies every analytic gradient before comparison; used to make
    /// sure a broken gradient is caught.
    pub fault: Option<f64>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            instances: 50,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TermCheck {
    pub term: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
}

impl TermCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub terms: Vec<TermCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.terms.iter().all(TermCheck::passed)
    }
}

type Select = fn(&LossTerms) -> Option<Var>;

const TERMS: [(&str, Select); 5] = [
    ("L_S", |t| Some(t.supervised)),
    ("L_R", |t| t.regularization),
    ("L_MCL", |t| t.contrastive),
    ("L_CC", |t| t.calibration),
    ("total", |t| Some(t.total)),
];

struct Instance {
    params: Vec<Tensor>,
    batch: Tensor,
    labels: Vec<usize>,
    anchors: AnchorSet,
    d_star: f64,
    weights: LossWeights,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn near_kink(params: &[Tensor], batch: &Tensor) -> bool {
    let (w, b) = (&params[0], &params[1]);
    (0..batch.rows()).any(|r| {
        (0..w.rows()).any(|u| {
            let pre: f64 = w.row(u).iter().zip(batch.row(r)).map(|(a, x)| a * x).sum::<f64>() + b.values()[u];
            pre.abs() < KINK_GUARD
        })
    })
}

fn draw_instance(rng: &mut ChaCha8Rng) -> Result<Instance, FedError> {
    loop {
        let classes = rng.random_range(2..5);
        let input_dim = rng.random_range(2..5);
        let feature_dim = rng.random_range(2..5);
        let spec = ExtractorSpec {
            input_dim,
            hidden_widths: vec![rng.random_range(2..6)],
            feature_dim,
        };
        let model = models::init_parameters(0, &spec, classes, rng.random());
        let mut params: Vec<Tensor> = model.parameters().into_iter().cloned().collect();
        // Biases start at zero; randomize them so they are exercised too.
        for p in params.iter_mut().filter(|p| p.shape().len() == 1) {
            p.values_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
        let rows = rng.random_range(3..8);
        let batch = Tensor::matrix(rows, input_dim, normal_vec(rng, rows * input_dim))?;
        let mut labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();
        if labels.iter().all(|&l| l == labels[0]) {
            labels[0] = (labels[0] + 1) % classes;
        }
        if near_kink(&params, &batch) {
            continue;
        }
        let anchors = AnchorSet::new((0..classes).map(|_| normal_vec(rng, feature_dim)).collect(), 0)?;
        return Ok(Instance {
            params,
            batch,
            labels,
            anchors,
            d_star: rng.random_range(0.0..3.0),
            weights: LossWeights {
                regularization: rng.random_range(0.05..1.0),
                contrastive: rng.random_range(0.05..1.0),
                calibration: rng.random_range(0.05..1.0),
            },
        });
    }
}

fn into_autodiff(e: FedError) -> AutodiffError {
    match e {
        FedError::Autodiff(a) | FedError::Proto(ProtoError::Autodiff(a)) | FedError::Model(ModelError::Autodiff(a)) => a,
        _ => AutodiffError::Empty("loss construction"),
    }
}

fn check_term(instance: &Instance, select: Select, fault: Option<f64>) -> Result<f64, FedError> {
    let build = |g: &mut Graph, vars: &[Var]| -> autodiff::Result<Var> {
        let bound = BoundModel::from_vars(vars);
        let x = g.constant(instance.batch.clone());
        let target = Target::Anchors {
            anchors: &instance.anchors,
            d_star: instance.d_star,
        };
        let terms = fed::build_objective(g, &bound, x, &instance.labels, target, instance.weights).map_err(into_autodiff)?;
        select(&terms).ok_or(AutodiffError::Empty("selected loss term"))
    };
    let mut analytic = autodiff::analytic_gradients(&build, &instance.params)?;
    if let Some(f) = fault {
        analytic.iter_mut().flatten().for_each(|g| *g *= f);
    }
    Ok(autodiff::compare_with_finite_differences(&build, &instance.params, &analytic, EPS)?.max_rel_error)
}

/// Checks `L_S`, `L_R`, `L_MCL`, `L_CC` and their weighted total on
/// `options.instances` random instances each.
pub fn run_gradcheck(options: GradcheckOptions) -> Result<GradcheckReport, FedError> {
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let instances = (0..options.instances)
        .map(|_| draw_instance(&mut rng))
        .collect::<Result<Vec<_>, _>>()?;
    let mut terms = Vec::with_capacity(TERMS.len());
    for (term, select) in TERMS {
        let mut worst = 0.0f64;
        for inst in &instances {
            worst = worst.max(check_term(inst, select, options.fault)?);
        }
        terms.push(TermCheck {
            term,
            instances: instances.len(),
            max_rel_error: worst,
        });
    }
    Ok(GradcheckReport { terms })
}
