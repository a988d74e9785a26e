//! Prototype and anchor mathematics.
//!
//! Local prototypes are per-class feature means. The server either averages
//! them into global prototypes (the prototype baselines) or uses them to
//! nudge a set of semantic anchors through an exponential moving average.
//! Anchors are generated from random class codes passed through a dense
//! embedding layer, independently of any client data.
//!
//! The loss builders here record onto an [`autodiff::Graph`](crate::autodiff::Graph)
//! so they can be combined into a client's training objective.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{distance, AutodiffError, Graph, Tensor, Var};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtoError {
    #[error("no anchor for class {class} (anchor set has {classes} classes)")]
    MissingAnchor { class: usize, classes: usize },
    #[error("EMA decay must be in [0, 1], got {0}")]
    AlphaOutOfRange(f64),
    #[error("prototype for class {class} has {got} entries, expected {expected}")]
    Dimension { class: usize, expected: usize, got: usize },
    #[error("prototype for class {0} has non-finite entries")]
    NonFinite(usize),
    #[error("anchor set needs at least two classes")]
    TooFewClasses,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Mean feature vector of one class on one client (or across clients).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub class_id: usize,
    pub vector: Vec<f64>,
    /// Number of samples behind the vector.
    pub count: usize,
}

/// One semantic anchor per class plus the round it belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    anchors: Vec<Vec<f64>>,
    round: u64,
}

impl AnchorSet {
    pub fn new(anchors: Vec<Vec<f64>>, round: u64) -> Result<Self, ProtoError> {
        let k = anchors.first().map_or(0, Vec::len);
        for (class, a) in anchors.iter().enumerate() {
            if a.len() != k {
                return Err(ProtoError::Dimension {
                    class,
                    expected: k,
                    got: a.len(),
                });
            }
            if !a.iter().all(|v| v.is_finite()) {
                return Err(ProtoError::NonFinite(class));
            }
        }
        Ok(Self { anchors, round })
    }

    pub fn classes(&self) -> usize {
        self.anchors.len()
    }

    pub fn dim(&self) -> usize {
        self.anchors.first().map_or(0, Vec::len)
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn anchor(&self, class: usize) -> Result<&[f64], ProtoError> {
        self.anchors
            .get(class)
            .map(Vec::as_slice)
            .ok_or(ProtoError::MissingAnchor {
                class,
                classes: self.anchors.len(),
            })
    }

    pub fn anchors(&self) -> &[Vec<f64>] {
        &self.anchors
    }

    /// The anchors as a `[C × K]` matrix.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_rows(&self.anchors).expect("rows share one length")
    }
}

/// Pre-defined class codes `A` and the embedding `h_ψ(A) = A·Wᵀ + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassAnchorSeed {
    /// `[C × K]`, fixed once drawn.
    pub codes: Tensor,
    /// `[K × K]`
    pub weight: Tensor,
    /// `[K]`
    pub bias: Tensor,
}

impl ClassAnchorSeed {
    /// Current projection `h_ψ(A)`.
    pub fn project(&self) -> Result<AnchorSet, ProtoError> {
        let mut g = Graph::new();
        let codes = g.constant(self.codes.clone());
        let w = g.constant(self.weight.clone());
        let b = g.constant(self.bias.clone());
        let out = project(&mut g, codes, w, b)?;
        let t = g.value(out);
        let rows = (0..t.rows()).map(|r| t.row(r).to_vec()).collect();
        AnchorSet::new(rows, 0)
    }
}

fn project(g: &mut Graph, codes: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
    let h = g.linear(codes, w)?;
    g.add_row(h, b)
}

/// Client-specific margin `d* = max(d_global, d_local)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginState {
    pub d_global: f64,
    /// `None` when the client holds fewer than two classes.
    pub d_local: Option<f64>,
    pub d_star: f64,
}

/// How the average pairwise distance among N vectors is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginRule {
    /// Sum over ordered pairs divided by `(N − 1)²`.
    #[default]
    AsPrinted,
    /// Sum over ordered pairs divided by `N (N − 1)`, a true average.
    Normalized,
}

/// Arithmetic mean of each class's feature rows.
///
/// `features` is `[n × K]`, `labels[i]` the class of row `i`. Classes without
/// rows are omitted. Output is sorted by class.
pub fn compute_local_prototypes(features: &Tensor, labels: &[usize]) -> Vec<Prototype> {
    let k = features.cols();
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (i, &label) in labels.iter().enumerate() {
        let (sum, count) = sums.entry(label).or_insert_with(|| (vec![0.0; k], 0));
        for (s, v) in sum.iter_mut().zip(features.row(i)) {
            *s += v;
        }
        *count += 1;
    }
    sums.into_iter()
        .map(|(class_id, (mut vector, count))| {
            let inv = 1.0 / count as f64;
            vector.iter_mut().for_each(|v| *v *= inv);
            Prototype {
                class_id,
                vector,
                count,
            }
        })
        .collect()
}

/// Weighted aggregation of client prototypes into one prototype per class.
///
/// `P̄^c = (1/|N_c|) Σ_{i∈N_c} (|D_{i,c}| / N_c) · P_i^c`, where `N_c` is the
/// set of contributing clients (and, in the weight, their total sample
/// count). Contributions are reduced in ascending client-id order. The
/// result's `count` is the total sample count.
pub fn aggregate_global(updates: &[(usize, &[Prototype])]) -> Result<BTreeMap<usize, Prototype>, ProtoError> {
    let mut ordered: Vec<&(usize, &[Prototype])> = updates.iter().collect();
    ordered.sort_by_key(|(id, _)| *id);

    let mut per_class: BTreeMap<usize, Vec<&Prototype>> = BTreeMap::new();
    for (_, protos) in &ordered {
        for p in protos.iter() {
            if !p.vector.iter().all(|v| v.is_finite()) {
                return Err(ProtoError::NonFinite(p.class_id));
            }
            per_class.entry(p.class_id).or_default().push(p);
        }
    }

    let mut out = BTreeMap::new();
    for (class_id, contributors) in per_class {
        let k = contributors[0].vector.len();
        if let Some(bad) = contributors.iter().find(|p| p.vector.len() != k) {
            return Err(ProtoError::Dimension {
                class: class_id,
                expected: k,
                got: bad.vector.len(),
            });
        }
        let total: usize = contributors.iter().map(|p| p.count).sum();
        let clients = contributors.len() as f64;
        let mut vector = vec![0.0; k];
        for p in &contributors {
            let w = p.count as f64 / total as f64;
            for (acc, v) in vector.iter_mut().zip(&p.vector) {
                *acc += w * v;
            }
        }
        vector.iter_mut().for_each(|v| *v /= clients);
        out.insert(
            class_id,
            Prototype {
                class_id,
                vector,
                count: total,
            },
        );
    }
    Ok(out)
}

/// Settings for the server-side anchor embedding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorInit {
    pub steps: usize,
    pub learning_rate: f64,
    /// Weight of the squared norm overshoot penalty.
    pub norm_penalty: f64,
}

impl AnchorInit {
    pub fn with_steps(steps: usize) -> Self {
        Self {
            steps,
            learning_rate: 0.05,
            norm_penalty: 1.0,
        }
    }
}

/// Draws class codes `A ~ N(0, I)` (`C × K`) and trains the embedding layer
/// `h_ψ` for `steps` iterations of gradient ascent on the mean pairwise
/// anchor distance, penalizing anchors whose norm exceeds the mean code
/// norm. `h_ψ` starts at the identity, so zero steps return `A` itself.
///
/// Depends only on `(classes, dim, seed, steps)`.
pub fn init_anchors(classes: usize, dim: usize, seed: u64, steps: usize) -> Result<(ClassAnchorSeed, AnchorSet), ProtoError> {
    init_anchors_with(classes, dim, seed, AnchorInit::with_steps(steps))
}

pub fn init_anchors_with(
    classes: usize,
    dim: usize,
    seed: u64,
    settings: AnchorInit,
) -> Result<(ClassAnchorSeed, AnchorSet), ProtoError> {
    if classes < 2 {
        return Err(ProtoError::TooFewClasses);
    }
    let mut rng = rng::stream(seed, Stream::Anchors, classes as u64, dim as u64);
    let codes: Vec<f64> = (0..classes * dim).map(|_| rng.sample(StandardNormal)).collect();
    let codes = Tensor::matrix(classes, dim, codes)?;
    let mut weight = Tensor::zeros(vec![dim, dim]);
    for i in 0..dim {
        weight.values_mut()[i * dim + i] = 1.0;
    }
    let mut seed_state = ClassAnchorSeed {
        codes,
        weight,
        bias: Tensor::zeros(vec![dim]),
    };
    let radius = (0..classes)
        .map(|c| seed_state.codes.row(c).iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum::<f64>()
        / classes as f64;

    let pairs = (classes * (classes - 1) / 2) as f64;
    for _ in 0..settings.steps {
        let mut g = Graph::new();
        let codes = g.constant(seed_state.codes.clone());
        let w = g.param(seed_state.weight.clone());
        let b = g.param(seed_state.bias.clone());
        let projected = project(&mut g, codes, w, b)?;
        let rows: Vec<Var> = (0..classes)
            .map(|c| g.row_mean(projected, &[c]))
            .collect::<Result<_, _>>()?;
        let mut separation = Vec::new();
        for a in 0..classes {
            for bcls in a + 1..classes {
                separation.push(g.euclidean_distance(rows[a], rows[bcls])?);
            }
        }
        let separation = g.add_all(&separation)?;
        let origin = g.constant(Tensor::zeros(vec![dim]));
        let shift = Tensor::scalar(-radius);
        let mut overshoot = Vec::with_capacity(classes);
        for &r in &rows {
            let norm = g.euclidean_distance(r, origin)?;
            let excess = g.add_const(norm, &shift)?;
            let excess = g.relu(excess);
            overshoot.push(g.dot(excess, excess)?);
        }
        let overshoot = g.add_all(&overshoot)?;
        // minimize −mean distance + μ·Σ overshoot²
        let neg_sep = g.scale(separation, -1.0 / pairs);
        let penalty = g.scale(overshoot, settings.norm_penalty);
        let objective = g.add(neg_sep, penalty)?;
        let grads = g.backward(objective)?;
        for (param, var) in [(&mut seed_state.weight, w), (&mut seed_state.bias, b)] {
            for (p, gk) in param.values_mut().iter_mut().zip(grads.wrt(var)) {
                *p -= settings.learning_rate * gk;
            }
        }
    }
    let anchors = seed_state.project()?;
    Ok((seed_state, anchors))
}

/// `Σ_c ‖P^c − Ā^c‖₂` over the given (class, prototype node) pairs.
pub fn regularization_loss(
    graph: &mut Graph,
    prototypes: &[(usize, Var)],
    anchors: &AnchorSet,
) -> Result<Var, ProtoError> {
    let mut terms = Vec::with_capacity(prototypes.len());
    for &(class, p) in prototypes {
        let a = graph.constant(Tensor::vector(anchors.anchor(class)?.to_vec()));
        terms.push(graph.euclidean_distance(p, a)?);
    }
    sum_or_zero(graph, &terms)
}

/// `Σ_c ‖P^c − P̄^c‖₂`, skipping classes without a global prototype.
pub fn fedproto_reg_loss(
    graph: &mut Graph,
    prototypes: &[(usize, Var)],
    global: &BTreeMap<usize, Prototype>,
) -> Result<Var, ProtoError> {
    let mut terms = Vec::with_capacity(prototypes.len());
    for &(class, p) in prototypes {
        if let Some(target) = global.get(&class) {
            let t = graph.constant(Tensor::vector(target.vector.clone()));
            terms.push(graph.euclidean_distance(p, t)?);
        }
    }
    sum_or_zero(graph, &terms)
}

fn sum_or_zero(graph: &mut Graph, terms: &[Var]) -> Result<Var, ProtoError> {
    if terms.is_empty() {
        Ok(graph.constant(Tensor::scalar(0.0)))
    } else {
        Ok(graph.add_all(terms)?)
    }
}

/// Sum of `‖x_a − x_b‖` over ordered pairs `a ≠ b` divided by `(N − 1)²`
/// (or by `N (N − 1)` under [`MarginRule::Normalized`]). `None` for `N < 2`.
pub fn local_margin<V: AsRef<[f64]>>(vectors: &[V], rule: MarginRule) -> Option<f64> {
    let n = vectors.len();
    if n < 2 {
        return None;
    }
    let mut total = 0.0;
    for a in 0..n {
        for b in 0..n {
            if a != b {
                total += distance(vectors[a].as_ref(), vectors[b].as_ref());
            }
        }
    }
    let denom = match rule {
        MarginRule::AsPrinted => ((n - 1) * (n - 1)) as f64,
        MarginRule::Normalized => (n * (n - 1)) as f64,
    };
    Some(total / denom)
}

/// The local-margin formula applied to all anchors.
pub fn global_margin(anchors: &AnchorSet, rule: MarginRule) -> f64 {
    local_margin(anchors.anchors(), rule).unwrap_or(0.0)
}

pub fn client_margin(d_global: f64, d_local: Option<f64>) -> MarginState {
    let d_star = match d_local {
        Some(d) => d_global.max(d),
        None => d_global,
    };
    MarginState {
        d_global,
        d_local,
        d_star,
    }
}

/// Margin-enhanced contrastive loss of one prototype against all anchors.
///
/// `−log[e^{−(d_c + d*)} / (e^{−(d_c + d*)} + Σ_{j≠c} e^{−d_j})]` with
/// `d_j = ‖P − Ā^j‖`. `d_star` is a constant offset.
pub fn mcl_loss(
    graph: &mut Graph,
    prototype: Var,
    class: usize,
    anchors: &AnchorSet,
    d_star: f64,
) -> Result<Var, ProtoError> {
    let classes = anchors.classes();
    if classes < 2 {
        return Err(ProtoError::TooFewClasses);
    }
    anchors.anchor(class)?;
    let mut dists = Vec::with_capacity(classes);
    for j in 0..classes {
        let a = graph.constant(Tensor::vector(anchors.anchor(j)?.to_vec()));
        dists.push(graph.euclidean_distance(prototype, a)?);
    }
    let dists = graph.concat(&dists)?;
    let logits = graph.scale(dists, -1.0);
    let mut offset = vec![0.0; classes];
    offset[class] = -d_star;
    let logits = graph.add_const(logits, &Tensor::vector(offset))?;
    Ok(graph.softmax_cross_entropy(logits, class)?)
}

/// Classifier calibration: `−(1/C) Σ_c log softmax(φ · Ā^c)[c]`.
///
/// Anchors are constants; only `phi` (`[C × K]`) receives gradient.
pub fn cc_loss(graph: &mut Graph, phi: Var, anchors: &AnchorSet) -> Result<Var, ProtoError> {
    let a = graph.constant(anchors.to_tensor());
    let logits = graph.linear(a, phi)?;
    let labels: Vec<usize> = (0..anchors.classes()).collect();
    Ok(graph.softmax_cross_entropy_rows(logits, &labels)?)
}

/// `Ā^{t+1,c} = α Ā^{t,c} + (1 − α) P̄^c` for classes present in `global`;
/// other anchors carry over unchanged. The round advances by one.
pub fn ema_update(anchors: &AnchorSet, global: &BTreeMap<usize, Prototype>, alpha: f64) -> Result<AnchorSet, ProtoError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(ProtoError::AlphaOutOfRange(alpha));
    }
    let mut next = anchors.anchors.clone();
    for (&class, p) in global {
        let row = next.get_mut(class).ok_or(ProtoError::MissingAnchor {
            class,
            classes: anchors.classes(),
        })?;
        if p.vector.len() != row.len() {
            return Err(ProtoError::Dimension {
                class,
                expected: row.len(),
                got: p.vector.len(),
            });
        }
        for (a, v) in row.iter_mut().zip(&p.vector) {
            *a = alpha * *a + (1.0 - alpha) * v;
        }
    }
    AnchorSet::new(next, anchors.round + 1)
}

/// Mean distance over unordered pairs; 0 for fewer than two vectors.
pub fn mean_pairwise_distance<V: AsRef<[f64]>>(vectors: &[V]) -> f64 {
    let n = vectors.len();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for a in 0..n {
        for b in a + 1..n {
            total += distance(vectors[a].as_ref(), vectors[b].as_ref());
        }
    }
    total / (n * (n - 1) / 2) as f64
}

/// Settings for the trainable-prototype baseline's server refinement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TgpRefine {
    pub steps: usize,
    pub margin_cap: f64,
    pub learning_rate: f64,
}

/// Refines aggregated prototypes into better separated broadcast targets.
///
/// Trainable copies `G` start at `P̄`. Each step descends the mean over
/// classes of `−log softmax_j(−(‖P̄^c − G^j‖ + δ·[j = c]))[c]` where the
/// margin `δ = min(max_{a≠b} ‖P̄^a − P̄^b‖, margin_cap)`. Fewer than two
/// classes are returned unchanged.
pub fn fedtgp_server_refine(
    global: &BTreeMap<usize, Prototype>,
    settings: TgpRefine,
) -> Result<BTreeMap<usize, Prototype>, ProtoError> {
    if global.len() < 2 || settings.steps == 0 {
        return Ok(global.clone());
    }
    let classes: Vec<usize> = global.keys().copied().collect();
    let targets: Vec<&[f64]> = global.values().map(|p| p.vector.as_slice()).collect();
    let mut max_gap = 0.0f64;
    for a in 0..targets.len() {
        for b in a + 1..targets.len() {
            max_gap = max_gap.max(distance(targets[a], targets[b]));
        }
    }
    let margin = max_gap.min(settings.margin_cap);
    let n = classes.len();

    let mut trainable: Vec<Vec<f64>> = targets.iter().map(|t| t.to_vec()).collect();
    for _ in 0..settings.steps {
        let mut g = Graph::new();
        let params: Vec<Var> = trainable.iter().map(|v| g.param(Tensor::vector(v.clone()))).collect();
        let mut terms = Vec::with_capacity(n);
        for (pos, target) in targets.iter().enumerate() {
            let t = g.constant(Tensor::vector(target.to_vec()));
            let dists = params
                .iter()
                .map(|&p| g.euclidean_distance(t, p))
                .collect::<Result<Vec<_>, _>>()?;
            let dists = g.concat(&dists)?;
            let logits = g.scale(dists, -1.0);
            let mut offset = vec![0.0; n];
            offset[pos] = -margin;
            let logits = g.add_const(logits, &Tensor::vector(offset))?;
            terms.push(g.softmax_cross_entropy(logits, pos)?);
        }
        let total = g.add_all(&terms)?;
        let loss = g.scale(total, 1.0 / n as f64);
        let grads = g.backward(loss)?;
        for (v, &p) in trainable.iter_mut().zip(&params) {
            for (x, gk) in v.iter_mut().zip(grads.wrt(p)) {
                *x -= settings.learning_rate * gk;
            }
        }
    }

    Ok(classes
        .iter()
        .zip(trainable)
        .map(|(&class_id, vector)| {
            let count = global[&class_id].count;
            (
                class_id,
                Prototype {
                    class_id,
                    vector,
                    count,
                },
            )
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn anchors(rows: Vec<Vec<f64>>) -> AnchorSet {
        AnchorSet::new(rows, 0).unwrap()
    }

    fn proto(class_id: usize, vector: Vec<f64>, count: usize) -> Prototype {
        Prototype {
            class_id,
            vector,
            count,
        }
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    #[test]
    fn local_prototypes_are_class_means() {
        let f = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 9.0, 9.0]).unwrap();
        let p = compute_local_prototypes(&f, &[0, 0, 2]);
        assert_eq!(p, vec![proto(0, vec![2.0, 3.0], 2), proto(2, vec![9.0, 9.0], 1)]);
    }

    #[test]
    fn local_prototype_matches_reversed_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<Vec<f64>> = (0..100).map(|_| rand_vec(&mut rng, 5)).collect();
        let f = Tensor::from_rows(&rows).unwrap();
        let p = compute_local_prototypes(&f, &[3; 100]);
        for k in 0..5 {
            let oracle = rows.iter().rev().map(|r| r[k]).sum::<f64>() / 100.0;
            assert!((p[0].vector[k] - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregation_single_client_and_two_client_example() {
        let one = [proto(0, vec![1.0, -2.0], 7)];
        let g = aggregate_global(&[(4, &one[..])]).unwrap();
        assert_eq!(g[&0].vector, vec![1.0, -2.0]);

        let a = [proto(0, vec![0.0, 0.0], 1)];
        let b = [proto(0, vec![4.0, 0.0], 3)];
        let g = aggregate_global(&[(1, &b[..]), (0, &a[..])]).unwrap();
        assert_eq!(g[&0].vector, vec![1.5, 0.0]);
        assert_eq!(g[&0].count, 4);
    }

    #[test]
    fn aggregation_omits_uncovered_classes_and_rejects_nan() {
        let a = [proto(1, vec![1.0], 2)];
        let g = aggregate_global(&[(0, &a[..])]).unwrap();
        assert!(!g.contains_key(&0));
        let bad = [proto(0, vec![f64::NAN], 1)];
        assert_eq!(aggregate_global(&[(0, &bad[..])]).unwrap_err(), ProtoError::NonFinite(0));
    }

    #[test]
    fn margins_match_hand_evaluation() {
        let two = [vec![0.0, 0.0], vec![3.0, 4.0]];
        assert_eq!(local_margin(&two, MarginRule::AsPrinted), Some(10.0));
        assert_eq!(local_margin(&two, MarginRule::Normalized), Some(5.0));
        let d = 2.0;
        let tri = [
            vec![0.0, 0.0],
            vec![d, 0.0],
            vec![d / 2.0, d * 3f64.sqrt() / 2.0],
        ];
        assert!((local_margin(&tri, MarginRule::AsPrinted).unwrap() - 1.5 * d).abs() < 1e-12);
        assert_eq!(local_margin(&[vec![1.0]], MarginRule::AsPrinted), None);

        assert_eq!(global_margin(&anchors(two.to_vec()), MarginRule::AsPrinted), 10.0);
        assert_eq!(global_margin(&anchors(vec![vec![1.0, 1.0]; 4]), MarginRule::AsPrinted), 0.0);
    }

    #[test]
    fn client_margin_takes_the_larger() {
        assert_eq!(client_margin(2.0, Some(3.0)).d_star, 3.0);
        assert_eq!(client_margin(3.0, Some(2.0)).d_star, 3.0);
        assert_eq!(client_margin(3.0, None).d_star, 3.0);
    }

    #[test]
    fn regularization_values() {
        let set = anchors(vec![vec![3.0, 4.0], vec![1.0, 1.0]]);
        let mut g = Graph::new();
        let p = g.param(Tensor::vector(vec![0.0, 0.0]));
        let l = regularization_loss(&mut g, &[(0, p)], &set).unwrap();
        assert_eq!(g.scalar(l), 5.0);
        let q = g.param(Tensor::vector(vec![1.0, 1.0]));
        let l = regularization_loss(&mut g, &[(1, q)], &set).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        assert_eq!(
            regularization_loss(&mut g, &[(2, q)], &set).unwrap_err(),
            ProtoError::MissingAnchor { class: 2, classes: 2 }
        );
    }

    #[test]
    fn fedproto_regularizer_values() {
        let mut global = BTreeMap::new();
        global.insert(0, proto(0, vec![3.0, 4.0], 5));
        let mut g = Graph::new();
        let p = g.param(Tensor::vector(vec![0.0, 0.0]));
        let q = g.param(Tensor::vector(vec![7.0, 7.0]));
        let l = fedproto_reg_loss(&mut g, &[(0, p), (1, q)], &global).unwrap();
        assert_eq!(g.scalar(l), 5.0);
        let same = g.param(Tensor::vector(vec![3.0, 4.0]));
        let l = fedproto_reg_loss(&mut g, &[(0, same)], &global).unwrap();
        assert_eq!(g.scalar(l), 0.0);
    }

    #[test]
    fn mcl_scalar_example() {
        let set = anchors(vec![vec![0.0], vec![2.0]]);
        let mut g = Graph::new();
        let p = g.param(Tensor::vector(vec![0.0]));
        let l = mcl_loss(&mut g, p, 0, &set, 1.0).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((g.scalar(l) - expected).abs() < 1e-12);
        assert!((g.scalar(l) - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn mcl_vanishes_for_distant_negatives() {
        let set = anchors(vec![vec![0.0, 0.0], vec![1e4, 0.0], vec![0.0, -1e4]]);
        let mut g = Graph::new();
        let p = g.param(Tensor::vector(vec![0.1, 0.1]));
        let l = mcl_loss(&mut g, p, 0, &set, 3.0).unwrap();
        assert!(g.scalar(l) < 1e-12);
    }

    #[test]
    fn mcl_monotonicity() {
        let eval = |pos: f64, neg: f64| {
            // prototype at origin, positive anchor at distance `pos`, negative at `neg`
            let set = anchors(vec![vec![pos, 0.0], vec![0.0, neg]]);
            let mut g = Graph::new();
            let p = g.constant(Tensor::vector(vec![0.0, 0.0]));
            let l = mcl_loss(&mut g, p, 0, &set, 0.5).unwrap();
            g.scalar(l)
        };
        let mut prev = eval(0.0, 2.0);
        for i in 1..20 {
            let cur = eval(0.25 * i as f64, 2.0);
            assert!(cur > prev);
            prev = cur;
        }
        let mut prev = eval(1.0, 0.0);
        for i in 1..20 {
            let cur = eval(1.0, 0.25 * i as f64);
            assert!(cur < prev);
            prev = cur;
        }
    }

    #[test]
    fn cc_scalar_example() {
        let set = anchors(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let mut g = Graph::new();
        let phi = g.param(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let l = cc_loss(&mut g, phi, &set).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((g.scalar(l) - expected).abs() < 1e-12);
        assert!((g.scalar(l) - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn cc_vanishes_when_phi_aligns_with_scaled_anchors() {
        let set = anchors(vec![vec![1.0, 0.5], vec![-0.5, 1.0], vec![-1.0, -1.0]]);
        let mut g = Graph::new();
        let phi_vals: Vec<f64> = set.anchors().iter().flatten().map(|v| 200.0 * v).collect();
        let phi = g.param(Tensor::matrix(3, 2, phi_vals).unwrap());
        let l = cc_loss(&mut g, phi, &set).unwrap();
        assert!(g.scalar(l) < 1e-12);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let (c, k) = (rng.random_range(2..5), rng.random_range(1..5));
            let set = anchors((0..c).map(|_| rand_vec(&mut rng, k)).collect());
            let class = rng.random_range(0..c);
            let d_star = rng.random_range(0.0..3.0);
            let p = Tensor::vector(rand_vec(&mut rng, k));
            let r = finite_diff_check(
                |g, v| regularization_loss(g, &[(class, v[0])], &set).map_err(unwrap_ad),
                std::slice::from_ref(&p),
                1e-5,
            )
            .unwrap();
            assert!(r.max_rel_error <= 1e-5, "L_R {r:?}");
            let r = finite_diff_check(
                |g, v| mcl_loss(g, v[0], class, &set, d_star).map_err(unwrap_ad),
                std::slice::from_ref(&p),
                1e-5,
            )
            .unwrap();
            assert!(r.max_rel_error <= 1e-5, "L_MCL {r:?}");
            let phi = Tensor::matrix(c, k, rand_vec(&mut rng, c * k)).unwrap();
            let r = finite_diff_check(|g, v| cc_loss(g, v[0], &set).map_err(unwrap_ad), &[phi], 1e-5).unwrap();
            assert!(r.max_rel_error <= 1e-5, "L_CC {r:?}");
            let mut global = BTreeMap::new();
            global.insert(class, proto(class, rand_vec(&mut rng, k), 3));
            let r = finite_diff_check(
                |g, v| fedproto_reg_loss(g, &[(class, v[0])], &global).map_err(unwrap_ad),
                &[p],
                1e-5,
            )
            .unwrap();
            assert!(r.max_rel_error <= 1e-5, "FedProto L_R {r:?}");
        }
    }

    fn unwrap_ad(e: ProtoError) -> AutodiffError {
        match e {
            ProtoError::Autodiff(a) => a,
            other => panic!("{other}"),
        }
    }

    #[test]
    fn cc_gradient_step_decreases_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let (c, k) = (rng.random_range(2..6), rng.random_range(2..6));
            let set = anchors((0..c).map(|_| rand_vec(&mut rng, k)).collect());
            let phi0 = Tensor::matrix(c, k, rand_vec(&mut rng, c * k)).unwrap();
            let mut g = Graph::new();
            let phi = g.param(phi0.clone());
            let l = cc_loss(&mut g, phi, &set).unwrap();
            let before = g.scalar(l);
            let grads = g.backward(l).unwrap();
            let stepped: Vec<f64> = phi0.values().iter().zip(grads.wrt(phi)).map(|(p, d)| p - 1e-3 * d).collect();
            let mut g = Graph::new();
            let phi = g.constant(Tensor::matrix(c, k, stepped).unwrap());
            let l = cc_loss(&mut g, phi, &set).unwrap();
            assert!(g.scalar(l) < before);
        }
    }

    #[test]
    fn ema_examples_and_range() {
        let set = anchors(vec![vec![2.0], vec![1.0]]);
        let mut global = BTreeMap::new();
        global.insert(0, proto(0, vec![4.0], 1));
        let same = ema_update(&set, &global, 1.0).unwrap();
        assert_eq!(same.anchors(), set.anchors());
        assert_eq!(same.round(), 1);
        let half = ema_update(&set, &global, 0.5).unwrap();
        assert_eq!(half.anchors(), &[vec![3.0], vec![1.0]]);

        let one = anchors(vec![vec![1.0], vec![5.0]]);
        let mut zero = BTreeMap::new();
        zero.insert(0, proto(0, vec![0.0], 1));
        let slow = ema_update(&one, &zero, 0.9999).unwrap();
        assert!((slow.anchors()[0][0] - 0.9999).abs() < 1e-15);
        assert_eq!(slow.anchors()[1][0], 5.0);

        assert_eq!(ema_update(&set, &global, 1.5).unwrap_err(), ProtoError::AlphaOutOfRange(1.5));
        assert!(ema_update(&set, &global, -0.1).is_err());
    }

    #[test]
    fn anchors_from_zero_steps_equal_codes() {
        let (seed, set) = init_anchors(4, 3, 7, 0).unwrap();
        for c in 0..4 {
            assert_eq!(set.anchor(c).unwrap(), seed.codes.row(c));
        }
        assert_eq!(set.round(), 0);
    }

    #[test]
    fn anchor_training_improves_separation_and_is_seeded() {
        for seed in 0..3 {
            let (_, raw) = init_anchors(10, 16, seed, 0).unwrap();
            let (_, trained) = init_anchors(10, 16, seed, 200).unwrap();
            assert!(mean_pairwise_distance(trained.anchors()) >= mean_pairwise_distance(raw.anchors()));
            assert!(trained.anchors().iter().flatten().all(|v| v.is_finite()));
        }
        assert_eq!(init_anchors(5, 4, 3, 20).unwrap().1, init_anchors(5, 4, 3, 20).unwrap().1);
        assert!(init_anchors(1, 4, 3, 20).is_err());
    }

    #[test]
    fn refinement_separates_prototypes() {
        let mut global = BTreeMap::new();
        global.insert(0, proto(0, vec![0.0, 0.0], 3));
        global.insert(1, proto(1, vec![1.0, 0.0], 4));
        let settings = TgpRefine {
            steps: 0,
            margin_cap: 5.0,
            learning_rate: 0.1,
        };
        assert_eq!(fedtgp_server_refine(&global, settings).unwrap(), global);
        let refined = fedtgp_server_refine(&global, TgpRefine { steps: 20, ..settings }).unwrap();
        assert!(distance(&refined[&0].vector, &refined[&1].vector) > 1.0);
        assert_eq!(refined[&1].count, 4);

        let mut single = BTreeMap::new();
        single.insert(2, proto(2, vec![1.0], 1));
        assert_eq!(fedtgp_server_refine(&single, TgpRefine { steps: 20, ..settings }).unwrap(), single);
    }

    #[test]
    fn refinement_stays_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let mut global = BTreeMap::new();
            for c in 0..rng.random_range(2..6) {
                global.insert(c, proto(c, rand_vec(&mut rng, 4), 2));
            }
            let refined = fedtgp_server_refine(
                &global,
                TgpRefine {
                    steps: 30,
                    margin_cap: 10.0,
                    learning_rate: 0.1,
                },
            )
            .unwrap();
            assert!(refined.values().all(|p| p.vector.iter().all(|v| v.is_finite())));
        }
    }
}
