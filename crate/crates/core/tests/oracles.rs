//! Independent re-implementations of the prototype mathematics, compared
//! against the library on many random instances.

#![allow(clippy::needless_range_loop)]

use std::collections::BTreeMap;

use fedsa_core::data::{self, SyntheticSpec};
use fedsa_core::fed::{Algorithm, Execution, Federation, RunConfig};
use fedsa_core::proto::{self, AnchorSet, MarginRule, Prototype};
use fedsa_core::{Graph, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn norm(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s.sqrt()
}

/// Double loop over classes and clients, straight from the weighted-average
/// formula: for each class, first count contributors and samples, then
/// accumulate `(1/n_clients) · (count/n_samples) · P` coordinate by coordinate.
fn aggregate_oracle(updates: &[(usize, Vec<Prototype>)], classes: usize, k: usize) -> BTreeMap<usize, Vec<f64>> {
    let mut out = BTreeMap::new();
    for c in 0..classes {
        let mut n_clients = 0usize;
        let mut n_samples = 0usize;
        for (_, protos) in updates {
            for p in protos {
                if p.class_id == c {
                    n_clients += 1;
                    n_samples += p.count;
                }
            }
        }
        if n_clients == 0 {
            continue;
        }
        let mut v = vec![0.0; k];
        for (_, protos) in updates {
            for p in protos {
                if p.class_id == c {
                    for j in 0..k {
                        v[j] += (1.0 / n_clients as f64) * (p.count as f64 / n_samples as f64) * p.vector[j];
                    }
                }
            }
        }
        out.insert(c, v);
    }
    out
}

fn margin_oracle(vectors: &[Vec<f64>]) -> f64 {
    let n = vectors.len();
    let mut s = 0.0;
    for a in 0..n {
        for b in 0..n {
            if a != b {
                s += norm(&vectors[a], &vectors[b]);
            }
        }
    }
    s / ((n - 1) * (n - 1)) as f64
}

#[test]
fn aggregation_equals_brute_force_on_1000_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let clients = rng.random_range(1..9);
        let classes = rng.random_range(1..7);
        let k = rng.random_range(1..7);
        let mut ids: Vec<usize> = (0..50).collect();
        ids.shuffle(&mut rng);
        let updates: Vec<(usize, Vec<Prototype>)> = ids[..clients]
            .iter()
            .map(|&id| {
                let mut protos = Vec::new();
                for c in 0..classes {
                    if rng.random_bool(0.6) {
                        protos.push(Prototype {
                            class_id: c,
                            vector: (0..k).map(|_| rng.random_range(-10.0..10.0)).collect(),
                            count: rng.random_range(1..50),
                        });
                    }
                }
                (id, protos)
            })
            .collect();
        let view: Vec<(usize, &[Prototype])> = updates.iter().map(|(i, p)| (*i, p.as_slice())).collect();
        let got = proto::aggregate_global(&view).unwrap();
        let want = aggregate_oracle(&updates, classes, k);
        assert_eq!(got.keys().collect::<Vec<_>>(), want.keys().collect::<Vec<_>>());
        for (c, v) in want {
            for (a, b) in got[&c].vector.iter().zip(&v) {
                assert!((a - b).abs() <= 1e-12, "class {c}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn aggregation_ignores_arrival_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let updates: Vec<(usize, Vec<Prototype>)> = (0..6)
        .map(|id| {
            let protos = (0..3)
                .map(|c| Prototype {
                    class_id: c,
                    vector: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    count: rng.random_range(1..9),
                })
                .collect();
            (id, protos)
        })
        .collect();
    let view: Vec<(usize, &[Prototype])> = updates.iter().map(|(i, p)| (*i, p.as_slice())).collect();
    let reference = proto::aggregate_global(&view).unwrap();
    for _ in 0..20 {
        let mut shuffled = view.clone();
        shuffled.shuffle(&mut rng);
        assert_eq!(proto::aggregate_global(&shuffled).unwrap(), reference);
    }
}

#[test]
fn margins_equal_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..200 {
        let n = rng.random_range(2..8);
        let k = rng.random_range(1..6);
        let vs: Vec<Vec<f64>> = (0..n).map(|_| (0..k).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let local = proto::local_margin(&vs, MarginRule::AsPrinted).unwrap();
        assert!((local - margin_oracle(&vs)).abs() <= 1e-12);
        let global = proto::global_margin(&AnchorSet::new(vs.clone(), 0).unwrap(), MarginRule::AsPrinted);
        assert!((global - margin_oracle(&vs)).abs() <= 1e-12);
        let normalized = proto::local_margin(&vs, MarginRule::Normalized).unwrap();
        let scale = ((n - 1) * (n - 1)) as f64 / (n * (n - 1)) as f64;
        assert!((normalized - margin_oracle(&vs) * scale).abs() <= 1e-12);
    }
}

#[test]
fn local_prototypes_match_independent_accumulation() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let k = 5;
    let rows: Vec<Vec<f64>> = (0..300).map(|_| (0..k).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
    let labels: Vec<usize> = (0..300).map(|_| rng.random_range(0..4)).collect();
    let got = proto::compute_local_prototypes(&Tensor::from_rows(&rows).unwrap(), &labels);
    for p in &got {
        let members: Vec<&Vec<f64>> = rows.iter().zip(&labels).filter(|(_, &l)| l == p.class_id).map(|(r, _)| r).collect();
        assert_eq!(p.count, members.len());
        for j in 0..k {
            let mut s = 0.0;
            for r in members.iter().rev() {
                s += r[j];
            }
            assert!((p.vector[j] - s / members.len() as f64).abs() <= 1e-12);
        }
    }
}

fn mcl_value(p: &[f64], class: usize, anchors: &AnchorSet, d_star: f64) -> f64 {
    let mut g = Graph::new();
    let v = g.constant(Tensor::vector(p.to_vec()));
    let l = proto::mcl_loss(&mut g, v, class, anchors, d_star).unwrap();
    g.scalar(l)
}

/// Direct, unstabilized evaluation of the margin contrastive loss.
fn mcl_oracle(p: &[f64], class: usize, anchors: &AnchorSet, d_star: f64) -> f64 {
    let pos = (-(norm(p, anchors.anchor(class).unwrap()) + d_star)).exp();
    let mut denom = pos;
    for j in 0..anchors.classes() {
        if j != class {
            denom += (-norm(p, anchors.anchor(j).unwrap())).exp();
        }
    }
    -(pos / denom).ln()
}

fn vec_strategy(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, k)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn d_star_is_the_larger_margin(d_global in 0.0f64..100.0, d_local in prop::option::of(0.0f64..100.0)) {
        let m = proto::client_margin(d_global, d_local);
        prop_assert!(m.d_star >= m.d_global);
        match d_local {
            Some(d) => {
                prop_assert!(m.d_star >= d);
                prop_assert_eq!(m.d_star, d_global.max(d));
            }
            None => prop_assert_eq!(m.d_star, d_global),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn ema_is_coordinatewise_convex(
        (old, new) in (1usize..6).prop_flat_map(|k| (prop::collection::vec(vec_strategy(k), 3), prop::collection::vec(vec_strategy(k), 3))),
        alpha_pick in 0usize..5,
        present in prop::collection::vec(any::<bool>(), 3),
    ) {
        let alpha = [0.0, 0.5, 0.99, 0.9999, 1.0][alpha_pick];
        let anchors = AnchorSet::new(old.clone(), 4).unwrap();
        let global: BTreeMap<usize, Prototype> = (0..3)
            .filter(|&c| present[c])
            .map(|c| (c, Prototype { class_id: c, vector: new[c].clone(), count: 1 }))
            .collect();
        let next = proto::ema_update(&anchors, &global, alpha).unwrap();
        prop_assert_eq!(next.round(), 5);
        for c in 0..3 {
            for j in 0..old[c].len() {
                let v = next.anchors()[c][j];
                if present[c] {
                    let (lo, hi) = (old[c][j].min(new[c][j]), old[c][j].max(new[c][j]));
                    prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                } else {
                    prop_assert_eq!(v, old[c][j]);
                }
            }
        }
    }

    #[test]
    fn mcl_matches_direct_formula_and_is_monotone(
        (p, anchors) in (1usize..5).prop_flat_map(|k| (vec_strategy(k), prop::collection::vec(vec_strategy(k), 2..5))),
        class_pick in 0usize..4,
        d_star in 0.0f64..3.0,
        step in 0.05f64..1.0,
    ) {
        let c = class_pick % anchors.len();
        let set = AnchorSet::new(anchors.clone(), 0).unwrap();
        let value = mcl_value(&p, c, &set, d_star);
        prop_assert!((value - mcl_oracle(&p, c, &set, d_star)).abs() <= 1e-9 * value.abs().max(1.0));

        // Push the positive anchor further away from p: the loss must grow.
        let away = |a: &[f64], s: f64| -> Vec<f64> {
            let d = norm(&p, a);
            if d < 1e-9 {
                let mut v = a.to_vec();
                v[0] += s;
                v
            } else {
                a.iter().zip(&p).map(|(x, y)| x + s * (x - y) / d).collect()
            }
        };
        let mut farther = anchors.clone();
        farther[c] = away(&anchors[c], step);
        prop_assert!(mcl_value(&p, c, &AnchorSet::new(farther, 0).unwrap(), d_star) > value);

        // Push one negative away: the loss must shrink.
        let neg = (c + 1) % anchors.len();
        let mut farther = anchors.clone();
        farther[neg] = away(&anchors[neg], step);
        prop_assert!(mcl_value(&p, c, &AnchorSet::new(farther, 0).unwrap(), d_star) < value);
    }
}

#[test]
fn anchors_do_not_depend_on_client_data() {
    // Built before any dataset exists ...
    let (_, before) = proto::init_anchors(10, 16, 11, 50).unwrap();
    let spec = SyntheticSpec {
        classes: 10,
        input_dim: 20,
        center_scale: 1.0,
        noise_sigma: 1.0,
        samples_per_class: 20,
    };
    let _data = data::generate_synthetic(&spec, 11).unwrap();
    let (_, after) = proto::init_anchors(10, 16, 11, 50).unwrap();
    assert_eq!(before, after);

    // ... and a federation over different data starts from the same anchors.
    let base = RunConfig {
        algorithm: Algorithm::FedSA,
        clients: 4,
        rounds: 0,
        samples_per_class: 40,
        anchor_steps: 50,
        seed: 11,
        ..RunConfig::default()
    };
    for sigma in [0.5, 3.0] {
        let fed = Federation::new(&RunConfig { noise_sigma: sigma, ..base.clone() }, Execution::Serial).unwrap();
        assert_eq!(fed.server().anchors().unwrap().anchors(), before.anchors());
    }
}
