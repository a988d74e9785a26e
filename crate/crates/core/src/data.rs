//! Synthetic datasets, Dirichlet label-skew partitioning and per-client splits.

use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::rng::{self, Stream};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("invalid partition request: {0}")]
    InvalidPartition(String),
    #[error(
        "could not give every one of {clients} clients at least {min_per_client} samples after \
         {attempts} Dirichlet draws; use a larger dataset, fewer clients or a larger beta"
    )]
    RetriesExhausted {
        clients: usize,
        min_per_client: usize,
        attempts: usize,
    },
    #[error("need at least 4 samples to split, got {0}")]
    TooFewSamples(usize),
    #[error("dataset file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub input_dim: usize,
    /// Standard deviation of each class mean's coordinates.
    pub center_scale: f64,
    pub noise_sigma: f64,
    pub samples_per_class: usize,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.classes < 2 {
            return Err(DataError::InvalidSpec(format!("classes must be >= 2, got {}", self.classes)));
        }
        if self.samples_per_class < 4 {
            return Err(DataError::InvalidSpec(format!(
                "samples_per_class must be >= 4, got {}",
                self.samples_per_class
            )));
        }
        if self.input_dim == 0 {
            return Err(DataError::InvalidSpec("input_dim must be positive".into()));
        }
        if !(self.center_scale.is_finite() && self.center_scale >= 0.0)
            || !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0)
        {
            return Err(DataError::InvalidSpec("scales must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Labeled samples stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    input_dim: usize,
    classes: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(input_dim: usize, classes: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self, DataError> {
        if input_dim == 0 || features.len() != labels.len() * input_dim {
            return Err(DataError::InvalidSpec(format!(
                "{} feature values for {} samples of dimension {input_dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= classes) {
            return Err(DataError::InvalidSpec(format!("label {l} out of range for {classes} classes")));
        }
        Ok(Self {
            input_dim,
            classes,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    /// Stacks the given samples into a `[n × input_dim]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut values = Vec::with_capacity(indices.len() * self.input_dim);
        for &i in indices {
            values.extend_from_slice(self.sample(i));
        }
        Tensor::matrix(indices.len(), self.input_dim, values).expect("row length is input_dim")
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// Raw bytes of features and labels, for reproducibility checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.features.len() * 8 + self.labels.len() * 8);
        for v in &self.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for l in &self.labels {
            out.extend_from_slice(&(*l as u64).to_le_bytes());
        }
        out
    }
}

/// Gaussian class clusters: one mean per class, then `mean + N(0, σ²)` samples.
///
/// Labels are balanced and laid out class by class.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset, DataError> {
    spec.validate()?;
    let mut rng = rng::stream(seed, Stream::Dataset, 0, 0);
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            (0..spec.input_dim)
                .map(|_| spec.center_scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let n = spec.classes * spec.samples_per_class;
    let mut features = Vec::with_capacity(n * spec.input_dim);
    let mut labels = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            for m in mean {
                let noise: f64 = rng.sample(StandardNormal);
                features.push(m + spec.noise_sigma * noise);
            }
            labels.push(c);
        }
    }
    Dataset::new(spec.input_dim, spec.classes, features, labels)
}

/// Reads comma-separated rows of features followed by an integer label.
///
/// A first row that does not parse as numbers is treated as a header.
/// The class count is one more than the largest label.
pub fn load_csv<R: Read>(reader: R) -> Result<Dataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut input_dim = None;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let line = i + 1;
        if record.len() < 2 {
            return Err(DataError::Parse {
                line,
                message: "need at least one feature and a label".into(),
            });
        }
        let parsed: Result<Vec<f64>, _> = record.iter().take(record.len() - 1).map(str::parse::<f64>).collect();
        let label = record[record.len() - 1].parse::<usize>();
        let (row, label) = match (parsed, label) {
            (Ok(row), Ok(label)) => (row, label),
            _ if i == 0 => continue,
            _ => {
                return Err(DataError::Parse {
                    line,
                    message: "expected numeric features and a non-negative integer label".into(),
                })
            }
        };
        let dim = *input_dim.get_or_insert(row.len());
        if row.len() != dim {
            return Err(DataError::Parse {
                line,
                message: format!("expected {dim} features, found {}", row.len()),
            });
        }
        features.extend(row);
        labels.push(label);
    }
    let dim = input_dim.ok_or(DataError::Parse {
        line: 0,
        message: "no samples".into(),
    })?;
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    Dataset::new(dim, classes, features, labels)
}

pub fn load_csv_file(path: &Path) -> Result<Dataset, DataError> {
    load_csv(std::fs::File::open(path)?)
}

/// Assignment of sample indices to clients.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    /// Sample indices held by each client, ascending.
    pub clients: Vec<Vec<usize>>,
    /// `proportions[c][i]`: realized Dirichlet share of class `c` for client `i`.
    pub proportions: Vec<Vec<f64>>,
}

/// One draw from the symmetric Dirichlet distribution `Dir(beta)` over `m` coordinates.
pub fn sample_dirichlet<R: Rng>(rng: &mut R, beta: f64, m: usize) -> Vec<f64> {
    let gamma = Gamma::new(beta, 1.0).expect("beta > 0");
    loop {
        let draws: Vec<f64> = (0..m).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        // Tiny shapes can underflow every coordinate to zero; redraw then.
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|g| g / total).collect();
        }
    }
}

/// Integer counts summing exactly to `total`, proportional to `shares`.
///
/// Floors first, then hands leftover units to the largest fractional parts
/// (lower index first on ties).
pub fn largest_remainder(shares: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = shares.iter().map(|q| q * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

pub const MAX_PARTITION_ATTEMPTS: usize = 1000;

/// Label-skewed split: each class is divided among `m` clients by `Dir(beta)` shares.
///
/// The whole plan is redrawn until every client holds at least
/// `min_per_client` samples, up to [`MAX_PARTITION_ATTEMPTS`] times.
pub fn dirichlet_partition(
    labels: &[usize],
    m: usize,
    beta: f64,
    seed: u64,
    min_per_client: usize,
) -> Result<PartitionPlan, DataError> {
    if m == 0 {
        return Err(DataError::InvalidPartition("need at least one client".into()));
    }
    if !(beta.is_finite() && beta > 0.0) {
        return Err(DataError::InvalidPartition(format!("beta must be positive, got {beta}")));
    }
    if labels.len() < m * min_per_client {
        return Err(DataError::RetriesExhausted {
            clients: m,
            min_per_client,
            attempts: 0,
        });
    }
    let classes = labels.iter().max().map_or(0, |l| l + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }

    for attempt in 0..MAX_PARTITION_ATTEMPTS {
        let mut rng = rng::stream(seed, Stream::Partition, attempt as u64, 0);
        let mut clients = vec![Vec::new(); m];
        let mut proportions = Vec::with_capacity(classes);
        for members in &by_class {
            let q = sample_dirichlet(&mut rng, beta, m);
            let counts = largest_remainder(&q, members.len());
            let mut shuffled = members.clone();
            shuffled.shuffle(&mut rng);
            let mut start = 0;
            for (client, &n) in clients.iter_mut().zip(&counts) {
                client.extend_from_slice(&shuffled[start..start + n]);
                start += n;
            }
            proportions.push(q);
        }
        if clients.iter().all(|c| c.len() >= min_per_client) {
            clients.iter_mut().for_each(|c| c.sort_unstable());
            return Ok(PartitionPlan { clients, proportions });
        }
    }
    Err(DataError::RetriesExhausted {
        clients: m,
        min_per_client,
        attempts: MAX_PARTITION_ATTEMPTS,
    })
}

/// Shuffles a client's samples and cuts them into train and test parts.
///
/// The train part takes `floor(ratio · n)` samples.
pub fn split_train_test(
    samples: &[usize],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    if samples.len() < 4 {
        return Err(DataError::TooFewSamples(samples.len()));
    }
    let mut shuffled = samples.to_vec();
    shuffled.shuffle(&mut rng::stream(seed, Stream::Split, 0, 0));
    let n_train = ((ratio * samples.len() as f64).floor() as usize).clamp(1, samples.len() - 1);
    let test = shuffled.split_off(n_train);
    Ok((shuffled, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn spec() -> SyntheticSpec {
        SyntheticSpec {
            classes: 3,
            input_dim: 4,
            center_scale: 2.0,
            noise_sigma: 0.5,
            samples_per_class: 10,
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = generate_synthetic(&spec(), 9).unwrap();
        let b = generate_synthetic(&spec(), 9).unwrap();
        let c = generate_synthetic(&spec(), 10).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_ne!(a.to_bytes(), c.to_bytes());
        for class in 0..3 {
            assert_eq!(a.labels().iter().filter(|&&l| l == class).count(), 10);
        }
    }

    #[test]
    fn zero_noise_collapses_class_to_mean() {
        let d = generate_synthetic(
            &SyntheticSpec {
                noise_sigma: 0.0,
                ..spec()
            },
            1,
        )
        .unwrap();
        for i in 0..d.len() {
            let first = d.labels().iter().position(|&l| l == d.labels()[i]).unwrap();
            assert_eq!(d.sample(i), d.sample(first));
        }
    }

    #[test]
    fn synthetic_settings_are_validated() {
        assert!(generate_synthetic(&SyntheticSpec { classes: 1, ..spec() }, 0).is_err());
        assert!(generate_synthetic(
            &SyntheticSpec {
                samples_per_class: 3,
                ..spec()
            },
            0
        )
        .is_err());
    }

    #[test]
    fn csv_with_and_without_header() {
        let with = "x1,x2,label\n0.5,1.0,1\n-2,3e-1,0\n";
        let d = load_csv(with.as_bytes()).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.sample(1), &[-2.0, 0.3]);
        assert_eq!(d.labels(), &[1, 0]);
        let without = "0.5,1.0,1\n-2,0.3,2\n";
        let d = load_csv(without.as_bytes()).unwrap();
        assert_eq!(d.classes(), 3);
        let ragged = "1,2,0\n1,0\n";
        assert!(matches!(load_csv(ragged.as_bytes()), Err(DataError::Parse { line: 2, .. }) | Err(DataError::Csv(_))));
        let bad = "1,2,0\n1,x,1\n";
        assert!(matches!(load_csv(bad.as_bytes()), Err(DataError::Parse { line: 2, .. })));
    }

    #[test]
    fn largest_remainder_conserves_totals() {
        assert_eq!(largest_remainder(&[0.5, 0.5], 3), vec![2, 1]);
        assert_eq!(largest_remainder(&[0.2, 0.3, 0.5], 10), vec![2, 3, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let q = sample_dirichlet(&mut rng, 0.3, 7);
            let total = rng.random_range(0..500);
            assert_eq!(largest_remainder(&q, total).iter().sum::<usize>(), total);
        }
    }

    #[test]
    fn single_client_gets_everything() {
        let labels: Vec<usize> = (0..50).map(|i| i % 5).collect();
        let plan = dirichlet_partition(&labels, 1, 0.1, 0, 10).unwrap();
        assert_eq!(plan.clients[0], (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn partition_conserves_samples() {
        let labels: Vec<usize> = (0..2000).map(|i| i % 10).collect();
        let plan = dirichlet_partition(&labels, 20, 0.1, 4, 10).unwrap();
        let total: usize = plan.clients.iter().map(Vec::len).sum();
        assert_eq!(total, labels.len());
        let seen: HashSet<usize> = plan.clients.iter().flatten().copied().collect();
        assert_eq!(seen.len(), labels.len());
        for q in &plan.proportions {
            assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(plan.clients.iter().all(|c| c.len() >= 10));
    }

    #[test]
    fn partition_failure_is_reported() {
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let err = dirichlet_partition(&labels, 30, 0.1, 0, 10).unwrap_err();
        assert!(err.to_string().contains("larger dataset"));
        let err = dirichlet_partition(&labels, 3, 0.01, 0, 13).unwrap_err();
        assert!(matches!(err, DataError::RetriesExhausted { attempts: MAX_PARTITION_ATTEMPTS, .. }));
        assert!(dirichlet_partition(&labels, 3, 0.0, 0, 1).is_err());
        assert!(dirichlet_partition(&labels, 0, 1.0, 0, 1).is_err());
    }

    #[test]
    fn large_beta_gives_near_uniform_shares() {
        let labels: Vec<usize> = (0..10_000).map(|i| i % 10).collect();
        for seed in 0..5 {
            let plan = dirichlet_partition(&labels, 4, 1000.0, seed, 1).unwrap();
            for c in &plan.clients {
                let share = c.len() as f64 / labels.len() as f64;
                assert!((share - 0.25).abs() <= 0.05 * 0.25, "share {share}");
            }
        }
    }

    #[test]
    fn dirichlet_beta_one_is_uniform_on_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (m, draws) = (5, 10_000);
        let mut sums = vec![0.0; m];
        for _ in 0..draws {
            for (s, q) in sums.iter_mut().zip(sample_dirichlet(&mut rng, 1.0, m)) {
                *s += q;
            }
        }
        // Var of one coordinate of Dir(1,…,1) is (m−1)/(m²(m+1)).
        let se = (((m - 1) as f64) / ((m * m * (m + 1)) as f64) / draws as f64).sqrt();
        for s in sums {
            assert!((s / draws as f64 - 1.0 / m as f64).abs() <= 3.0 * se);
        }
    }

    #[test]
    fn heterogeneity_decreases_with_beta() {
        let labels: Vec<usize> = (0..2000).map(|i| i % 10).collect();
        let max_share = |beta: f64| {
            let mut acc = 0.0;
            for seed in 0..10 {
                let plan = dirichlet_partition(&labels, 10, beta, seed, 0).unwrap();
                acc += plan
                    .proportions
                    .iter()
                    .map(|q| q.iter().copied().fold(0.0, f64::max))
                    .sum::<f64>()
                    / plan.proportions.len() as f64;
            }
            acc / 10.0
        };
        let (a, b, c) = (max_share(0.1), max_share(1.0), max_share(10.0));
        assert!(a > b && b > c, "{a} {b} {c}");
    }

    #[test]
    fn split_sizes_and_determinism() {
        let samples: Vec<usize> = (100..108).collect();
        let (train, test) = split_train_test(&samples, 0.75, 3).unwrap();
        assert_eq!((train.len(), test.len()), (6, 2));
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, samples);
        assert_eq!(split_train_test(&samples, 0.75, 3).unwrap(), (train, test));
        assert!(matches!(split_train_test(&[1, 2, 3], 0.75, 0), Err(DataError::TooFewSamples(3))));
        let (train, test) = split_train_test(&[1, 2, 3, 4], 0.75, 0).unwrap();
        assert_eq!((train.len(), test.len()), (3, 1));
    }
}
