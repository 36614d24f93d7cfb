//! Gaussian-cluster stand-in for a labeled camera-trap pool.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{ActiveLearningError, FeatureTable, SimulationConfig, SimulationData, Strategy};

/// The fifteen groupings of the Hong Kong dataset and their image counts.
pub const TABLE1_GROUPINGS: [(&str, usize); 15] = [
    ("Birds", 185),
    ("Canis Lupis familaris", 396),
    ("Lutra lutra", 1445),
    ("Felis catus", 80),
    ("Herpestes javanicus", 71),
    ("Hystrix brachyura", 3911),
    ("Macaca mulatta", 1274),
    ("Melogale spp.", 74),
    ("Muntiacus spp.", 2733),
    ("Other animal", 9),
    ("Paguma larvata", 165),
    ("Prionailurus bengaliensis", 1614),
    ("Rodent", 185),
    ("Sus scrofa", 2192),
    ("Viverricula indica", 2084),
];

/// Grouping counts divided by `divisor`, rounded half up, floored at `min`.
pub fn table1_scaled_counts(divisor: usize, min: usize) -> Vec<usize> {
    TABLE1_GROUPINGS
        .iter()
        .map(|&(_, n)| ((n as f64 / divisor as f64).round() as usize).max(min))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub class_names: Vec<String>,
    pub counts: Vec<usize>,
    pub dim: usize,
    pub cluster_separation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// 15 classes at a tenth of the grouping counts, d = 32, separation 4, σ = 1.
pub fn benchmark_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        class_names: TABLE1_GROUPINGS.iter().map(|(n, _)| n.to_string()).collect(),
        counts: table1_scaled_counts(10, 2),
        dim: 32,
        cluster_separation: 4.0,
        noise_sigma: 1.0,
        seed,
    }
}

/// Fraction of every class held out for validation.
pub const VALIDATION_FRACTION: f64 = 0.2;

/// Epochs per round in the benchmark. Short training acts as early stopping
/// for the heavily up-weighted tiny classes and keeps 42 full runs cheap.
pub const BENCHMARK_EPOCHS: usize = 10;

/// Pool, oracle labels and validation split of the benchmark for `seed`.
pub fn benchmark_data(seed: u64) -> SimulationData {
    let pool = generate_synthetic_pool(&benchmark_spec(seed)).expect("benchmark spec is valid");
    stratified_split(&pool, VALIDATION_FRACTION, seed)
}

/// Loop configuration for the benchmark: batches of 25 until the pool is
/// exhausted, with `seed` driving seeding, sampling and shuffling.
pub fn benchmark_config(strategy: Strategy, seed: u64) -> SimulationConfig {
    let mut config = SimulationConfig {
        strategy,
        seed,
        ..SimulationConfig::default()
    };
    config.train.epochs = BENCHMARK_EPOCHS;
    config.train.seed = seed;
    config
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticItem {
    pub id: String,
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPool {
    pub class_names: Vec<String>,
    pub dim: usize,
    pub means: Vec<Vec<f64>>,
    pub items: Vec<SyntheticItem>,
}

impl SyntheticPool {
    pub fn features(&self) -> FeatureTable {
        let mut table = FeatureTable::new(self.dim);
        for item in &self.items {
            table.insert(item.id.clone(), item.features.clone());
        }
        table
    }

    pub fn labels(&self) -> BTreeMap<String, usize> {
        self.items.iter().map(|i| (i.id.clone(), i.label)).collect()
    }
}

/// Class means are seeded random unit vectors scaled by the separation;
/// examples add isotropic Gaussian noise. Ids are `s00000`, `s00001`, ...
/// in class order.
pub fn generate_synthetic_pool(spec: &SyntheticSpec) -> Result<SyntheticPool, ActiveLearningError> {
    let k = spec.class_names.len();
    let invalid = |m: String| Err(ActiveLearningError::InvalidSynthetic(m));
    if k < 2 {
        return invalid(format!("need at least 2 classes, got {k}"));
    }
    if spec.counts.len() != k {
        return invalid(format!("{} counts for {k} classes", spec.counts.len()));
    }
    if spec.counts.contains(&0) {
        return invalid("every class needs at least one example".into());
    }
    if spec.dim == 0 || spec.noise_sigma.is_nan() || spec.noise_sigma < 0.0 || !spec.cluster_separation.is_finite() {
        return invalid("dimension must be positive and noise non-negative".into());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gauss = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let means: Vec<Vec<f64>> = (0..k)
        .map(|_| loop {
            let v: Vec<f64> = (0..spec.dim).map(|_| gauss(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.iter().map(|x| x / norm * spec.cluster_separation).collect();
            }
        })
        .collect();

    let mut items = Vec::with_capacity(spec.counts.iter().sum());
    for (label, (&count, mean)) in spec.counts.iter().zip(&means).enumerate() {
        for _ in 0..count {
            let features = mean
                .iter()
                .map(|m| m + spec.noise_sigma * gauss(&mut rng))
                .collect();
            items.push(SyntheticItem {
                id: format!("s{:05}", items.len()),
                features,
                label,
            });
        }
    }
    Ok(SyntheticPool {
        class_names: spec.class_names.clone(),
        dim: spec.dim,
        means,
        items,
    })
}

/// Holds out `fraction` of every class for validation. A class with at least
/// two items keeps at least one on each side of the split.
pub fn stratified_split(pool: &SyntheticPool, fraction: f64, seed: u64) -> SimulationData {
    let mut by_class: Vec<Vec<&SyntheticItem>> = vec![Vec::new(); pool.class_names.len()];
    for item in &pool.items {
        by_class[item.label].push(item);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool_labels = BTreeMap::new();
    let mut validation = Vec::new();
    for members in &by_class {
        let n = members.len();
        let mut n_val = (fraction * n as f64).round() as usize;
        if n >= 2 {
            n_val = n_val.clamp(1, n - 1);
        } else {
            n_val = 0;
        }
        let held: Vec<usize> = index::sample(&mut rng, n, n_val).into_vec();
        for (i, item) in members.iter().enumerate() {
            if held.contains(&i) {
                validation.push((item.id.clone(), item.label));
            } else {
                pool_labels.insert(item.id.clone(), item.label);
            }
        }
    }
    validation.sort();
    SimulationData {
        class_names: pool.class_names.clone(),
        features: pool.features(),
        pool: pool_labels,
        validation,
    }
}
