//! Synthetic datasets, IID and Dirichlet partitioning, and label-noise
//! injection through row-stochastic transition matrices.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Labeled feature matrix. Labels always live in `[0, class_count)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<u32>,
    class_count: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<u32>, class_count: usize) -> Result<Self> {
        let (n, _d) = features.rows()?;
        if n == 0 {
            return Err(Error::Config("dataset must contain at least one sample".into()));
        }
        if labels.len() != n {
            return Err(Error::Shape(format!(
                "{} labels for {} feature rows",
                labels.len(),
                n
            )));
        }
        if class_count < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {class_count}")));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= class_count) {
            return Err(Error::Config(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(Dataset {
            features,
            labels,
            class_count,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.shape()[1]
    }

    /// New dataset holding the given rows, in order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let d = self.feature_dim();
        let mut feat = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Usage(format!("index {i} out of range for {} rows", self.len())));
            }
            feat.extend_from_slice(&self.features.data()[i * d..(i + 1) * d]);
            labels.push(self.labels[i]);
        }
        Dataset::new(Tensor::new(vec![indices.len(), d], feat)?, labels, self.class_count)
    }

    /// Same features, different labels.
    pub fn with_labels(&self, labels: Vec<u32>) -> Result<Dataset> {
        Dataset::new(self.features.clone(), labels, self.class_count)
    }

    /// Feature rows for a batch of row indices.
    pub fn gather_features(&self, indices: &[usize]) -> Result<Tensor> {
        let d = self.feature_dim();
        let mut feat = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            feat.extend_from_slice(&self.features.data()[i * d..(i + 1) * d]);
        }
        Tensor::new(vec![indices.len(), d], feat)
    }
}

/// Cluster means used by the synthetic generator: one unit-norm direction
/// per class, deterministic given seed.
pub fn synthetic_cluster_means(classes: usize, dim: usize, seed: u64) -> Result<Tensor> {
    if classes < 2 || dim < 2 {
        return Err(Error::Config(format!(
            "need classes >= 2 and dim >= 2, got {classes}, {dim}"
        )));
    }
    let mut r = rng::stream(seed, "cluster-means");
    let mut data = Vec::with_capacity(classes * dim);
    for _ in 0..classes {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        data.extend(v.iter().map(|x| x / norm));
    }
    Tensor::new(vec![classes, dim], data)
}

/// Gaussian clusters around unit-sphere means: `per_class` samples per class,
/// isotropic spread `sigma`, grouped by class, labels are cluster ids.
pub fn generate_synthetic(
    classes: usize,
    dim: usize,
    per_class: usize,
    sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    if per_class == 0 {
        return Err(Error::Config("per_class must be at least 1".into()));
    }
    if sigma <= 0.0 {
        return Err(Error::Config(format!("spread must be positive, got {sigma}")));
    }
    let means = synthetic_cluster_means(classes, dim, seed)?;
    let mut r = rng::stream(seed, "cluster-samples");
    let n = classes * per_class;
    let mut feat = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..classes {
        let mean = &means.data()[c * dim..(c + 1) * dim];
        for _ in 0..per_class {
            for m in mean {
                let z: f64 = StandardNormal.sample(&mut r);
                feat.push(m + sigma * z);
            }
            labels.push(c as u32);
        }
    }
    Dataset::new(Tensor::new(vec![n, dim], feat)?, labels, classes)
}

/// Unlabeled-by-convention public data: cluster structure from an
/// independent stream, `size` samples spread over `classes` clusters.
/// Downstream code uses only the features.
pub fn generate_public(classes: usize, dim: usize, size: usize, sigma: f64, seed: u64) -> Result<Dataset> {
    if size == 0 {
        return Err(Error::Config("public dataset must be non-empty".into()));
    }
    if classes < 2 || dim < 2 {
        return Err(Error::Config(format!(
            "need classes >= 2 and dim >= 2, got {classes}, {dim}"
        )));
    }
    if sigma <= 0.0 {
        return Err(Error::Config(format!("spread must be positive, got {sigma}")));
    }
    let mut r = rng::stream(seed, "public-means");
    let mut means = Vec::with_capacity(classes * dim);
    for _ in 0..classes {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        means.extend(v.iter().map(|x| x / norm));
    }
    let mut rs = rng::stream(seed, "public-samples");
    let mut feat = Vec::with_capacity(size * dim);
    let mut labels = Vec::with_capacity(size);
    for i in 0..size {
        let c = i % classes;
        let mean = &means[c * dim..(c + 1) * dim];
        for m in mean {
            let z: f64 = StandardNormal.sample(&mut rs);
            feat.push(m + sigma * z);
        }
        labels.push(c as u32);
    }
    Dataset::new(Tensor::new(vec![size, dim], feat)?, labels, classes)
}

/// Split a class-grouped dataset into (first `head_per_class` rows of each
/// class, remainder). Used to carve the clean test split before any noise.
pub fn split_per_class(ds: &Dataset, head_per_class: usize) -> Result<(Dataset, Dataset)> {
    let mut head = Vec::new();
    let mut tail = Vec::new();
    let mut seen = vec![0usize; ds.class_count()];
    for (i, &l) in ds.labels().iter().enumerate() {
        if seen[l as usize] < head_per_class {
            head.push(i);
        } else {
            tail.push(i);
        }
        seen[l as usize] += 1;
    }
    if head.is_empty() || tail.is_empty() {
        return Err(Error::Config(format!(
            "split with head_per_class={head_per_class} leaves an empty side"
        )));
    }
    Ok((ds.subset(&head)?, ds.subset(&tail)?))
}

// ── Partitioning ────────────────────────────────────────────────────────

/// Per-client sample indices into a parent dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    pub client_indices: Vec<Vec<usize>>,
    pub beta: Option<f64>,
}

impl PartitionPlan {
    pub fn clients(&self) -> usize {
        self.client_indices.len()
    }
}

/// Shuffle and deal the pool as evenly as possible.
pub fn partition_iid(pool_size: usize, clients: usize, seed: u64) -> Result<PartitionPlan> {
    if clients < 2 {
        return Err(Error::Config(format!("need at least 2 clients, got {clients}")));
    }
    let mut idx: Vec<usize> = (0..pool_size).collect();
    idx.shuffle(&mut rng::stream(seed, "partition-iid"));
    let base = pool_size / clients;
    let extra = pool_size % clients;
    let mut plan = Vec::with_capacity(clients);
    let mut cursor = 0;
    for k in 0..clients {
        let take = base + usize::from(k < extra);
        plan.push(idx[cursor..cursor + take].to_vec());
        cursor += take;
    }
    Ok(PartitionPlan {
        client_indices: plan,
        beta: None,
    })
}

const DIRICHLET_ATTEMPT_CAP: usize = 100;

/// Class-wise Dirichlet split: for each class, draw proportions over clients
/// and hand out that class's (shuffled) samples accordingly. Plans violating
/// `min_per_client` are resampled up to a fixed attempt cap.
pub fn partition_dirichlet(
    dataset: &Dataset,
    clients: usize,
    beta: f64,
    min_per_client: usize,
    seed: u64,
) -> Result<PartitionPlan> {
    if clients < 2 {
        return Err(Error::Config(format!("need at least 2 clients, got {clients}")));
    }
    if beta <= 0.0 {
        return Err(Error::Config(format!("dirichlet beta must be positive, got {beta}")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.class_count()];
    for (i, &l) in dataset.labels().iter().enumerate() {
        by_class[l as usize].push(i);
    }
    let gamma = Gamma::new(beta, 1.0)
        .map_err(|e| Error::Config(format!("invalid dirichlet parameter: {e}")))?;
    let mut r = rng::stream(seed, "partition-dirichlet");

    for _attempt in 0..DIRICHLET_ATTEMPT_CAP {
        let mut plan: Vec<Vec<usize>> = vec![Vec::new(); clients];
        for class_indices in &by_class {
            let mut shuffled = class_indices.clone();
            shuffled.shuffle(&mut r);
            let draws: Vec<f64> = (0..clients).map(|_| gamma.sample(&mut r)).collect();
            let total: f64 = draws.iter().sum();
            if total <= 0.0 || !total.is_finite() {
                continue; // degenerate draw; next attempt
            }
            let proportions: Vec<f64> = draws.iter().map(|g| g / total).collect();
            let quotas = largest_remainder_quotas(&proportions, shuffled.len());
            let mut cursor = 0;
            for (k, &q) in quotas.iter().enumerate() {
                plan[k].extend_from_slice(&shuffled[cursor..cursor + q]);
                cursor += q;
            }
        }
        if plan.iter().all(|p| p.len() >= min_per_client) {
            return Ok(PartitionPlan {
                client_indices: plan,
                beta: Some(beta),
            });
        }
    }
    Err(Error::Partition(format!(
        "could not satisfy min_per_client={min_per_client} within {DIRICHLET_ATTEMPT_CAP} attempts (beta={beta}, clients={clients})"
    )))
}

/// Integer quotas summing exactly to `total`, proportional to `proportions`.
fn largest_remainder_quotas(proportions: &[f64], total: usize) -> Vec<usize> {
    let mut quotas: Vec<usize> = Vec::with_capacity(proportions.len());
    let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(proportions.len());
    let mut assigned = 0usize;
    for (k, &p) in proportions.iter().enumerate() {
        let exact = p * total as f64;
        let q = exact.floor() as usize;
        quotas.push(q);
        assigned += q;
        remainders.push((k, exact - q as f64));
    }
    // Ties broken by lower client index for determinism.
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut left = total - assigned;
    for (k, _) in remainders {
        if left == 0 {
            break;
        }
        quotas[k] += 1;
        left -= 1;
    }
    quotas
}

// ── Label noise ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    Symflip,
    Pairflip,
}

impl NoiseKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            NoiseKind::Symflip => "symflip",
            NoiseKind::Pairflip => "pairflip",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "symflip" => Ok(NoiseKind::Symflip),
            "pairflip" => Ok(NoiseKind::Pairflip),
            other => Err(Error::Config(format!("unknown noise kind '{other}'"))),
        }
    }
}

/// Row-stochastic label-corruption matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    entries: Vec<f64>,
    class_count: usize,
    pub noise_rate: f64,
    pub kind: NoiseKind,
}

impl TransitionMatrix {
    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn entry(&self, from: usize, to: usize) -> f64 {
        self.entries[from * self.class_count + to]
    }

    pub fn row(&self, from: usize) -> &[f64] {
        &self.entries[from * self.class_count..(from + 1) * self.class_count]
    }
}

/// Symflip spreads `mu` uniformly over the wrong classes; pairflip moves it
/// entirely to the next class modulo C. Pairflip beyond 0.5 would make the
/// true label a minority and is rejected.
pub fn build_transition_matrix(kind: NoiseKind, mu: f64, classes: usize) -> Result<TransitionMatrix> {
    if classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
    }
    if !(0.0..1.0).contains(&mu) {
        return Err(Error::Config(format!("noise rate must be in [0, 1), got {mu}")));
    }
    if kind == NoiseKind::Pairflip && mu > 0.5 {
        return Err(Error::Config(format!(
            "pairflip noise rate must not exceed 0.5, got {mu}"
        )));
    }
    let c = classes;
    let mut entries = vec![0.0; c * c];
    match kind {
        NoiseKind::Symflip => {
            let off = mu / (c as f64 - 1.0);
            for i in 0..c {
                for j in 0..c {
                    entries[i * c + j] = if i == j { 1.0 - mu } else { off };
                }
            }
        }
        NoiseKind::Pairflip => {
            for i in 0..c {
                entries[i * c + i] = 1.0 - mu;
                entries[i * c + (i + 1) % c] = mu;
            }
        }
    }
    Ok(TransitionMatrix {
        entries,
        class_count: c,
        noise_rate: mu,
        kind,
    })
}

/// Resample each label independently from its transition-matrix row.
pub fn apply_label_noise(labels: &[u32], matrix: &TransitionMatrix, seed: u64) -> Result<Vec<u32>> {
    let c = matrix.class_count();
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::Usage(format!(
            "label {bad} out of range for {c}-class transition matrix"
        )));
    }
    let mut r = rng::stream(seed, "label-noise");
    let mut out = Vec::with_capacity(labels.len());
    for &l in labels {
        let row = matrix.row(l as usize);
        let u: f64 = r.gen_range(0.0..1.0);
        let mut acc = 0.0;
        let mut chosen = c - 1;
        for (j, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                chosen = j;
                break;
            }
        }
        out.push(chosen as u32);
    }
    Ok(out)
}

/// Fraction of positions where the two label arrays differ.
pub fn empirical_flip_rate(original: &[u32], corrupted: &[u32]) -> Result<f64> {
    if original.len() != corrupted.len() {
        return Err(Error::Usage(format!(
            "label arrays differ in length: {} vs {}",
            original.len(),
            corrupted.len()
        )));
    }
    if original.is_empty() {
        return Err(Error::Usage("flip rate of empty arrays is undefined".into()));
    }
    let flips = original
        .iter()
        .zip(corrupted)
        .filter(|(a, b)| a != b)
        .count();
    Ok(flips as f64 / original.len() as f64)
}

// ── Dataset container ("RHFLDS1") ───────────────────────────────────────
//
// magic, u32 C, u32 D, u32 N little-endian, then row-major f64 features,
// then u32 labels.

const DATASET_MAGIC: &[u8; 7] = b"RHFLDS1";

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(DATASET_MAGIC)?;
    f.write_all(&(ds.class_count() as u32).to_le_bytes())?;
    f.write_all(&(ds.feature_dim() as u32).to_le_bytes())?;
    f.write_all(&(ds.len() as u32).to_le_bytes())?;
    for v in ds.features().data() {
        f.write_all(&v.to_le_bytes())?;
    }
    for l in ds.labels() {
        f.write_all(&l.to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 7];
    f.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Parse {
            line: 0,
            message: format!("bad dataset magic {magic:?}"),
        });
    }
    let c = read_u32(&mut f)? as usize;
    let d = read_u32(&mut f)? as usize;
    let n = read_u32(&mut f)? as usize;
    let mut feat = vec![0.0; n * d];
    let mut b = [0u8; 8];
    for v in feat.iter_mut() {
        f.read_exact(&mut b)?;
        *v = f64::from_le_bytes(b);
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        labels.push(read_u32(&mut f)?);
    }
    Dataset::new(Tensor::new(vec![n, d], feat)?, labels, c)
}

fn read_u32(f: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    f.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_sigma_collapses_to_means() {
        let ds = generate_synthetic(2, 4, 1, 1e-12, 3).unwrap();
        let means = synthetic_cluster_means(2, 4, 3).unwrap();
        for (a, b) in ds.features().data().iter().zip(means.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_eq!(ds.labels(), &[0, 1]);
    }

    #[test]
    fn cluster_means_lie_on_unit_sphere() {
        let means = synthetic_cluster_means(10, 20, 7).unwrap();
        for c in 0..10 {
            let row = &means.data()[c * 20..(c + 1) * 20];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_bit_identical() {
        let a = generate_synthetic(3, 5, 10, 0.35, 42).unwrap();
        let b = generate_synthetic(3, 5, 10, 0.35, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn public_rejects_empty() {
        assert!(generate_public(4, 5, 0, 0.35, 1).is_err());
    }

    #[test]
    fn public_and_private_share_no_rows() {
        let private = generate_synthetic(3, 5, 20, 0.35, 1).unwrap();
        let public = generate_public(6, 5, 60, 0.35, 2).unwrap();
        for i in 0..private.len() {
            let pr = &private.features().data()[i * 5..(i + 1) * 5];
            for j in 0..public.len() {
                let pu = &public.features().data()[j * 5..(j + 1) * 5];
                assert!(pr != pu);
            }
        }
    }

    #[test]
    fn iid_partition_covers_pool() {
        let plan = partition_iid(103, 4, 9).unwrap();
        let mut all: Vec<usize> = plan.client_indices.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
    }

    #[test]
    fn dirichlet_rejects_single_client() {
        let ds = generate_synthetic(2, 3, 5, 0.3, 1).unwrap();
        assert!(partition_dirichlet(&ds, 1, 0.5, 0, 1).is_err());
    }

    #[test]
    fn dirichlet_partition_is_disjoint_cover() {
        let ds = generate_synthetic(4, 3, 50, 0.3, 5).unwrap();
        for seed in 0..100 {
            let plan = partition_dirichlet(&ds, 3, 0.5, 1, seed).unwrap();
            let mut all: Vec<usize> = plan.client_indices.iter().flatten().copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..ds.len()).collect::<Vec<_>>(), "seed {seed}");
        }
    }

    #[test]
    fn huge_beta_approaches_even_split() {
        let ds = generate_synthetic(5, 3, 100, 0.3, 11).unwrap();
        let plan = partition_dirichlet(&ds, 4, 10000.0, 1, 77).unwrap();
        // Per class, each client should hold ~1/4 of the class pool.
        for c in 0..5 {
            for k in 0..4 {
                let held = plan.client_indices[k]
                    .iter()
                    .filter(|&&i| ds.labels()[i] as usize == c)
                    .count();
                let share = held as f64 / 100.0;
                assert!(
                    (share - 0.25).abs() <= 0.05,
                    "class {c} client {k} share {share}"
                );
            }
        }
    }

    #[test]
    fn unsatisfiable_min_per_client_errors() {
        let ds = generate_synthetic(2, 3, 5, 0.3, 1).unwrap(); // 10 samples
        let err = partition_dirichlet(&ds, 4, 0.5, 100, 1).unwrap_err();
        assert!(matches!(err, Error::Partition(_)));
    }

    #[test]
    fn symflip_matrix_closed_form() {
        let m = build_transition_matrix(NoiseKind::Symflip, 0.2, 10).unwrap();
        for i in 0..10 {
            for j in 0..10 {
                let expected = if i == j { 0.8 } else { 0.2 / 9.0 };
                assert!((m.entry(i, j) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pairflip_matrix_closed_form() {
        let m = build_transition_matrix(NoiseKind::Pairflip, 0.1, 10).unwrap();
        for i in 0..10 {
            for j in 0..10 {
                let expected = if i == j {
                    0.9
                } else if j == (i + 1) % 10 {
                    0.1
                } else {
                    0.0
                };
                assert!((m.entry(i, j) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_noise_gives_identity() {
        for kind in [NoiseKind::Symflip, NoiseKind::Pairflip] {
            let m = build_transition_matrix(kind, 0.0, 6).unwrap();
            for i in 0..6 {
                for j in 0..6 {
                    assert_eq!(m.entry(i, j), if i == j { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn rows_sum_to_one_across_grid() {
        for &c in &[2usize, 5, 10, 23] {
            for &mu in &[0.0, 0.1, 0.2, 0.45, 0.8, 0.999] {
                let mut kinds = vec![NoiseKind::Symflip];
                if mu <= 0.5 {
                    kinds.push(NoiseKind::Pairflip);
                }
                for kind in kinds {
                    let m = build_transition_matrix(kind, mu, c).unwrap();
                    for i in 0..c {
                        let sum: f64 = m.row(i).iter().sum();
                        assert!((sum - 1.0).abs() < 1e-12, "{kind:?} mu={mu} c={c} row={i}");
                        assert!((m.entry(i, i) - (1.0 - mu)).abs() < 1e-12);
                        assert!(m.row(i).iter().all(|&p| (0.0..=1.0).contains(&p)));
                    }
                }
            }
        }
    }

    #[test]
    fn pairflip_beyond_half_rejected() {
        assert!(build_transition_matrix(NoiseKind::Pairflip, 0.7, 10).is_err());
        assert!(build_transition_matrix(NoiseKind::Symflip, 0.7, 10).is_ok());
    }

    #[test]
    fn out_of_range_mu_rejected() {
        assert!(build_transition_matrix(NoiseKind::Symflip, 1.0, 4).is_err());
        assert!(build_transition_matrix(NoiseKind::Symflip, -0.1, 4).is_err());
    }

    #[test]
    fn identity_matrix_leaves_labels_unchanged() {
        let m = build_transition_matrix(NoiseKind::Symflip, 0.0, 4).unwrap();
        let labels: Vec<u32> = (0..1000).map(|i| (i % 4) as u32).collect();
        let noisy = apply_label_noise(&labels, &m, 5).unwrap();
        assert_eq!(labels, noisy);
    }

    #[test]
    fn near_total_noise_flips_nearly_everything() {
        let m = build_transition_matrix(NoiseKind::Symflip, 0.999, 2).unwrap();
        let labels: Vec<u32> = (0..100_000).map(|i| (i % 2) as u32).collect();
        let noisy = apply_label_noise(&labels, &m, 6).unwrap();
        let rate = empirical_flip_rate(&labels, &noisy).unwrap();
        assert!((rate - 0.999).abs() < 0.005, "rate {rate}");
    }

    #[test]
    fn symflip_rate_concentrates() {
        let m = build_transition_matrix(NoiseKind::Symflip, 0.2, 10).unwrap();
        let labels: Vec<u32> = (0..100_000).map(|i| (i % 10) as u32).collect();
        let noisy = apply_label_noise(&labels, &m, 7).unwrap();
        let rate = empirical_flip_rate(&labels, &noisy).unwrap();
        assert!((0.19..=0.21).contains(&rate), "rate {rate}");
    }

    #[test]
    fn noise_is_deterministic_given_seed() {
        let m = build_transition_matrix(NoiseKind::Pairflip, 0.3, 5).unwrap();
        let labels: Vec<u32> = (0..500).map(|i| (i % 5) as u32).collect();
        assert_eq!(
            apply_label_noise(&labels, &m, 9).unwrap(),
            apply_label_noise(&labels, &m, 9).unwrap()
        );
    }

    #[test]
    fn flip_rate_edge_cases() {
        assert_eq!(empirical_flip_rate(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
        assert_eq!(empirical_flip_rate(&[0, 1, 0], &[1, 0, 1]).unwrap(), 1.0);
        assert!(empirical_flip_rate(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn container_round_trip() {
        let ds = generate_synthetic(3, 4, 7, 0.4, 13).unwrap();
        let dir = std::env::temp_dir().join("rhfl_ds_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("data.ds");
        write_dataset(&path, &ds).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn container_rejects_foreign_files() {
        let dir = std::env::temp_dir().join("rhfl_ds_badmagic");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("junk.ds");
        std::fs::write(&path, b"NOTDATA-and-some-garbage").unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn split_preserves_class_grouping() {
        let ds = generate_synthetic(3, 4, 10, 0.4, 13).unwrap();
        let (head, tail) = split_per_class(&ds, 4).unwrap();
        assert_eq!(head.len(), 12);
        assert_eq!(tail.len(), 18);
        for c in 0..3u32 {
            assert_eq!(head.labels().iter().filter(|&&l| l == c).count(), 4);
            assert_eq!(tail.labels().iter().filter(|&&l| l == c).count(), 6);
        }
    }
}
