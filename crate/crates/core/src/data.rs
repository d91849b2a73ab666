//! Synthetic cross-silo federations.
//!
//! Each client ("source") draws labelled points from two class clusters
//! around a shared centre. Client `i` moves that centre by `i` steps along the
//! diagonal and rotates the cluster covariance axes by `i` steps, so the
//! class means stay fixed relative to the centre while the noise geometry
//! turns. Pools are split into
//! train / validation / local-test, and a balanced global test set is drawn
//! from every participating source.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Batch;
use crate::rng::{stream, Domain};

fn default_input_dim() -> usize {
    2
}
fn default_class_count() -> usize {
    2
}
fn default_rotation_step() -> f64 {
    0.5
}
fn default_mean_shift_step() -> f64 {
    1.0
}
fn default_label_noise() -> f64 {
    0.05
}
fn default_class_separation() -> f64 {
    2.0
}
fn default_boundary_std() -> f64 {
    0.6
}
fn default_lateral_std() -> f64 {
    1.5
}
fn default_split() -> SplitFractions {
    SplitFractions {
        train: 0.60,
        val: 0.15,
        test: 0.25,
    }
}

/// Train / validation / local-test fractions of a client pool.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(*f > 0.0 && f.is_finite())) {
            return Err(Error::config("data.split fractions must all be positive"));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("data.split fractions must sum to 1"));
        }
        Ok(())
    }

    /// Split sizes for `n` samples: train and val rounded, test takes the rest.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let train = (self.train * n as f64).round() as usize;
        let val = (self.val * n as f64).round() as usize;
        let test = n.saturating_sub(train + val);
        (train, val, test)
    }
}

/// How the per-client distributions differ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    pub n_clients: usize,
    pub samples_per_client: usize,
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    #[serde(default = "default_class_count")]
    pub class_count: usize,
    /// Radians by which the covariance axes turn per client index.
    #[serde(default = "default_rotation_step")]
    pub rotation_step: f64,
    /// Offset of the client centre per client index, along the all-ones diagonal.
    #[serde(default = "default_mean_shift_step")]
    pub mean_shift_step: f64,
    #[serde(default = "default_label_noise")]
    pub label_noise: f64,
    /// Distance between class means (binary) or twice the class-ring radius.
    #[serde(default = "default_class_separation")]
    pub class_separation: f64,
    /// Standard deviation along the class axis, before rotation.
    #[serde(default = "default_boundary_std")]
    pub boundary_std: f64,
    /// Standard deviation across the class axis and in extra dimensions, before rotation.
    #[serde(default = "default_lateral_std")]
    pub lateral_std: f64,
    #[serde(default = "default_split")]
    pub split: SplitFractions,
    /// Samples per source in the global test set. Defaults to the local test
    /// size, so the global set matches the union of the local test sets in size.
    #[serde(default)]
    pub global_test_per_source: Option<usize>,
}

impl ShiftSpec {
    pub fn new(n_clients: usize, samples_per_client: usize) -> Self {
        Self {
            n_clients,
            samples_per_client,
            input_dim: default_input_dim(),
            class_count: default_class_count(),
            rotation_step: default_rotation_step(),
            mean_shift_step: default_mean_shift_step(),
            label_noise: default_label_noise(),
            class_separation: default_class_separation(),
            boundary_std: default_boundary_std(),
            lateral_std: default_lateral_std(),
            split: default_split(),
            global_test_per_source: None,
        }
    }

    /// Zero rotation and zero offset: every client is i.i.d.
    pub fn homogeneous(mut self) -> Self {
        self.rotation_step = 0.0;
        self.mean_shift_step = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_clients < 2 {
            return Err(Error::config("data.n_clients must be >= 2"));
        }
        if self.samples_per_client < 16 {
            return Err(Error::config("data.samples_per_client must be >= 16"));
        }
        if self.input_dim < 2 {
            return Err(Error::config("data.input_dim must be >= 2"));
        }
        if self.class_count < 2 {
            return Err(Error::config("data.class_count must be >= 2"));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return Err(Error::config("data.label_noise must lie in [0, 0.5)"));
        }
        for (name, v) in [
            ("data.rotation_step", self.rotation_step),
            ("data.mean_shift_step", self.mean_shift_step),
            ("data.class_separation", self.class_separation),
        ] {
            if !v.is_finite() {
                return Err(Error::config(format!("{name} must be finite")));
            }
        }
        for (name, v) in [
            ("data.boundary_std", self.boundary_std),
            ("data.lateral_std", self.lateral_std),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.global_test_per_source == Some(0) {
            return Err(Error::config("data.global_test_per_source must be >= 1"));
        }
        self.split.validate()?;
        let (tr, va, te) = self.split.sizes(self.samples_per_client);
        if tr == 0 || va == 0 || te == 0 {
            return Err(Error::config(
                "data.samples_per_client too small for non-empty splits",
            ));
        }
        Ok(())
    }

    pub fn global_per_source(&self) -> usize {
        self.global_test_per_source
            .unwrap_or_else(|| self.split.sizes(self.samples_per_client).2)
    }
}

/// Geometry of one source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceShift {
    pub mean_offset: Vec<f64>,
    pub rotation: f64,
    pub noise_scale: [f64; 2],
}

/// Identifies one generated sample: its source client and its index in that
/// source's draw order. Indices `>= samples_per_client` are global-test draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SampleId {
    pub source: usize,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    pub train: Batch,
    pub val: Batch,
    pub local_test: Batch,
    pub train_ids: Vec<SampleId>,
    pub val_ids: Vec<SampleId>,
    pub test_ids: Vec<SampleId>,
    pub source: SourceShift,
}

impl ClientDataset {
    /// All three splits concatenated (train, val, local test).
    pub fn full_pool(&self) -> Result<Batch> {
        Batch::concat(&[&self.train, &self.val, &self.local_test])
    }

    pub fn pool_size(&self) -> usize {
        self.train.len() + self.val.len() + self.local_test.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationData {
    pub spec: ShiftSpec,
    pub seed: u64,
    pub clients: Vec<ClientDataset>,
    pub global_test: Batch,
    pub global_test_ids: Vec<SampleId>,
    pub unseen_client: Option<ClientDataset>,
}

impl FederationData {
    /// Federation made of exactly the given clients and global test set.
    pub fn from_parts(spec: ShiftSpec, clients: Vec<ClientDataset>, global_test: Batch) -> Self {
        Self {
            spec,
            seed: 0,
            clients,
            global_test,
            global_test_ids: Vec::new(),
            unseen_client: None,
        }
    }
}

/// Rotation in the plane of the first two coordinates.
fn rotate(v: &mut [f64], angle: f64) {
    let (s, c) = angle.sin_cos();
    let (x, y) = (v[0], v[1]);
    v[0] = c * x - s * y;
    v[1] = s * x + c * y;
}

fn source_shift(spec: &ShiftSpec, client: usize) -> SourceShift {
    let offset = client as f64 * spec.mean_shift_step / (spec.input_dim as f64).sqrt();
    SourceShift {
        mean_offset: vec![offset; spec.input_dim],
        rotation: client as f64 * spec.rotation_step,
        noise_scale: [spec.boundary_std, spec.lateral_std],
    }
}

/// Class mean relative to the client centre: binary classes sit at ±separation/2 on the
/// first axis, more classes evenly on a circle in the first two axes.
fn class_mean(spec: &ShiftSpec, class: usize) -> [f64; 2] {
    let r = spec.class_separation / 2.0;
    if spec.class_count == 2 {
        [if class == 0 { -r } else { r }, 0.0]
    } else {
        let a = std::f64::consts::TAU * class as f64 / spec.class_count as f64;
        [r * a.cos(), r * a.sin()]
    }
}

fn draw_samples<R: Rng + ?Sized>(
    spec: &ShiftSpec,
    shift: &SourceShift,
    n: usize,
    rng: &mut R,
) -> (Vec<f64>, Vec<usize>) {
    let d = spec.input_dim;
    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut x = vec![0.0; d];
    for _ in 0..n {
        let class = rng.random_range(0..spec.class_count);
        let mean = class_mean(spec, class);
        for (j, xj) in x.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(rng);
            let std = if j == 0 {
                spec.boundary_std
            } else {
                spec.lateral_std
            };
            *xj = z * std;
        }
        rotate(&mut x, shift.rotation);
        for (j, (xj, o)) in x.iter_mut().zip(&shift.mean_offset).enumerate() {
            *xj += o + if j < 2 { mean[j] } else { 0.0 };
        }
        features.extend_from_slice(&x);

        let flip = rng.random::<f64>() < spec.label_noise;
        let label = if flip {
            let other = rng.random_range(0..spec.class_count - 1);
            if other >= class {
                other + 1
            } else {
                other
            }
        } else {
            class
        };
        labels.push(label);
    }
    (features, labels)
}

/// Shuffled disjoint partition of `0..n` into train / val / test index lists.
pub fn split_indices(
    n: usize,
    fractions: SplitFractions,
    seed: u64,
    client: usize,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    fractions.validate()?;
    let (tr, va, te) = fractions.sizes(n);
    if tr == 0 || va == 0 || te == 0 {
        return Err(Error::config(format!(
            "pool of {n} samples is too small for non-empty splits"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, Domain::Split, client as u64, 0));
    let test = order.split_off(tr + va);
    let val = order.split_off(tr);
    Ok((order, val, test))
}

/// Splits a pool into (train, val, local test) batches.
pub fn split_client_pool(
    pool: &Batch,
    fractions: SplitFractions,
    seed: u64,
) -> Result<(Batch, Batch, Batch)> {
    let (a, b, c) = split_indices(pool.len(), fractions, seed, 0)?;
    Ok((pool.gather(&a)?, pool.gather(&b)?, pool.gather(&c)?))
}

fn build_client(
    spec: &ShiftSpec,
    seed: u64,
    client: usize,
    global_k: usize,
) -> Result<(ClientDataset, Option<Batch>, Vec<SampleId>)> {
    let shift = source_shift(spec, client);
    let total = spec.samples_per_client + global_k;
    let mut rng = stream(seed, Domain::Data, client as u64, 0);
    let (features, labels) = draw_samples(spec, &shift, total, &mut rng);
    let all = Batch::new(features, spec.input_dim, labels)?;

    let (tr, va, te) = split_indices(spec.samples_per_client, spec.split, seed, client)?;
    let ids = |idx: &[usize]| -> Vec<SampleId> {
        idx.iter()
            .map(|&index| SampleId {
                source: client,
                index,
            })
            .collect()
    };
    let global_idx: Vec<usize> = (spec.samples_per_client..total).collect();
    let dataset = ClientDataset {
        client_id: client,
        train: all.gather(&tr)?,
        val: all.gather(&va)?,
        local_test: all.gather(&te)?,
        train_ids: ids(&tr),
        val_ids: ids(&va),
        test_ids: ids(&te),
        source: shift,
    };
    let global = if global_k > 0 {
        Some(all.gather(&global_idx)?)
    } else {
        None
    };
    Ok((dataset, global, ids(&global_idx)))
}

/// Generates every client of `spec`; `holdout_client`, when given, becomes
/// the unseen client and contributes nothing to training or the global test.
pub fn generate_federation(
    spec: &ShiftSpec,
    holdout_client: Option<usize>,
    seed: u64,
) -> Result<FederationData> {
    spec.validate()?;
    if let Some(h) = holdout_client {
        if h >= spec.n_clients {
            return Err(Error::config(format!(
                "holdout client {h} out of range for {} clients",
                spec.n_clients
            )));
        }
    }
    let k = spec.global_per_source();
    let mut clients = Vec::new();
    let mut unseen = None;
    let mut global_parts = Vec::new();
    let mut global_ids = Vec::new();
    for c in 0..spec.n_clients {
        if Some(c) == holdout_client {
            let (ds, _, _) = build_client(spec, seed, c, 0)?;
            unseen = Some(ds);
        } else {
            let (ds, g, ids) = build_client(spec, seed, c, k)?;
            clients.push(ds);
            global_parts.extend(g);
            global_ids.extend(ids);
        }
    }
    let refs: Vec<&Batch> = global_parts.iter().collect();
    Ok(FederationData {
        spec: spec.clone(),
        seed,
        clients,
        global_test: Batch::concat(&refs)?,
        global_test_ids: global_ids,
        unseen_client: unseen,
    })
}

/// Serializable view of a federation for fixtures and cross-checks.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FederationExport {
    pub spec: ShiftSpec,
    pub seed: u64,
    pub holdout_client: Option<usize>,
    pub clients: Vec<ClientExport>,
    pub global_test: SplitExport,
    pub unseen_client: Option<ClientExport>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClientExport {
    pub client_id: usize,
    pub source: SourceShift,
    pub train: SplitExport,
    pub val: SplitExport,
    pub local_test: SplitExport,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SplitExport {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub sample_ids: Vec<SampleId>,
}

impl SplitExport {
    fn new(batch: &Batch, ids: &[SampleId]) -> Self {
        Self {
            features: batch.rows().map(|(x, _)| x.to_vec()).collect(),
            labels: batch.labels().to_vec(),
            sample_ids: ids.to_vec(),
        }
    }

    pub fn to_batch(&self) -> Result<Batch> {
        Batch::from_rows(&self.features, self.labels.clone())
    }
}

impl ClientExport {
    fn new(c: &ClientDataset) -> Self {
        Self {
            client_id: c.client_id,
            source: c.source.clone(),
            train: SplitExport::new(&c.train, &c.train_ids),
            val: SplitExport::new(&c.val, &c.val_ids),
            local_test: SplitExport::new(&c.local_test, &c.test_ids),
        }
    }
}

impl FederationExport {
    pub fn new(fed: &FederationData) -> Self {
        Self {
            spec: fed.spec.clone(),
            seed: fed.seed,
            holdout_client: fed.unseen_client.as_ref().map(|c| c.client_id),
            clients: fed.clients.iter().map(ClientExport::new).collect(),
            global_test: SplitExport::new(&fed.global_test, &fed.global_test_ids),
            unseen_client: fed.unseen_client.as_ref().map(ClientExport::new),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn split_sizes_and_partition() {
        let f = SplitFractions {
            train: 0.60,
            val: 0.15,
            test: 0.25,
        };
        let (a, b, c) = split_indices(100, f, 3, 0).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (60, 15, 25));
        let all: HashSet<usize> = a.iter().chain(&b).chain(&c).copied().collect();
        assert_eq!(all.len(), 100);
        assert_eq!(all, (0..100).collect());
        assert_eq!(split_indices(100, f, 3, 0).unwrap(), (a, b, c));
        assert_ne!(
            split_indices(100, f, 4, 0).unwrap().0,
            split_indices(100, f, 3, 0).unwrap().0
        );
    }

    #[test]
    fn split_rejects_bad_input() {
        let f = SplitFractions {
            train: 0.60,
            val: 0.15,
            test: 0.25,
        };
        assert!(split_indices(2, f, 0, 0).is_err());
        let bad = SplitFractions {
            train: 0.5,
            val: 0.1,
            test: 0.1,
        };
        assert!(split_indices(100, bad, 0, 0).is_err());
        let neg = SplitFractions {
            train: 1.1,
            val: -0.2,
            test: 0.1,
        };
        assert!(split_indices(100, neg, 0, 0).is_err());
    }

    #[test]
    fn split_client_pool_keeps_rows() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, 0.0]).collect();
        let pool = Batch::from_rows(&rows, vec![0; 20]).unwrap();
        let f = SplitFractions {
            train: 0.5,
            val: 0.25,
            test: 0.25,
        };
        let (a, b, c) = split_client_pool(&pool, f, 1).unwrap();
        let mut seen: Vec<i64> = [&a, &b, &c]
            .iter()
            .flat_map(|s| s.rows().map(|(x, _)| x[0] as i64).collect::<Vec<_>>())
            .collect();
        seen.sort();
        assert_eq!(seen, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn federation_structure() {
        let spec = ShiftSpec::new(4, 200);
        let fed = generate_federation(&spec, None, 9).unwrap();
        assert_eq!(fed.clients.len(), 4);
        for c in &fed.clients {
            assert_eq!(c.pool_size(), 200);
            assert_eq!(
                (c.train.len(), c.val.len(), c.local_test.len()),
                (120, 30, 50)
            );
        }
        // 50 local test rows / 4 sources, rounded up
        assert_eq!(fed.global_test.len(), 4 * 50);
        for s in 0..4 {
            assert_eq!(
                fed.global_test_ids
                    .iter()
                    .filter(|id| id.source == s)
                    .count(),
                50
            );
        }
        let mut ids = HashSet::new();
        for c in &fed.clients {
            for id in c.train_ids.iter().chain(&c.val_ids).chain(&c.test_ids) {
                assert!(ids.insert(*id));
            }
        }
        for id in &fed.global_test_ids {
            assert!(ids.insert(*id));
        }
    }

    #[test]
    fn holdout_is_isolated() {
        let spec = ShiftSpec::new(4, 64);
        let fed = generate_federation(&spec, Some(2), 1).unwrap();
        let unseen = fed.unseen_client.as_ref().unwrap();
        assert_eq!(unseen.client_id, 2);
        assert_eq!(fed.clients.len(), 3);
        assert!(fed.clients.iter().all(|c| c.client_id != 2));
        assert!(fed.global_test_ids.iter().all(|id| id.source != 2));
        assert!(generate_federation(&spec, Some(4), 1).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = ShiftSpec::new(3, 40);
        let a = generate_federation(&spec, None, 5).unwrap();
        let b = generate_federation(&spec, None, 5).unwrap();
        let c = generate_federation(&spec, None, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn label_noise_rate() {
        let mut spec = ShiftSpec::new(2, 4000);
        spec.label_noise = 0.2;
        spec.class_separation = 40.0;
        let fed = generate_federation(&spec, None, 3).unwrap();
        // With well separated classes the sign of x0 recovers the clean label.
        let c = &fed.clients[0];
        let flips = c
            .train
            .rows()
            .filter(|(x, y)| usize::from(x[0] > 0.0) != *y)
            .count() as f64
            / c.train.len() as f64;
        assert!((flips - 0.2).abs() < 0.03, "flip rate {flips}");
    }

    #[test]
    fn spec_validation() {
        assert!(ShiftSpec::new(1, 100).validate().is_err());
        assert!(ShiftSpec::new(2, 8).validate().is_err());
        let mut s = ShiftSpec::new(2, 100);
        s.label_noise = 0.5;
        assert!(s.validate().is_err());
    }

    #[test]
    fn export_round_trips_batches() {
        let fed = generate_federation(&ShiftSpec::new(2, 32), Some(1), 2).unwrap();
        let ex = FederationExport::new(&fed);
        let text = serde_json::to_string(&ex).unwrap();
        let back: FederationExport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, ex);
        assert_eq!(
            back.clients[0].train.to_batch().unwrap(),
            fed.clients[0].train
        );
        assert_eq!(back.holdout_client, Some(1));
    }
}
