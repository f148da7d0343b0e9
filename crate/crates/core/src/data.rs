//! Triplet records, the synthetic compositional benchmark, JSON Lines I/O,
//! and deterministic mini-batch sampling.
//!
//! Synthetic images carry a latent vector with one coordinate per token
//! slot; each coordinate is quantized into `levels` bins and the bin index
//! picks that slot's token. A text names one of `n_attributes` modification
//! directions, each of which moves a single coordinate up or down by one bin.
//! The target latent is the reference latent plus the direction plus
//! isotropic Gaussian noise.

use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Size of the fine-grained candidate subset attached to validation records.
pub const SUBSET_SIZE: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripletRecord {
    pub id: String,
    pub ref_tokens: Vec<usize>,
    pub text_tokens: Vec<usize>,
    pub target_tokens: Vec<usize>,
    /// Ids of records whose targets form this query's candidate subset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset_ids: Option<Vec<String>>,
}

/// Checks the dataset-level record invariants.
pub fn validate_records(records: &[TripletRecord]) -> Result<()> {
    let mut ids = HashSet::with_capacity(records.len());
    for r in records {
        if r.ref_tokens.is_empty() || r.text_tokens.is_empty() || r.target_tokens.is_empty() {
            return Err(Error::Data(format!(
                "record {} has an empty token list",
                r.id
            )));
        }
        if !ids.insert(r.id.as_str()) {
            return Err(Error::Data(format!("duplicate record id {}", r.id)));
        }
    }
    for r in records {
        if let Some(subset) = &r.subset_ids {
            if !subset.contains(&r.id) {
                return Err(Error::Data(format!(
                    "record {} subset omits its own target",
                    r.id
                )));
            }
            if let Some(missing) = subset.iter().find(|s| !ids.contains(s.as_str())) {
                return Err(Error::Data(format!(
                    "record {} subset names unknown id {missing}",
                    r.id
                )));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub image_vocab: usize,
    pub text_vocab: usize,
    /// Latent dimension; every image has one token per coordinate.
    pub latent_dim: usize,
    /// Quantization bins per latent coordinate.
    pub levels: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_attributes: usize,
    /// Filler words appended after the direction word in every text.
    pub text_fillers: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            image_vocab: 32,
            text_vocab: 24,
            latent_dim: 16,
            levels: 2,
            n_train: 512,
            n_val: 128,
            n_attributes: 16,
            text_fillers: 2,
            noise_sigma: 0.05,
            seed: 17,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("latent_dim", self.latent_dim),
            ("levels", self.levels),
            ("n_train", self.n_train),
            ("n_val", self.n_val),
            ("n_attributes", self.n_attributes),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.levels < 2 {
            return Err(Error::Config(
                "levels must be at least 2 to move a coordinate".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be finite and >= 0".into()));
        }
        if self.image_vocab < self.latent_dim * self.levels {
            return Err(Error::Config(format!(
                "image vocabulary {} cannot encode {} coordinates x {} levels",
                self.image_vocab, self.latent_dim, self.levels
            )));
        }
        if self.n_attributes > 2 * self.latent_dim {
            return Err(Error::Config(format!(
                "{} directions exceed the {} available (two per coordinate)",
                self.n_attributes,
                2 * self.latent_dim
            )));
        }
        let needed = self.n_attributes + usize::from(self.text_fillers > 0);
        if self.text_vocab < needed {
            return Err(Error::Config(format!(
                "text vocabulary {} cannot encode {} directions plus filler words",
                self.text_vocab, self.n_attributes
            )));
        }
        Ok(())
    }

    /// Coordinate and signed step of direction `k`.
    pub fn direction(&self, k: usize) -> (usize, i64) {
        let coord = k % self.latent_dim;
        let step = if (k / self.latent_dim).is_multiple_of(2) {
            1
        } else {
            -1
        };
        (coord, step)
    }
}

/// Ground-truth latents behind one generated record.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTriplet {
    pub reference: Vec<f64>,
    pub target: Vec<f64>,
    pub direction: usize,
}

impl LatentTriplet {
    /// `reference + direction`, the noise-free target latent.
    pub fn composed_query(&self, spec: &SynthSpec) -> Vec<f64> {
        let (coord, step) = spec.direction(self.direction);
        let mut q = self.reference.clone();
        q[coord] += step as f64;
        q
    }
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub train: Vec<TripletRecord>,
    pub val: Vec<TripletRecord>,
    pub train_latents: Vec<LatentTriplet>,
    pub val_latents: Vec<LatentTriplet>,
}

fn tokens_of(latent: &[f64], levels: usize) -> Vec<usize> {
    latent
        .iter()
        .enumerate()
        .map(|(slot, &z)| {
            let bin = z.floor().clamp(0.0, (levels - 1) as f64) as usize;
            slot * levels + bin
        })
        .collect()
}

fn euclid_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

const MAX_ATTEMPTS_PER_RECORD: usize = 1000;

/// Generates the train and validation splits.
pub fn generate(spec: &SynthSpec) -> Result<(Vec<TripletRecord>, Vec<TripletRecord>)> {
    let ds = generate_with_latents(spec)?;
    Ok((ds.train, ds.val))
}

/// Like [`generate`], also returning the latent ground truth.
pub fn generate_with_latents(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let total = spec.n_train + spec.n_val;
    let mut seen_targets: HashSet<Vec<usize>> = HashSet::with_capacity(total);
    let mut latents = Vec::with_capacity(total);
    let mut raw = Vec::with_capacity(total);

    while raw.len() < total {
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS_PER_RECORD {
            let direction = rng.random_range(0..spec.n_attributes);
            let (coord, step) = spec.direction(direction);
            let reference: Vec<f64> = (0..spec.latent_dim)
                .map(|c| {
                    let bin = if c == coord {
                        // keep the moved coordinate inside the grid
                        if step > 0 {
                            rng.random_range(0..spec.levels - 1)
                        } else {
                            rng.random_range(1..spec.levels)
                        }
                    } else {
                        rng.random_range(0..spec.levels)
                    };
                    bin as f64 + 0.5 + rng.random_range(-0.25..0.25)
                })
                .collect();
            let mut target = reference.clone();
            target[coord] += step as f64;
            for z in &mut target {
                *z += noise.sample(&mut rng);
            }
            let target_tokens = tokens_of(&target, spec.levels);
            if !seen_targets.insert(target_tokens.clone()) {
                continue;
            }
            let mut text_tokens = vec![direction];
            text_tokens.extend(
                (0..spec.text_fillers)
                    .map(|_| rng.random_range(spec.n_attributes..spec.text_vocab)),
            );
            raw.push((
                tokens_of(&reference, spec.levels),
                text_tokens,
                target_tokens,
            ));
            latents.push(LatentTriplet {
                reference,
                target,
                direction,
            });
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Config(format!(
                "could not place {total} distinct targets; grid of {} levels over {} coordinates is too small",
                spec.levels, spec.latent_dim
            )));
        }
    }

    let val_latents = latents.split_off(spec.n_train);
    let train_latents = latents;
    let mut train = Vec::with_capacity(spec.n_train);
    let mut val = Vec::with_capacity(spec.n_val);
    for (i, (ref_tokens, text_tokens, target_tokens)) in raw.into_iter().enumerate() {
        let (id, split) = if i < spec.n_train {
            (format!("train-{i:05}"), &mut train)
        } else {
            (format!("val-{:05}", i - spec.n_train), &mut val)
        };
        split.push(TripletRecord {
            id,
            ref_tokens,
            text_tokens,
            target_tokens,
            subset_ids: None,
        });
    }

    for i in 0..val.len() {
        let mut by_distance: Vec<(f64, usize)> = val_latents
            .iter()
            .enumerate()
            .map(|(j, l)| (euclid_sq(&val_latents[i].target, &l.target), j))
            .collect();
        // distance ties resolve by position, which follows id order
        by_distance.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut subset: BTreeSet<usize> = BTreeSet::from([i]);
        for &(_, j) in &by_distance {
            if subset.len() == SUBSET_SIZE.min(val.len()) {
                break;
            }
            subset.insert(j);
        }
        val[i].subset_ids = Some(subset.into_iter().map(|j| val[j].id.clone()).collect());
    }

    Ok(SynthDataset {
        train,
        val,
        train_latents,
        val_latents,
    })
}

pub fn write_jsonl(path: &Path, records: &[TripletRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<TripletRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TripletRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        records.push(record);
    }
    validate_records(&records)?;
    Ok(records)
}

/// One mini-batch; in-batch items serve as each other's negatives.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub records: Vec<&'a TripletRecord>,
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Shuffled, drop-last batching; the order depends only on `(seed, epoch)`.
#[derive(Clone, Debug)]
pub struct BatchSampler<'a> {
    records: &'a [TripletRecord],
    batch_size: usize,
    seed: u64,
}

impl<'a> BatchSampler<'a> {
    pub fn new(records: &'a [TripletRecord], batch_size: usize, seed: u64) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Input("cannot batch an empty dataset".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(Self {
            records,
            batch_size,
            seed,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.records.len() / self.batch_size
    }

    /// Record indices of every batch in `epoch`.
    pub fn epoch_indices(&self, epoch: u64) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.records.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
        order
            .chunks_exact(self.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }

    pub fn epoch(&self, epoch: u64) -> impl Iterator<Item = Batch<'a>> + '_ {
        self.epoch_indices(epoch).into_iter().map(|idx| Batch {
            records: idx.into_iter().map(|i| &self.records[i]).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            n_train: 40,
            n_val: 20,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = small_spec();
        let (a_train, a_val) = generate(&spec).unwrap();
        let (b_train, b_val) = generate(&spec).unwrap();
        let ser = |r: &[TripletRecord]| serde_json::to_string(r).unwrap();
        assert_eq!(ser(&a_train), ser(&b_train));
        assert_eq!(ser(&a_val), ser(&b_val));
        let other = generate(&SynthSpec { seed: 99, ..spec }).unwrap();
        assert_ne!(ser(&a_train), ser(&other.0));
    }

    #[test]
    fn zero_noise_target_is_reference_plus_direction() {
        let spec = SynthSpec {
            noise_sigma: 0.0,
            ..small_spec()
        };
        let ds = generate_with_latents(&spec).unwrap();
        for l in ds.train_latents.iter().chain(&ds.val_latents) {
            assert_eq!(l.composed_query(&spec), l.target);
        }
    }

    #[test]
    fn records_follow_contract() {
        let ds = generate_with_latents(&small_spec()).unwrap();
        let all: Vec<_> = ds.train.iter().chain(&ds.val).cloned().collect();
        validate_records(&all).unwrap();
        assert!(ds.train.iter().all(|r| r.subset_ids.is_none()));
        for r in &ds.val {
            let s = r.subset_ids.as_ref().unwrap();
            assert_eq!(s.len(), SUBSET_SIZE);
            assert!(s.contains(&r.id));
        }
        let spec = small_spec();
        for r in &all {
            assert!(r
                .ref_tokens
                .iter()
                .chain(&r.target_tokens)
                .all(|&t| t < spec.image_vocab));
            assert!(r.text_tokens.iter().all(|&t| t < spec.text_vocab));
            assert_eq!(r.text_tokens.len(), 1 + spec.text_fillers);
        }
    }

    #[test]
    fn vocabulary_too_small_is_config_error() {
        let spec = SynthSpec {
            image_vocab: 10,
            ..small_spec()
        };
        assert!(matches!(generate(&spec), Err(Error::Config(_))));
        let spec = SynthSpec {
            text_vocab: 4,
            ..small_spec()
        };
        assert!(matches!(generate(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn batching_counts_and_determinism() {
        let (train, _) = generate(&SynthSpec {
            n_train: 10,
            n_val: 5,
            ..SynthSpec::default()
        })
        .unwrap();
        let s = BatchSampler::new(&train, 4, 3).unwrap();
        assert_eq!(s.epoch(0).count(), 2);
        assert_eq!(s.epoch_indices(5), s.epoch_indices(5));
        assert_ne!(s.epoch_indices(0), s.epoch_indices(1));
        assert!(BatchSampler::new(&[], 4, 3).is_err());
    }

    #[test]
    fn jsonl_round_trip_and_field_names() {
        let (train, val) = generate(&small_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("val.jsonl");
        write_jsonl(&path, &val).unwrap();
        assert_eq!(read_jsonl(&path).unwrap(), val);
        let first = std::fs::read_to_string(&path).unwrap();
        let v: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
        let keys: BTreeSet<_> = v.as_object().unwrap().keys().cloned().collect();
        let expected: BTreeSet<String> = [
            "id",
            "ref_tokens",
            "text_tokens",
            "target_tokens",
            "subset_ids",
        ]
        .into_iter()
        .map(String::from)
        .collect();
        assert_eq!(keys, expected);

        let path = dir.path().join("train.jsonl");
        write_jsonl(&path, &train).unwrap();
        assert_eq!(read_jsonl(&path).unwrap(), train);
    }
}
