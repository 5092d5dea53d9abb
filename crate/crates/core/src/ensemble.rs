//! Bootstrap deep ensembles as a discrete approximation of `p(θ | D)`.

use crate::density::{
    train_mle, Arch, DensityModel, Demonstration, SceneContext, TrainConfig, TrainReport, Trajectory, DEFAULT_BATCH_SIZE,
    DEFAULT_EPOCHS, DEFAULT_FINAL_LR_FRACTION, DEFAULT_GRAD_CLIP,
};
use crate::diffmath::AdamConfig;
use crate::error::{contract, Error, Result};
use crate::{par, seeds};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// `K` density models with non-negative weights summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsemblePosterior {
    members: Vec<DensityModel>,
    weights: Vec<f64>,
}

impl EnsemblePosterior {
    /// Uniformly weighted ensemble.
    pub fn new(members: Vec<DensityModel>) -> Result<Self> {
        let k = members.len();
        Self::with_weights(members, vec![1.0 / k.max(1) as f64; k])
    }

    pub fn with_weights(members: Vec<DensityModel>, weights: Vec<f64>) -> Result<Self> {
        if members.is_empty() {
            return contract("an ensemble needs at least one member");
        }
        if weights.len() != members.len() {
            return contract("one weight per member required");
        }
        if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return contract("weights must be non-negative and sum to one");
        }
        let arch = members[0].arch();
        if members.iter().any(|m| m.arch() != arch) {
            return contract("ensemble members must share one architecture");
        }
        Ok(Self { members, weights })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[DensityModel] {
        &self.members
    }

    /// Mutable access to member models; the member count and weights stay fixed.
    pub fn members_mut(&mut self) -> &mut [DensityModel] {
        &mut self.members
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn arch(&self) -> &Arch {
        self.members[0].arch()
    }

    /// `log q_k(y | x)` for every member, in member order.
    pub fn member_log_probs(&self, y: &Trajectory, ctx: &SceneContext) -> Result<Vec<f64>> {
        self.members.iter().map(|m| m.log_prob(y, ctx)).collect()
    }

    /// Variance of the imitation prior across the posterior.
    pub fn epistemic_variance(&self, y: &Trajectory, ctx: &SceneContext) -> Result<f64> {
        Ok(weighted_variance(&self.member_log_probs(y, ctx)?, &self.weights))
    }

    /// Writes `member_XX.json` files plus an `ensemble.json` index.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut files = Vec::with_capacity(self.len());
        for (k, m) in self.members.iter().enumerate() {
            let name = format!("member_{k:02}.json");
            m.save(dir.join(&name))?;
            files.push(name);
        }
        let index = EnsembleFile { format_version: 1, k: self.len(), weights: self.weights.clone(), member_files: files };
        std::fs::write(dir.join("ensemble.json"), serde_json::to_string_pretty(&index)?)?;
        Ok(())
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let index: EnsembleFile = serde_json::from_str(&std::fs::read_to_string(dir.join("ensemble.json"))?)?;
        if index.format_version != 1 {
            return Err(Error::Format(format!("unsupported ensemble format_version {}", index.format_version)));
        }
        if index.member_files.len() != index.k {
            return Err(Error::Format("member_files length disagrees with K".into()));
        }
        let members = index
            .member_files
            .iter()
            .map(|f| DensityModel::load(dir.join(f)))
            .collect::<Result<Vec<_>>>()?;
        Self::with_weights(members, index.weights)
    }
}

#[derive(Serialize, Deserialize)]
struct EnsembleFile {
    format_version: u32,
    #[serde(rename = "K")]
    k: usize,
    weights: Vec<f64>,
    member_files: Vec<String>,
}

/// Weighted population variance. Exactly zero when all values coincide.
pub fn weighted_variance(values: &[f64], weights: &[f64]) -> f64 {
    debug_assert_eq!(values.len(), weights.len());
    if values.windows(2).all(|w| w[0] == w[1]) {
        return 0.0;
    }
    let mean: f64 = values.iter().zip(weights).map(|(v, w)| v * w).sum();
    values.iter().zip(weights).map(|(v, w)| w * (v - mean).powi(2)).sum::<f64>().max(0.0)
}

/// `k` index sets, each a size-`n` resample of `0..n` with replacement.
pub fn bootstrap_indices(n: usize, k: usize, seed: u64) -> Vec<Vec<usize>> {
    (0..k)
        .map(|i| {
            let mut rng = seeds::rng(seeds::derive(seed, seeds::BOOTSTRAP, i as u64));
            (0..n).map(|_| rng.random_range(0..n)).collect()
        })
        .collect()
}

/// `k` bootstrap resamples of `data`.
pub fn bootstrap_split<T: Clone>(data: &[T], k: usize, seed: u64) -> Result<Vec<Vec<T>>> {
    if data.is_empty() || k == 0 {
        return contract("bootstrap needs non-empty data and k ≥ 1");
    }
    Ok(bootstrap_indices(data.len(), k, seed)
        .into_iter()
        .map(|idx| idx.into_iter().map(|i| data[i].clone()).collect())
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnsembleConfig {
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub final_lr_fraction: f64,
    pub grad_clip: f64,
    /// Train each member on its own bootstrap resample.
    pub bootstrap: bool,
    /// Give each member its own initialisation seed.
    pub distinct_init: bool,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            k: 5,
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            adam: AdamConfig::TRAINING,
            seed: 0,
            final_lr_fraction: DEFAULT_FINAL_LR_FRACTION,
            grad_clip: DEFAULT_GRAD_CLIP,
            bootstrap: true,
            distinct_init: true,
        }
    }
}

impl EnsembleConfig {
    pub fn member_train_config(&self, k: usize) -> TrainConfig {
        let init_index = if self.distinct_init { k as u64 } else { 0 };
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: self.adam,
            seed: seeds::derive(self.seed, seeds::BATCH, k as u64),
            init_seed: seeds::derive(self.seed, seeds::INIT, init_index),
            final_lr_fraction: self.final_lr_fraction,
            grad_clip: self.grad_clip,
        }
    }
}

/// Trains `cfg.k` members independently; the result does not depend on
/// whether members train in parallel.
pub fn train_ensemble(
    data: &[Demonstration],
    arch: Arch,
    cfg: &EnsembleConfig,
) -> Result<(EnsemblePosterior, Vec<TrainReport>)> {
    if cfg.k == 0 {
        return contract("k must be at least 1");
    }
    if data.is_empty() {
        return contract("training data is empty");
    }
    let splits = if cfg.bootstrap {
        bootstrap_indices(data.len(), cfg.k, cfg.seed)
    } else {
        vec![(0..data.len()).collect(); cfg.k]
    };
    let results = par::map_range(cfg.k, |k| {
        let subset: Vec<Demonstration> = splits[k].iter().map(|&i| data[i].clone()).collect();
        train_mle(&subset, arch, &cfg.member_train_config(k)).map_err(|e| match e {
            Error::TrainingFailure { epoch, .. } => Error::TrainingFailure { epoch, member: Some(k) },
            other => other,
        })
    });
    let mut members = Vec::with_capacity(cfg.k);
    let mut reports = Vec::with_capacity(cfg.k);
    for r in results {
        let (m, rep) = r?;
        members.push(m);
        reports.push(rep);
    }
    Ok((EnsemblePosterior::new(members)?, reports))
}
