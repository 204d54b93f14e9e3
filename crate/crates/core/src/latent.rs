//! Latent supervision targets: a frozen random teacher over observations,
//! top-k magnitude selection, and the offline cache (`LAPOLAT1`).
//!
//! Cache layout: magic `LAPOLAT1`, u32 record count, then records of
//! `(u32 traj, u32 t, u32 j, k x f32)` sorted by `(traj, t, j)`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::env::{DemoTrajectory, EnvState, PHI_DIM};
use crate::error::{LapoError, Result};

pub const LATENT_MAGIC: &[u8; 8] = b"LAPOLAT1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatentConfig {
    /// Teacher feature width D.
    pub teacher_dim: usize,
    /// Selected channels k; must equal the policy's model width.
    pub k: usize,
    /// Micro-steps between consecutive future states.
    pub delta_z: usize,
    pub n_max: usize,
    pub teacher_seed: u64,
}

impl Default for LatentConfig {
    fn default() -> Self {
        Self {
            teacher_dim: 256,
            k: 64,
            delta_z: 1,
            n_max: 8,
            teacher_seed: 1234,
        }
    }
}

/// Frozen two-layer feature map `tanh(W2 tanh(W1 phi))`.
#[derive(Debug, Clone)]
pub struct Teacher {
    dim: usize,
    w1: Vec<f32>,
    w2: Vec<f32>,
}

impl Teacher {
    pub fn new(seed: u64, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize, fan_in: usize| {
            let normal = Normal::new(0.0f64, 1.5 / (fan_in as f64).sqrt()).unwrap();
            (0..n).map(|_| normal.sample(&mut rng) as f32).collect::<Vec<_>>()
        };
        let w1 = draw(dim * PHI_DIM, PHI_DIM);
        let w2 = draw(dim * dim, dim);
        Self { dim, w1, w2 }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn features(&self, phi: &[f32]) -> Vec<f32> {
        assert_eq!(phi.len(), PHI_DIM, "teacher input must be a flat observation");
        let layer = |w: &[f32], x: &[f32]| -> Vec<f32> {
            w.chunks_exact(x.len())
                .map(|row| {
                    let s: f64 = row.iter().zip(x).map(|(a, b)| *a as f64 * *b as f64).sum();
                    s.tanh() as f32
                })
                .collect()
        };
        let h = layer(&self.w1, phi);
        layer(&self.w2, &h)
    }

    pub fn features_of_state(&self, state: &EnvState) -> Vec<f32> {
        self.features(&state.encode())
    }
}

/// Keeps the `k` largest-magnitude channels (ties toward the lower index),
/// preserving their original order and sign.
pub fn topk_select(v: &[f32], k: usize) -> Result<Vec<f32>> {
    if k == 0 || k > v.len() {
        return Err(LapoError::Invalid(format!(
            "top-k needs 1 <= k <= {}, got {k}",
            v.len()
        )));
    }
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.select_nth_unstable_by(k - 1, |&a, &b| {
        v[b].abs().total_cmp(&v[a].abs()).then(a.cmp(&b))
    });
    let mut keep = idx[..k].to_vec();
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| v[i]).collect())
}

/// Targets `j = 1..=n_z` for the demo step `t`, clamped at the final record.
pub fn future_targets(
    teacher: &Teacher,
    traj: &DemoTrajectory,
    t: usize,
    n_z: usize,
    cfg: &LatentConfig,
) -> Result<Vec<Vec<f32>>> {
    let last = traj.steps.len().checked_sub(1).ok_or_else(|| {
        LapoError::Invalid("trajectory has no steps".into())
    })?;
    if t > last {
        return Err(LapoError::Invalid(format!("step {t} beyond trajectory end {last}")));
    }
    (1..=n_z)
        .map(|j| {
            let s = (t + j * cfg.delta_z).min(last);
            topk_select(&teacher.features(&traj.steps[s].observation), cfg.k)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentCache {
    k: usize,
    entries: BTreeMap<(u32, u32, u32), Vec<f32>>,
}

impl LatentCache {
    /// Targets for every `(traj, t, j <= n_max)`. Trajectories are processed
    /// in parallel; the map keeps records in canonical order.
    pub fn precompute(demos: &[DemoTrajectory], cfg: &LatentConfig) -> Result<Self> {
        let teacher = Teacher::new(cfg.teacher_seed, cfg.teacher_dim);
        let per_traj: Vec<Vec<((u32, u32, u32), Vec<f32>)>> = demos
            .par_iter()
            .enumerate()
            .map(|(i, d)| {
                let mut recs = Vec::new();
                for t in 0..d.steps.len() {
                    let targets = future_targets(&teacher, d, t, cfg.n_max, cfg)?;
                    for (j, z) in targets.into_iter().enumerate() {
                        recs.push(((i as u32, t as u32, j as u32 + 1), z));
                    }
                }
                Ok(recs)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            k: cfg.k,
            entries: per_traj.into_iter().flatten().collect(),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, traj: u32, t: u32, j: u32) -> Result<&[f32]> {
        self.entries
            .get(&(traj, t, j))
            .map(Vec::as_slice)
            .ok_or(LapoError::MissingLatent { traj, t, j })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new(LATENT_MAGIC);
        w.u32(self.entries.len() as u32);
        for (&(traj, t, j), z) in &self.entries {
            w.u32(traj).u32(t).u32(j).f32s(z);
        }
        w.into_bytes()
    }

    pub fn decode(bytes: &[u8], k: usize) -> Result<Self> {
        let mut r = Reader::new("latent cache", bytes);
        r.magic(LATENT_MAGIC)?;
        let n = r.u32()?;
        let mut entries = BTreeMap::new();
        for _ in 0..n {
            let key = (r.u32()?, r.u32()?, r.u32()?);
            let z = r.f32s(k)?;
            entries.insert(key, z);
        }
        r.finish()?;
        Ok(Self { k, entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode())
    }

    pub fn read(path: &Path, k: usize) -> Result<Self> {
        Self::decode(&read_file(path)?, k)
    }
}
