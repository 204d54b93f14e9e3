//! Policy network: prompt encoder, causal latent generation with a
//! `<latent_end>` head, bidirectional parallel action decoding and a value
//! head on the end token.
//!
//! Every forward pass goes through [`Net::trunk_step`], which appends a block
//! of rows to a per-layer key/value cache. The incremental rollout path
//! (one row at a time) and the teacher-forced training path (whole sequence,
//! padded batches) therefore perform the same per-row arithmetic, and masked
//! columns contribute exact zeros, so both paths agree bit for bit.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::NUM_BINS;
use crate::env::PHI_DIM;
use crate::error::{LapoError, Result};
use crate::params::{ParamIx, PolicyDims, PolicyParams};
use crate::tape::{Axis, NodeId, Scalar, Tape, TensorValue};

/// Additive attention bias for masked positions.
pub const MASK_NEG: f64 = -1e9;

/// Role of one sequence position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Prompt(usize),
    Latent(usize),
    /// Batch padding in the latent region; isolated from every other row.
    Pad(usize),
    /// `<latent_end>`; reads the first `n_z` latents.
    End { n_z: usize },
    Action { j: usize, n_z: usize },
}

/// Whether a query at `row` may attend to a key at `col`.
pub fn visible(row: Slot, col: Slot) -> bool {
    use Slot::*;
    match (row, col) {
        (Pad(a), Pad(b)) => a == b,
        (Pad(_), _) | (_, Pad(_)) => false,
        (Prompt(i), Prompt(j)) => j <= i,
        (Prompt(_), _) => false,
        (Latent(_), Prompt(_)) => true,
        (Latent(k), Latent(j)) => j <= k,
        (Latent(_), _) => false,
        (End { .. } | Action { .. }, Prompt(_)) => true,
        (End { n_z } | Action { n_z, .. }, Latent(k)) => k < n_z,
        (End { .. } | Action { .. }, End { .. }) => true,
        (End { .. }, Action { .. }) => false,
        (Action { .. }, Action { .. }) => true,
    }
}

/// Positions `[prompt | n_gen latents | end | actions]`; only the first `n_z`
/// latents are visible to the end and action rows.
pub fn sequence_slots(n_p: usize, n_gen: usize, n_z: usize, n_a: usize) -> Vec<Slot> {
    let mut s: Vec<Slot> = (0..n_p).map(Slot::Prompt).collect();
    s.extend((0..n_gen).map(Slot::Latent));
    s.push(Slot::End { n_z });
    s.extend((0..n_a).map(|j| Slot::Action { j, n_z }));
    s
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HybridMask {
    size: usize,
    allow: Vec<bool>,
}

impl HybridMask {
    pub fn from_slots(slots: &[Slot]) -> Self {
        let size = slots.len();
        let mut allow = Vec::with_capacity(size * size);
        for &r in slots {
            for &c in slots {
                allow.push(visible(r, c));
            }
        }
        Self { size, allow }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn allows(&self, row: usize, col: usize) -> bool {
        self.allow[row * self.size + col]
    }
}

pub fn build_mask(n_p: usize, n_z: usize, n_a: usize) -> HybridMask {
    HybridMask::from_slots(&sequence_slots(n_p, n_z, n_z, n_a))
}

/// Candidate latent counts `n_max * i / m` for `i = 1..=m`.
pub fn candidate_positions(n_max: usize, m: usize) -> Result<Vec<usize>> {
    if m == 0 || n_max == 0 || !n_max.is_multiple_of(m) {
        return Err(LapoError::Config(format!(
            "{m} candidate positions do not evenly divide N_max = {n_max}"
        )));
    }
    Ok((1..=m).map(|i| n_max * i / m).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentMode {
    Fixed(usize),
    /// Length drawn from the candidate distribution at temperature `beta`.
    AdaptiveSample { beta: f64 },
    /// Stop at the first candidate whose end probability reaches `p_exit`.
    AdaptiveExit { p_exit: f64 },
}

impl LatentMode {
    pub fn validate(&self, n_max: usize) -> Result<()> {
        match *self {
            LatentMode::Fixed(n) if n > n_max => Err(LapoError::Config(format!(
                "fixed latent count {n} exceeds N_max = {n_max}"
            ))),
            LatentMode::AdaptiveSample { beta } if !(beta > 0.0 && beta.is_finite()) => {
                Err(LapoError::Config(format!("beta must be positive, got {beta}")))
            }
            LatentMode::AdaptiveExit { p_exit } if !(p_exit > 0.0 && p_exit <= 1.0) => {
                Err(LapoError::Config(format!("p_exit must lie in (0, 1], got {p_exit}")))
            }
            _ => Ok(()),
        }
    }

    pub fn is_adaptive(&self) -> bool {
        !matches!(self, LatentMode::Fixed(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActionSampling {
    Greedy,
    Temperature(f64),
}

impl ActionSampling {
    /// Temperature used for log-probabilities (1 for greedy decoding).
    pub fn tau(&self) -> f64 {
        match *self {
            ActionSampling::Greedy => 1.0,
            ActionSampling::Temperature(t) => t,
        }
    }
}

/// Per-layer, per-head key/value blocks for a batch of sequences.
#[derive(Debug, Clone)]
pub struct KvCache {
    keys: Vec<Vec<Vec<NodeId>>>,
    vals: Vec<Vec<Vec<NodeId>>>,
    cols: Vec<Vec<Slot>>,
}

impl KvCache {
    pub fn new(batch: usize, dims: &PolicyDims) -> Self {
        let empty = vec![vec![Vec::new(); dims.n_heads]; dims.n_layers];
        Self {
            keys: empty.clone(),
            vals: empty,
            cols: vec![Vec::new(); batch],
        }
    }

    pub fn len(&self) -> usize {
        self.cols.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Parameters bound on a tape, addressed through [`ParamIx`].
#[derive(Debug, Clone)]
pub struct Net {
    dims: PolicyDims,
    ix: ParamIx,
    ids: Vec<NodeId>,
}

/// One sequence for a teacher-forced pass.
#[derive(Debug, Clone, Copy)]
pub struct SeqSpec<'a> {
    pub obs: &'a [f32],
    pub task: usize,
    /// Latent inputs fed at slots `0..latents.len()`.
    pub latents: &'a [Vec<f32>],
    pub n_z: usize,
}

/// Hidden states of a teacher-forced batch, laid out sample-major with
/// `rows` positions per sample.
#[derive(Debug, Clone, Copy)]
pub struct FullPass {
    pub h: NodeId,
    pub batch: usize,
    pub rows: usize,
    n_p: usize,
    n_gen: usize,
}

impl FullPass {
    pub fn row(&self, b: usize, slot: Slot) -> usize {
        let off = match slot {
            Slot::Prompt(i) => i,
            Slot::Latent(k) | Slot::Pad(k) => self.n_p + k,
            Slot::End { .. } => self.n_p + self.n_gen,
            Slot::Action { j, .. } => self.n_p + self.n_gen + 1 + j,
        };
        b * self.rows + off
    }

    /// Row whose hidden state emits latent `k` (1-based).
    pub fn emitter_row(&self, b: usize, k: usize) -> usize {
        if k == 1 {
            self.row(b, Slot::Prompt(self.n_p - 1))
        } else {
            self.row(b, Slot::Latent(k - 2))
        }
    }

    /// Row whose hidden state scores stopping after `c` latents.
    pub fn end_row(&self, b: usize, c: usize) -> usize {
        self.row(b, Slot::Latent(c - 1))
    }
}

impl Net {
    pub fn from_ids(params: &PolicyParams, ids: Vec<NodeId>) -> Self {
        assert_eq!(ids.len(), params.len(), "one node per parameter group");
        Self {
            dims: *params.dims(),
            ix: params.ix().clone(),
            ids,
        }
    }

    pub fn bind<T: Scalar>(params: &PolicyParams, tape: &mut Tape<T>, trainable: bool) -> Self {
        let ids = params.bind(tape, trainable);
        Self::from_ids(params, ids)
    }

    pub fn dims(&self) -> &PolicyDims {
        &self.dims
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    fn p(&self, i: usize) -> NodeId {
        self.ids[i]
    }

    fn affine<T: Scalar>(&self, tape: &mut Tape<T>, x: NodeId, w: usize, b: usize) -> Result<NodeId> {
        let y = tape.matmul(x, self.p(w))?;
        tape.add(y, self.p(b))
    }

    /// Prompt rows `[B * N_p, d]` with positions added.
    pub fn prompt_rows<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        obs: &[&[f32]],
        tasks: &[usize],
    ) -> Result<NodeId> {
        let b = obs.len();
        let (np, dm) = (self.dims.n_prompt, self.dims.d_model);
        let mut flat = Vec::with_capacity(b * PHI_DIM);
        for o in obs {
            if o.len() != PHI_DIM {
                return Err(LapoError::Invalid(format!(
                    "observation has {} entries, expected {PHI_DIM}",
                    o.len()
                )));
            }
            flat.extend(o.iter().map(|&x| T::of(x as f64)));
        }
        let phi = tape.constant(TensorValue::new(vec![b, PHI_DIM], flat)?);
        let temb = tape.gather_rows(self.p(self.ix.task_emb), tasks.to_vec())?;
        let inp = tape.concat(&[phi, temb], Axis::Last)?;
        let h = self.affine(tape, inp, self.ix.prompt_w1, self.ix.prompt_b1)?;
        let h = tape.gelu(h)?;
        let out = self.affine(tape, h, self.ix.prompt_w2, self.ix.prompt_b2)?;
        let out = tape.reshape(out, &[b * np, dm])?;
        let pos = tape.gather_rows(self.p(self.ix.pos), (0..b).flat_map(|_| 0..np).collect())?;
        tape.add(out, pos)
    }

    /// Latent input rows: normalized latent plus the position of slot `k`.
    pub fn latent_rows<T: Scalar>(&self, tape: &mut Tape<T>, z: NodeId, slots: Vec<usize>) -> Result<NodeId> {
        let np = self.dims.n_prompt;
        let x = tape.layer_norm(z, self.p(self.ix.latent_ln_g), self.p(self.ix.latent_ln_b))?;
        let pos = tape.gather_rows(self.p(self.ix.pos), slots.into_iter().map(|k| np + k).collect())?;
        tape.add(x, pos)
    }

    pub fn end_rows<T: Scalar>(&self, tape: &mut Tape<T>, n_z: &[usize]) -> Result<NodeId> {
        let np = self.dims.n_prompt;
        let pos = tape.gather_rows(self.p(self.ix.pos), n_z.iter().map(|n| np + n).collect())?;
        tape.add(pos, self.p(self.ix.end_emb))
    }

    pub fn action_rows<T: Scalar>(&self, tape: &mut Tape<T>, batch: usize, placeholders: Option<NodeId>) -> Result<NodeId> {
        let na = self.dims.n_act();
        let src = placeholders.unwrap_or(self.p(self.ix.act_emb));
        tape.gather_rows(src, (0..batch).flat_map(|_| 0..na).collect())
    }

    /// Runs `x` (`[B * r, d]`, rows of `slots[b]` for each sample) through the
    /// trunk, attending to everything already cached. Returns final-LN
    /// hidden states.
    pub fn trunk_step<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        cache: &mut KvCache,
        x: NodeId,
        slots: &[Vec<Slot>],
    ) -> Result<NodeId> {
        let b = slots.len();
        if b != cache.cols.len() {
            return Err(LapoError::Invalid(format!(
                "trunk step for {b} sequences on a cache of {}",
                cache.cols.len()
            )));
        }
        let r = slots[0].len();
        if slots.iter().any(|s| s.len() != r) || tape.shape(x) != [b * r, self.dims.d_model] {
            return Err(LapoError::Invalid("trunk step rows do not match slots".into()));
        }
        for (c, s) in cache.cols.iter_mut().zip(slots) {
            c.extend_from_slice(s);
        }
        let total = cache.len();
        let mut bias = Vec::with_capacity(b * r * total);
        for (bi, s) in slots.iter().enumerate() {
            for &row in s {
                for &col in &cache.cols[bi] {
                    bias.push(T::of(if visible(row, col) { 0.0 } else { MASK_NEG }));
                }
            }
        }
        let bias = tape.constant(TensorValue::new(vec![b, r, total], bias)?);
        let hd = self.dims.head_dim();
        let inv = 1.0 / (hd as f64).sqrt();
        let mut x = x;
        for (l, blk) in self.ix.blocks.iter().enumerate() {
            let a = tape.layer_norm(x, self.p(blk.ln1_g), self.p(blk.ln1_b))?;
            let mut heads = Vec::with_capacity(self.dims.n_heads);
            for h in 0..self.dims.n_heads {
                let q = tape.matmul(a, self.p(blk.wq[h]))?;
                let q = tape.reshape(q, &[b, r, hd])?;
                let k = tape.matmul(a, self.p(blk.wk[h]))?;
                let k = tape.reshape(k, &[b, r, hd])?;
                let k = tape.transpose(k)?;
                let v = tape.matmul(a, self.p(blk.wv[h]))?;
                let v = tape.reshape(v, &[b, r, hd])?;
                let v = tape.transpose(v)?;
                cache.keys[l][h].push(k);
                cache.vals[l][h].push(v);
                let kt = tape.concat(&cache.keys[l][h].clone(), Axis::Last)?;
                let vt = tape.concat(&cache.vals[l][h].clone(), Axis::Last)?;
                let s = tape.matmul(q, kt)?;
                let s = tape.scale(s, inv)?;
                let s = tape.add(s, bias)?;
                let p = tape.softmax(s)?;
                let vv = tape.transpose(vt)?;
                let o = tape.matmul(p, vv)?;
                heads.push(tape.reshape(o, &[b * r, hd])?);
            }
            let o = tape.concat(&heads, Axis::Last)?;
            let o = self.affine(tape, o, blk.wo, blk.bo)?;
            x = tape.add(x, o)?;
            let m = tape.layer_norm(x, self.p(blk.ln2_g), self.p(blk.ln2_b))?;
            let m = self.affine(tape, m, blk.mlp_w1, blk.mlp_b1)?;
            let m = tape.gelu(m)?;
            let m = self.affine(tape, m, blk.mlp_w2, blk.mlp_b2)?;
            x = tape.add(x, m)?;
        }
        tape.layer_norm(x, self.p(self.ix.lnf_g), self.p(self.ix.lnf_b))
    }

    pub fn latent_head<T: Scalar>(&self, tape: &mut Tape<T>, h: NodeId) -> Result<NodeId> {
        self.affine(tape, h, self.ix.latent_w, self.ix.latent_b)
    }

    /// `[n, 1]` end logits (the continue logit is fixed at 0).
    pub fn end_head<T: Scalar>(&self, tape: &mut Tape<T>, h: NodeId) -> Result<NodeId> {
        self.affine(tape, h, self.ix.end_w, self.ix.end_b)
    }

    pub fn action_head<T: Scalar>(&self, tape: &mut Tape<T>, h: NodeId) -> Result<NodeId> {
        self.affine(tape, h, self.ix.action_w, self.ix.action_b)
    }

    /// Four-layer MLP; returns `[n]`.
    pub fn value_head<T: Scalar>(&self, tape: &mut Tape<T>, h: NodeId) -> Result<NodeId> {
        let mut x = h;
        for (i, &(w, b)) in self.ix.value.iter().enumerate() {
            x = self.affine(tape, x, w, b)?;
            if i + 1 < self.ix.value.len() {
                x = tape.gelu(x)?;
            }
        }
        let n = tape.shape(x)[0];
        tape.reshape(x, &[n])
    }

    /// Teacher-forced pass over a batch; latent regions are padded to the
    /// longest sequence. `placeholders` replaces the learned action inputs.
    pub fn forward_full<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        seqs: &[SeqSpec],
        placeholders: Option<NodeId>,
    ) -> Result<FullPass> {
        let b = seqs.len();
        if b == 0 {
            return Err(LapoError::Invalid("empty batch".into()));
        }
        let (np, na, dm) = (self.dims.n_prompt, self.dims.n_act(), self.dims.d_model);
        for s in seqs {
            if s.latents.len() > self.dims.n_max || s.n_z > s.latents.len() {
                return Err(LapoError::Invalid(format!(
                    "sequence with {} latents and n_z = {} (N_max {})",
                    s.latents.len(),
                    s.n_z,
                    self.dims.n_max
                )));
            }
            if let Some(z) = s.latents.iter().find(|z| z.len() != dm) {
                return Err(LapoError::Invalid(format!("latent of width {}, expected {dm}", z.len())));
            }
        }
        let g = seqs.iter().map(|s| s.latents.len()).max().unwrap_or(0);
        let rows = np + g + 1 + na;
        let obs: Vec<&[f32]> = seqs.iter().map(|s| s.obs).collect();
        let tasks: Vec<usize> = seqs.iter().map(|s| s.task).collect();
        let mut parts = vec![self.prompt_rows(tape, &obs, &tasks)?];
        if g > 0 {
            let mut z = Vec::with_capacity(b * g * dm);
            for s in seqs {
                for k in 0..g {
                    match s.latents.get(k) {
                        Some(v) => z.extend(v.iter().map(|&x| T::of(x as f64))),
                        None => z.extend(std::iter::repeat_n(T::zero(), dm)),
                    }
                }
            }
            let z = tape.constant(TensorValue::new(vec![b * g, dm], z)?);
            parts.push(self.latent_rows(tape, z, (0..b).flat_map(|_| 0..g).collect())?);
        }
        let n_z: Vec<usize> = seqs.iter().map(|s| s.n_z).collect();
        parts.push(self.end_rows(tape, &n_z)?);
        parts.push(self.action_rows(tape, b, placeholders)?);
        let all = tape.concat(&parts, Axis::First)?;
        let (off_l, off_e) = (b * np, b * np + b * g);
        let off_a = off_e + b;
        let mut order = Vec::with_capacity(b * rows);
        let mut slots = Vec::with_capacity(b);
        for (bi, s) in seqs.iter().enumerate() {
            order.extend((0..np).map(|i| bi * np + i));
            order.extend((0..g).map(|k| off_l + bi * g + k));
            order.push(off_e + bi);
            order.extend((0..na).map(|j| off_a + bi * na + j));
            let mut sl = sequence_slots(np, s.latents.len(), s.n_z, na);
            let tail = sl.split_off(np + s.latents.len());
            sl.extend((s.latents.len()..g).map(Slot::Pad));
            sl.extend(tail);
            slots.push(sl);
        }
        let x = tape.gather_rows(all, order)?;
        let mut cache = KvCache::new(b, &self.dims);
        let h = self.trunk_step(tape, &mut cache, x, &slots)?;
        Ok(FullPass {
            h,
            batch: b,
            rows,
            n_p: np,
            n_gen: g,
        })
    }

    /// `[B * N_a, 256]` action logits from a full pass.
    pub fn full_action_logits<T: Scalar>(&self, tape: &mut Tape<T>, fp: &FullPass) -> Result<NodeId> {
        let na = self.dims.n_act();
        let rows = (0..fp.batch)
            .flat_map(|b| (0..na).map(move |j| fp.row(b, Slot::Action { j, n_z: 0 })))
            .collect();
        let h = tape.gather_rows(fp.h, rows)?;
        self.action_head(tape, h)
    }

    pub fn full_values<T: Scalar>(&self, tape: &mut Tape<T>, fp: &FullPass) -> Result<NodeId> {
        let rows = (0..fp.batch).map(|b| fp.row(b, Slot::End { n_z: 0 })).collect();
        let h = tape.gather_rows(fp.h, rows)?;
        self.value_head(tape, h)
    }

    /// Emitted latents for the `(sample, k)` pairs, `k` 1-based; `[n, d]`.
    pub fn full_latents<T: Scalar>(&self, tape: &mut Tape<T>, fp: &FullPass, which: &[(usize, usize)]) -> Result<NodeId> {
        let rows = which.iter().map(|&(b, k)| fp.emitter_row(b, k)).collect();
        let h = tape.gather_rows(fp.h, rows)?;
        self.latent_head(tape, h)
    }

    /// End logits for the `(sample, candidate)` pairs; `[n, 1]`.
    pub fn full_end_logits<T: Scalar>(&self, tape: &mut Tape<T>, fp: &FullPass, which: &[(usize, usize)]) -> Result<NodeId> {
        let rows = which.iter().map(|&(b, c)| fp.end_row(b, c)).collect();
        let h = tape.gather_rows(fp.h, rows)?;
        self.end_head(tape, h)
    }
}

/// Sum of per-token log-probabilities at temperature `tau`; `logits` is
/// `[B * N_a, 256]`, returns `[B]`.
pub fn action_logp<T: Scalar>(
    tape: &mut Tape<T>,
    logits: NodeId,
    tokens: &[u32],
    batch: usize,
    tau: f64,
) -> Result<NodeId> {
    let scaled = tape.scale(logits, 1.0 / tau)?;
    let lsm = tape.log_softmax(scaled)?;
    let picked = tape.select_last(lsm, tokens.iter().map(|&t| t as usize).collect())?;
    let per = tokens.len() / batch.max(1);
    let picked = tape.reshape(picked, &[batch, per])?;
    tape.sum_last(picked)
}

/// Length log-scores `l_i = log h_i + sum_{j<i} log(1 - h_j)` over the
/// candidates, with the last candidate absorbing the remaining mass.
/// `end_logits` holds the `M - 1` non-final candidates per sample, row-major.
pub fn length_log_scores<T: Scalar>(tape: &mut Tape<T>, end_logits: Option<NodeId>, batch: usize, m: usize) -> Result<NodeId> {
    if m == 1 {
        return Ok(tape.constant(TensorValue::zeros(&[batch, 1])));
    }
    let e = end_logits.ok_or_else(|| LapoError::Invalid("missing end logits".into()))?;
    let e = tape.reshape(e, &[batch * (m - 1), 1])?;
    let zero = tape.constant(TensorValue::zeros(&[batch * (m - 1), 1]));
    let pair = tape.concat(&[e, zero], Axis::Last)?;
    let ls = tape.log_softmax(pair)?;
    let ls = tape.reshape(ls, &[batch, 2 * (m - 1)])?;
    let mut c = vec![0.0f64; 2 * (m - 1) * m];
    for i in 0..m {
        if i < m - 1 {
            c[(2 * i) * m + i] = 1.0;
        }
        for j in 0..i.min(m - 1) {
            c[(2 * j + 1) * m + i] = 1.0;
        }
    }
    let c = tape.constant(TensorValue::from_f64(&[2 * (m - 1), m], &c)?);
    tape.matmul(ls, c)
}

/// Log-probabilities of the candidate lengths at temperature `beta`; `[B, M]`.
pub fn length_logp<T: Scalar>(tape: &mut Tape<T>, scores: NodeId, beta: f64) -> Result<NodeId> {
    let s = tape.scale(scores, 1.0 / beta)?;
    tape.log_softmax(s)
}

/// Inverse-CDF draw from a normalized log-probability row.
pub fn sample_categorical<R: Rng + ?Sized>(logp: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, lp) in logp.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    logp.iter()
        .enumerate()
        .rev()
        .find(|(_, lp)| lp.is_finite())
        .map_or(0, |(i, _)| i)
}

/// Draws a candidate index from `softmax(scores / beta)`.
pub fn sample_length<R: Rng + ?Sized>(scores: &[f64], beta: f64, rng: &mut R) -> usize {
    let mx = scores.iter().fold(f64::NEG_INFINITY, |m, s| m.max(s / beta));
    let z: f64 = scores.iter().map(|s| (s / beta - mx).exp()).sum();
    let logp: Vec<f64> = scores.iter().map(|s| s / beta - mx - z.ln()).collect();
    sample_categorical(&logp, rng)
}

/// First candidate whose end probability reaches `p_exit`, else the last.
pub fn exit_index(end_logits: &[f64], p_exit: f64) -> usize {
    end_logits
        .iter()
        .position(|&e| 1.0 / (1.0 + (-e).exp()) >= p_exit)
        .unwrap_or(end_logits.len())
}

/// Lowest index of the maximum.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecideOptions {
    pub mode: LatentMode,
    pub candidates: Vec<usize>,
    pub sampling: ActionSampling,
    /// Std of Gaussian noise added to emitted latents before feeding them back.
    pub sigma_explore: f64,
}

/// Everything recorded for one decision step.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    /// Generated latents, possibly more than `n_z` when the length was sampled.
    pub latents: Vec<Vec<f32>>,
    pub n_z: usize,
    pub length_index: usize,
    pub length_logp: f32,
    /// Candidate log-scores (empty in fixed mode).
    pub length_scores: Vec<f32>,
    pub tokens: Vec<u32>,
    pub action_logp: f32,
    /// Raw `N_a x 256` action logits.
    pub action_logits: Vec<f32>,
    pub value: f32,
}

/// Inference session holding a parameter snapshot bound on its own tape.
pub struct Session {
    tape: Tape<f32>,
    net: Net,
    base: usize,
}

impl Session {
    pub fn new(params: &PolicyParams) -> Self {
        let mut tape = Tape::new();
        let net = Net::bind(params, &mut tape, false);
        let base = tape.len();
        Self { tape, net, base }
    }

    pub fn net(&self) -> &Net {
        &self.net
    }

    fn feed_latent(
        &mut self,
        cache: &mut KvCache,
        emitter: NodeId,
        slot: usize,
        noise: Option<(&mut dyn rand::RngCore, f64)>,
    ) -> Result<(NodeId, Vec<f32>)> {
        let tape = &mut self.tape;
        let z = self.net.latent_head(tape, emitter)?;
        let mut zv = tape.value(z).data().to_vec();
        if let Some((rng, sd)) = noise {
            for x in zv.iter_mut() {
                let n: f64 = rng.sample(rand_distr::StandardNormal);
                *x += (sd * n) as f32;
            }
        }
        let zc = tape.constant(TensorValue::new(vec![1, zv.len()], zv.clone())?);
        let x = self.net.latent_rows(tape, zc, vec![slot])?;
        let h = self.net.trunk_step(tape, cache, x, &[vec![Slot::Latent(slot)]])?;
        Ok((h, zv))
    }

    /// Generates latents, decodes one action chunk and evaluates the value.
    pub fn decide<R: Rng>(
        &mut self,
        obs: &[f32],
        task: usize,
        opts: &DecideOptions,
        rng: &mut R,
    ) -> Result<Decision> {
        self.decide_with(obs, task, opts, rng, None)
    }

    /// As [`Session::decide`], with optional replacement action placeholders.
    pub fn decide_with<R: Rng>(
        &mut self,
        obs: &[f32],
        task: usize,
        opts: &DecideOptions,
        rng: &mut R,
        placeholders: Option<&TensorValue<f32>>,
    ) -> Result<Decision> {
        let dims = *self.net.dims();
        opts.mode.validate(dims.n_max)?;
        self.tape.truncate(self.base);
        let m = opts.candidates.len();
        let (np, na) = (dims.n_prompt, dims.n_act());
        let mut cache = KvCache::new(1, &dims);
        let xp = self.net.prompt_rows(&mut self.tape, &[obs], &[task])?;
        let hp = self
            .net
            .trunk_step(&mut self.tape, &mut cache, xp, &[(0..np).map(Slot::Prompt).collect()])?;
        let mut emitter = self.tape.gather_rows(hp, vec![np - 1])?;
        let mut latents: Vec<Vec<f32>> = Vec::new();
        let mut ends: Vec<NodeId> = Vec::new();
        let non_final = &opts.candidates[..m.saturating_sub(1)];
        let sd = opts.sigma_explore;
        let mut feed = |s: &mut Self, emitter: &mut NodeId, latents: &mut Vec<Vec<f32>>, rng: &mut R| -> Result<Option<NodeId>> {
            let slot = latents.len();
            let noise = (sd > 0.0).then_some((rng as &mut dyn rand::RngCore, sd));
            let (h, z) = s.feed_latent(&mut cache, *emitter, slot, noise)?;
            latents.push(z);
            *emitter = h;
            if non_final.contains(&(slot + 1)) {
                Ok(Some(s.net.end_head(&mut s.tape, h)?))
            } else {
                Ok(None)
            }
        };
        let (n_z, length_index, length_logp, length_scores) = match opts.mode {
            LatentMode::Fixed(n) => {
                for _ in 0..n {
                    feed(self, &mut emitter, &mut latents, rng)?;
                }
                (n, 0, 0.0, Vec::new())
            }
            LatentMode::AdaptiveExit { p_exit } => {
                let mut stop = None;
                while latents.len() < dims.n_max {
                    if let Some(e) = feed(self, &mut emitter, &mut latents, rng)? {
                        let p = 1.0 / (1.0 + (-(self.tape.value(e).item() as f64)).exp());
                        if p >= p_exit {
                            stop = Some(latents.len());
                            break;
                        }
                    }
                }
                let n_z = stop.unwrap_or(dims.n_max);
                let idx = opts.candidates.iter().position(|&c| c == n_z).unwrap_or(m - 1);
                (n_z, idx, 0.0, Vec::new())
            }
            LatentMode::AdaptiveSample { beta } => {
                let need = non_final.last().copied().unwrap_or(0);
                while latents.len() < need {
                    if let Some(e) = feed(self, &mut emitter, &mut latents, rng)? {
                        ends.push(e);
                    }
                }
                let e = if ends.is_empty() {
                    None
                } else {
                    let cat = self.tape.concat(&ends, Axis::First)?;
                    Some(self.tape.reshape(cat, &[1, m - 1])?)
                };
                let scores = length_log_scores(&mut self.tape, e, 1, m)?;
                let lp = length_logp(&mut self.tape, scores, beta)?;
                let lpv: Vec<f64> = self.tape.value(lp).data().iter().map(|&x| x as f64).collect();
                let idx = sample_categorical(&lpv, rng);
                let n_z = opts.candidates[idx];
                while latents.len() < n_z {
                    feed(self, &mut emitter, &mut latents, rng)?;
                }
                let sv = self.tape.value(scores).data().to_vec();
                (n_z, idx, lpv[idx] as f32, sv)
            }
        };
        let xe = self.net.end_rows(&mut self.tape, &[n_z])?;
        let he = self.net.trunk_step(&mut self.tape, &mut cache, xe, &[vec![Slot::End { n_z }]])?;
        let v = self.net.value_head(&mut self.tape, he)?;
        let value = self.tape.value(v).item();
        let ph = match placeholders {
            Some(t) => Some(self.tape.constant(t.clone())),
            None => None,
        };
        let xa = self.net.action_rows(&mut self.tape, 1, ph)?;
        let aslots = (0..na).map(|j| Slot::Action { j, n_z }).collect();
        let ha = self.net.trunk_step(&mut self.tape, &mut cache, xa, &[aslots])?;
        let logits = self.net.action_head(&mut self.tape, ha)?;
        let tau = opts.sampling.tau();
        let scaled = self.tape.scale(logits, 1.0 / tau)?;
        let lsm = self.tape.log_softmax(scaled)?;
        let tokens: Vec<u32> = {
            let lv = self.tape.value(lsm);
            (0..na)
                .map(|j| {
                    let row = lv.row(j);
                    match opts.sampling {
                        ActionSampling::Greedy => argmax(row) as u32,
                        ActionSampling::Temperature(_) => {
                            let lp: Vec<f64> = row.iter().map(|&x| x as f64).collect();
                            sample_categorical(&lp, rng) as u32
                        }
                    }
                })
                .collect()
        };
        debug_assert!(tokens.iter().all(|&t| t < NUM_BINS));
        let lp = action_logp(&mut self.tape, logits, &tokens, 1, tau)?;
        Ok(Decision {
            latents,
            n_z,
            length_index,
            length_logp,
            length_scores,
            tokens,
            action_logp: self.tape.value(lp).item(),
            action_logits: self.tape.value(logits).data().to_vec(),
            value,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tiny_mask_matches_hand_construction() {
        let m = build_mask(1, 1, 1);
        assert_eq!(m.size(), 4);
        for r in 0..3 {
            for c in 0..4 {
                assert_eq!(m.allows(r, c), c <= r, "row {r} col {c}");
            }
        }
        for c in 0..4 {
            assert!(m.allows(3, c));
        }
    }

    #[test]
    fn action_only_mask() {
        let m = build_mask(2, 0, 3);
        for r in 3..6 {
            assert!((0..6).all(|c| m.allows(r, c)));
        }
        assert!(!m.allows(2, 3));
    }

    #[test]
    fn candidates() {
        assert_eq!(candidate_positions(8, 4).unwrap(), vec![2, 4, 6, 8]);
        assert_eq!(candidate_positions(8, 1).unwrap(), vec![8]);
        assert_eq!(candidate_positions(8, 8).unwrap(), (1..=8).collect::<Vec<_>>());
        assert!(candidate_positions(8, 3).is_err());
    }

    #[test]
    fn length_scores_are_a_distribution() {
        let mut tape = Tape::<f64>::new();
        let e = tape.constant(TensorValue::from_f64(&[2, 3], &[0.3, -1.0, 2.0, 0.0, 0.0, 0.0]).unwrap());
        let l = length_log_scores(&mut tape, Some(e), 2, 4).unwrap();
        let v = tape.value(l);
        for b in 0..2 {
            let s: f64 = v.row(b).iter().map(|x| x.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // Zero logits: hazards 1/2 give lengths 1/2, 1/4, 1/8, 1/8.
        let expect = [0.5f64, 0.25, 0.125, 0.125];
        for (x, e) in v.row(1).iter().zip(expect) {
            assert!((x.exp() - e).abs() < 1e-12);
        }
    }

    #[test]
    fn exit_rule() {
        assert_eq!(exit_index(&[f64::INFINITY, 0.0, 0.0], 0.99), 0);
        assert_eq!(exit_index(&[0.0, 5.0, 0.0], 0.99), 1);
        assert_eq!(exit_index(&[0.0, 0.0, 0.0], 0.99), 3);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn sample_length_low_temperature_is_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(sample_length(&[-2.0, -1.0, -0.5, -3.0], 1e-6, &mut rng), 2);
        }
    }

    #[test]
    fn latent_mode_validation() {
        assert!(LatentMode::AdaptiveExit { p_exit: 0.0 }.validate(8).is_err());
        assert!(LatentMode::AdaptiveExit { p_exit: 1.0 }.validate(8).is_ok());
        assert!(LatentMode::AdaptiveExit { p_exit: 1.5 }.validate(8).is_err());
        assert!(LatentMode::Fixed(9).validate(8).is_err());
        assert!(LatentMode::AdaptiveSample { beta: 0.0 }.validate(8).is_err());
    }
}
