//! Named parameter groups of the policy and the `LAPOCKP1` checkpoint file.
//!
//! ```text
//! magic "LAPOCKP1", u32 version, u32 group count
//! per group: u32 name length, UTF-8 name, u32 dim count, u32 dims..., f32 data
//! ```
//! Optimizer moments are stored as extra groups named `<group>.adam_m` and
//! `<group>.adam_v`, plus the scalar `meta.adam_step`. Model sizes travel in
//! `meta.dims` so a checkpoint is self-describing.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::env::{TaskSpec, ACTION_DIMS, PHI_DIM};
use crate::error::{LapoError, Result};
use crate::tape::{NodeId, Scalar, Tape, TensorValue};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LAPOCKP1";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyDims {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Prompt tokens produced from the observation and task embedding.
    pub n_prompt: usize,
    pub mlp_hidden: usize,
    pub prompt_hidden: usize,
    pub task_emb: usize,
    pub value_hidden: usize,
    pub horizon: usize,
    pub n_max: usize,
}

impl Default for PolicyDims {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 2,
            n_layers: 2,
            n_prompt: 4,
            mlp_hidden: 128,
            prompt_hidden: 128,
            task_emb: 16,
            value_hidden: 64,
            horizon: 8,
            n_max: 8,
        }
    }
}

impl PolicyDims {
    pub fn n_act(&self) -> usize {
        self.horizon * ACTION_DIMS
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.d_model,
            self.n_heads,
            self.n_layers,
            self.n_prompt,
            self.mlp_hidden,
            self.prompt_hidden,
            self.task_emb,
            self.value_hidden,
            self.horizon,
        ];
        if positive.contains(&0) {
            return Err(LapoError::Config("model sizes must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(LapoError::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    fn to_floats(self) -> Vec<f32> {
        [
            self.d_model,
            self.n_heads,
            self.n_layers,
            self.n_prompt,
            self.mlp_hidden,
            self.prompt_hidden,
            self.task_emb,
            self.value_hidden,
            self.horizon,
            self.n_max,
        ]
        .iter()
        .map(|&v| v as f32)
        .collect()
    }

    fn from_floats(v: &[f32]) -> Result<Self> {
        if v.len() != 10 || v.iter().any(|x| *x < 0.0 || x.fract() != 0.0) {
            return Err(LapoError::Checkpoint("malformed meta.dims group".into()));
        }
        let u = |i: usize| v[i] as usize;
        let dims = Self {
            d_model: u(0),
            n_heads: u(1),
            n_layers: u(2),
            n_prompt: u(3),
            mlp_hidden: u(4),
            prompt_hidden: u(5),
            task_emb: u(6),
            value_hidden: u(7),
            horizon: u(8),
            n_max: u(9),
        };
        dims.validate().map_err(|e| LapoError::Checkpoint(e.to_string()))?;
        Ok(dims)
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
pub struct BlockIx {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: Vec<usize>,
    pub wk: Vec<usize>,
    pub wv: Vec<usize>,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub mlp_w1: usize,
    pub mlp_b1: usize,
    pub mlp_w2: usize,
    pub mlp_b2: usize,
}

/// Positions of every group in the flat parameter list.
#[derive(Debug, Clone)]
pub struct ParamIx {
    pub task_emb: usize,
    pub prompt_w1: usize,
    pub prompt_b1: usize,
    pub prompt_w2: usize,
    pub prompt_b2: usize,
    pub pos: usize,
    pub latent_ln_g: usize,
    pub latent_ln_b: usize,
    pub end_emb: usize,
    pub act_emb: usize,
    pub blocks: Vec<BlockIx>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub latent_w: usize,
    pub latent_b: usize,
    pub end_w: usize,
    pub end_b: usize,
    pub action_w: usize,
    pub action_b: usize,
    /// (weight, bias) for the four value-head layers.
    pub value: Vec<(usize, usize)>,
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn layout(d: &PolicyDims) -> (Vec<Spec>, ParamIx) {
    let mut specs: Vec<Spec> = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, init: Init| {
        specs.push(Spec { name, shape, init });
        specs.len() - 1
    };
    let dm = d.d_model;
    let task_emb = add("task_emb".into(), vec![TaskSpec::count(), d.task_emb], Init::Normal);
    let prompt_w1 = add("prompt.w1".into(), vec![PHI_DIM + d.task_emb, d.prompt_hidden], Init::Normal);
    let prompt_b1 = add("prompt.b1".into(), vec![d.prompt_hidden], Init::Zeros);
    let prompt_w2 = add("prompt.w2".into(), vec![d.prompt_hidden, d.n_prompt * dm], Init::Normal);
    let prompt_b2 = add("prompt.b2".into(), vec![d.n_prompt * dm], Init::Zeros);
    let pos = add("pos".into(), vec![d.n_prompt + d.n_max + 1, dm], Init::Normal);
    let latent_ln_g = add("latent_in.ln.g".into(), vec![dm], Init::Ones);
    let latent_ln_b = add("latent_in.ln.b".into(), vec![dm], Init::Zeros);
    let end_emb = add("end_emb".into(), vec![dm], Init::Normal);
    let act_emb = add("act_emb".into(), vec![d.n_act(), dm], Init::Normal);
    let hd = d.head_dim();
    let mut blocks = Vec::new();
    for l in 0..d.n_layers {
        let p = format!("block{l}");
        let ln1_g = add(format!("{p}.ln1.g"), vec![dm], Init::Ones);
        let ln1_b = add(format!("{p}.ln1.b"), vec![dm], Init::Zeros);
        let mut wq = Vec::new();
        let mut wk = Vec::new();
        let mut wv = Vec::new();
        for h in 0..d.n_heads {
            wq.push(add(format!("{p}.head{h}.wq"), vec![dm, hd], Init::Normal));
            wk.push(add(format!("{p}.head{h}.wk"), vec![dm, hd], Init::Normal));
            wv.push(add(format!("{p}.head{h}.wv"), vec![dm, hd], Init::Normal));
        }
        let wo = add(format!("{p}.wo"), vec![dm, dm], Init::Normal);
        let bo = add(format!("{p}.bo"), vec![dm], Init::Zeros);
        let ln2_g = add(format!("{p}.ln2.g"), vec![dm], Init::Ones);
        let ln2_b = add(format!("{p}.ln2.b"), vec![dm], Init::Zeros);
        let mlp_w1 = add(format!("{p}.mlp.w1"), vec![dm, d.mlp_hidden], Init::Normal);
        let mlp_b1 = add(format!("{p}.mlp.b1"), vec![d.mlp_hidden], Init::Zeros);
        let mlp_w2 = add(format!("{p}.mlp.w2"), vec![d.mlp_hidden, dm], Init::Normal);
        let mlp_b2 = add(format!("{p}.mlp.b2"), vec![dm], Init::Zeros);
        blocks.push(BlockIx {
            ln1_g,
            ln1_b,
            wq,
            wk,
            wv,
            wo,
            bo,
            ln2_g,
            ln2_b,
            mlp_w1,
            mlp_b1,
            mlp_w2,
            mlp_b2,
        });
    }
    let lnf_g = add("final_ln.g".into(), vec![dm], Init::Ones);
    let lnf_b = add("final_ln.b".into(), vec![dm], Init::Zeros);
    let latent_w = add("latent_head.w".into(), vec![dm, dm], Init::Normal);
    let latent_b = add("latent_head.b".into(), vec![dm], Init::Zeros);
    let end_w = add("end_head.w".into(), vec![dm, 1], Init::Normal);
    let end_b = add("end_head.b".into(), vec![1], Init::Zeros);
    let action_w = add("action_head.w".into(), vec![dm, crate::codec::NUM_BINS as usize], Init::Normal);
    let action_b = add("action_head.b".into(), vec![crate::codec::NUM_BINS as usize], Init::Zeros);
    let vh = d.value_hidden;
    let widths = [dm, vh, vh, vh, 1];
    let mut value = Vec::new();
    for i in 0..4 {
        let last = i == 3;
        let w = add(
            format!("value.l{i}.w"),
            vec![widths[i], widths[i + 1]],
            if last { Init::Zeros } else { Init::Normal },
        );
        let b = add(format!("value.l{i}.b"), vec![widths[i + 1]], Init::Zeros);
        value.push((w, b));
    }
    let ix = ParamIx {
        task_emb,
        prompt_w1,
        prompt_b1,
        prompt_w2,
        prompt_b2,
        pos,
        latent_ln_g,
        latent_ln_b,
        end_emb,
        act_emb,
        blocks,
        lnf_g,
        lnf_b,
        latent_w,
        latent_b,
        end_w,
        end_b,
        action_w,
        action_b,
        value,
    };
    (specs, ix)
}

fn truncated_normal(rng: &mut ChaCha8Rng, std: f64) -> f32 {
    loop {
        let x: f64 = rng.sample(StandardNormal);
        if x.abs() <= 2.0 {
            return (x * std) as f32;
        }
    }
}

/// Flat, named parameter store. Group order is fixed by [`PolicyDims`].
#[derive(Debug, Clone)]
pub struct PolicyParams {
    dims: PolicyDims,
    ix: ParamIx,
    names: Vec<String>,
    tensors: Vec<TensorValue<f32>>,
}

impl PartialEq for PolicyParams {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims && self.names == other.names && self.tensors == other.tensors
    }
}

impl PolicyParams {
    pub fn init(dims: PolicyDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let (specs, ix) = layout(&dims);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for s in specs {
            let n: usize = s.shape.iter().product();
            let data = match s.init {
                Init::Normal => (0..n).map(|_| truncated_normal(&mut rng, INIT_STD)).collect(),
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            names.push(s.name);
            tensors.push(TensorValue::new(s.shape, data)?);
        }
        Ok(Self {
            dims,
            ix,
            names,
            tensors,
        })
    }

    pub fn dims(&self) -> &PolicyDims {
        &self.dims
    }

    pub fn ix(&self) -> &ParamIx {
        &self.ix
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[TensorValue<f32>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [TensorValue<f32>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&TensorValue<f32>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Whether the group belongs to the value head (trained at a higher rate).
    pub fn is_value_group(&self, i: usize) -> bool {
        self.names[i].starts_with("value.")
    }

    /// Copies every group onto `tape`, as differentiable leaves or constants.
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<NodeId> {
        self.tensors
            .iter()
            .map(|t| {
                let v = t.cast::<T>();
                if trainable {
                    tape.leaf(v)
                } else {
                    tape.constant(v)
                }
            })
            .collect()
    }

    /// SHA-256 over names, shapes and raw data, in group order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            h.update(n.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in t.data() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Adaptive-moment state stored alongside a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl MomentState {
    pub fn zeros(params: &PolicyParams) -> Self {
        let z: Vec<Vec<f32>> = params.tensors.iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            step: 0,
            m: z.clone(),
            v: z,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: PolicyParams,
    pub moments: Option<MomentState>,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let p = &self.params;
        let mut groups: Vec<(String, Vec<usize>, &[f32])> = Vec::new();
        let dims = p.dims.to_floats();
        groups.push(("meta.dims".into(), vec![dims.len()], &dims));
        for (n, t) in p.names.iter().zip(&p.tensors) {
            groups.push((n.clone(), t.shape().to_vec(), t.data()));
        }
        let step;
        if let Some(ms) = &self.moments {
            // u64 step split into two exactly representable halves.
            step = [(ms.step & 0xffff) as f32, (ms.step >> 16) as f32];
            groups.push(("meta.adam_step".into(), vec![2], &step));
            for (i, (n, t)) in p.names.iter().zip(&p.tensors).enumerate() {
                groups.push((format!("{n}.adam_m"), t.shape().to_vec(), &ms.m[i]));
                groups.push((format!("{n}.adam_v"), t.shape().to_vec(), &ms.v[i]));
            }
        }
        let mut w = Writer::new(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION).u32(groups.len() as u32);
        for (name, shape, data) in &groups {
            w.u32(name.len() as u32).bytes(name.as_bytes());
            w.u32(shape.len() as u32);
            for d in shape {
                w.u32(*d as u32);
            }
            w.f32s(data);
        }
        w.into_bytes()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new("checkpoint", bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.error(format!("unsupported checkpoint version {version}")));
        }
        let n = r.u32()?;
        let mut groups: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.bytes(len)?)
                .map_err(|_| r.error("group name is not UTF-8"))?
                .to_string();
            let nd = r.u32()? as usize;
            if nd > 8 {
                return Err(r.error(format!("group {name} has {nd} dims")));
            }
            let mut shape = Vec::with_capacity(nd);
            for _ in 0..nd {
                shape.push(r.u32()? as usize);
            }
            let count = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| r.error("group size overflow"))?;
            let data = r.f32s(count)?;
            groups.push((name, shape, data));
        }
        r.finish()?;
        let take = |groups: &mut Vec<(String, Vec<usize>, Vec<f32>)>, name: &str| {
            groups
                .iter()
                .position(|g| g.0 == name)
                .map(|i| groups.remove(i))
                .ok_or_else(|| LapoError::Checkpoint(format!("missing group {name}")))
        };
        let (_, _, dims) = take(&mut groups, "meta.dims")?;
        let dims = PolicyDims::from_floats(&dims)?;
        let mut params = PolicyParams::init(dims, 0)?;
        for i in 0..params.len() {
            let name = params.names[i].clone();
            let (_, shape, data) = take(&mut groups, &name)?;
            if shape != params.tensors[i].shape() {
                return Err(LapoError::Checkpoint(format!(
                    "group {name} has shape {shape:?}, expected {:?}",
                    params.tensors[i].shape()
                )));
            }
            params.tensors[i] = TensorValue::new(shape, data)?;
        }
        let moments = match take(&mut groups, "meta.adam_step") {
            Ok((_, _, s)) => {
                let step = s[0] as u64 | ((s[1] as u64) << 16);
                let mut m = Vec::new();
                let mut v = Vec::new();
                for i in 0..params.len() {
                    let name = params.names[i].clone();
                    m.push(take(&mut groups, &format!("{name}.adam_m"))?.2);
                    v.push(take(&mut groups, &format!("{name}.adam_v"))?.2);
                }
                Some(MomentState { step, m, v })
            }
            Err(_) => None,
        };
        if let Some(g) = groups.first() {
            return Err(LapoError::Checkpoint(format!("unexpected group {}", g.0)));
        }
        Ok(Self { params, moments })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?)
    }
}
