//! Deterministic grid-world manipulation simulator ("chunkgrid").
//!
//! An agent moves on an 8x8 grid one cell per micro-step. Actions are
//! `[dx, dy, grip]` in normalized units: movement components are quantized by
//! sign with a dead zone of 0.5, and `grip > 0` grabs a co-located object while
//! `grip <= 0` drops whatever is held onto the current cell. Reward is sparse:
//! 5 on the terminal success micro-step and 0 otherwise.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::ActionChunk;
use crate::error::{LapoError, Result};

pub const GRID: i32 = 8;
pub const ACTION_DIMS: usize = 3;
pub const VARIANTS_PER_SUITE: u32 = 10;
pub const SUCCESS_REWARD: f32 = 5.0;
const MAX_OBJECTS: usize = 2;
/// Length of the flat observation encoding.
pub const PHI_DIM: usize = 4 + 4 * MAX_OBJECTS + 3 * MAX_OBJECTS + 2 + 2 * GRID as usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Reach,
    #[serde(rename = "pickplace")]
    PickPlace,
    Sequence,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Reach, Suite::PickPlace, Suite::Sequence];

    pub fn id(self) -> u32 {
        match self {
            Suite::Reach => 0,
            Suite::PickPlace => 1,
            Suite::Sequence => 2,
        }
    }

    pub fn from_id(id: u32) -> Result<Self> {
        Suite::ALL
            .get(id as usize)
            .copied()
            .ok_or_else(|| LapoError::Env(format!("unknown suite id {id}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Suite::Reach => "reach",
            Suite::PickPlace => "pickplace",
            Suite::Sequence => "sequence",
        }
    }

    /// Episode cap in micro-steps.
    pub fn t_max(self) -> u32 {
        match self {
            Suite::Reach => 48,
            Suite::PickPlace => 96,
            Suite::Sequence => 192,
        }
    }

    fn n_objects(self) -> usize {
        match self {
            Suite::Reach => 0,
            Suite::PickPlace => 1,
            Suite::Sequence => 2,
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = LapoError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reach" => Ok(Suite::Reach),
            "pickplace" => Ok(Suite::PickPlace),
            "sequence" => Ok(Suite::Sequence),
            _ => Err(LapoError::Config(format!("unknown suite {s:?}"))),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TaskSpec {
    pub suite: Suite,
    pub variant: u32,
}

impl TaskSpec {
    pub fn new(suite: Suite, variant: u32) -> Result<Self> {
        if variant >= VARIANTS_PER_SUITE {
            return Err(LapoError::Env(format!(
                "variant {variant} out of range for {suite} ({VARIANTS_PER_SUITE} variants)"
            )));
        }
        Ok(Self { suite, variant })
    }

    pub fn t_max(&self) -> u32 {
        self.suite.t_max()
    }

    /// Dense index over all suites, used for the task embedding table.
    pub fn index(&self) -> usize {
        (self.suite.id() * VARIANTS_PER_SUITE + self.variant) as usize
    }

    pub fn count() -> usize {
        Suite::ALL.len() * VARIANTS_PER_SUITE as usize
    }
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.suite, self.variant)
    }
}

pub type Cell = (i32, i32);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub agent: Cell,
    pub objects: Vec<Cell>,
    pub goals: Vec<Cell>,
}

fn manhattan(a: Cell, b: Cell) -> i32 {
    (a.0 - b.0).abs() + (a.1 - b.1).abs()
}

/// Fixed start/goal layout of a task variant.
pub fn layout(task: TaskSpec) -> Layout {
    let suite = task.suite;
    let mut rng = ChaCha8Rng::seed_from_u64(0x6c61_706f_0000 + suite.id() as u64);
    let mut made: Vec<Layout> = Vec::new();
    let cell = |rng: &mut ChaCha8Rng| (rng.random_range(0..GRID), rng.random_range(0..GRID));
    while made.len() <= task.variant as usize {
        let agent = cell(&mut rng);
        let n = suite.n_objects();
        let objects: Vec<Cell> = (0..n).map(|_| cell(&mut rng)).collect();
        let goals: Vec<Cell> = (0..n.max(1)).map(|_| cell(&mut rng)).collect();
        let mut all = vec![agent];
        all.extend(&objects);
        all.extend(&goals);
        let distinct = all.iter().enumerate().all(|(i, c)| !all[..i].contains(c));
        let spaced = match suite {
            Suite::Reach => manhattan(agent, goals[0]) >= 5,
            Suite::PickPlace => {
                manhattan(agent, objects[0]) >= 3 && manhattan(objects[0], goals[0]) >= 3
            }
            Suite::Sequence => {
                manhattan(agent, objects[0]) >= 2
                    && manhattan(objects[0], goals[0]) >= 2
                    && manhattan(goals[0], objects[1]) >= 2
                    && manhattan(objects[1], goals[1]) >= 2
            }
        };
        let fresh = made.iter().all(|l| l.goals != goals);
        if distinct && spaced && fresh {
            made.push(Layout {
                agent,
                objects,
                goals,
            });
        }
    }
    made.pop().unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Object {
    pub pos: Cell,
    pub held: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvState {
    pub task: TaskSpec,
    pub agent: Cell,
    pub gripper: bool,
    pub objects: Vec<Object>,
    pub goals: Vec<Cell>,
    pub progress: u32,
    pub steps: u32,
}

fn norm_coord(v: i32) -> f32 {
    2.0 * v as f32 / (GRID - 1) as f32 - 1.0
}

impl EnvState {
    pub fn holding(&self) -> Option<usize> {
        self.objects.iter().position(|o| o.held)
    }

    /// Flat observation encoding of length [`PHI_DIM`].
    pub fn encode(&self) -> Vec<f32> {
        let mut phi = Vec::with_capacity(PHI_DIM);
        phi.push(norm_coord(self.agent.0));
        phi.push(norm_coord(self.agent.1));
        phi.push(self.gripper as u8 as f32);
        phi.push(self.holding().is_some() as u8 as f32);
        for i in 0..MAX_OBJECTS {
            match self.objects.get(i) {
                Some(o) => phi.extend([norm_coord(o.pos.0), norm_coord(o.pos.1), o.held as u8 as f32, 1.0]),
                None => phi.extend([0.0; 4]),
            }
        }
        for i in 0..MAX_OBJECTS {
            match self.goals.get(i) {
                Some(g) => phi.extend([norm_coord(g.0), norm_coord(g.1), 1.0]),
                None => phi.extend([0.0; 3]),
            }
        }
        phi.push(self.progress as f32 / 2.0);
        phi.push(self.steps as f32 / self.task.t_max() as f32);
        for axis in 0..2 {
            let v = if axis == 0 { self.agent.0 } else { self.agent.1 };
            phi.extend((0..GRID).map(|k| (k == v) as u8 as f32));
        }
        debug_assert_eq!(phi.len(), PHI_DIM);
        phi
    }

    fn subgoals(&self) -> u32 {
        match self.task.suite {
            Suite::Sequence => 2,
            _ => 1,
        }
    }

    pub fn success(&self) -> bool {
        self.progress >= self.subgoals()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Vec<f32>,
    pub reward: f32,
    pub done: bool,
    pub success: bool,
    pub micro_steps: u32,
}

fn quantize(a: f32) -> i32 {
    if a > 0.5 {
        1
    } else if a < -0.5 {
        -1
    } else {
        0
    }
}

#[derive(Debug, Clone)]
pub struct ChunkGridEnv {
    state: EnvState,
    done: bool,
}

impl ChunkGridEnv {
    /// Starts an episode: the variant's layout with the agent start jittered
    /// by at most one cell per axis, derived from `seed`.
    pub fn reset(task: TaskSpec, seed: u64) -> Result<Self> {
        let task = TaskSpec::new(task.suite, task.variant)?;
        let lay = layout(task);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_a9e7);
        let jx = rng.random_range(-1..=1);
        let jy = rng.random_range(-1..=1);
        let cand = (
            (lay.agent.0 + jx).clamp(0, GRID - 1),
            (lay.agent.1 + jy).clamp(0, GRID - 1),
        );
        let agent = if lay.objects.contains(&cand) || lay.goals.contains(&cand) {
            lay.agent
        } else {
            cand
        };
        let state = EnvState {
            task,
            agent,
            gripper: false,
            objects: lay
                .objects
                .iter()
                .map(|&pos| Object { pos, held: false })
                .collect(),
            goals: lay.goals.clone(),
            progress: 0,
            steps: 0,
        };
        Ok(Self { state, done: false })
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn task(&self) -> TaskSpec {
        self.state.task
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn observation(&self) -> Vec<f32> {
        self.state.encode()
    }

    /// Applies one micro-step; returns whether the episode just succeeded.
    pub fn step_micro(&mut self, action: &[f32]) -> Result<bool> {
        if self.done {
            return Err(LapoError::Env("step after episode end".into()));
        }
        if action.len() != ACTION_DIMS {
            return Err(LapoError::Env(format!(
                "micro-step action needs {ACTION_DIMS} components, got {}",
                action.len()
            )));
        }
        let s = &mut self.state;
        s.agent.0 = (s.agent.0 + quantize(action[0])).clamp(0, GRID - 1);
        s.agent.1 = (s.agent.1 + quantize(action[1])).clamp(0, GRID - 1);
        let agent = s.agent;
        for o in s.objects.iter_mut().filter(|o| o.held) {
            o.pos = agent;
        }
        s.gripper = action[2] > 0.0;
        if s.gripper {
            if s.holding().is_none() {
                if let Some(o) = s.objects.iter_mut().find(|o| o.pos == agent) {
                    o.held = true;
                }
            }
        } else {
            for o in s.objects.iter_mut() {
                o.held = false;
            }
        }
        s.steps += 1;
        match s.task.suite {
            Suite::Reach => {
                if s.agent == s.goals[0] {
                    s.progress = 1;
                }
            }
            Suite::PickPlace | Suite::Sequence => {
                let k = s.progress as usize;
                if k < s.objects.len() {
                    let o = s.objects[k];
                    if !o.held && o.pos == s.goals[k] {
                        s.progress += 1;
                    }
                }
            }
        }
        let success = s.success();
        self.done = success || s.steps >= s.task.t_max();
        Ok(success)
    }

    /// Executes a chunk open-loop, stopping early when the episode ends.
    pub fn step_chunk(&mut self, chunk: &ActionChunk) -> Result<StepResult> {
        if self.done {
            return Err(LapoError::Env("step after episode end".into()));
        }
        if chunk.dims() != ACTION_DIMS {
            return Err(LapoError::Env(format!(
                "chunk has {} components per step, env expects {ACTION_DIMS}",
                chunk.dims()
            )));
        }
        let mut used = 0;
        let mut success = false;
        for h in 0..chunk.horizon() {
            success = self.step_micro(chunk.step(h))?;
            used += 1;
            if self.done {
                break;
            }
        }
        Ok(StepResult {
            observation: self.observation(),
            reward: if success { SUCCESS_REWARD } else { 0.0 },
            done: self.done,
            success,
            micro_steps: used,
        })
    }

    pub fn render(&self) -> String {
        render_state(&self.state)
    }
}

/// ASCII picture: `A` agent (`a` when holding), digits for objects, letters
/// `X`/`Y` for goals.
pub fn render_state(s: &EnvState) -> String {
    let mut grid = vec![vec!['.'; GRID as usize]; GRID as usize];
    for (i, g) in s.goals.iter().enumerate() {
        grid[g.1 as usize][g.0 as usize] = if i == 0 { 'X' } else { 'Y' };
    }
    for (i, o) in s.objects.iter().enumerate() {
        grid[o.pos.1 as usize][o.pos.0 as usize] = char::from(b'1' + i as u8);
    }
    grid[s.agent.1 as usize][s.agent.0 as usize] = if s.holding().is_some() { 'a' } else { 'A' };
    let mut out = format!(
        "{} step {}/{} progress {}\n",
        s.task,
        s.steps,
        s.task.t_max(),
        s.progress
    );
    for row in grid {
        out.extend(row);
        out.push('\n');
    }
    out
}

fn toward(from: Cell, to: Cell) -> (i32, i32) {
    if from.0 != to.0 {
        ((to.0 - from.0).signum(), 0)
    } else {
        (0, (to.1 - from.1).signum())
    }
}

/// Greedy Manhattan planner: one micro-step action for the current state.
pub fn expert_action(s: &EnvState) -> [f32; ACTION_DIMS] {
    let (mv, grip) = match s.task.suite {
        Suite::Reach => (toward(s.agent, s.goals[0]), -1.0),
        Suite::PickPlace | Suite::Sequence => {
            let k = (s.progress as usize).min(s.objects.len() - 1);
            let o = s.objects[k];
            if o.held {
                let mv = toward(s.agent, s.goals[k]);
                let next = (s.agent.0 + mv.0, s.agent.1 + mv.1);
                (mv, if next == s.goals[k] { -1.0 } else { 1.0 })
            } else {
                let mv = toward(s.agent, o.pos);
                let next = (s.agent.0 + mv.0, s.agent.1 + mv.1);
                (mv, if next == o.pos { 1.0 } else { -1.0 })
            }
        }
    };
    [mv.0 as f32, mv.1 as f32, grip]
}

/// One micro-step of a demonstration: the observation and the next `H`
/// actions (padded past the end of the episode by repeating the final one).
#[derive(Debug, Clone, PartialEq)]
pub struct DemoStep {
    pub observation: Vec<f32>,
    pub actions: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoTrajectory {
    pub task: TaskSpec,
    /// `micro_steps + 1` records; the last holds the terminal observation.
    pub steps: Vec<DemoStep>,
}

impl DemoTrajectory {
    pub fn micro_steps(&self) -> usize {
        self.steps.len().saturating_sub(1)
    }

    /// Number of real (unpadded) micro-steps in the chunk stored at `t`.
    pub fn valid_actions(&self, t: usize, horizon: usize) -> usize {
        self.micro_steps().saturating_sub(t).min(horizon)
    }
}

/// Rolls the scripted expert to success and records every micro-step.
pub fn scripted_expert(task: TaskSpec, seed: u64, horizon: usize) -> Result<DemoTrajectory> {
    let mut env = ChunkGridEnv::reset(task, seed)?;
    let mut obs = vec![env.observation()];
    let mut acts: Vec<[f32; ACTION_DIMS]> = Vec::new();
    while !env.is_done() {
        let a = expert_action(env.state());
        env.step_micro(&a)?;
        acts.push(a);
        obs.push(env.observation());
    }
    if !env.state().success() {
        return Err(LapoError::Env(format!(
            "expert failed to solve {task} (seed {seed}) within {} micro-steps",
            task.t_max()
        )));
    }
    let last = *acts.last().expect("successful episode has at least one action");
    let steps = obs
        .into_iter()
        .enumerate()
        .map(|(t, observation)| {
            let mut actions = Vec::with_capacity(horizon * ACTION_DIMS);
            for h in 0..horizon {
                actions.extend(acts.get(t + h).unwrap_or(&last));
            }
            DemoStep {
                observation,
                actions,
            }
        })
        .collect();
    Ok(DemoTrajectory { task, steps })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chunk(values: &[[f32; 3]]) -> ActionChunk {
        ActionChunk::new(values.len(), 3, values.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn reset_is_deterministic() {
        let t = TaskSpec::new(Suite::Reach, 0).unwrap();
        let a = ChunkGridEnv::reset(t, 7).unwrap().observation();
        let b = ChunkGridEnv::reset(t, 7).unwrap().observation();
        assert_eq!(a, b);
        assert_eq!(a.len(), PHI_DIM);
    }

    #[test]
    fn unknown_variant_rejected() {
        let bad = TaskSpec {
            suite: Suite::Reach,
            variant: 10,
        };
        assert!(ChunkGridEnv::reset(bad, 0).is_err());
    }

    #[test]
    fn variants_have_distinct_goals() {
        for suite in Suite::ALL {
            let g0 = layout(TaskSpec::new(suite, 0).unwrap()).goals;
            let g1 = layout(TaskSpec::new(suite, 1).unwrap()).goals;
            assert_ne!(g0, g1);
        }
    }

    #[test]
    fn wall_clamping() {
        let mut env = ChunkGridEnv::reset(TaskSpec::new(Suite::PickPlace, 0).unwrap(), 0).unwrap();
        env.state.agent = (0, 0);
        env.state.objects[0].pos = (3, 5);
        env.state.goals[0] = (6, 6);
        let r = env.step_chunk(&chunk(&[[1.0, 0.0, -1.0]; 8])).unwrap();
        assert_eq!(env.state().agent, (7, 0));
        assert_eq!(r.micro_steps, 8);
        assert!(!r.done);
    }

    #[test]
    fn success_mid_chunk_stops_execution() {
        let mut env = ChunkGridEnv::reset(TaskSpec::new(Suite::Reach, 0).unwrap(), 0).unwrap();
        env.state.agent = (0, 0);
        env.state.goals[0] = (3, 0);
        let r = env.step_chunk(&chunk(&[[1.0, 0.0, -1.0]; 8])).unwrap();
        assert_eq!(r.micro_steps, 3);
        assert_eq!(r.reward, 5.0);
        assert!(r.done && r.success);
        assert_eq!(env.state().agent, (3, 0));
        assert!(env.step_chunk(&chunk(&[[0.0; 3]; 8])).is_err());
    }

    #[test]
    fn timeout_gives_zero_reward() {
        let mut env = ChunkGridEnv::reset(TaskSpec::new(Suite::Reach, 3).unwrap(), 1).unwrap();
        let stay = chunk(&[[0.0, 0.0, -1.0]; 8]);
        let mut last = None;
        while !env.is_done() {
            last = Some(env.step_chunk(&stay).unwrap());
        }
        let last = last.unwrap();
        assert!(!last.success);
        assert_eq!(last.reward, 0.0);
        assert_eq!(env.state().steps, Suite::Reach.t_max());
    }

    #[test]
    fn pick_and_place_mechanics() {
        let mut env = ChunkGridEnv::reset(TaskSpec::new(Suite::PickPlace, 0).unwrap(), 0).unwrap();
        env.state.agent = (0, 0);
        env.state.objects[0].pos = (1, 0);
        env.state.goals[0] = (1, 2);
        assert!(!env.step_micro(&[1.0, 0.0, 1.0]).unwrap());
        assert_eq!(env.state().holding(), Some(0));
        assert!(!env.step_micro(&[0.0, 1.0, 1.0]).unwrap());
        assert_eq!(env.state().objects[0].pos, (1, 1));
        assert!(env.step_micro(&[0.0, 1.0, -1.0]).unwrap());
        assert_eq!(env.state().objects[0].pos, (1, 2));
    }

    #[test]
    fn expert_solves_every_variant_and_replays() {
        let h = 8;
        for suite in Suite::ALL {
            for v in 0..VARIANTS_PER_SUITE {
                let task = TaskSpec::new(suite, v).unwrap();
                for seed in [0u64, 5] {
                    let demo = scripted_expert(task, seed, h).unwrap();
                    assert!(demo.micro_steps() as u32 <= suite.t_max());
                    for s in &demo.steps {
                        assert!(s.actions.iter().all(|a| (-1.0..=1.0).contains(a)));
                    }
                    let mut env = ChunkGridEnv::reset(task, seed).unwrap();
                    assert_eq!(env.observation(), demo.steps[0].observation);
                    let mut t = 0;
                    while !env.is_done() {
                        let c = ActionChunk::new(h, 3, demo.steps[t].actions.clone()).unwrap();
                        let r = env.step_chunk(&c).unwrap();
                        t += r.micro_steps as usize;
                        assert_eq!(r.observation, demo.steps[t].observation);
                    }
                    assert!(env.state().success());
                    assert_eq!(t, demo.micro_steps());
                }
            }
        }
    }

    #[test]
    fn expert_horizons_are_graded() {
        let mean_len = |suite| {
            (0..VARIANTS_PER_SUITE)
                .map(|v| scripted_expert(TaskSpec::new(suite, v).unwrap(), 0, 8).unwrap().micro_steps())
                .sum::<usize>() as f64
                / VARIANTS_PER_SUITE as f64
        };
        let (r, p, s) = (
            mean_len(Suite::Reach),
            mean_len(Suite::PickPlace),
            mean_len(Suite::Sequence),
        );
        assert!(r < p && p < s, "{r} {p} {s}");
    }

    #[test]
    fn render_marks_entities() {
        let env = ChunkGridEnv::reset(TaskSpec::new(Suite::Sequence, 2).unwrap(), 0).unwrap();
        let pic = env.render();
        for c in ['A', '1', '2', 'X', 'Y'] {
            assert!(pic.contains(c), "{pic}");
        }
    }
}
