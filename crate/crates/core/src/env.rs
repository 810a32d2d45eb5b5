//! Pixel grid worlds with sparse rewards.
//!
//! Two variants share one renderer: `grid_explore` (reach the goal) and
//! `key_door` (the goal only pays out after the key has been picked up).
//! An optional distractor band of per-step noise surrounds the playfield;
//! it is drawn from its own stream and never influences dynamics.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::seed::{derive_seed, stream};

pub const AGENT_INTENSITY: f64 = 1.0;
pub const KEY_INTENSITY: f64 = 0.8;
pub const GOAL_INTENSITY: f64 = 0.6;
pub const DISTRACTOR_MAX: f64 = 0.3;
/// Minimum width of the distractor band around the playfield, in pixels.
pub const BAND_MIN: usize = 4;

const NOISE_STREAM: u64 = 0xD157;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    Noop,
}

impl Action {
    pub const ALL: [Action; 5] = [Action::Up, Action::Down, Action::Left, Action::Right, Action::Noop];
    pub const COUNT: usize = 5;

    pub fn from_index(i: usize) -> Result<Action> {
        Action::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("action index {i} out of range")))
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    GridExplore,
    KeyDoor,
}

impl EnvKind {
    pub fn from_name(name: &str) -> Result<EnvKind> {
        match name {
            "grid_explore" => Ok(EnvKind::GridExplore),
            "key_door" => Ok(EnvKind::KeyDoor),
            other => Err(Error::Config(format!("unknown env `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::GridExplore => "grid_explore",
            EnvKind::KeyDoor => "key_door",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub kind: EnvKind,
    pub grid_size: usize,
    pub horizon: usize,
    pub distractors: bool,
    pub frame_size: usize,
    pub stack: usize,
    /// When set, every reset uses this layout and the reset seed only
    /// drives the distractor stream.
    pub layout_seed: Option<u64>,
}

impl EnvConfig {
    pub fn grid_explore() -> Self {
        EnvConfig {
            kind: EnvKind::GridExplore,
            grid_size: 12,
            horizon: 500,
            distractors: true,
            frame_size: 36,
            stack: 4,
            layout_seed: None,
        }
    }

    /// Larger and shorter-lived than it could be: on a small grid a random
    /// walk already finds key and goal often enough that a bonus only
    /// distracts.
    pub fn key_door() -> Self {
        EnvConfig {
            kind: EnvKind::KeyDoor,
            grid_size: 12,
            horizon: 300,
            ..Self::grid_explore()
        }
    }

    pub fn for_kind(kind: EnvKind) -> Self {
        match kind {
            EnvKind::GridExplore => Self::grid_explore(),
            EnvKind::KeyDoor => Self::key_door(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 2 {
            return Err(Error::Config("grid_size must be at least 2".into()));
        }
        if self.horizon == 0 || self.stack == 0 {
            return Err(Error::Config("horizon and stack must be positive".into()));
        }
        if self.frame_size < 2 * BAND_MIN + self.grid_size {
            return Err(Error::Config(format!(
                "frame_size {} too small for a {}x{} grid",
                self.frame_size, self.grid_size, self.grid_size
            )));
        }
        Ok(())
    }

    /// Pixels per grid cell.
    pub fn cell_px(&self) -> usize {
        (self.frame_size - 2 * BAND_MIN) / self.grid_size
    }

    /// Top-left pixel of the playfield.
    pub fn offset(&self) -> usize {
        (self.frame_size - self.grid_size * self.cell_px()) / 2
    }

    /// True for pixels outside the playfield (where distractors live).
    pub fn in_band(&self, row: usize, col: usize) -> bool {
        let lo = self.offset();
        let hi = lo + self.grid_size * self.cell_px();
        row < lo || row >= hi || col < lo || col >= hi
    }

    pub fn obs_shape(&self) -> [usize; 3] {
        [self.stack, self.frame_size, self.frame_size]
    }
}

/// Grid coordinates `(row, col)`.
pub type Cell = (usize, usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvState {
    pub agent: Cell,
    pub goal: Cell,
    pub key: Option<Cell>,
    pub has_key: bool,
    pub step: usize,
    pub done: bool,
    pub noise_seed: u64,
}

/// Initial state for a seed. Layout comes from `layout_seed` when the
/// config pins one, otherwise from `seed`.
pub fn initial_state(config: &EnvConfig, seed: u64) -> EnvState {
    let layout = config.layout_seed.unwrap_or(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(layout, stream::LAYOUT));
    let n = config.grid_size;
    let cells = n * n;
    let mut pick = |taken: &[usize]| loop {
        let c = rng.random_range(0..cells);
        if !taken.contains(&c) {
            return c;
        }
    };
    let agent = pick(&[]);
    let goal = pick(&[agent]);
    let key = match config.kind {
        EnvKind::GridExplore => None,
        EnvKind::KeyDoor => Some(pick(&[agent, goal])),
    };
    let to_cell = |c: usize| (c / n, c % n);
    EnvState {
        agent: to_cell(agent),
        goal: to_cell(goal),
        key: key.map(to_cell),
        has_key: false,
        step: 0,
        done: false,
        noise_seed: derive_seed(seed, NOISE_STREAM),
    }
}

/// Pure transition function: `(state, action) -> (next, reward, done)`.
pub fn transition(config: &EnvConfig, state: &EnvState, action: Action) -> Result<(EnvState, f64, bool)> {
    if state.done {
        return Err(Error::EpisodeDone);
    }
    let n = config.grid_size;
    let (r, c) = state.agent;
    let agent = match action {
        Action::Up if r > 0 => (r - 1, c),
        Action::Down if r + 1 < n => (r + 1, c),
        Action::Left if c > 0 => (r, c - 1),
        Action::Right if c + 1 < n => (r, c + 1),
        _ => (r, c),
    };
    let mut next = state.clone();
    next.agent = agent;
    next.step += 1;
    if next.key == Some(agent) {
        next.key = None;
        next.has_key = true;
    }
    let rewarding = match config.kind {
        EnvKind::GridExplore => true,
        EnvKind::KeyDoor => next.has_key,
    };
    let reward = if agent == next.goal && rewarding { 1.0 } else { 0.0 };
    next.done = reward > 0.0 || next.step >= config.horizon;
    let done = next.done;
    Ok((next, reward, done))
}

/// Renders one `H x W` grayscale frame.
pub fn render(config: &EnvConfig, state: &EnvState) -> Vec<f64> {
    let size = config.frame_size;
    let mut frame = vec![0.0; size * size];
    if config.distractors {
        let mut rng = ChaCha8Rng::seed_from_u64(state.noise_seed);
        rng.set_stream(state.step as u64);
        for row in 0..size {
            for col in 0..size {
                if config.in_band(row, col) {
                    frame[row * size + col] = rng.random::<f64>() * DISTRACTOR_MAX;
                }
            }
        }
    }
    let (cell, off) = (config.cell_px(), config.offset());
    let mut paint = |(r, c): Cell, v: f64| {
        for y in 0..cell {
            for x in 0..cell {
                frame[(off + r * cell + y) * size + off + c * cell + x] = v;
            }
        }
    };
    paint(state.goal, GOAL_INTENSITY);
    if let Some(key) = state.key {
        paint(key, KEY_INTENSITY);
    }
    paint(state.agent, AGENT_INTENSITY);
    frame
}

/// `S` stacked frames, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    stack: usize,
    size: usize,
    data: Vec<f64>,
}

impl Observation {
    pub fn from_frames<'a>(size: usize, frames: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut data = Vec::new();
        let mut stack = 0;
        for f in frames {
            if f.len() != size * size {
                return Err(Error::shape("observation frame", &[size * size], &[f.len()]));
            }
            data.extend(f.iter().map(|v| v.clamp(0.0, 1.0)));
            stack += 1;
        }
        if stack == 0 {
            return Err(Error::Invalid("observation needs at least one frame".into()));
        }
        Ok(Observation { stack, size, data })
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.stack, self.size, self.size]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        let n = self.size * self.size;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn newest(&self) -> &[f64] {
        self.frame(self.stack - 1)
    }
}

/// Stacks observations into a `[n, S, H, W]` tensor.
pub fn batch_observations<'a>(obs: impl IntoIterator<Item = &'a Observation>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut shape: Option<[usize; 3]> = None;
    let mut n = 0;
    for o in obs {
        match shape {
            None => shape = Some(o.shape()),
            Some(s) if s != o.shape() => return Err(Error::shape("batch_observations", &s, &o.shape())),
            _ => {}
        }
        data.extend_from_slice(o.data());
        n += 1;
    }
    let s = shape.ok_or_else(|| Error::Invalid("empty observation batch".into()))?;
    Tensor::new(vec![n, s[0], s[1], s[2]], data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeStats {
    pub episode_return: f64,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub obs: Observation,
    pub extrinsic_reward: f64,
    pub done: bool,
    /// Set on the final step of an episode.
    pub info: Option<EpisodeStats>,
}

#[derive(Debug, Clone)]
pub struct GridEnv {
    config: EnvConfig,
    state: EnvState,
    frames: VecDeque<Vec<f64>>,
    episode_return: f64,
}

impl GridEnv {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        let state = initial_state(&config, 0);
        let mut env = GridEnv {
            config,
            state,
            frames: VecDeque::new(),
            episode_return: 0.0,
        };
        env.reset(0);
        Ok(env)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn reset(&mut self, seed: u64) -> Observation {
        self.state = initial_state(&self.config, seed);
        self.episode_return = 0.0;
        let first = render(&self.config, &self.state);
        self.frames.clear();
        for _ in 0..self.config.stack {
            self.frames.push_back(first.clone());
        }
        self.observation()
    }

    pub fn observation(&self) -> Observation {
        Observation::from_frames(self.config.frame_size, self.frames.iter().map(Vec::as_slice))
            .expect("frames are rendered at the configured size")
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult> {
        let (next, reward, done) = transition(&self.config, &self.state, action)?;
        self.state = next;
        self.episode_return += reward;
        self.frames.pop_front();
        self.frames.push_back(render(&self.config, &self.state));
        Ok(StepResult {
            obs: self.observation(),
            extrinsic_reward: reward,
            done,
            info: done.then_some(EpisodeStats {
                episode_return: self.episode_return,
                length: self.state.step,
            }),
        })
    }
}

/// One environment plus its private stream of episode seeds.
///
/// Episode seeds depend only on `(run seed, env index)`, so stepping the
/// slots serially or on worker threads yields identical trajectories.
#[derive(Debug, Clone)]
pub struct EnvSlot {
    env: GridEnv,
    episodes: ChaCha8Rng,
    current: Observation,
}

impl EnvSlot {
    pub fn new(config: EnvConfig, seed: u64, index: usize) -> Result<Self> {
        let mut env = GridEnv::new(config)?;
        let mut episodes = ChaCha8Rng::seed_from_u64(derive_seed(seed, index as u64));
        let current = env.reset(episodes.next_u64());
        Ok(EnvSlot { env, episodes, current })
    }

    pub fn observation(&self) -> &Observation {
        &self.current
    }

    pub fn env(&self) -> &GridEnv {
        &self.env
    }

    /// Steps and resets on episode end. The returned result carries the
    /// terminal observation; the slot's current observation is the reset one.
    pub fn step(&mut self, action: Action) -> Result<StepResult> {
        let result = self.env.step(action)?;
        self.current = if result.done {
            self.env.reset(self.episodes.next_u64())
        } else {
            result.obs.clone()
        };
        Ok(result)
    }
}

/// A batch of environments stepped in lockstep.
pub trait VecEnv {
    fn num_envs(&self) -> usize;
    /// Observations each environment will act on next.
    fn observations(&self) -> Vec<Observation>;
    fn step(&mut self, actions: &[Action]) -> Result<Vec<StepResult>>;
}

#[derive(Debug, Clone)]
pub struct SerialVecEnv {
    slots: Vec<EnvSlot>,
}

impl SerialVecEnv {
    pub fn new(config: &EnvConfig, num_envs: usize, seed: u64) -> Result<Self> {
        if num_envs == 0 {
            return Err(Error::Config("need at least one environment".into()));
        }
        let slots = (0..num_envs)
            .map(|i| EnvSlot::new(config.clone(), seed, i))
            .collect::<Result<_>>()?;
        Ok(SerialVecEnv { slots })
    }
}

impl VecEnv for SerialVecEnv {
    fn num_envs(&self) -> usize {
        self.slots.len()
    }

    fn observations(&self) -> Vec<Observation> {
        self.slots.iter().map(|s| s.observation().clone()).collect()
    }

    fn step(&mut self, actions: &[Action]) -> Result<Vec<StepResult>> {
        if actions.len() != self.slots.len() {
            return Err(Error::shape("vec_env step", &[self.slots.len()], &[actions.len()]));
        }
        self.slots.iter_mut().zip(actions).map(|(s, &a)| s.step(a)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(kind: EnvKind) -> EnvConfig {
        EnvConfig {
            distractors: false,
            ..EnvConfig::for_kind(kind)
        }
    }

    #[test]
    fn reset_fills_stack_with_first_frame() {
        let mut env = GridEnv::new(EnvConfig::grid_explore()).unwrap();
        let obs = env.reset(3);
        assert_eq!(obs.shape(), [4, 36, 36]);
        for i in 1..4 {
            assert_eq!(obs.frame(i), obs.frame(0));
        }
    }

    #[test]
    fn same_seed_same_observation() {
        let mut a = GridEnv::new(EnvConfig::grid_explore()).unwrap();
        let mut b = GridEnv::new(EnvConfig::grid_explore()).unwrap();
        assert_eq!(a.reset(17), b.reset(17));
    }

    #[test]
    fn background_is_zero_without_distractors() {
        let cfg = quiet(EnvKind::GridExplore);
        let mut env = GridEnv::new(cfg.clone()).unwrap();
        let obs = env.reset(5);
        for r in 0..36 {
            for c in 0..36 {
                if cfg.in_band(r, c) {
                    assert_eq!(obs.newest()[r * 36 + c], 0.0);
                }
            }
        }
    }

    #[test]
    fn stepping_onto_goal_pays_once_and_ends() {
        let cfg = quiet(EnvKind::GridExplore);
        let mut state = initial_state(&cfg, 1);
        state.goal = (4, 5);
        state.agent = (4, 4);
        let (next, r, done) = transition(&cfg, &state, Action::Right).unwrap();
        assert_eq!(r, 1.0);
        assert!(done);
        assert_eq!(transition(&cfg, &next, Action::Noop), Err(Error::EpisodeDone));
    }

    #[test]
    fn noop_keeps_position_without_reward() {
        let cfg = quiet(EnvKind::GridExplore);
        let state = initial_state(&cfg, 2);
        let (next, r, _) = transition(&cfg, &state, Action::Noop).unwrap();
        assert_eq!(next.agent, state.agent);
        assert_eq!(r, 0.0);
    }

    #[test]
    fn walls_block_movement() {
        let cfg = quiet(EnvKind::GridExplore);
        let mut state = initial_state(&cfg, 2);
        state.agent = (0, 0);
        state.goal = (5, 5);
        let (next, _, _) = transition(&cfg, &state, Action::Up).unwrap();
        assert_eq!(next.agent, (0, 0));
    }

    #[test]
    fn key_door_goal_needs_key() {
        let cfg = quiet(EnvKind::KeyDoor);
        let mut state = initial_state(&cfg, 4);
        state.agent = (0, 0);
        state.goal = (0, 1);
        state.key = Some((1, 1));
        let (s1, r, done) = transition(&cfg, &state, Action::Right).unwrap();
        assert_eq!((r, done), (0.0, false));
        let (s2, _, _) = transition(&cfg, &s1, Action::Down).unwrap();
        assert!(s2.has_key && s2.key.is_none());
        let (_, r, done) = transition(&cfg, &s2, Action::Up).unwrap();
        assert_eq!((r, done), (1.0, true));
    }

    #[test]
    fn horizon_ends_episode() {
        let cfg = EnvConfig {
            horizon: 3,
            ..quiet(EnvKind::GridExplore)
        };
        let mut env = GridEnv::new(cfg).unwrap();
        env.reset(0);
        let mut last = None;
        for _ in 0..3 {
            last = Some(env.step(Action::Noop).unwrap());
        }
        let last = last.unwrap();
        assert!(last.done);
        assert_eq!(last.info.unwrap().length, 3);
        assert_eq!(env.step(Action::Noop).unwrap_err(), Error::EpisodeDone);
    }

    #[test]
    fn agent_at_origin_lights_top_left_block() {
        let cfg = quiet(EnvKind::GridExplore);
        let mut state = initial_state(&cfg, 0);
        state.agent = (0, 0);
        state.goal = (3, 3);
        let frame = render(&cfg, &state);
        let (off, cell) = (cfg.offset(), cfg.cell_px());
        for y in 0..cell {
            for x in 0..cell {
                assert_eq!(frame[(off + y) * 36 + off + x], AGENT_INTENSITY);
            }
        }
    }

    #[test]
    fn goal_intensity_is_constant() {
        let cfg = EnvConfig::grid_explore();
        for seed in 0..5 {
            let state = initial_state(&cfg, seed);
            let frame = render(&cfg, &state);
            let (off, cell) = (cfg.offset(), cfg.cell_px());
            let (r, c) = state.goal;
            for y in 0..cell {
                for x in 0..cell {
                    assert_eq!(frame[(off + r * cell + y) * 36 + off + c * cell + x], GOAL_INTENSITY);
                }
            }
        }
    }
}
