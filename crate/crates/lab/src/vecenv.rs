//! Environments stepped in lockstep on worker threads.

use std::sync::mpsc::{channel, Receiver, Sender};
use std::thread::JoinHandle;

use curio_core::env::{Action, EnvConfig, EnvSlot, Observation, StepResult, VecEnv};

use crate::error::{LabError, Result};

type Reply = curio_core::Result<(StepResult, Observation)>;

struct Worker {
    actions: Option<Sender<Action>>,
    replies: Receiver<Reply>,
    handle: Option<JoinHandle<()>>,
}

/// One thread per environment. Every `step` sends each worker its action
/// and waits for all replies before returning, so trajectories match
/// [`curio_core::env::SerialVecEnv`] built with the same seed.
pub struct ThreadedVecEnv {
    workers: Vec<Worker>,
    current: Vec<Observation>,
}

impl ThreadedVecEnv {
    pub fn new(config: &EnvConfig, num_envs: usize, seed: u64) -> Result<Self> {
        if num_envs == 0 {
            return Err(LabError::Config("need at least one environment".into()));
        }
        let mut workers = Vec::with_capacity(num_envs);
        let mut current = Vec::with_capacity(num_envs);
        for index in 0..num_envs {
            let mut slot = EnvSlot::new(config.clone(), seed, index)?;
            current.push(slot.observation().clone());
            let (action_tx, action_rx) = channel::<Action>();
            let (reply_tx, reply_rx) = channel::<Reply>();
            let handle = std::thread::Builder::new()
                .name(format!("env-{index}"))
                .spawn(move || {
                    for action in action_rx {
                        let reply = slot
                            .step(action)
                            .map(|r| (r, slot.observation().clone()));
                        if reply_tx.send(reply).is_err() {
                            break;
                        }
                    }
                })
                .map_err(|e| LabError::Worker(e.to_string()))?;
            workers.push(Worker {
                actions: Some(action_tx),
                replies: reply_rx,
                handle: Some(handle),
            });
        }
        Ok(ThreadedVecEnv { workers, current })
    }
}

impl VecEnv for ThreadedVecEnv {
    fn num_envs(&self) -> usize {
        self.workers.len()
    }

    fn observations(&self) -> Vec<Observation> {
        self.current.clone()
    }

    fn step(&mut self, actions: &[Action]) -> curio_core::Result<Vec<StepResult>> {
        if actions.len() != self.workers.len() {
            return Err(curio_core::Error::Invalid(format!(
                "expected {} actions, got {}",
                self.workers.len(),
                actions.len()
            )));
        }
        let lost = || curio_core::Error::Invalid("env worker thread exited".into());
        for (w, &a) in self.workers.iter().zip(actions) {
            w.actions.as_ref().ok_or_else(lost)?.send(a).map_err(|_| lost())?;
        }
        let mut results = Vec::with_capacity(actions.len());
        for (i, w) in self.workers.iter().enumerate() {
            let (result, next) = w.replies.recv().map_err(|_| lost())??;
            self.current[i] = next;
            results.push(result);
        }
        Ok(results)
    }
}

impl Drop for ThreadedVecEnv {
    fn drop(&mut self) {
        for w in &mut self.workers {
            w.actions.take();
        }
        for w in &mut self.workers {
            if let Some(h) = w.handle.take() {
                let _ = h.join();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use curio_core::env::SerialVecEnv;

    #[test]
    fn matches_serial_stepping() {
        let cfg = EnvConfig::key_door();
        let mut serial = SerialVecEnv::new(&cfg, 3, 11).unwrap();
        let mut threaded = ThreadedVecEnv::new(&cfg, 3, 11).unwrap();
        assert_eq!(serial.observations(), threaded.observations());
        for t in 0..250 {
            let actions: Vec<Action> = (0..3)
                .map(|e| Action::from_index((t * 7 + e * 3) % Action::COUNT).unwrap())
                .collect();
            assert_eq!(serial.step(&actions).unwrap(), threaded.step(&actions).unwrap());
            assert_eq!(serial.observations(), threaded.observations());
        }
    }

    #[test]
    fn wrong_action_count_is_an_error() {
        let mut env = ThreadedVecEnv::new(&EnvConfig::key_door(), 2, 0).unwrap();
        assert!(env.step(&[Action::Up]).is_err());
    }
}
