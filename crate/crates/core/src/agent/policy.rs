use alloc::vec::Vec;

use rand::Rng;

use crate::diff::{Bound, LayerSpec, Sequential, Tape, Tensor, Var};
use crate::env::Action;
use crate::error::{Error, Result};
use crate::nets::{conv_stack, flat_features, relu_gains, HIDDEN, SMALL_CHANNELS};
use crate::seed::derive_seed;

/// Shared conv trunk with separate policy and value heads.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    pub(super) trunk: Sequential,
    pub(super) policy_head: Sequential,
    pub(super) value_head: Sequential,
}

/// Tape handles from one forward pass.
#[derive(Debug, Clone)]
pub struct PolicyVars {
    /// `[n, actions]` log-probabilities.
    pub log_probs: Var,
    /// `[n]` state values.
    pub values: Var,
    pub(super) bounds: [Bound; 3],
}

/// Sampled actions with their collection-time statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ActOutput {
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
}

impl PolicyNet {
    pub fn new(obs_shape: [usize; 3], seed: u64) -> Result<Self> {
        let mut specs = conv_stack(obs_shape[0], SMALL_CHANNELS);
        let flat = flat_features(&obs_shape, &specs)?;
        specs.push(LayerSpec::Dense {
            inputs: flat,
            outputs: HIDDEN,
        });
        specs.push(LayerSpec::Relu);
        let trunk = Sequential::new(&obs_shape, &specs, &relu_gains(&specs), derive_seed(seed, 0))?;
        let head = |outputs: usize, gain: f64, tag: u64| {
            Sequential::new(
                &[HIDDEN],
                &[LayerSpec::Dense {
                    inputs: HIDDEN,
                    outputs,
                }],
                &[gain],
                derive_seed(seed, tag),
            )
        };
        Ok(PolicyNet {
            trunk,
            policy_head: head(Action::COUNT, 0.01, 1)?,
            value_head: head(1, 1.0, 2)?,
        })
    }

    pub fn obs_shape(&self) -> [usize; 3] {
        let s = self.trunk.input_shape();
        [s[0], s[1], s[2]]
    }

    /// `(name, net)` pairs, in checkpoint order.
    pub fn parts(&self) -> [(&'static str, &Sequential); 3] {
        [
            ("trunk", &self.trunk),
            ("policy_head", &self.policy_head),
            ("value_head", &self.value_head),
        ]
    }

    pub fn parts_mut(&mut self) -> [&mut Sequential; 3] {
        [&mut self.trunk, &mut self.policy_head, &mut self.value_head]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, trainable: bool) -> Result<PolicyVars> {
        let bt = self.trunk.bind(tape, trainable);
        let bp = self.policy_head.bind(tape, trainable);
        let bv = self.value_head.bind(tape, trainable);
        let h = self.trunk.forward(tape, &bt, x)?;
        let logits = self.policy_head.forward(tape, &bp, h)?;
        let log_probs = tape.log_softmax(logits)?;
        let v = self.value_head.forward(tape, &bv, h)?;
        let n = tape.shape(v)[0];
        let values = tape.reshape(v, &[n])?;
        Ok(PolicyVars {
            log_probs,
            values,
            bounds: [bt, bp, bv],
        })
    }

    /// Log-probabilities `[n, actions]` and values `[n]` without tracking.
    pub fn evaluate(&self, obs: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let x = tape.leaf(obs);
        let out = self.forward(&mut tape, x, false)?;
        Ok((tape.tensor(out.log_probs), tape.tensor(out.values)))
    }

    /// Samples one action per row by inverting the categorical CDF with a
    /// single uniform draw.
    pub fn act(&self, obs: &Tensor, rng: &mut impl Rng) -> Result<ActOutput> {
        let (log_probs, values) = self.evaluate(obs)?;
        let m = Action::COUNT;
        let mut actions = Vec::with_capacity(values.len());
        let mut chosen = Vec::with_capacity(values.len());
        for row in log_probs.data().chunks_exact(m) {
            let u: f64 = rng.random();
            let mut cum = 0.0;
            let mut pick = m - 1;
            for (a, lp) in row.iter().enumerate() {
                cum += libm::exp(*lp);
                if u < cum {
                    pick = a;
                    break;
                }
            }
            if !row[pick].is_finite() {
                return Err(Error::NonFinite { op: "policy_logits" });
            }
            actions.push(pick);
            chosen.push(row[pick]);
        }
        Ok(ActOutput {
            actions,
            log_probs: chosen,
            values: values.into_data(),
        })
    }

    pub fn num_params(&self) -> usize {
        self.parts().iter().map(|(_, n)| n.num_params()).sum()
    }
}
