//! Bounded transition store with three sampling regimes.
//!
//! Offline and online items are kept in separate FIFO queues. Preloading
//! must happen before any push, so offline items are always older than
//! online ones and "oldest overall" is the front of the offline queue while
//! it is nonempty.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::datasets::{OfflineDataset, Provenance, Transition};
use crate::numerics::{RealArray, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Regime {
    /// Offline data preloaded, then everything sampled uniformly.
    PreloadUniform,
    /// No offline data during finetuning.
    OnlineOnly,
    /// A fraction `ratio` of every batch comes from offline data.
    FixedRatio { ratio: f64 },
}

impl Regime {
    pub fn preloads(&self) -> bool {
        !matches!(self, Regime::OnlineOnly)
    }

    pub fn name(&self) -> String {
        match self {
            Regime::PreloadUniform => "preload_uniform".into(),
            Regime::OnlineOnly => "online_only".into(),
            Regime::FixedRatio { ratio } => format!("fixed_ratio_{ratio}"),
        }
    }
}

/// A sampled mini-batch laid out for the networks.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub states: RealArray,
    pub actions: RealArray,
    pub rewards: Vec<f64>,
    pub next_states: RealArray,
    /// `1 - terminal` per row.
    pub not_done: Vec<f64>,
    pub offline_count: usize,
}

impl Batch {
    pub fn from_transitions(items: &[&Transition]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let (sd, ad) = (first.state.len(), first.action.len());
        let n = items.len();
        let mut states = Vec::with_capacity(n * sd);
        let mut actions = Vec::with_capacity(n * ad);
        let mut next_states = Vec::with_capacity(n * sd);
        let mut rewards = Vec::with_capacity(n);
        let mut not_done = Vec::with_capacity(n);
        let mut offline_count = 0;
        for t in items {
            states.extend_from_slice(&t.state);
            actions.extend_from_slice(&t.action);
            next_states.extend_from_slice(&t.next_state);
            rewards.push(t.reward);
            not_done.push(if t.terminal { 0.0 } else { 1.0 });
            offline_count += (t.provenance == Provenance::Offline) as usize;
        }
        Ok(Self {
            states: RealArray::from_vec(&[n, sd], states)?,
            actions: RealArray::from_vec(&[n, ad], actions)?,
            rewards,
            next_states: RealArray::from_vec(&[n, sd], next_states)?,
            not_done,
            offline_count,
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    min_size: usize,
    regime: Regime,
    offline: VecDeque<Transition>,
    online: VecDeque<Transition>,
    preloaded: bool,
    dims: Option<(usize, usize)>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, min_size: usize, regime: Regime) -> Result<Self> {
        if min_size == 0 || min_size > capacity {
            return Err(Error::InvalidArgument(format!(
                "need 0 < min_size ({min_size}) <= capacity ({capacity})"
            )));
        }
        if let Regime::FixedRatio { ratio } = regime {
            if !(0.0..=1.0).contains(&ratio) {
                return Err(Error::InvalidArgument(format!("ratio {ratio} outside [0, 1]")));
            }
        }
        Ok(Self {
            capacity,
            min_size,
            regime,
            offline: VecDeque::new(),
            online: VecDeque::new(),
            preloaded: false,
            dims: None,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn min_size(&self) -> usize {
        self.min_size
    }

    pub fn regime(&self) -> Regime {
        self.regime
    }

    pub fn len(&self) -> usize {
        self.offline.len() + self.online.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn offline_len(&self) -> usize {
        self.offline.len()
    }

    pub fn online_len(&self) -> usize {
        self.online.len()
    }

    /// Items oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.offline.iter().chain(self.online.iter())
    }

    fn check_dims(&mut self, t: &Transition) -> Result<()> {
        let d = (t.state.len(), t.action.len());
        match self.dims {
            None => {
                self.dims = Some(d);
                Ok(())
            }
            Some(expected) if expected == d && t.next_state.len() == d.0 => Ok(()),
            Some(expected) => Err(Error::ShapeMismatch {
                expected: vec![expected.0, expected.1, expected.0],
                actual: vec![t.state.len(), t.action.len(), t.next_state.len()],
            }),
        }
    }

    /// Inserts a dataset with offline provenance, keeping the most recent
    /// `capacity` items when it does not fit.
    pub fn preload(&mut self, dataset: &OfflineDataset) -> Result<()> {
        if !self.regime.preloads() {
            return Err(Error::Replay("preload is not allowed under OnlineOnly".into()));
        }
        if self.preloaded || !self.is_empty() {
            return Err(Error::Replay("buffer can only be preloaded once, before any push".into()));
        }
        let skip = dataset.transitions.len().saturating_sub(self.capacity);
        for t in &dataset.transitions[skip..] {
            let mut t = t.clone();
            t.provenance = Provenance::Offline;
            self.check_dims(&t)?;
            self.offline.push_back(t);
        }
        self.preloaded = true;
        Ok(())
    }

    /// Inserts a transition with online provenance.
    pub fn push(&mut self, mut t: Transition) -> Result<()> {
        self.check_dims(&t)?;
        t.provenance = Provenance::Online;
        if self.len() == self.capacity {
            match self.regime {
                Regime::FixedRatio { .. } => {
                    if self.online.pop_front().is_none() {
                        return Err(Error::Replay(
                            "buffer is full of offline items; FixedRatio never evicts them".into(),
                        ));
                    }
                }
                _ => {
                    if self.offline.pop_front().is_none() {
                        self.online.pop_front();
                    }
                }
            }
        }
        self.online.push_back(t);
        Ok(())
    }

    /// Whether [`ReplayBuffer::sample`] may be called.
    pub fn is_ready(&self) -> bool {
        match self.regime {
            Regime::OnlineOnly => self.len() >= self.min_size,
            _ => self.len() >= self.min_size || (self.preloaded && !self.is_empty()),
        }
    }

    fn get(&self, i: usize) -> &Transition {
        if i < self.offline.len() {
            &self.offline[i]
        } else {
            &self.online[i - self.offline.len()]
        }
    }

    /// Draws `batch_size` items with replacement. Never mutates the buffer.
    pub fn sample(&self, batch_size: usize, rng: &mut Rng) -> Result<Vec<&Transition>> {
        if !self.is_ready() {
            return Err(Error::Replay(format!(
                "buffer holds {} items, below min_size {}",
                self.len(),
                self.min_size
            )));
        }
        let mut out = Vec::with_capacity(batch_size);
        match self.regime {
            Regime::FixedRatio { ratio } => {
                let n_off = Self::offline_draws(ratio, batch_size);
                let n_on = batch_size - n_off;
                if (n_off > 0 && self.offline.is_empty()) || (n_on > 0 && self.online.is_empty()) {
                    return Err(Error::Replay(format!(
                        "FixedRatio needs {n_off} offline and {n_on} online draws but holds {} and {}",
                        self.offline.len(),
                        self.online.len()
                    )));
                }
                for _ in 0..n_off {
                    out.push(&self.offline[rng.index(self.offline.len())]);
                }
                for _ in 0..n_on {
                    out.push(&self.online[rng.index(self.online.len())]);
                }
            }
            _ => {
                let n = self.len();
                for _ in 0..batch_size {
                    out.push(self.get(rng.index(n)));
                }
            }
        }
        Ok(out)
    }

    /// Number of offline draws per FixedRatio batch.
    pub fn offline_draws(ratio: f64, batch_size: usize) -> usize {
        ((ratio * batch_size as f64).round() as usize).min(batch_size)
    }

    pub fn sample_batch(&self, batch_size: usize, rng: &mut Rng) -> Result<Batch> {
        Batch::from_transitions(&self.sample(batch_size, rng)?)
    }
}
