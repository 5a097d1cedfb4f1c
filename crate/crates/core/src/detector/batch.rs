//! Balanced batches of labeled crops, video triplets and multi-view quadruplets.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::rng::StreamKey;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchSpec {
    pub n_labeled: usize,
    pub n_triplets: usize,
    pub n_quadruplets: usize,
}

impl Default for BatchSpec {
    fn default() -> Self {
        BatchSpec {
            n_labeled: 32,
            n_triplets: 32,
            n_quadruplets: 16,
        }
    }
}

/// Three consecutive frames `start, start + 1, start + 2` of one view.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub view: usize,
    pub start: usize,
}

/// Distinct views of one timestamp; the first is the anchor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Quadruplet {
    pub frame: usize,
    pub views: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Batch {
    pub labeled: Vec<usize>,
    pub triplets: Vec<Triplet>,
    pub quadruplets: Vec<Quadruplet>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerState {
    pub pass: u64,
    pub cursor: usize,
}

/// Visits a pool in a fresh random order on every pass.
#[derive(Clone, Debug)]
pub struct PoolSampler {
    key: StreamKey,
    order: Vec<usize>,
    state: SamplerState,
}

impl PoolSampler {
    pub fn new(key: StreamKey, len: usize) -> Self {
        Self::restore(key, len, SamplerState { pass: 0, cursor: 0 })
    }

    pub fn restore(key: StreamKey, len: usize, state: SamplerState) -> Self {
        let mut s = PoolSampler {
            key,
            order: (0..len).collect(),
            state,
        };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        self.order.sort_unstable();
        self.order.shuffle(&mut self.key.indexed(self.state.pass).rng());
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn state(&self) -> SamplerState {
        self.state
    }

    pub fn next_index(&mut self) -> Option<usize> {
        if self.order.is_empty() {
            return None;
        }
        if self.state.cursor == self.order.len() {
            self.state.pass += 1;
            self.state.cursor = 0;
            self.shuffle();
        }
        let i = self.order[self.state.cursor];
        self.state.cursor += 1;
        Some(i)
    }
}

/// Number of views and frames in the unlabeled video.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VideoShape {
    pub views: usize,
    pub frames: usize,
}

impl VideoShape {
    pub fn triplet_count(&self) -> usize {
        self.views * self.frames.saturating_sub(2)
    }

    pub fn quadruplet_count(&self) -> usize {
        if self.views < 2 {
            0
        } else {
            self.views * self.frames
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSamplerState {
    pub labeled: SamplerState,
    pub triplets: SamplerState,
    pub quadruplets: SamplerState,
    pub quad_draws: u64,
}

/// One independent sampler per pool so that, for example, drawing triplets
/// never changes which labeled samples come next.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    labeled: PoolSampler,
    triplets: PoolSampler,
    quadruplets: PoolSampler,
    quad_key: StreamKey,
    quad_draws: u64,
    video: VideoShape,
}

impl BatchSampler {
    pub fn new(key: StreamKey, labeled_len: usize, video: VideoShape) -> Self {
        let fresh = SamplerState { pass: 0, cursor: 0 };
        Self::restore(
            key,
            labeled_len,
            video,
            BatchSamplerState {
                labeled: fresh,
                triplets: fresh,
                quadruplets: fresh,
                quad_draws: 0,
            },
        )
    }

    pub fn restore(key: StreamKey, labeled_len: usize, video: VideoShape, state: BatchSamplerState) -> Self {
        BatchSampler {
            labeled: PoolSampler::restore(key.named("labeled"), labeled_len, state.labeled),
            triplets: PoolSampler::restore(key.named("triplets"), video.triplet_count(), state.triplets),
            quadruplets: PoolSampler::restore(key.named("quadruplets"), video.quadruplet_count(), state.quadruplets),
            quad_key: key.named("quad-views"),
            quad_draws: state.quad_draws,
            video,
        }
    }

    pub fn state(&self) -> BatchSamplerState {
        BatchSamplerState {
            labeled: self.labeled.state(),
            triplets: self.triplets.state(),
            quadruplets: self.quadruplets.state(),
            quad_draws: self.quad_draws,
        }
    }

    pub fn next_batch(&mut self, spec: &BatchSpec) -> Result<Batch> {
        let mut batch = Batch::default();
        let need = |pool: &PoolSampler, n: usize, name: &'static str| {
            if n > 0 && pool.is_empty() {
                Err(Error::Config(format!("{name} requested but the pool is empty")))
            } else {
                Ok(())
            }
        };
        need(&self.labeled, spec.n_labeled, "labeled samples")?;
        need(&self.triplets, spec.n_triplets, "video triplets")?;
        need(&self.quadruplets, spec.n_quadruplets, "multi-view quadruplets")?;
        for _ in 0..spec.n_labeled {
            batch.labeled.extend(self.labeled.next_index());
        }
        let span = self.video.frames.saturating_sub(2);
        for _ in 0..spec.n_triplets {
            if let Some(i) = self.triplets.next_index() {
                batch.triplets.push(Triplet {
                    view: i / span,
                    start: i % span,
                });
            }
        }
        let m = self.video.views;
        for _ in 0..spec.n_quadruplets {
            if let Some(i) = self.quadruplets.next_index() {
                let (frame, anchor) = (i / m, i % m);
                let mut others: Vec<usize> = (0..m).filter(|&v| v != anchor).collect();
                others.shuffle(&mut self.quad_key.indexed(self.quad_draws).rng());
                self.quad_draws += 1;
                let mut views = vec![anchor];
                views.extend(others.into_iter().take(3));
                batch.quadruplets.push(Quadruplet { frame, views });
            }
        }
        Ok(batch)
    }
}
