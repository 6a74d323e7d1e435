//! Named, replayable random streams.
//!
//! Every subsystem draws from its own ChaCha8 stream keyed by `(seed, stream
//! id)`. ChaCha is counter based, so a stream's position is a single 128-bit
//! word counter that can be saved and restored exactly.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Independent draw streams used by training and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum StreamId {
    Data,
    Noise,
    Init,
    Region,
    Candidates,
    Eval,
    Holdout,
    Dataset,
}

impl StreamId {
    pub const ALL: [StreamId; 8] = [
        StreamId::Data,
        StreamId::Noise,
        StreamId::Init,
        StreamId::Region,
        StreamId::Candidates,
        StreamId::Eval,
        StreamId::Holdout,
        StreamId::Dataset,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StreamId::Data => "data",
            StreamId::Noise => "noise",
            StreamId::Init => "init",
            StreamId::Region => "region",
            StreamId::Candidates => "candidates",
            StreamId::Eval => "eval",
            StreamId::Holdout => "holdout",
            StreamId::Dataset => "dataset",
        }
    }

    fn index(self) -> u64 {
        match self {
            StreamId::Data => 1,
            StreamId::Noise => 2,
            StreamId::Init => 3,
            StreamId::Region => 4,
            StreamId::Candidates => 5,
            StreamId::Eval => 6,
            StreamId::Holdout => 7,
            StreamId::Dataset => 8,
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }
}

/// Open stream `id` for `seed` at position zero.
pub fn stream(seed: u64, id: StreamId) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id.index());
    rng
}

/// The full set of training streams for one run.
#[derive(Debug, Clone)]
pub struct Streams {
    seed: u64,
    rngs: BTreeMap<StreamId, ChaCha8Rng>,
}

/// Serializable stream positions; word positions are stored as decimal
/// strings because they are 128-bit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamState {
    pub seed: u64,
    pub positions: BTreeMap<String, String>,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        let rngs = StreamId::ALL
            .into_iter()
            .map(|id| (id, stream(seed, id)))
            .collect();
        Streams { seed, rngs }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn get(&mut self, id: StreamId) -> &mut ChaCha8Rng {
        self.rngs
            .get_mut(&id)
            .expect("all streams are created up front")
    }

    pub fn state(&self) -> StreamState {
        StreamState {
            seed: self.seed,
            positions: self
                .rngs
                .iter()
                .map(|(id, rng)| (id.name().to_string(), rng.get_word_pos().to_string()))
                .collect(),
        }
    }

    pub fn restore(state: &StreamState) -> Result<Self> {
        let mut streams = Streams::new(state.seed);
        for (name, pos) in &state.positions {
            let id = StreamId::from_name(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown rng stream '{name}'")))?;
            let pos: u128 = pos
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad word position for stream '{name}'")))?;
            streams.get(id).set_word_pos(pos);
        }
        Ok(streams)
    }
}
