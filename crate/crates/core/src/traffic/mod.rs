//! Traffic traces: flows, correlation pairs, datasets, the on-disk trace
//! format and a synthetic class-conditional corpus.

mod dataset;
mod io;
mod pairs;
mod synth;

pub use dataset::{Dataset, Split, Splits};
pub use io::{load_traces, read_manifest, save_traces, write_manifest, DatasetManifest, TraceFormat};
pub use pairs::{make_pairs, rows, Connection, FlowPair, PAIR_ROWS};
pub use synth::{synth_connections, synth_corpus, ClassProfile, CELL_SIZE};

use serde::{Deserialize, Serialize};

use crate::nn::Tensor;
use crate::{Error, Result};

/// Default model input length at desk scale.
pub const DEFAULT_FIXED_LENGTH: usize = 500;

/// Feature rows of a flow tensor.
pub const DIR_ROW: usize = 0;
pub const IPD_ROW: usize = 1;
pub const SIZE_ROW: usize = 2;
pub const FLOW_CHANNELS: usize = 3;

/// One trace: per-packet direction (+1 outgoing, -1 incoming, 0 padding),
/// inter-packet delay in seconds and size in bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Flow {
    pub directions: Vec<i8>,
    pub ipds: Vec<f64>,
    pub sizes: Vec<u32>,
    pub label: usize,
}

impl Flow {
    pub fn new(directions: Vec<i8>, ipds: Vec<f64>, sizes: Vec<u32>, label: usize) -> Result<Self> {
        let flow = Self {
            directions,
            ipds,
            sizes,
            label,
        };
        flow.validate()?;
        Ok(flow)
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    /// Number of real (non-padding) packets.
    pub fn packet_count(&self) -> usize {
        self.directions.iter().filter(|d| **d != 0).count()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.directions.len();
        if self.ipds.len() != n || self.sizes.len() != n {
            return Err(Error::Validation(format!(
                "channel lengths differ: directions {n}, ipds {}, sizes {}",
                self.ipds.len(),
                self.sizes.len()
            )));
        }
        for i in 0..n {
            let d = self.directions[i];
            if !matches!(d, -1 | 0 | 1) {
                return Err(Error::Validation(format!("direction {d} at packet {i}")));
            }
            let t = self.ipds[i];
            if !(t >= 0.0) || !t.is_finite() {
                return Err(Error::Validation(format!("negative or non-finite ipd {t} at packet {i}")));
            }
            if d == 0 && (t != 0.0 || self.sizes[i] != 0) {
                return Err(Error::Validation(format!("padding slot {i} carries data")));
            }
        }
        Ok(())
    }

    /// Truncates to the first `length` packets or zero-pads up to `length`.
    pub fn to_fixed_length(&self, length: usize) -> Flow {
        assert!(length >= 1, "fixed length must be positive");
        let mut out = self.clone();
        out.directions.resize(length, 0);
        out.ipds.resize(length, 0.0);
        out.sizes.resize(length, 0);
        out
    }

    /// Three-row feature tensor `[directions; ipds; sizes]` at `length`.
    pub fn features(&self, length: usize) -> Tensor {
        let f = self.to_fixed_length(length);
        let mut t = Tensor::zeros(FLOW_CHANNELS, length);
        for i in 0..length {
            t.data[DIR_ROW * length + i] = f.directions[i] as f64;
            t.data[IPD_ROW * length + i] = f.ipds[i];
            t.data[SIZE_ROW * length + i] = f.sizes[i] as f64;
        }
        t
    }

    /// Rebuilds a flow from a (possibly perturbed) feature tensor. Directions
    /// are snapped to their sign, sizes rounded to whole bytes.
    pub fn from_features(t: &Tensor, label: usize) -> Result<Flow> {
        if t.channels != FLOW_CHANNELS {
            return Err(crate::error::shape_err(FLOW_CHANNELS, t.channels));
        }
        let mut directions = Vec::with_capacity(t.len);
        let mut ipds = Vec::with_capacity(t.len);
        let mut sizes = Vec::with_capacity(t.len);
        for i in 0..t.len {
            let d = t.row(DIR_ROW)[i];
            let d = if d > 0.0 {
                1
            } else if d < 0.0 {
                -1
            } else {
                0
            };
            directions.push(d);
            if d == 0 {
                ipds.push(0.0);
                sizes.push(0);
            } else {
                ipds.push(t.row(IPD_ROW)[i]);
                sizes.push(t.row(SIZE_ROW)[i].round().max(0.0) as u32);
            }
        }
        Flow::new(directions, ipds, sizes, label)
    }
}
