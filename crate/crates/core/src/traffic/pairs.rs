use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::{Dataset, Flow};
use crate::nn::Tensor;
use crate::rng::seeded;
use crate::{Error, Result};

pub const PAIR_ROWS: usize = 8;

/// Row layout of a pair array: upstream then downstream delays, then
/// upstream and downstream sizes; within each, ingress flow before egress.
pub mod rows {
    pub const T_IN_UP: usize = 0;
    pub const T_OUT_UP: usize = 1;
    pub const T_IN_DOWN: usize = 2;
    pub const T_OUT_DOWN: usize = 3;
    pub const S_IN_UP: usize = 4;
    pub const S_OUT_UP: usize = 5;
    pub const S_IN_DOWN: usize = 6;
    pub const S_OUT_DOWN: usize = 7;

    pub const TIMING: [usize; 4] = [T_IN_UP, T_OUT_UP, T_IN_DOWN, T_OUT_DOWN];
    /// Rows an on-path adversary at the ingress side can modify.
    pub const INGRESS_TIMING: [usize; 2] = [T_IN_UP, T_IN_DOWN];
    pub const INGRESS_SIZE: [usize; 2] = [S_IN_UP, S_IN_DOWN];
}

/// The two observations of one end-to-end connection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Connection {
    pub ingress: Flow,
    pub egress: Flow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowPair {
    pub rows: Vec<Vec<f64>>,
    /// 1 when both sides belong to the same connection.
    pub label: u8,
    pub ingress: usize,
    pub egress: usize,
}

/// Per-direction delays (time since the previous packet in the same
/// direction, first one measured from flow start) and sizes.
fn one_way(flow: &Flow, dir: i8) -> (Vec<f64>, Vec<f64>) {
    let mut clock = 0.0;
    let mut last = 0.0;
    let mut ipds = Vec::new();
    let mut sizes = Vec::new();
    for i in 0..flow.len() {
        clock += flow.ipds[i];
        if flow.directions[i] == dir {
            ipds.push(clock - last);
            sizes.push(flow.sizes[i] as f64);
            last = clock;
        }
    }
    (ipds, sizes)
}

fn fit(mut v: Vec<f64>, length: usize) -> Vec<f64> {
    v.resize(length, 0.0);
    v
}

impl FlowPair {
    pub fn from_flows(ingress: &Flow, egress: &Flow, length: usize, label: u8) -> Self {
        let (ti_u, si_u) = one_way(ingress, 1);
        let (ti_d, si_d) = one_way(ingress, -1);
        let (te_u, se_u) = one_way(egress, 1);
        let (te_d, se_d) = one_way(egress, -1);
        let rows = [ti_u, te_u, ti_d, te_d, si_u, se_u, si_d, se_d]
            .into_iter()
            .map(|r| fit(r, length))
            .collect();
        Self {
            rows,
            label,
            ingress: 0,
            egress: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.len() != PAIR_ROWS {
            return Err(Error::Validation(format!("pair has {} rows, expected 8", self.rows.len())));
        }
        let n = self.len();
        for (r, row) in self.rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Validation(format!("pair row {r} has length {}, expected {n}", row.len())));
            }
            for &v in row {
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(Error::Validation(format!("pair row {r} holds {v}")));
                }
                if r >= rows::S_IN_UP && v.fract() != 0.0 {
                    return Err(Error::Validation(format!("size row {r} holds fractional {v}")));
                }
            }
        }
        if self.label > 1 {
            return Err(Error::Validation(format!("pair label {}", self.label)));
        }
        Ok(())
    }

    pub fn features(&self) -> Tensor {
        Tensor::from_rows(&self.rows)
    }
}

/// One associated pair per connection plus `negatives_per_flow` pairs whose
/// egress side is drawn, without replacement, from other connections.
pub fn make_pairs(conns: &Dataset<Connection>, negatives_per_flow: usize, seed: u64) -> Result<Dataset<FlowPair>> {
    let n = conns.len();
    if n > 0 && negatives_per_flow >= n {
        return Err(Error::Config(format!(
            "negatives_per_flow {negatives_per_flow} needs more than {n} connections"
        )));
    }
    let mut rng = seeded(seed);
    let length = conns.fixed_length;
    let mut pairs = Vec::with_capacity(n * (1 + negatives_per_flow));
    for (i, c) in conns.samples.iter().enumerate() {
        let mut p = FlowPair::from_flows(&c.ingress, &c.egress, length, 1);
        p.ingress = i;
        p.egress = i;
        pairs.push(p);
        if negatives_per_flow == 0 {
            continue;
        }
        for k in index::sample(&mut rng, n - 1, negatives_per_flow).into_iter() {
            let j = if k >= i { k + 1 } else { k };
            let mut p = FlowPair::from_flows(&c.ingress, &conns.samples[j].egress, length, 0);
            p.ingress = i;
            p.egress = j;
            pairs.push(p);
        }
    }
    Ok(Dataset {
        samples: pairs,
        split: conns.split,
        fixed_length: length,
        class_count: 2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traffic::synth_connections;
    use std::collections::HashSet;

    #[test]
    fn counts_positive_and_negative_pairs() {
        let conns = synth_connections(10, (40, 60), 20, 1);
        let ds = make_pairs(&conns, 1, 3).unwrap();
        assert_eq!(ds.len(), 20);
        assert_eq!(ds.samples.iter().filter(|p| p.label == 1).count(), 10);
        let only_pos = make_pairs(&conns, 0, 3).unwrap();
        assert_eq!(only_pos.len(), 10);
        assert!(only_pos.samples.iter().all(|p| p.label == 1));
    }

    #[test]
    fn too_many_negatives_is_an_error() {
        let conns = synth_connections(5, (40, 60), 20, 1);
        assert!(make_pairs(&conns, 5, 3).is_err());
        assert!(make_pairs(&conns, 4, 3).is_ok());
    }

    #[test]
    fn pairing_is_reproducible_and_duplicate_free() {
        let conns = synth_connections(12, (40, 60), 20, 2);
        let ids = |seed| {
            make_pairs(&conns, 4, seed)
                .unwrap()
                .samples
                .iter()
                .map(|p| (p.ingress, p.egress, p.label))
                .collect::<Vec<_>>()
        };
        let a = ids(7);
        assert_eq!(a, ids(7));
        let uniq: HashSet<_> = a.iter().map(|(i, e, _)| (*i, *e)).collect();
        assert_eq!(uniq.len(), a.len());
        assert!(a.iter().all(|(i, e, l)| (*l == 1) == (i == e)));
    }

    #[test]
    fn pair_rows_are_valid() {
        let conns = synth_connections(6, (40, 60), 32, 4);
        for p in make_pairs(&conns, 2, 0).unwrap().samples {
            p.validate().unwrap();
            assert_eq!(p.len(), 32);
        }
    }

    #[test]
    fn one_way_delays_sum_to_last_packet_time() {
        let f = Flow::new(vec![1, -1, -1, 1], vec![0.0, 0.1, 0.2, 0.3], vec![1, 2, 3, 4], 0).unwrap();
        let (up, su) = one_way(&f, 1);
        let (down, sd) = one_way(&f, -1);
        assert_eq!(su, vec![1.0, 4.0]);
        assert_eq!(sd, vec![2.0, 3.0]);
        assert!((up[0] - 0.0).abs() < 1e-12 && (up[1] - 0.6).abs() < 1e-12);
        assert!((down[0] - 0.1).abs() < 1e-12 && (down[1] - 0.2).abs() < 1e-12);
    }
}
