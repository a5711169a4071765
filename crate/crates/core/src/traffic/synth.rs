//! Class-conditional synthetic traffic standing in for captured Tor traces.
//!
//! Each class owns a phase-dependent two-state Markov chain over packet
//! directions (so burst lengths differ by class and position), a Laplace
//! inter-packet-delay profile and a mixture over cell-multiple sizes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Connection, Dataset, Flow, Split, DEFAULT_FIXED_LENGTH};
use crate::rng::{derive_seed, laplace, seeded, SeededRng};

/// Tor cell size in bytes.
pub const CELL_SIZE: u32 = 512;
const SIZE_CELLS: [u32; 3] = [1, 2, 3];
const PHASES: usize = 8;
/// Laplace scale of the jitter between the two sides of a connection.
const NETWORK_JITTER: f64 = 0.002;
/// Per-trace relative variation of phase length.
const TEMPO_SPREAD: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    /// Per phase: probability the next packet keeps the outgoing / incoming
    /// direction.
    pub stay_out: Vec<f64>,
    pub stay_in: Vec<f64>,
    /// Per-phase multiplier of the delay location.
    pub ipd_phase: Vec<f64>,
    pub ipd_location: f64,
    pub ipd_scale: f64,
    pub size_weights: [f64; 3],
    pub phase_len: usize,
}

impl ClassProfile {
    pub fn random(rng: &mut SeededRng, max_len: usize) -> Self {
        let stay_out = (0..PHASES).map(|_| rng.gen_range(0.15..0.85)).collect();
        let stay_in = (0..PHASES).map(|_| rng.gen_range(0.45..0.95)).collect();
        let ipd_phase = (0..PHASES).map(|_| rng.gen_range(0.5..2.0)).collect();
        let w: [f64; 3] = [rng.gen_range(0.2..1.0), rng.gen_range(0.0..0.6), rng.gen_range(0.0..0.4)];
        let total: f64 = w.iter().sum();
        Self {
            stay_out,
            stay_in,
            ipd_phase,
            ipd_location: rng.gen_range(0.004..0.02),
            ipd_scale: rng.gen_range(0.001..0.006),
            size_weights: w.map(|x| x / total),
            phase_len: (max_len / PHASES).max(1),
        }
    }

    pub fn sample(&self, rng: &mut SeededRng, len: usize, label: usize) -> Flow {
        let mut directions = Vec::with_capacity(len);
        let mut ipds = Vec::with_capacity(len);
        let mut sizes = Vec::with_capacity(len);
        let mut dir: i8 = 1;
        let tempo = rng.gen_range(1.0 - TEMPO_SPREAD..=1.0 + TEMPO_SPREAD);
        let phase_len = ((self.phase_len as f64 * tempo).round() as usize).max(1);
        for i in 0..len {
            let phase = (i / phase_len).min(PHASES - 1);
            if i > 0 {
                let stay = if dir > 0 { self.stay_out[phase] } else { self.stay_in[phase] };
                if rng.gen::<f64>() >= stay {
                    dir = -dir;
                }
            }
            directions.push(dir);
            let t = if i == 0 {
                0.0
            } else {
                (self.ipd_location * self.ipd_phase[phase] + laplace(rng, 0.0, self.ipd_scale)).abs()
            };
            ipds.push(quantize_us(t));
            let u: f64 = rng.gen();
            let cell = if u < self.size_weights[0] {
                SIZE_CELLS[0]
            } else if u < self.size_weights[0] + self.size_weights[1] {
                SIZE_CELLS[1]
            } else {
                SIZE_CELLS[2]
            };
            sizes.push(cell * CELL_SIZE);
        }
        Flow {
            directions,
            ipds,
            sizes,
            label,
        }
    }
}

fn quantize_us(t: f64) -> f64 {
    (t * 1e6).round() / 1e6
}

fn profiles(class_count: usize, max_len: usize, seed: u64) -> Vec<ClassProfile> {
    let mut rng = seeded(derive_seed(seed, 0xC1A55));
    (0..class_count).map(|_| ClassProfile::random(&mut rng, max_len)).collect()
}

/// `per_class` traces for each of `class_count` classes, lengths uniform in
/// `length_range` (inclusive). Pure in its arguments.
pub fn synth_corpus(class_count: usize, per_class: usize, length_range: (usize, usize), seed: u64) -> Dataset {
    assert!(class_count >= 2 && per_class >= 2, "need at least 2 classes and 2 traces per class");
    assert!(length_range.0 >= 1 && length_range.0 <= length_range.1);
    let profs = profiles(class_count, length_range.1, seed);
    let mut rng = seeded(derive_seed(seed, 0xF10E));
    let mut samples = Vec::with_capacity(class_count * per_class);
    for _ in 0..per_class {
        for (label, p) in profs.iter().enumerate() {
            let len = rng.gen_range(length_range.0..=length_range.1);
            samples.push(p.sample(&mut rng, len, label));
        }
    }
    Dataset {
        samples,
        split: Split::Train,
        fixed_length: DEFAULT_FIXED_LENGTH,
        class_count,
    }
}

/// `count` connections observed at both ends. The egress side replays the
/// ingress packets with Laplace network jitter added to every delay.
pub fn synth_connections(count: usize, length_range: (usize, usize), fixed_length: usize, seed: u64) -> Dataset<Connection> {
    const PROFILE_COUNT: usize = 16;
    let profs = profiles(PROFILE_COUNT, length_range.1, seed);
    let mut rng = seeded(derive_seed(seed, 0xC044));
    let samples = (0..count)
        .map(|_| {
            let label = rng.gen_range(0..PROFILE_COUNT);
            let len = rng.gen_range(length_range.0..=length_range.1);
            let ingress = profs[label].sample(&mut rng, len, label);
            let mut egress = ingress.clone();
            for t in egress.ipds.iter_mut().skip(1) {
                *t = quantize_us((*t + laplace(&mut rng, 0.0, NETWORK_JITTER)).max(0.0));
            }
            Connection { ingress, egress }
        })
        .collect();
    Dataset {
        samples,
        split: Split::Train,
        fixed_length,
        class_count: PROFILE_COUNT,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_counts_and_labels() {
        let ds = synth_corpus(10, 20, (50, 80), 1);
        assert_eq!(ds.len(), 200);
        let mut labels = ds.labels();
        labels.sort();
        labels.dedup();
        assert_eq!(labels, (0..10).collect::<Vec<_>>());
        for f in &ds.samples {
            f.validate().unwrap();
            assert!((50..=80).contains(&f.len()));
        }
    }

    #[test]
    fn corpus_is_deterministic() {
        assert_eq!(synth_corpus(3, 5, (20, 30), 4), synth_corpus(3, 5, (20, 30), 4));
        assert_ne!(synth_corpus(3, 5, (20, 30), 4), synth_corpus(3, 5, (20, 30), 5));
    }

    #[test]
    fn connections_share_directions_and_sizes() {
        let ds = synth_connections(5, (30, 40), 32, 2);
        for c in &ds.samples {
            assert_eq!(c.ingress.directions, c.egress.directions);
            assert_eq!(c.ingress.sizes, c.egress.sizes);
            c.egress.validate().unwrap();
        }
    }
}
