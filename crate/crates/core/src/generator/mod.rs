//! The blind perturbation generator G(z), the objective it is trained on and
//! the discriminator used to make timing perturbations look like jitter.
//!
//! A [`Perturbation`] is the raw generator output split into channel blocks.
//! [`Prepared`] applies the budget remapping once per perturbation and can
//! then perturb any number of flows and map classifier input gradients back
//! onto the blocks.

mod checkpoint;
mod config;
mod train;

pub use checkpoint::{load_generator, load_generator_for, save_generator};
pub use config::{AttackConfig, Channel, DestMode, Invisibility, SourceMode};
pub use train::{train_blind_perturbation, train_laplace_regularizer, AttackLog, AttackRun};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::shape_err;
use crate::models::Classifier;
use crate::nn::{bce_with_logit, sigmoid, Adam, LayerSpec, Sequential, Tensor};
use crate::remap::{insert_packets, SizeBudget, insertion_position_gradient, insertion_value_gradient, remap_size, size_gradient};
use crate::remap::{InsertSource, InsertionPlan, Origin, TimingDelta};
use crate::rng::{seeded, uniform_vec};
use crate::traffic::{rows, CELL_SIZE, DIR_ROW, FLOW_CHANNELS, IPD_ROW, PAIR_ROWS, SIZE_ROW};
use crate::{Error, Result};

pub const Z_DIM: usize = 64;
pub const HIDDEN: usize = 500;
pub const DISC_HIDDEN: usize = 1000;

/// Output scale of the injected-delay block, seconds.
const INJECTED_IPD_SCALE: f64 = 0.01;
/// Largest packet an injected size may take, bytes.
const MAX_PACKET: f64 = 1536.0;

/// Shape of the attacked feature array.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub pair: bool,
    pub length: usize,
}

impl Layout {
    pub fn of(model: &Classifier) -> Self {
        Self {
            pair: model.arch.is_pair(),
            length: model.input_length,
        }
    }

    pub fn rows(&self) -> usize {
        if self.pair {
            PAIR_ROWS
        } else {
            FLOW_CHANNELS
        }
    }

    fn timing_rows(&self) -> &'static [usize] {
        if self.pair {
            &rows::INGRESS_TIMING
        } else {
            &[IPD_ROW]
        }
    }

    fn size_rows(&self) -> &'static [usize] {
        if self.pair {
            &rows::INGRESS_SIZE
        } else {
            &[SIZE_ROW]
        }
    }

    /// Whether position `j` of feature row `r` holds a real packet.
    fn is_real(&self, x: &Tensor, r: usize, j: usize) -> bool {
        if self.pair {
            let size_row = if r < rows::S_IN_UP { r + rows::S_IN_UP } else { r };
            x.row(size_row)[j] > 0.0
        } else {
            x.row(DIR_ROW)[j] != 0.0
        }
    }
}

/// A channel's slice of the generator output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Block {
    pub channel: Channel,
    pub offset: usize,
    pub len: usize,
    /// Multiplier from network output to perturbation units.
    pub scale: f64,
}

const CHANNEL_ORDER: [Channel; 5] = [
    Channel::Timing,
    Channel::Size,
    Channel::DirectionInjection,
    Channel::TimingInjection,
    Channel::SizeInjection,
];

pub fn blocks(cfg: &AttackConfig, layout: Layout) -> Vec<Block> {
    let mut offset = 0;
    let mut out = Vec::new();
    for ch in CHANNEL_ORDER {
        if !cfg.has(ch) {
            continue;
        }
        let (len, scale) = match ch {
            Channel::Timing => (
                layout.timing_rows().len() * layout.length,
                cfg.timing.map_or(INJECTED_IPD_SCALE, |t| t.sigma),
            ),
            Channel::Size => (
                layout.size_rows().len() * layout.length,
                cfg.size.map_or(CELL_SIZE as f64, |s| s.per_packet),
            ),
            Channel::DirectionInjection => (layout.length, 1.0),
            Channel::TimingInjection => (layout.length, INJECTED_IPD_SCALE),
            Channel::SizeInjection => (layout.length, injected_cell(cfg)),
        };
        out.push(Block {
            channel: ch,
            offset,
            len,
            scale,
        });
        offset += len;
    }
    out
}

fn injected_cell(cfg: &AttackConfig) -> f64 {
    cfg.size.map_or(CELL_SIZE as f64, |s| s.cell)
}

/// Raw generator output, one vector per active channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub blocks: Vec<(Channel, Vec<f64>)>,
}

impl Perturbation {
    pub fn get(&self, c: Channel) -> Option<&[f64]> {
        self.blocks.iter().find(|(k, _)| *k == c).map(|(_, v)| v.as_slice())
    }

    pub fn flat(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|(_, v)| v.iter().copied()).collect()
    }

    pub fn l2_distance(&self, other: &Perturbation) -> f64 {
        self.flat()
            .iter()
            .zip(other.flat())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationGenerator {
    pub config: AttackConfig,
    pub layout: Layout,
    pub net: Sequential,
}

impl PerturbationGenerator {
    pub fn new<R: Rng + ?Sized>(config: AttackConfig, layout: Layout, rng: &mut R) -> Self {
        let out: usize = blocks(&config, layout).iter().map(|b| b.len).sum();
        let net = Sequential::new(
            (Z_DIM, 1),
            &[
                LayerSpec::Dense { outputs: HIDDEN },
                LayerSpec::Relu,
                LayerSpec::Dense { outputs: out },
            ],
            rng,
        );
        Self { config, layout, net }
    }

    pub fn blocks(&self) -> Vec<Block> {
        blocks(&self.config, self.layout)
    }

    pub fn trigger<R: Rng + ?Sized>(rng: &mut R) -> Vec<f64> {
        uniform_vec(rng, Z_DIM)
    }

    fn split(&self, out: &Tensor) -> Perturbation {
        Perturbation {
            blocks: self
                .blocks()
                .into_iter()
                .map(|b| (b.channel, out.data[b.offset..b.offset + b.len].iter().map(|v| v * b.scale).collect()))
                .collect(),
        }
    }

    pub fn generate(&self, z: &[f64]) -> Perturbation {
        self.split(&self.net.forward(&Tensor::vector(z.to_vec())))
    }

    pub(crate) fn generate_trace(&self, z: &[f64]) -> (Vec<Tensor>, Perturbation) {
        let acts = self.net.forward_trace(&Tensor::vector(z.to_vec()));
        let p = self.split(acts.last().unwrap());
        (acts, p)
    }

    /// The perturbation for the trigger drawn from `seed`.
    pub fn sample(&self, seed: u64) -> Perturbation {
        self.generate(&Self::trigger(&mut seeded(seed)))
    }

    /// Errors unless this generator was built for `cfg`'s channels and
    /// budgets on a target of this layout.
    pub fn check_compatible(&self, cfg: &AttackConfig, layout: Layout) -> Result<()> {
        let mut mine = self.config.channels.clone();
        let mut theirs = cfg.channels.clone();
        mine.sort();
        theirs.sort();
        if mine != theirs {
            return Err(Error::Config(format!("generator channels {mine:?} do not match experiment channels {theirs:?}")));
        }
        if self.layout != layout {
            return Err(Error::Config(format!("generator layout {:?} does not match target {layout:?}", self.layout)));
        }
        if self.config.timing != cfg.timing || self.config.size != cfg.size || self.config.insertion_count != cfg.insertion_count {
            return Err(Error::Config("generator budgets differ from the experiment's".into()));
        }
        Ok(())
    }
}

pub fn sample_perturbation(gen: &PerturbationGenerator, seed: u64) -> Perturbation {
    gen.sample(seed)
}

/// A perturbation with its budget remapping resolved, ready to apply to
/// flows of one layout.
pub struct Prepared {
    layout: Layout,
    blocks: Vec<Block>,
    timing: Option<TimingDelta>,
    size: Option<(SizeBudget, Vec<f64>)>,
    plan: Option<InsertionPlan>,
    sources: Vec<InsertSource>,
    timing_injection: bool,
    size_injection: bool,
}

/// One perturbed flow plus what the backward pass and overhead accounting
/// need.
#[derive(Clone, Debug)]
pub struct Applied {
    pub x: Tensor,
    /// Injected packets that survived truncation.
    pub injected: usize,
    pub added_bytes: f64,
    pub original_bytes: f64,
    /// Delay added to each real packet on a perturbed timing row.
    pub delays: Vec<f64>,
    /// Output slot `j` holds the insertion output's slot `order[j]`.
    order: Vec<usize>,
    timing_gate: Vec<bool>,
    size_mask: Vec<bool>,
}

impl Prepared {
    pub fn new(cfg: &AttackConfig, layout: Layout, p: &Perturbation) -> Result<Self> {
        let blocks = blocks(cfg, layout);
        for b in &blocks {
            let v = p.get(b.channel).ok_or_else(|| Error::Config(format!("perturbation lacks the {:?} block", b.channel)))?;
            if v.len() != b.len {
                return Err(shape_err(b.len, v.len()));
            }
        }
        let timing = match (cfg.has(Channel::Timing), cfg.timing) {
            (true, Some(budget)) => Some(TimingDelta::new(p.get(Channel::Timing).unwrap(), &budget)),
            _ => None,
        };
        let size = match (cfg.has(Channel::Size), cfg.size) {
            (true, Some(budget)) => Some((budget, p.get(Channel::Size).unwrap().to_vec())),
            _ => None,
        };
        let timing_injection = cfg.has(Channel::TimingInjection);
        let size_injection = cfg.has(Channel::SizeInjection);
        let (plan, sources) = if cfg.has(Channel::DirectionInjection) {
            let mut values = Vec::new();
            let mut sources = vec![InsertSource::Sign];
            if timing_injection {
                sources.push(InsertSource::Values(values.len()));
                values.push(p.get(Channel::TimingInjection).unwrap().iter().map(|v| v.max(0.0)).collect());
            } else {
                sources.push(InsertSource::Constant(0.0));
            }
            let cell = injected_cell(cfg);
            if size_injection {
                sources.push(InsertSource::Values(values.len()));
                let top = (MAX_PACKET / cell).floor().max(1.0);
                values.push(
                    p.get(Channel::SizeInjection)
                        .unwrap()
                        .iter()
                        .map(|v| cell * (v / cell).round().clamp(1.0, top))
                        .collect(),
                );
            } else {
                sources.push(InsertSource::Constant(cell));
            }
            let plan = InsertionPlan {
                position_scores: p.get(Channel::DirectionInjection).unwrap().to_vec(),
                value_vectors: values,
                count: cfg.insertion_count,
            };
            (Some(plan), sources)
        } else {
            (None, Vec::new())
        };
        Ok(Self {
            layout,
            blocks,
            timing,
            size,
            plan,
            sources,
            timing_injection,
            size_injection,
        })
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn apply(&self, x: &Tensor) -> Result<Applied> {
        let l = self.layout.length;
        if x.shape() != (self.layout.rows(), l) {
            return Err(Error::Shape {
                expected: format!("({}, {l})", self.layout.rows()),
                got: format!("{:?}", x.shape()),
            });
        }
        let original_bytes: f64 = self
            .layout
            .size_rows()
            .iter()
            .map(|&r| x.row(r).iter().sum::<f64>())
            .sum();
        let mut x = x.clone();
        let mut injected = 0;
        let order = match &self.plan {
            Some(plan) => {
                let ins = insert_packets(&[x.row(DIR_ROW), x.row(IPD_ROW), x.row(SIZE_ROW)], &self.sources, plan)?;
                // dummies placed past the end of a short flow join its tail
                let dirs = &ins.channels[0];
                let mut order: Vec<usize> = (0..l).filter(|&j| dirs[j] != 0.0).collect();
                order.extend((0..l).filter(|&j| dirs[j] == 0.0));
                for (c, row) in ins.channels.iter().enumerate() {
                    let dst = x.row_mut(c);
                    for j in 0..l {
                        dst[j] = row[order[j]];
                    }
                }
                injected = (0..l)
                    .filter(|&j| dirs[j] != 0.0 && matches!(ins.origin[j], Origin::Injected(_)))
                    .count();
                order
            }
            None => (0..l).collect(),
        };

        let mut delays = Vec::new();
        let mut timing_gate = Vec::new();
        if let Some(td) = &self.timing {
            let rows = self.layout.timing_rows();
            timing_gate = vec![false; rows.len() * l];
            for (k, &r) in rows.iter().enumerate() {
                for j in 0..l {
                    if !self.layout.is_real(&x, r, j) {
                        continue;
                    }
                    let old = x.row(r)[j];
                    let v = old + td.delta[k * l + j];
                    if v > 0.0 {
                        timing_gate[k * l + j] = true;
                        x.row_mut(r)[j] = v;
                    } else {
                        x.row_mut(r)[j] = 0.0;
                    }
                    delays.push(x.row(r)[j] - old);
                }
            }
        }

        let mut added_bytes = 0.0;
        let mut size_mask = Vec::new();
        if let Some((budget, a)) = &self.size {
            let rows = self.layout.size_rows();
            size_mask = vec![false; rows.len() * l];
            let mut cur = Vec::with_capacity(rows.len() * l);
            let mut scores = a.clone();
            for (k, &r) in rows.iter().enumerate() {
                for j in 0..l {
                    cur.push(x.row(r)[j]);
                    if self.layout.is_real(&x, r, j) {
                        size_mask[k * l + j] = true;
                    } else {
                        scores[k * l + j] = -1.0;
                    }
                }
            }
            let (out, added) = remap_size(&cur, &scores, budget)?;
            added_bytes = added.iter().sum();
            for (k, &r) in rows.iter().enumerate() {
                x.row_mut(r).copy_from_slice(&out[k * l..(k + 1) * l]);
            }
        }

        Ok(Applied {
            x,
            injected,
            added_bytes,
            original_bytes,
            delays,
            order,
            timing_gate,
            size_mask,
        })
    }

    /// Maps per-flow gradients w.r.t. the perturbed inputs onto the
    /// perturbation blocks (in block order, perturbation units).
    pub fn backward(&self, applied: &[Applied], grads: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        if applied.len() != grads.len() {
            return Err(shape_err(applied.len(), grads.len()));
        }
        if applied.is_empty() {
            return Err(Error::Empty("gradient batch".into()));
        }
        let l = self.layout.length;
        let mut out = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let g = match b.channel {
                Channel::Timing => {
                    let td = self.timing.as_ref().unwrap();
                    let rows = self.layout.timing_rows();
                    let per: Vec<Vec<f64>> = applied
                        .iter()
                        .zip(grads)
                        .map(|(a, dx)| gather(dx, rows, l, &a.timing_gate))
                        .collect();
                    td.backward(&size_gradient(&per)?)
                }
                Channel::Size => {
                    let rows = self.layout.size_rows();
                    let per: Vec<Vec<f64>> = applied
                        .iter()
                        .zip(grads)
                        .map(|(a, dx)| gather(dx, rows, l, &a.size_mask))
                        .collect();
                    size_gradient(&per)?
                }
                Channel::DirectionInjection => {
                    let per: Vec<Vec<Vec<f64>>> = applied
                        .iter()
                        .zip(grads)
                        .map(|(a, dx)| {
                            let chans = self.insertion_grads(a, dx);
                            let mut learned = vec![chans[0].clone()];
                            if self.timing_injection {
                                learned.push(chans[1].clone());
                            }
                            if self.size_injection {
                                learned.push(chans[2].clone());
                            }
                            learned
                        })
                        .collect();
                    insertion_position_gradient(&per)?
                }
                Channel::TimingInjection | Channel::SizeInjection => {
                    let c = if b.channel == Channel::TimingInjection { 1 } else { 2 };
                    let plan = self.plan.as_ref().unwrap();
                    let mut sum = vec![0.0; l];
                    for (a, dx) in applied.iter().zip(grads) {
                        let g = insertion_value_gradient(plan, &self.insertion_grads(a, dx)[c])?;
                        sum.iter_mut().zip(&g).for_each(|(s, v)| *s += v);
                    }
                    sum
                }
            };
            out.push(g);
        }
        Ok(out)
    }

    /// Gradients w.r.t. the three perturbed channels, pulled back through
    /// the timing/size remaps and the tail compaction, indexed by insertion
    /// position.
    fn insertion_grads(&self, a: &Applied, dx: &Tensor) -> [Vec<f64>; 3] {
        let l = self.layout.length;
        let mut g = [vec![0.0; l], vec![0.0; l], vec![0.0; l]];
        for j in 0..l {
            let src = a.order[j];
            g[0][src] = dx.row(DIR_ROW)[j];
            let gate = a.timing_gate.is_empty() || a.timing_gate[j] || a.x.row(DIR_ROW)[j] == 0.0;
            g[1][src] = if gate { dx.row(IPD_ROW)[j] } else { 0.0 };
            g[2][src] = dx.row(SIZE_ROW)[j];
        }
        // a packet inserted at original index i lands i + (earlier insertions)
        // slots later; read each score's gradient from that slot
        let plan = self.plan.as_ref().unwrap();
        let mut selected = vec![false; l];
        for p in plan.positions() {
            selected[p] = true;
        }
        let mut out = [vec![0.0; l], vec![0.0; l], vec![0.0; l]];
        let mut before = 0;
        for i in 0..l {
            let slot = i + before;
            if slot >= l {
                break;
            }
            for c in 0..3 {
                out[c][i] = g[c][slot];
            }
            if selected[i] {
                before += 1;
            }
        }
        out
    }
}

fn gather(dx: &Tensor, rows: &[usize], l: usize, mask: &[bool]) -> Vec<f64> {
    let mut v = vec![0.0; rows.len() * l];
    for (k, &r) in rows.iter().enumerate() {
        for j in 0..l {
            if mask[k * l + j] {
                v[k * l + j] = dx.row(r)[j];
            }
        }
    }
    v
}

/// Tells generated timing perturbations from reference Laplace samples.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub net: Sequential,
    /// Multiplier applied to inputs (seconds) before the first layer.
    pub input_scale: f64,
    opt: Adam,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(input_len: usize, input_scale: f64, learning_rate: f64, rng: &mut R) -> Self {
        let net = Sequential::new(
            (input_len, 1),
            &[
                LayerSpec::Dense { outputs: DISC_HIDDEN },
                LayerSpec::Relu,
                LayerSpec::Dense { outputs: DISC_HIDDEN },
                LayerSpec::Relu,
                LayerSpec::Dense { outputs: 1 },
            ],
            rng,
        );
        let opt = Adam::new(net.param_count(), learning_rate);
        Self { net, input_scale, opt }
    }

    fn input(&self, v: &[f64]) -> Tensor {
        Tensor::vector(v.iter().map(|x| x * self.input_scale).collect())
    }

    pub fn logit(&self, v: &[f64]) -> f64 {
        self.net.forward(&self.input(v)).data[0]
    }

    /// Probability that `v` came from the generator.
    pub fn prob(&self, v: &[f64]) -> f64 {
        sigmoid(self.logit(v))
    }

    /// One optimizer step on generated (label 1) vs reference (label 0)
    /// samples; returns the mean loss.
    pub fn train_step(&mut self, generated: &[Vec<f64>], reference: &[Vec<f64>]) -> f64 {
        let mut grad = vec![0.0; self.net.param_count()];
        let n = (generated.len() + reference.len()) as f64;
        let mut total = 0.0;
        for (set, y) in [(generated, 1.0), (reference, 0.0)] {
            for v in set {
                let acts = self.net.forward_trace(&self.input(v));
                let (loss, d) = bce_with_logit(acts.last().unwrap().data[0], y);
                total += loss;
                self.net.backward(&acts, Tensor::vector(vec![d / n]), Some(&mut grad), false);
            }
        }
        self.opt.step(&mut self.net.params, &grad);
        total / n
    }

    /// `R = -ln(1 - D(v))` and its gradient w.r.t. `v`.
    pub fn regularizer(&self, v: &[f64]) -> (f64, Vec<f64>) {
        let acts = self.net.forward_trace(&self.input(v));
        let (r, d) = bce_with_logit(acts.last().unwrap().data[0], 0.0);
        let dx = self.net.backward(&acts, Tensor::vector(vec![d]), None, true).unwrap();
        (r, dx.data.iter().map(|g| g * self.input_scale).collect())
    }

    /// Fraction of samples on the correct side of 0.5.
    pub fn accuracy(&self, generated: &[Vec<f64>], reference: &[Vec<f64>]) -> f64 {
        let hits = generated.iter().filter(|v| self.logit(v) > 0.0).count()
            + reference.iter().filter(|v| self.logit(v) <= 0.0).count();
        hits as f64 / (generated.len() + reference.len()).max(1) as f64
    }
}
