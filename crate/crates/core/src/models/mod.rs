//! Desk-scale replicas of the attacked traffic classifiers.
//!
//! * `DirectionCnn`: two conv blocks and a dense head over packet directions.
//! * `TwoBranch`: one conv branch each for directions and delays, merged by a
//!   dense head.
//! * `PairCnn`: a shared first conv over the four ingress/egress row pairs of
//!   a flow-pair array, a second conv across all of them and a sigmoid score.

mod checkpoint;
mod train;

pub use checkpoint::{load_classifier, save_classifier};
pub(crate) use train::calibrate_pair;
pub use train::{accuracy, train_classifier, Sample, TrainConfig, TrainReport, Trainer};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::shape_err;
use crate::nn::{argmax, bce_with_logit, sigmoid, softmax, softmax_cross_entropy, LayerSpec, Sequential, Tensor};
use crate::traffic::{DIR_ROW, FLOW_CHANNELS, IPD_ROW, PAIR_ROWS};
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    DirectionCnn,
    PairCnn,
    #[serde(rename = "twobranch")]
    TwoBranch,
}

impl Arch {
    /// Rows of the feature tensor the architecture consumes.
    pub fn input_channels(self) -> usize {
        match self {
            Arch::PairCnn => PAIR_ROWS,
            _ => FLOW_CHANNELS,
        }
    }

    pub fn is_pair(self) -> bool {
        self == Arch::PairCnn
    }
}

impl std::str::FromStr for Arch {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direction_cnn" => Ok(Arch::DirectionCnn),
            "pair_cnn" => Ok(Arch::PairCnn),
            "twobranch" | "two_branch" => Ok(Arch::TwoBranch),
            other => Err(crate::Error::Config(format!("unknown architecture `{other}`"))),
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::DirectionCnn => "direction_cnn",
            Arch::PairCnn => "pair_cnn",
            Arch::TwoBranch => "twobranch",
        })
    }
}

/// Layer widths; the same tag can be instantiated at different widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchParams {
    pub conv1: usize,
    pub kernel1: usize,
    pub conv2: usize,
    pub kernel2: usize,
    pub pool: usize,
    pub hidden: usize,
}

impl ArchParams {
    pub fn default_for(arch: Arch) -> Self {
        match arch {
            Arch::DirectionCnn => Self {
                conv1: 8,
                kernel1: 8,
                conv2: 16,
                kernel2: 8,
                pool: 4,
                hidden: 64,
            },
            Arch::TwoBranch => Self {
                conv1: 8,
                kernel1: 8,
                conv2: 8,
                kernel2: 8,
                pool: 4,
                hidden: 64,
            },
            Arch::PairCnn => Self {
                conv1: 8,
                kernel1: 10,
                conv2: 16,
                kernel2: 5,
                pool: 2,
                hidden: 64,
            },
        }
    }
}

/// Fixed input normalisation: delays are in seconds, sizes in bytes.
const TIMING_SCALE: f64 = 50.0;
const SIZE_SCALE: f64 = 1.0 / 1536.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub arch: Arch,
    pub params: ArchParams,
    pub input_length: usize,
    /// Number of classes; 2 for the pair scorer.
    pub class_count: usize,
    /// Per feature-row multiplier applied before the first layer.
    pub input_scale: Vec<f64>,
    pub nets: Vec<Sequential>,
    /// Pair decision threshold picked on validation negatives.
    pub threshold: Option<f64>,
}

/// Activations kept from a forward pass for backpropagation.
pub struct ForwardTrace {
    /// One trace per sub-network invocation, in call order.
    calls: Vec<Vec<Tensor>>,
    pub logits: Vec<f64>,
}

/// Parameter gradients, one buffer per sub-network.
#[derive(Clone, Debug)]
pub struct Grads(pub Vec<Vec<f64>>);

impl Grads {
    pub fn zeros_like(model: &Classifier) -> Self {
        Grads(model.nets.iter().map(|n| vec![0.0; n.param_count()]).collect())
    }

    pub fn add_scaled(&mut self, other: &Grads, k: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += k * y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.0.iter_mut().flatten().for_each(|v| *v *= k);
    }
}

fn conv_block(p: &ArchParams, out_channels: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv1d {
            out_channels: p.conv1,
            kernel: p.kernel1,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool { size: p.pool },
        LayerSpec::Conv1d {
            out_channels,
            kernel: p.kernel2,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool { size: p.pool },
    ]
}

fn head(p: &ArchParams, outputs: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Dense { outputs: p.hidden },
        LayerSpec::Relu,
        LayerSpec::Dense { outputs },
    ]
}

impl Classifier {
    pub fn new<R: Rng + ?Sized>(arch: Arch, params: ArchParams, input_length: usize, class_count: usize, rng: &mut R) -> Self {
        let l = input_length;
        let (nets, input_scale) = match arch {
            Arch::DirectionCnn => {
                let mut specs = conv_block(&params, params.conv2);
                specs.extend(head(&params, class_count));
                (vec![Sequential::new((1, l), &specs, rng)], vec![1.0, 0.0, 0.0])
            }
            Arch::TwoBranch => {
                let dir = Sequential::new((1, l), &conv_block(&params, params.conv2), rng);
                let ipd = Sequential::new((1, l), &conv_block(&params, params.conv2), rng);
                let (c, n) = dir.output_shape();
                let merged = Sequential::new((2 * c * n, 1), &head(&params, class_count), rng);
                (vec![dir, ipd, merged], vec![1.0, TIMING_SCALE, 0.0])
            }
            Arch::PairCnn => {
                let first = Sequential::new(
                    (2, l),
                    &[
                        LayerSpec::Conv1d {
                            out_channels: params.conv1,
                            kernel: params.kernel1,
                        },
                        LayerSpec::Relu,
                        LayerSpec::MaxPool { size: params.pool },
                    ],
                    rng,
                );
                let (c, n) = first.output_shape();
                let mut specs = vec![
                    LayerSpec::Conv1d {
                        out_channels: params.conv2,
                        kernel: params.kernel2,
                    },
                    LayerSpec::Relu,
                    LayerSpec::MaxPool { size: params.pool },
                ];
                specs.extend(head(&params, 1));
                let rest = Sequential::new((4 * c, n), &specs, rng);
                let mut scale = vec![TIMING_SCALE; 4];
                scale.extend([SIZE_SCALE; 4]);
                (vec![first, rest], scale)
            }
        };
        let class_count = if arch.is_pair() { 2 } else { class_count };
        Self {
            arch,
            params,
            input_length,
            class_count,
            input_scale,
            nets,
            threshold: None,
        }
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let expected = (self.arch.input_channels(), self.input_length);
        if x.shape() != expected {
            return Err(shape_err(format!("{expected:?}"), format!("{:?}", x.shape())));
        }
        Ok(())
    }

    fn scaled_row(&self, x: &Tensor, row: usize) -> Vec<f64> {
        let k = self.input_scale[row];
        x.row(row).iter().map(|v| v * k).collect()
    }

    pub fn forward_trace(&self, x: &Tensor) -> ForwardTrace {
        debug_assert_eq!(x.shape(), (self.arch.input_channels(), self.input_length));
        let l = self.input_length;
        match self.arch {
            Arch::DirectionCnn => {
                let input = Tensor::from_rows(&[self.scaled_row(x, DIR_ROW)]);
                let acts = self.nets[0].forward_trace(&input);
                let logits = acts.last().unwrap().data.clone();
                ForwardTrace {
                    calls: vec![acts],
                    logits,
                }
            }
            Arch::TwoBranch => {
                let a = self.nets[0].forward_trace(&Tensor::from_rows(&[self.scaled_row(x, DIR_ROW)]));
                let b = self.nets[1].forward_trace(&Tensor::from_rows(&[self.scaled_row(x, IPD_ROW)]));
                let mut merged = a.last().unwrap().data.clone();
                merged.extend_from_slice(&b.last().unwrap().data);
                let h = self.nets[2].forward_trace(&Tensor::vector(merged));
                let logits = h.last().unwrap().data.clone();
                ForwardTrace {
                    calls: vec![a, b, h],
                    logits,
                }
            }
            Arch::PairCnn => {
                let mut calls = Vec::with_capacity(5);
                let mut stacked = Vec::new();
                let (c, n) = self.nets[0].output_shape();
                for p in 0..4 {
                    let input = Tensor::from_rows(&[self.scaled_row(x, 2 * p), self.scaled_row(x, 2 * p + 1)]);
                    let acts = self.nets[0].forward_trace(&input);
                    stacked.extend_from_slice(&acts.last().unwrap().data);
                    calls.push(acts);
                }
                let rest = self.nets[1].forward_trace(&Tensor {
                    channels: 4 * c,
                    len: n,
                    data: stacked,
                });
                let logits = rest.last().unwrap().data.clone();
                calls.push(rest);
                let _ = l;
                ForwardTrace { calls, logits }
            }
        }
    }

    /// Backpropagates a logit gradient. Returns the input gradient (same
    /// shape as the feature tensor) when `want_input` is set.
    pub fn backward(&self, trace: &ForwardTrace, dlogits: &[f64], mut grads: Option<&mut Grads>, want_input: bool) -> Option<Tensor> {
        let l = self.input_length;
        let mut dx = want_input.then(|| Tensor::zeros(self.arch.input_channels(), l));
        macro_rules! pg {
            ($i:expr) => {
                grads.as_deref_mut().map(|g| g.0[$i].as_mut_slice())
            };
        }
        match self.arch {
            Arch::DirectionCnn => {
                let g = self.nets[0].backward(&trace.calls[0], Tensor::vector(dlogits.to_vec()), pg!(0), want_input);
                if let (Some(dx), Some(g)) = (dx.as_mut(), g) {
                    let k = self.input_scale[DIR_ROW];
                    for (d, v) in dx.row_mut(DIR_ROW).iter_mut().zip(&g.data) {
                        *d = v * k;
                    }
                }
            }
            Arch::TwoBranch => {
                let dm = self.nets[2]
                    .backward(&trace.calls[2], Tensor::vector(dlogits.to_vec()), pg!(2), true)
                    .unwrap();
                let a_out = trace.calls[0].last().unwrap();
                let split = a_out.data.len();
                let mk = |data: &[f64], like: &Tensor| Tensor {
                    channels: like.channels,
                    len: like.len,
                    data: data.to_vec(),
                };
                let ga = self.nets[0].backward(&trace.calls[0], mk(&dm.data[..split], a_out), pg!(0), want_input);
                let b_out = trace.calls[1].last().unwrap();
                let gb = self.nets[1].backward(&trace.calls[1], mk(&dm.data[split..], b_out), pg!(1), want_input);
                if let (Some(dx), Some(ga), Some(gb)) = (dx.as_mut(), ga, gb) {
                    let (kd, kt) = (self.input_scale[DIR_ROW], self.input_scale[IPD_ROW]);
                    for (d, v) in dx.row_mut(DIR_ROW).iter_mut().zip(&ga.data) {
                        *d = v * kd;
                    }
                    for (d, v) in dx.row_mut(IPD_ROW).iter_mut().zip(&gb.data) {
                        *d = v * kt;
                    }
                }
            }
            Arch::PairCnn => {
                let drest = self.nets[1]
                    .backward(&trace.calls[4], Tensor::vector(dlogits.to_vec()), pg!(1), true)
                    .unwrap();
                let (c, n) = self.nets[0].output_shape();
                for p in 0..4 {
                    let chunk = Tensor {
                        channels: c,
                        len: n,
                        data: drest.data[p * c * n..(p + 1) * c * n].to_vec(),
                    };
                    let g = self.nets[0].backward(&trace.calls[p], chunk, pg!(0), want_input);
                    if let (Some(dx), Some(g)) = (dx.as_mut(), g) {
                        for half in 0..2 {
                            let row = 2 * p + half;
                            let k = self.input_scale[row];
                            for (d, v) in dx.row_mut(row).iter_mut().zip(g.row(half)) {
                                *d = v * k;
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn logits(&self, x: &Tensor) -> Vec<f64> {
        self.forward_trace(x).logits
    }

    /// Class probabilities; for the pair scorer `[1 - s, s]`.
    pub fn probabilities(&self, x: &Tensor) -> Vec<f64> {
        let z = self.logits(x);
        if self.arch.is_pair() {
            let s = sigmoid(z[0]);
            vec![1.0 - s, s]
        } else {
            softmax(&z)
        }
    }

    /// Correlation score in [0, 1] (pair scorer only).
    pub fn score(&self, x: &Tensor) -> f64 {
        debug_assert!(self.arch.is_pair());
        sigmoid(self.logits(x)[0])
    }

    /// Predicted class. Pairs are called associated when the score exceeds
    /// the stored threshold (0.5 without one).
    pub fn predict(&self, x: &Tensor) -> usize {
        let z = self.logits(x);
        if self.arch.is_pair() {
            usize::from(sigmoid(z[0]) > self.threshold.unwrap_or(0.5))
        } else {
            argmax(&z)
        }
    }

    pub fn try_predict(&self, x: &Tensor) -> Result<usize> {
        self.check_input(x)?;
        Ok(self.predict(x))
    }

    /// Training loss against `target` and its gradient w.r.t. the logits.
    pub fn loss_from_logits(&self, logits: &[f64], target: usize) -> (f64, Vec<f64>) {
        if self.arch.is_pair() {
            let (l, g) = bce_with_logit(logits[0], target as f64);
            (l, vec![g])
        } else {
            softmax_cross_entropy(logits, target)
        }
    }

    /// Loss and, optionally, accumulated parameter gradients and the input
    /// gradient for one sample.
    pub fn loss_and_backward(&self, x: &Tensor, target: usize, grads: Option<&mut Grads>, want_input: bool) -> (f64, Option<Tensor>) {
        let trace = self.forward_trace(x);
        let (loss, dz) = self.loss_from_logits(&trace.logits, target);
        let dx = self.backward(&trace, &dz, grads, want_input);
        (loss, dx)
    }

    pub fn loss(&self, x: &Tensor, target: usize) -> f64 {
        self.loss_from_logits(&self.logits(x), target).0
    }

    /// Gradient of the training loss w.r.t. the input features.
    pub fn loss_gradient(&self, x: &Tensor, target: usize) -> Result<Tensor> {
        self.check_input(x)?;
        Ok(self.loss_and_backward(x, target, None, true).1.unwrap())
    }

    pub fn param_count(&self) -> usize {
        self.nets.iter().map(Sequential::param_count).sum()
    }
}
