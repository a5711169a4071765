use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Tensor;

/// Layer description used to build a [`Sequential`]; shapes are inferred.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv1d { out_channels: usize, kernel: usize },
    Relu,
    MaxPool { size: usize },
    Dense { outputs: usize },
}

/// A built layer. Trainable layers index into the owning network's flat
/// parameter buffer at `offset`; weights come first, then biases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Conv1d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        offset: usize,
    },
    Relu,
    MaxPool {
        size: usize,
    },
    Dense {
        inputs: usize,
        outputs: usize,
        offset: usize,
    },
}

impl Layer {
    fn param_count(&self) -> usize {
        match *self {
            Layer::Conv1d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => out_channels * in_channels * kernel + out_channels,
            Layer::Dense {
                inputs, outputs, ..
            } => inputs * outputs + outputs,
            _ => 0,
        }
    }

    fn output_shape(&self, (c, l): (usize, usize)) -> (usize, usize) {
        match *self {
            Layer::Conv1d {
                out_channels,
                kernel,
                ..
            } => (out_channels, l + 1 - kernel),
            Layer::Relu => (c, l),
            Layer::MaxPool { size } => (c, l / size),
            Layer::Dense { outputs, .. } => (outputs, 1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sequential {
    pub input_shape: (usize, usize),
    pub layers: Vec<Layer>,
    pub params: Vec<f64>,
}

impl Sequential {
    /// Builds the network and draws He-uniform weights (zero biases).
    ///
    /// Panics if a convolution kernel is longer than its input or a pooling
    /// window empties the sequence.
    pub fn new<R: Rng + ?Sized>(input_shape: (usize, usize), specs: &[LayerSpec], rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(specs.len());
        let mut shape = input_shape;
        let mut offset = 0;
        for spec in specs {
            let layer = match *spec {
                LayerSpec::Conv1d {
                    out_channels,
                    kernel,
                } => {
                    assert!(kernel >= 1 && kernel <= shape.1, "kernel {kernel} exceeds length {}", shape.1);
                    Layer::Conv1d {
                        in_channels: shape.0,
                        out_channels,
                        kernel,
                        offset,
                    }
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::MaxPool { size } => {
                    assert!(size >= 1 && shape.1 / size >= 1, "pool {size} empties length {}", shape.1);
                    Layer::MaxPool { size }
                }
                LayerSpec::Dense { outputs } => Layer::Dense {
                    inputs: shape.0 * shape.1,
                    outputs,
                    offset,
                },
            };
            offset += layer.param_count();
            shape = layer.output_shape(shape);
            layers.push(layer);
        }

        let mut params = vec![0.0; offset];
        for layer in &layers {
            let (fan_in, weights, off) = match *layer {
                Layer::Conv1d {
                    in_channels,
                    out_channels,
                    kernel,
                    offset,
                } => (in_channels * kernel, out_channels * in_channels * kernel, offset),
                Layer::Dense {
                    inputs,
                    outputs,
                    offset,
                } => (inputs, inputs * outputs, offset),
                _ => continue,
            };
            let bound = (6.0 / fan_in as f64).sqrt();
            for w in &mut params[off..off + weights] {
                *w = rng.gen_range(-bound..bound);
            }
        }

        Self {
            input_shape,
            layers,
            params,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn output_shape(&self) -> (usize, usize) {
        self.layers
            .iter()
            .fold(self.input_shape, |s, l| l.output_shape(s))
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = self.apply(layer, &cur);
        }
        cur
    }

    /// Forward pass that keeps every intermediate activation; `acts[0]` is the
    /// input and the last entry is the output.
    pub fn forward_trace(&self, x: &Tensor) -> Vec<Tensor> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for layer in &self.layers {
            let next = self.apply(layer, acts.last().unwrap());
            acts.push(next);
        }
        acts
    }

    /// Backpropagates `grad_out` through the recorded trace. Parameter
    /// gradients are accumulated into `param_grad` when given; the input
    /// gradient is returned when `want_input` is set.
    pub fn backward(
        &self,
        acts: &[Tensor],
        grad_out: Tensor,
        mut param_grad: Option<&mut [f64]>,
        want_input: bool,
    ) -> Option<Tensor> {
        assert_eq!(acts.len(), self.layers.len() + 1);
        let mut grad = grad_out;
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let input = &acts[idx];
            let need_dx = want_input || idx > 0;
            grad = match *layer {
                Layer::Relu => {
                    for (g, x) in grad.data.iter_mut().zip(&input.data) {
                        if *x <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    Tensor {
                        channels: input.channels,
                        len: input.len,
                        data: grad.data,
                    }
                }
                Layer::MaxPool { size } => {
                    let mut dx = Tensor::zeros(input.channels, input.len);
                    for c in 0..input.channels {
                        let row = input.row(c);
                        let drow = dx.row_mut(c);
                        for t in 0..grad.len {
                            let start = t * size;
                            let mut best = start;
                            for j in start + 1..start + size {
                                if row[j] > row[best] {
                                    best = j;
                                }
                            }
                            drow[best] += grad.data[c * grad.len + t];
                        }
                    }
                    dx
                }
                Layer::Conv1d {
                    in_channels,
                    out_channels,
                    kernel,
                    offset,
                } => {
                    let w = &self.params[offset..offset + out_channels * in_channels * kernel];
                    let lout = grad.len;
                    if let Some(pg) = param_grad.as_deref_mut() {
                        let (gw, gb) = pg[offset..offset + layer.param_count()]
                            .split_at_mut(out_channels * in_channels * kernel);
                        for o in 0..out_channels {
                            let gy = grad.row(o);
                            gb[o] += gy.iter().sum::<f64>();
                            for i in 0..in_channels {
                                let x = input.row(i);
                                for k in 0..kernel {
                                    gw[(o * in_channels + i) * kernel + k] += dot(gy, &x[k..k + lout]);
                                }
                            }
                        }
                    }
                    if need_dx {
                        let mut dx = Tensor::zeros(in_channels, input.len);
                        for o in 0..out_channels {
                            let gy = grad.row(o);
                            for i in 0..in_channels {
                                let drow = dx.row_mut(i);
                                for k in 0..kernel {
                                    let wv = w[(o * in_channels + i) * kernel + k];
                                    axpy(wv, gy, &mut drow[k..k + lout]);
                                }
                            }
                        }
                        dx
                    } else {
                        Tensor::zeros(0, 0)
                    }
                }
                Layer::Dense {
                    inputs,
                    outputs,
                    offset,
                } => {
                    let w = &self.params[offset..offset + inputs * outputs];
                    if let Some(pg) = param_grad.as_deref_mut() {
                        let (gw, gb) = pg[offset..offset + layer.param_count()].split_at_mut(inputs * outputs);
                        for o in 0..outputs {
                            let g = grad.data[o];
                            gb[o] += g;
                            if g != 0.0 {
                                axpy(g, &input.data, &mut gw[o * inputs..(o + 1) * inputs]);
                            }
                        }
                    }
                    if need_dx {
                        let mut dx = Tensor::zeros(input.channels, input.len);
                        for o in 0..outputs {
                            let g = grad.data[o];
                            if g != 0.0 {
                                axpy(g, &w[o * inputs..(o + 1) * inputs], &mut dx.data);
                            }
                        }
                        dx
                    } else {
                        Tensor::zeros(0, 0)
                    }
                }
            };
        }
        want_input.then_some(grad)
    }

    fn apply(&self, layer: &Layer, x: &Tensor) -> Tensor {
        match *layer {
            Layer::Relu => Tensor {
                channels: x.channels,
                len: x.len,
                data: x.data.iter().map(|v| v.max(0.0)).collect(),
            },
            Layer::MaxPool { size } => {
                let lout = x.len / size;
                let mut y = Tensor::zeros(x.channels, lout);
                for c in 0..x.channels {
                    let row = x.row(c);
                    for t in 0..lout {
                        y.data[c * lout + t] = row[t * size..(t + 1) * size]
                            .iter()
                            .cloned()
                            .fold(f64::NEG_INFINITY, f64::max);
                    }
                }
                y
            }
            Layer::Conv1d {
                in_channels,
                out_channels,
                kernel,
                offset,
            } => {
                assert_eq!(x.channels, in_channels, "conv input channels");
                let w = &self.params[offset..offset + out_channels * in_channels * kernel];
                let b = &self.params[offset + out_channels * in_channels * kernel..offset + layer.param_count()];
                let lout = x.len + 1 - kernel;
                let mut y = Tensor::zeros(out_channels, lout);
                for o in 0..out_channels {
                    let yrow = y.row_mut(o);
                    yrow.iter_mut().for_each(|v| *v = b[o]);
                    for i in 0..in_channels {
                        let xrow = x.row(i);
                        for k in 0..kernel {
                            axpy(w[(o * in_channels + i) * kernel + k], &xrow[k..k + lout], yrow);
                        }
                    }
                }
                y
            }
            Layer::Dense {
                inputs,
                outputs,
                offset,
            } => {
                assert_eq!(x.data.len(), inputs, "dense input size");
                let w = &self.params[offset..offset + inputs * outputs];
                let b = &self.params[offset + inputs * outputs..offset + layer.param_count()];
                let data = (0..outputs)
                    .map(|o| b[o] + dot(&w[o * inputs..(o + 1) * inputs], &x.data))
                    .collect();
                Tensor {
                    channels: outputs,
                    len: 1,
                    data,
                }
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn net() -> Sequential {
        let mut rng = seeded(5);
        Sequential::new(
            (2, 24),
            &[
                LayerSpec::Conv1d { out_channels: 3, kernel: 4 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 3 },
                LayerSpec::Conv1d { out_channels: 2, kernel: 2 },
                LayerSpec::Relu,
                LayerSpec::Dense { outputs: 5 },
                LayerSpec::Relu,
                LayerSpec::Dense { outputs: 1 },
            ],
            &mut rng,
        )
    }

    fn input() -> Tensor {
        let mut rng = seeded(12);
        Tensor {
            channels: 2,
            len: 24,
            data: (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn shapes_propagate() {
        let n = net();
        assert_eq!(n.output_shape(), (1, 1));
        assert_eq!(n.forward(&input()).shape(), (1, 1));
    }

    #[test]
    fn input_gradient_matches_finite_difference() {
        let n = net();
        let x = input();
        let acts = n.forward_trace(&x);
        let dx = n.backward(&acts, Tensor::vector(vec![1.0]), None, true).unwrap();
        for i in 0..x.data.len() {
            let mut a = x.clone();
            let mut b = x.clone();
            a.data[i] += 1e-6;
            b.data[i] -= 1e-6;
            let fd = (n.forward(&a).data[0] - n.forward(&b).data[0]) / 2e-6;
            assert!((fd - dx.data[i]).abs() < 1e-6, "coord {i}: fd {fd} vs {}", dx.data[i]);
        }
    }

    #[test]
    fn param_gradient_matches_finite_difference() {
        let n = net();
        let x = input();
        let acts = n.forward_trace(&x);
        let mut pg = vec![0.0; n.param_count()];
        n.backward(&acts, Tensor::vector(vec![1.0]), Some(&mut pg), false);
        for i in (0..n.param_count()).step_by(3) {
            let mut a = n.clone();
            let mut b = n.clone();
            a.params[i] += 1e-6;
            b.params[i] -= 1e-6;
            let fd = (a.forward(&x).data[0] - b.forward(&x).data[0]) / 2e-6;
            assert!((fd - pg[i]).abs() < 1e-6, "param {i}: fd {fd} vs {}", pg[i]);
        }
    }
}
