//! Parameterized layers built from [`Graph`] ops.
//!
//! Layers only store parameter ids; the tensors live in a [`ParamSet`] and are
//! bound to a graph once per step.

use ndarray::{Array1, ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Activation, Graph, Var};
use super::params::{Bound, ParamSet};
use super::Float;
use crate::error::{Error, Result};

/// Declarative description of one layer, recorded in checkpoint manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Affine {
        name: String,
        input: usize,
        output: usize,
    },
    Conv1dTemporal {
        name: String,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
    },
    GroupNorm {
        name: String,
        channels: usize,
        groups: usize,
    },
    LayerNorm {
        name: String,
        features: usize,
    },
    Activation {
        act: Activation,
    },
    ResidualAdd,
    Downsample {
        name: String,
        channels: usize,
    },
    Upsample {
        name: String,
        channels: usize,
    },
    SinusoidalTimeEmbed {
        dim: usize,
    },
}

fn shape_err(layer: &str, expected: String, got: &[usize]) -> Error {
    Error::Shape {
        layer: layer.to_string(),
        expected,
        got: format!("{got:?}"),
    }
}

/// `y = x W + b` with `W: [input, output]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub name: String,
    pub input: usize,
    pub output: usize,
    w: usize,
    b: usize,
}

impl Linear {
    pub fn new<T: Float, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        let w = ps.add_uniform(format!("{name}.weight"), &[input, output], input, rng);
        let b = ps.add_uniform(format!("{name}.bias"), &[output], input, rng);
        Linear {
            name: name.to_string(),
            input,
            output,
            w,
            b,
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 2 || shape[1] != self.input {
            return Err(shape_err(&self.name, format!("[n, {}]", self.input), shape));
        }
        let y = g.matmul(x, p.get(self.w));
        Ok(g.add_row_bias(y, p.get(self.b)))
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::Affine {
            name: self.name.clone(),
            input: self.input,
            output: self.output,
        }
    }

    pub fn weight_id(&self) -> usize {
        self.w
    }

    pub fn bias_id(&self) -> usize {
        self.b
    }
}

/// Temporal convolution over `[batch, channels, time]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Conv1d {
    pub name: String,
    pub input: usize,
    pub output: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    w: usize,
    b: usize,
}

impl Conv1d {
    pub fn new<T: Float, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = input * kernel;
        let w = ps.add_uniform(
            format!("{name}.weight"),
            &[output, input, kernel],
            fan_in,
            rng,
        );
        let b = ps.add_uniform(format!("{name}.bias"), &[output], fan_in, rng);
        Conv1d {
            name: name.to_string(),
            input,
            output,
            kernel,
            stride,
            pad: kernel / 2,
            w,
            b,
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 3 || shape[1] != self.input || shape[2] + 2 * self.pad < self.kernel {
            return Err(shape_err(
                &self.name,
                format!("[b, {}, h]", self.input),
                shape,
            ));
        }
        Ok(g.conv1d(x, p.get(self.w), p.get(self.b), self.stride, self.pad))
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::Conv1dTemporal {
            name: self.name.clone(),
            input: self.input,
            output: self.output,
            kernel: self.kernel,
            stride: self.stride,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroupNorm {
    pub name: String,
    pub channels: usize,
    pub groups: usize,
    gamma: usize,
    beta: usize,
}

impl GroupNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Float>(ps: &mut ParamSet<T>, name: &str, channels: usize, groups: usize) -> Self {
        let groups = largest_divisor_at_most(channels, groups);
        let gamma = ps.add_const(format!("{name}.weight"), &[channels], 1.0);
        let beta = ps.add_const(format!("{name}.bias"), &[channels], 0.0);
        GroupNorm {
            name: name.to_string(),
            channels,
            groups,
            gamma,
            beta,
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 3 || shape[1] != self.channels {
            return Err(shape_err(
                &self.name,
                format!("[b, {}, h]", self.channels),
                shape,
            ));
        }
        Ok(g.group_norm(
            x,
            p.get(self.gamma),
            p.get(self.beta),
            self.groups,
            Self::EPS,
        ))
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::GroupNorm {
            name: self.name.clone(),
            channels: self.channels,
            groups: self.groups,
        }
    }
}

fn largest_divisor_at_most(n: usize, cap: usize) -> usize {
    (1..=cap.min(n).max(1))
        .rev()
        .find(|d| n % d == 0)
        .unwrap_or(1)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerNorm {
    pub name: String,
    pub features: usize,
    gamma: usize,
    beta: usize,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Float>(ps: &mut ParamSet<T>, name: &str, features: usize) -> Self {
        let gamma = ps.add_const(format!("{name}.weight"), &[features], 1.0);
        let beta = ps.add_const(format!("{name}.bias"), &[features], 0.0);
        LayerNorm {
            name: name.to_string(),
            features,
            gamma,
            beta,
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 2 || shape[1] != self.features {
            return Err(shape_err(
                &self.name,
                format!("[n, {}]", self.features),
                shape,
            ));
        }
        Ok(g.layer_norm(x, p.get(self.gamma), p.get(self.beta), Self::EPS))
    }
}

/// Multi-layer perceptron with optional layer normalization before each
/// hidden activation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub norms: Vec<LayerNorm>,
    pub activation: Activation,
    pub output_activation: Option<Activation>,
}

impl Mlp {
    pub fn new<T: Float, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        name: &str,
        input: usize,
        hidden: &[usize],
        output: usize,
        activation: Activation,
        layer_norm: bool,
        rng: &mut R,
    ) -> Self {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(output);
        let mut layers = Vec::new();
        let mut norms = Vec::new();
        for (i, w) in dims.windows(2).enumerate() {
            layers.push(Linear::new(ps, &format!("{name}.l{i}"), w[0], w[1], rng));
            if layer_norm && i + 2 < dims.len() {
                norms.push(LayerNorm::new(ps, &format!("{name}.ln{i}"), w[1]));
            }
        }
        Mlp {
            layers,
            norms,
            activation,
            output_activation: None,
        }
    }

    pub fn with_output_activation(mut self, act: Activation) -> Self {
        self.output_activation = Some(act);
        self
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.output).unwrap_or(0)
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        self.forward_with_dropout(g, p, x, None)
    }

    /// Forward pass with an optional per-hidden-layer dropout mask generator.
    pub fn forward_with_dropout<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        mut dropout: Option<&mut dyn FnMut(&[usize]) -> ArrayD<T>>,
    ) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, p, h)?;
            if i < last {
                if let Some(norm) = self.norms.get(i) {
                    h = norm.forward(g, p, h)?;
                }
                h = g.activation(h, self.activation);
                if let Some(mask) = dropout.as_mut() {
                    let m = mask(g.shape(h));
                    h = g.mul_const(h, m);
                }
            } else if let Some(act) = self.output_activation {
                h = g.activation(h, act);
            }
        }
        Ok(h)
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        let mut out = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            out.push(layer.spec());
            if i < last {
                if let Some(n) = self.norms.get(i) {
                    out.push(LayerSpec::LayerNorm {
                        name: n.name.clone(),
                        features: n.features,
                    });
                }
                out.push(LayerSpec::Activation {
                    act: self.activation,
                });
            } else if let Some(act) = self.output_activation {
                out.push(LayerSpec::Activation { act });
            }
        }
        out
    }
}

/// Sinusoidal step embedding followed by `Linear(dim, 4 dim) -> Mish -> Linear(4 dim, dim)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TimeEmbedding {
    pub dim: usize,
    l1: Linear,
    l2: Linear,
}

impl TimeEmbedding {
    pub fn new<T: Float, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        name: &str,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        TimeEmbedding {
            dim,
            l1: Linear::new(ps, &format!("{name}.l1"), dim, 4 * dim, rng),
            l2: Linear::new(ps, &format!("{name}.l2"), 4 * dim, dim, rng),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, steps: &[f64]) -> Result<Var> {
        let k = g.constant(Array1::from_iter(steps.iter().map(|&s| T::c(s))).into_dyn());
        let e = g.sinusoidal_embed(k, self.dim);
        let h = self.l1.forward(g, p, e)?;
        let h = g.mish(h);
        self.l2.forward(g, p, h)
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        vec![
            LayerSpec::SinusoidalTimeEmbed { dim: self.dim },
            self.l1.spec(),
            LayerSpec::Activation {
                act: Activation::Mish,
            },
            self.l2.spec(),
        ]
    }
}

/// Builds a constant `[n, f]` tensor from row-major data.
pub fn matrix<T: Float>(rows: usize, cols: usize, data: Vec<T>) -> ArrayD<T> {
    ArrayD::from_shape_vec(IxDyn(&[rows, cols]), data).expect("matrix: length mismatch")
}
