//! Layer functions: tensor in, tensor out, variables created through
//! `get_variable` under a per-layer scope.

mod losses;
mod metrics;

pub(crate) use losses::as_vector;
pub use losses::{loss, per_example_loss, LossKind};
pub use metrics::{metric, MetricKind, MetricPair};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Initializer, NodeId};
use crate::model_fn::Mode;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Linear,
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        match self {
            Activation::Linear => Ok(x),
            Activation::Relu => g.relu(x),
            Activation::Sigmoid => g.sigmoid(x),
            Activation::Tanh => g.tanh(x),
        }
    }
}

/// Fully connected layer: `activation(x · kernel + bias)`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub units: usize,
    pub activation: Activation,
    pub name: Option<String>,
    pub kernel_initializer: Option<Initializer>,
    pub bias_initializer: Initializer,
}

impl Dense {
    pub fn new(units: usize) -> Self {
        Dense {
            units,
            activation: Activation::Linear,
            name: None,
            kernel_initializer: None,
            bias_initializer: Initializer::Zeros,
        }
    }

    pub fn activation(mut self, a: Activation) -> Self {
        self.activation = a;
        self
    }

    pub fn name(mut self, name: &str) -> Self {
        self.name = Some(name.to_string());
        self
    }

    pub fn kernel_initializer(mut self, init: Initializer) -> Self {
        self.kernel_initializer = Some(init);
        self
    }

    pub fn bias_initializer(mut self, init: Initializer) -> Self {
        self.bias_initializer = init;
        self
    }

    pub fn build(&self, g: &mut Graph, input: NodeId) -> Result<NodeId> {
        let shape = g.shape(input).clone();
        if shape.rank() != 2 {
            return Err(Error::invalid(format!(
                "dense expects a rank-2 input, got {shape}"
            )));
        }
        let Some(in_dim) = shape.dim(1) else {
            return Err(Error::invalid("dense input width must be known"));
        };
        if self.units == 0 {
            return Err(Error::invalid("dense units must be at least 1"));
        }
        let scope = match &self.name {
            Some(n) => n.clone(),
            None => g.unique_scope("dense"),
        };
        g.variable_scope(&scope, None, |g| {
            let kernel_init = self
                .kernel_initializer
                .clone()
                .unwrap_or(Initializer::GlorotUniform);
            let kernel = g.get_variable("kernel", &[in_dim, self.units], kernel_init)?;
            let bias = g.get_variable("bias", &[self.units], self.bias_initializer.clone())?;
            let xw = g.matmul(input, kernel.node)?;
            let pre = g.add(xw, bias.node)?;
            self.activation.apply(g, pre)
        })
    }
}

pub fn dense(g: &mut Graph, input: NodeId, units: usize, activation: Activation) -> Result<NodeId> {
    Dense::new(units).activation(activation).build(g, input)
}

/// 2-D convolution, NHWC, stride 1, valid padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub filters: usize,
    pub kernel_size: (usize, usize),
    pub activation: Activation,
    pub name: Option<String>,
    pub kernel_initializer: Option<Initializer>,
}

impl Conv2d {
    pub fn new(filters: usize, kernel_size: usize) -> Self {
        Conv2d {
            filters,
            kernel_size: (kernel_size, kernel_size),
            activation: Activation::Linear,
            name: None,
            kernel_initializer: None,
        }
    }

    pub fn activation(mut self, a: Activation) -> Self {
        self.activation = a;
        self
    }

    pub fn name(mut self, name: &str) -> Self {
        self.name = Some(name.to_string());
        self
    }

    pub fn kernel_initializer(mut self, init: Initializer) -> Self {
        self.kernel_initializer = Some(init);
        self
    }

    pub fn build(&self, g: &mut Graph, input: NodeId) -> Result<NodeId> {
        let shape = g.shape(input).clone();
        if shape.rank() != 4 {
            return Err(Error::invalid(format!(
                "conv2d expects a rank-4 input, got {shape}"
            )));
        }
        let Some(channels) = shape.dim(3) else {
            return Err(Error::invalid("conv2d channel count must be known"));
        };
        let (kh, kw) = self.kernel_size;
        if let (Some(h), Some(w)) = (shape.dim(1), shape.dim(2)) {
            if kh > h || kw > w {
                return Err(Error::invalid(format!(
                    "kernel {kh}x{kw} larger than input {h}x{w}"
                )));
            }
        }
        let scope = match &self.name {
            Some(n) => n.clone(),
            None => g.unique_scope("conv2d"),
        };
        g.variable_scope(&scope, None, |g| {
            let init = self
                .kernel_initializer
                .clone()
                .unwrap_or(Initializer::GlorotUniform);
            let kernel = g.get_variable("kernel", &[kh, kw, channels, self.filters], init)?;
            let bias = g.get_variable("bias", &[self.filters], Initializer::Zeros)?;
            let conv = g.conv2d(input, kernel.node)?;
            let pre = g.add(conv, bias.node)?;
            self.activation.apply(g, pre)
        })
    }
}

pub fn max_pooling2d(
    g: &mut Graph,
    input: NodeId,
    pool_size: usize,
    strides: usize,
) -> Result<NodeId> {
    g.max_pool2d(input, (pool_size, pool_size), (strides, strides))
}

/// Inverted dropout, active only in TRAIN mode.
pub fn dropout(g: &mut Graph, input: NodeId, rate: f64, mode: Mode) -> Result<NodeId> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate {rate} not in [0, 1)")));
    }
    g.dropout(input, rate, mode.is_training())
}

/// Collapses everything after the batch dimension.
pub fn flatten(g: &mut Graph, input: NodeId) -> Result<NodeId> {
    let shape = g.shape(input).clone();
    let rest: Option<usize> = shape.dims().iter().skip(1).copied().product();
    let Some(width) = rest else {
        return Err(Error::invalid(format!(
            "cannot flatten {shape}: trailing dims unknown"
        )));
    };
    g.reshape(input, &[-1, width as isize])
}
