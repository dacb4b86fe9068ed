use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
// Float math for no_std; shadowed by inherent methods whenever std is linked.
#[allow(unused_imports)]
use num_traits::Float;

/// Architecture of the precoder network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetConfig {
    pub n_t: usize,
    pub n_rf: usize,
    pub n_u: usize,
    pub conv_channels: usize,
    pub conv_layers: usize,
    pub fc_width: usize,
    pub fc_layers: usize,
    pub dropout_rate: f64,
    pub kernel_size: usize,
    pub use_batchnorm: bool,
    /// Multiplies `conv_channels` and `fc_width`; keeps the topology.
    pub width_scale: f64,
}

impl NetConfig {
    /// Full-width network: 3 conv layers of 128 channels, 3 FC layers of 1024.
    pub fn new(n_t: usize, n_rf: usize, n_u: usize) -> Self {
        Self {
            n_t,
            n_rf,
            n_u,
            conv_channels: 128,
            conv_layers: 3,
            fc_width: 1024,
            fc_layers: 3,
            dropout_rate: 0.5,
            kernel_size: 3,
            use_batchnorm: true,
            width_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_t == 0 || self.n_rf == 0 || self.n_u == 0 {
            return Err(Error::InvalidConfig("network dimensions must be positive"));
        }
        if self.conv_layers > 0 && (self.conv_channels == 0 || self.kernel_size.is_multiple_of(2)) {
            return Err(Error::InvalidConfig("conv layers need channels and an odd kernel"));
        }
        if self.fc_layers > 0 && self.fc_width == 0 {
            return Err(Error::InvalidConfig("fc_width must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig("dropout_rate must lie in [0, 1)"));
        }
        if !(self.width_scale > 0.0 && self.width_scale <= 1.0) {
            return Err(Error::InvalidConfig("width_scale must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn effective_conv_channels(&self) -> usize {
        scaled(self.conv_channels, self.width_scale)
    }

    pub fn effective_fc_width(&self) -> usize {
        scaled(self.fc_width, self.width_scale)
    }
}

fn scaled(n: usize, s: f64) -> usize {
    ((n as f64 * s).round() as usize).max(1)
}

/// Name, shape, and offset of one tensor inside a flat parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> core::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct BnRef {
    pub gamma: usize,
    pub beta: usize,
    pub mean: usize,
    pub var: usize,
    pub features: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: usize,
    pub bias: Option<usize>,
    pub bn: Option<BnRef>,
}

/// Flat-buffer plan of the network derived from a [`NetConfig`].
#[derive(Debug, Clone)]
pub(crate) struct Plan {
    pub conv: Vec<Dense>,
    pub fc: Vec<Dense>,
    pub head_phase: Dense,
    pub head_digital: Dense,
    pub trainable: Vec<TensorSpec>,
    pub running: Vec<TensorSpec>,
    pub n_trainable: usize,
    pub n_running: usize,
}

struct Builder {
    trainable: Vec<TensorSpec>,
    running: Vec<TensorSpec>,
    n_trainable: usize,
    n_running: usize,
}

impl Builder {
    fn param(&mut self, name: String, shape: Vec<usize>) -> usize {
        let offset = self.n_trainable;
        self.n_trainable += shape.iter().product::<usize>();
        self.trainable.push(TensorSpec { name, shape, offset });
        offset
    }

    fn stat(&mut self, name: String, n: usize) -> usize {
        let offset = self.n_running;
        self.n_running += n;
        self.running.push(TensorSpec { name, shape: vec![n], offset });
        offset
    }

    fn layer(
        &mut self,
        prefix: &str,
        outputs: usize,
        inputs: usize,
        fan: &[usize],
        bn: bool,
        force_bias: bool,
    ) -> Dense {
        let mut shape = vec![outputs];
        shape.extend_from_slice(fan);
        let weight = self.param(format!("{prefix}.weight"), shape);
        let (bias, bn_ref) = if bn && !force_bias {
            let gamma = self.param(format!("{prefix}.bn.gamma"), vec![outputs]);
            let beta = self.param(format!("{prefix}.bn.beta"), vec![outputs]);
            let mean = self.stat(format!("{prefix}.bn.running_mean"), outputs);
            let var = self.stat(format!("{prefix}.bn.running_var"), outputs);
            (None, Some(BnRef { gamma, beta, mean, var, features: outputs }))
        } else {
            (Some(self.param(format!("{prefix}.bias"), vec![outputs])), None)
        };
        Dense { inputs, outputs, weight, bias, bn: bn_ref }
    }
}

impl Plan {
    pub fn new(cfg: &NetConfig) -> Self {
        let mut b = Builder { trainable: Vec::new(), running: Vec::new(), n_trainable: 0, n_running: 0 };
        let bn = cfg.use_batchnorm;
        let k = cfg.kernel_size;
        let positions = cfg.n_t * cfg.n_u;
        let channels = cfg.effective_conv_channels();
        let mut conv = Vec::with_capacity(cfg.conv_layers);
        let mut c_in = 2;
        for l in 0..cfg.conv_layers {
            conv.push(b.layer(&format!("conv{l}"), channels, c_in * k * k, &[c_in, k, k], bn, false));
            c_in = channels;
        }
        let width = cfg.effective_fc_width();
        let mut fc = Vec::with_capacity(cfg.fc_layers);
        let mut features = c_in * positions;
        for l in 0..cfg.fc_layers {
            fc.push(b.layer(&format!("fc{l}"), width, features, &[features], bn, false));
            features = width;
        }
        let n_phase = cfg.n_t * cfg.n_rf;
        let n_digital = 2 * cfg.n_rf * cfg.n_u;
        let head_phase = b.layer("head_phase", n_phase, features, &[features], false, true);
        let head_digital = b.layer("head_digital", n_digital, features, &[features], false, true);
        Plan {
            conv,
            fc,
            head_phase,
            head_digital,
            trainable: b.trainable,
            running: b.running,
            n_trainable: b.n_trainable,
            n_running: b.n_running,
        }
    }
}
