//! The full network: capsulation block, routed capsule layers with layer
//! normalization in between, and a per-frame log-softmax over the lengths of
//! the class capsules.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::capsulation::{self, CapsulationConfig, CapsulationParams, CapsuleGroup, ConvParams, Pass};
use crate::error::{Error, Result};
use crate::routing::{self, LayerConfig, LayerOutput, Lookahead};
use crate::tensor::{NormStats, Tape, Tensor, Var};
use crate::trainer::init::{init_fan_avg, init_routing_kernel};

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn yes() -> bool {
    true
}

fn one() -> f64 {
    1.0
}

fn default_momentum() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub capsulation: CapsulationConfig,
    pub layers: Vec<LayerConfig>,
    /// Layer normalization per time slice between capsule layers.
    #[serde(default = "yes")]
    pub layer_norm: bool,
    /// Multiplier applied to class-capsule lengths before the log-softmax.
    #[serde(default = "one")]
    pub output_scale: f64,
    /// Weight of the newest statistics in the running batch-norm averages.
    #[serde(default = "default_momentum")]
    pub norm_momentum: f64,
}

impl ModelConfig {
    /// Checks every field and the height/depth chain between stages.
    pub fn validate(&self) -> Result<()> {
        self.capsulation.validate("model.capsulation")?;
        if self.layers.is_empty() {
            return Err(Error::config("model.layers", "at least one capsule layer is required"));
        }
        let mut height = self.capsulation.height;
        let mut depth = self.capsulation.depth;
        for (i, layer) in self.layers.iter().enumerate() {
            let prefix = format!("model.layers[{i}]");
            layer.validate(&prefix)?;
            if layer.in_height != height {
                return Err(Error::config(
                    format!("{prefix}.in_height"),
                    format!("expected {height} (height of the previous stage), got {}", layer.in_height),
                ));
            }
            if layer.in_depth != depth {
                return Err(Error::config(
                    format!("{prefix}.in_depth"),
                    format!("expected {depth} (depth of the previous stage), got {}", layer.in_depth),
                ));
            }
            if layer.mask_padding.is_some() && i + 1 != self.layers.len() {
                return Err(Error::config(
                    format!("{prefix}.mask_padding"),
                    "only the class-capsule layer may mask a class",
                ));
            }
            height = layer.height;
            depth = layer.depth;
        }
        if !(self.output_scale.is_finite() && self.output_scale > 0.0) {
            return Err(Error::config("model.output_scale", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.norm_momentum) {
            return Err(Error::config("model.norm_momentum", "must be in [0, 1]"));
        }
        Ok(())
    }

    /// Checks that the class-capsule layer has one capsule per output label.
    pub fn validate_outputs(&self, classes: usize, padding: Option<usize>) -> Result<()> {
        let last = self.layers.len() - 1;
        let top = &self.layers[last];
        if top.height != classes {
            return Err(Error::config(
                format!("model.layers[{last}].height"),
                format!("expected {classes} (alphabet size), got {}", top.height),
            ));
        }
        if top.mask_padding.is_some() && top.mask_padding != padding {
            return Err(Error::config(
                format!("model.layers[{last}].mask_padding"),
                format!("expected {padding:?} (padding index of the alphabet), got {:?}", top.mask_padding),
            ));
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.height)
    }

    /// Input frames seen by one output frame.
    pub fn receptive_frames(&self, delta_frames: usize) -> usize {
        let windows: Vec<_> = self.layers.iter().map(|l| l.window).collect();
        let slices = routing::stack_receptive_slices(&windows);
        self.capsulation.receptive_frames()
            + 2 * delta_frames
            + (slices - 1) * self.capsulation.time_stride()
    }

    pub fn lookahead(&self, hop_ms: f64, win_ms: f64, delta_frames: usize) -> Lookahead {
        let windows: Vec<_> = self.layers.iter().map(|l| l.window).collect();
        let right = routing::stack_right_context(&windows);
        routing::lookahead_and_delay(
            right,
            1,
            self.capsulation.right_context_frames(),
            self.capsulation.time_stride(),
            hop_ms,
            win_ms,
            delta_frames,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Running statistics; saved with the model but never optimized.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
}

/// Named tensors of a model, addressed by insertion index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    fn push(&mut self, name: String, value: Tensor, kind: ParamKind) -> usize {
        self.entries.push(ParamEntry { name, value, kind });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, id: usize) -> &Tensor {
        &self.entries[id].value
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.entries[id].value
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn trainable(&self) -> impl Iterator<Item = (usize, &ParamEntry)> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == ParamKind::Trainable)
    }

    /// Learnable scalar count.
    pub fn trainable_count(&self) -> usize {
        self.trainable().map(|(_, e)| e.value.len()).sum()
    }
}

struct ConvIds {
    branches: Vec<usize>,
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

struct Layout {
    conv: Vec<ConvIds>,
    project_u: usize,
    expand: Vec<usize>,
    project_a: Option<usize>,
    kernels: Vec<usize>,
    norms: Vec<(usize, usize)>,
}

pub enum Mode<'a> {
    /// Dropout from the given source and per-sequence batch statistics.
    Train(&'a mut ChaCha8Rng),
    /// No dropout, running batch statistics, no parameter gradients.
    Eval,
}

pub struct ForwardOutput {
    /// Per-frame log-probabilities `[T, V]`.
    pub log_probs: Var,
    pub primary: CapsuleGroup,
    pub layers: Vec<LayerOutput>,
    /// Batch-norm statistics of this sequence (training mode only).
    pub norm_stats: Vec<NormStats>,
}

pub struct SrfModel {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

impl SrfModel {
    /// Builds a model with fan-average initialization of scale `alpha`.
    pub fn new(config: ModelConfig, alpha: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let cap = &config.capsulation;
        let mut params = ParamStore::default();
        let mut add = |name: String, value: Tensor| params.push(name, value, ParamKind::Trainable);

        let mut conv = Vec::new();
        let mut cin = 1;
        for (l, layer) in cap.conv.iter().enumerate() {
            let shape = [layer.kernel[0], layer.kernel[1], cin, layer.channels];
            let mut branches = Vec::new();
            for b in 0..cap.maxout {
                branches.push(add(format!("capsulation.conv{l}.branch{b}"), init_fan_avg(&shape, alpha, rng)?));
            }
            let gamma = add(format!("capsulation.conv{l}.gamma"), Tensor::full(&[layer.channels], 1.0));
            let beta = add(format!("capsulation.conv{l}.beta"), Tensor::zeros(&[layer.channels]));
            conv.push((branches, gamma, beta, layer.channels));
            cin = layer.channels;
        }
        let proj = [cap.flat_width(), cap.height];
        let project_u = add("capsulation.project_u".into(), init_fan_avg(&proj, alpha, rng)?);
        let shape = [cap.expand_kernel[0], cap.expand_kernel[1], 1, cap.depth];
        let mut expand = Vec::new();
        for b in 0..cap.maxout {
            expand.push(add(format!("capsulation.expand.branch{b}"), init_fan_avg(&shape, alpha, rng)?));
        }
        let project_a = if cap.activation_branch {
            Some(add("capsulation.project_a".into(), init_fan_avg(&proj, alpha, rng)?))
        } else {
            None
        };

        let mut kernels = Vec::new();
        let mut norms = Vec::new();
        let last = config.layers.len() - 1;
        for (l, layer) in config.layers.iter().enumerate() {
            let shape = layer.kernel_shape();
            kernels.push(add(format!("routing.layer{l}.kernel"), init_routing_kernel(&shape, alpha, rng)?));
            if config.layer_norm && l < last {
                let n = layer.height * layer.depth;
                let gain = add(format!("routing.layer{l}.norm.gain"), Tensor::full(&[n], 1.0));
                let bias = add(format!("routing.layer{l}.norm.bias"), Tensor::zeros(&[n]));
                norms.push((gain, bias));
            }
        }

        let conv = conv
            .into_iter()
            .enumerate()
            .map(|(l, (branches, gamma, beta, c))| ConvIds {
                branches,
                gamma,
                beta,
                mean: params.push(format!("capsulation.conv{l}.running_mean"), Tensor::zeros(&[c]), ParamKind::Buffer),
                var: params.push(format!("capsulation.conv{l}.running_var"), Tensor::full(&[c], 1.0), ParamKind::Buffer),
            })
            .collect();

        Ok(Self {
            config,
            params,
            layout: Layout {
                conv,
                project_u,
                expand,
                project_a,
                kernels,
                norms,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Learnable scalars of the whole model.
    pub fn parameter_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// Shortest input sequence accepted by [`forward`](Self::forward).
    pub fn min_frames(&self) -> usize {
        self.config.capsulation.min_frames()
    }

    /// Output frames produced for `frames` input frames.
    pub fn output_frames(&self, frames: usize) -> usize {
        self.config.capsulation.output_time(frames)
    }

    pub fn running_stats(&self) -> Vec<NormStats> {
        self.layout
            .conv
            .iter()
            .map(|c| NormStats {
                mean: self.params.get(c.mean).data().to_vec(),
                var: self.params.get(c.var).data().to_vec(),
            })
            .collect()
    }

    /// Folds per-sequence statistics into the running averages, in order.
    pub fn update_running_stats(&mut self, observed: &[Vec<NormStats>]) {
        let m = self.config.norm_momentum;
        for stats in observed {
            for (ids, s) in self.layout.conv.iter().zip(stats) {
                for (id, fresh) in [(ids.mean, &s.mean), (ids.var, &s.var)] {
                    for (r, v) in self.params.get_mut(id).data_mut().iter_mut().zip(fresh) {
                        *r = (1.0 - m) * *r + m * v;
                    }
                }
            }
        }
    }

    /// Runs the network on one feature sequence `[T′, F′]`.
    ///
    /// With `capture`, each layer reports the final-iteration coupling
    /// coefficients of every slice.
    pub fn forward(&self, tape: &mut Tape, features: &Tensor, mode: Mode<'_>, capture: bool) -> Result<ForwardOutput> {
        let train = matches!(mode, Mode::Train(_));
        let var = |tape: &mut Tape, id: usize| -> Result<Var> {
            let value = self.params.get(id).clone();
            if train {
                tape.param(id, value)
            } else {
                tape.constant(value)
            }
        };
        let lay = &self.layout;
        let mut conv = Vec::new();
        for c in &lay.conv {
            let branches = c.branches.iter().map(|&id| var(tape, id)).collect::<Result<_>>()?;
            conv.push(ConvParams {
                branches,
                gamma: var(tape, c.gamma)?,
                beta: var(tape, c.beta)?,
            });
        }
        let cap_params = CapsulationParams {
            conv,
            project_u: var(tape, lay.project_u)?,
            expand: lay.expand.iter().map(|&id| var(tape, id)).collect::<Result<_>>()?,
            project_a: lay.project_a.map(|id| var(tape, id)).transpose()?,
        };

        let running;
        let mut pass = match mode {
            Mode::Train(rng) => Pass { rng: Some(rng), running: None },
            Mode::Eval => {
                running = self.running_stats();
                Pass::inference(&running)
            }
        };
        let x = tape.constant(features.clone())?;
        let (primary, norm_stats) =
            capsulation::capsulate(tape, x, &self.config.capsulation, &cap_params, &mut pass)?;

        let mut u = primary.u;
        let mut outputs = Vec::with_capacity(self.config.layers.len());
        for (l, layer) in self.config.layers.iter().enumerate() {
            let kernel = var(tape, lay.kernels[l])?;
            let out = routing::layer_forward(tape, u, layer, kernel, capture)?;
            u = out.u;
            if let Some(&(gain, bias)) = lay.norms.get(l) {
                let (g, b) = (var(tape, gain)?, var(tape, bias)?);
                u = tape.layer_norm_slice(out.u, g, b, LAYER_NORM_EPS)?;
            }
            outputs.push(out);
        }

        let lengths = outputs.last().expect("validated non-empty").a;
        let logits = if self.config.output_scale == 1.0 {
            lengths
        } else {
            tape.scale(lengths, self.config.output_scale)?
        };
        let log_probs = tape.log_softmax(logits, 1)?;
        Ok(ForwardOutput {
            log_probs,
            primary,
            layers: outputs,
            norm_stats,
        })
    }

    /// Per-frame log-probabilities `[T, V]` in evaluation mode.
    pub fn log_probs(&self, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, features, Mode::Eval, false)?;
        Ok(tape.value(out.log_probs).clone())
    }
}
