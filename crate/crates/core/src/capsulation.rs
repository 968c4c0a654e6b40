//! Convolutional front-end turning a feature sequence `[T′, F′]` into the
//! primary capsule group.
//!
//! Each front-end layer runs `N_C` parallel convolutions, applies dropout to
//! every branch, keeps the element-wise maximum and batch-normalizes the
//! result. The output `[T, F, C]` is flattened per frame, projected to `P_H`
//! values and expanded to depth `P_D` by one more maxout convolution.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{NormStats, Padding, Tape, Var};

pub const BATCH_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayerConfig {
    /// Kernel extent `[time, frequency]`.
    pub kernel: [usize; 2],
    pub channels: usize,
    /// Stride `[time, frequency]`.
    pub stride: [usize; 2],
}

fn default_maxout() -> usize {
    2
}

fn default_dropout() -> f64 {
    0.2
}

fn default_expand_kernel() -> [usize; 2] {
    [3, 3]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapsulationConfig {
    /// Feature coefficients per input frame.
    pub input_dim: usize,
    pub conv: Vec<ConvLayerConfig>,
    #[serde(default = "default_maxout")]
    pub maxout: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    /// Primary capsule height `P_H`.
    pub height: usize,
    /// Primary capsule depth `P_D`.
    pub depth: usize,
    #[serde(default = "default_expand_kernel")]
    pub expand_kernel: [usize; 2],
    /// Derive activations from a separate sigmoid projection instead of
    /// capsule lengths.
    #[serde(default)]
    pub activation_branch: bool,
}

impl CapsulationConfig {
    /// Two 3×3 maxout layers with stride 2 in both directions.
    pub fn standard(input_dim: usize, channels: usize, height: usize, depth: usize) -> Self {
        let layer = ConvLayerConfig {
            kernel: [3, 3],
            channels,
            stride: [2, 2],
        };
        Self {
            input_dim,
            conv: vec![layer.clone(), layer],
            maxout: default_maxout(),
            dropout: default_dropout(),
            height,
            depth,
            expand_kernel: default_expand_kernel(),
            activation_branch: false,
        }
    }

    pub fn validate(&self, prefix: &str) -> Result<()> {
        let field = |name: &str| format!("{prefix}.{name}");
        if self.input_dim == 0 {
            return Err(Error::config(field("input_dim"), "must be at least 1"));
        }
        if self.conv.is_empty() {
            return Err(Error::config(field("conv"), "at least one layer is required"));
        }
        for (i, l) in self.conv.iter().enumerate() {
            if l.kernel.contains(&0) || l.stride.contains(&0) || l.channels == 0 {
                return Err(Error::config(
                    field(&format!("conv[{i}]")),
                    "kernel, stride and channels must be at least 1",
                ));
            }
        }
        if self.maxout == 0 || self.maxout > u8::MAX as usize {
            return Err(Error::config(field("maxout"), "must be in 1..=255"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(field("dropout"), "must be in [0, 1)"));
        }
        if self.height == 0 || self.depth == 0 {
            return Err(Error::config(field("height/depth"), "must be at least 1"));
        }
        if self.expand_kernel.contains(&0) {
            return Err(Error::config(field("expand_kernel"), "must be at least 1"));
        }
        Ok(())
    }

    /// Product of the time strides: input frames per primary slice.
    pub fn time_stride(&self) -> usize {
        self.conv.iter().map(|l| l.stride[0]).product()
    }

    /// Frequency extent after the convolution stack.
    pub fn output_freq(&self) -> usize {
        self.conv
            .iter()
            .fold(self.input_dim, |f, l| f.div_ceil(l.stride[1]))
    }

    pub fn output_time(&self, frames: usize) -> usize {
        self.conv.iter().fold(frames, |t, l| t.div_ceil(l.stride[0]))
    }

    /// Width of the flattened front-end output per frame.
    pub fn flat_width(&self) -> usize {
        self.output_freq() * self.conv.last().map_or(1, |l| l.channels)
    }

    /// Time kernels and the input-frame spacing of their taps, for every
    /// convolution including the depth expansion.
    fn time_taps(&self) -> Vec<(usize, usize)> {
        let mut spacing = 1;
        let mut taps = Vec::new();
        for l in &self.conv {
            taps.push((l.kernel[0], spacing));
            spacing *= l.stride[0];
        }
        taps.push((self.expand_kernel[0], spacing));
        taps
    }

    /// Input frames seen by one primary slice.
    pub fn receptive_frames(&self) -> usize {
        1 + self.time_taps().iter().map(|(k, s)| (k - 1) * s).sum::<usize>()
    }

    /// Future input frames seen by one primary slice under same padding.
    pub fn right_context_frames(&self) -> usize {
        self.time_taps().iter().map(|(k, s)| (k - 1) / 2 * s).sum()
    }

    /// Shortest input accepted: the receptive extent of the convolution
    /// layers.
    pub fn min_frames(&self) -> usize {
        let taps = self.time_taps();
        1 + taps[..taps.len() - 1].iter().map(|(k, s)| (k - 1) * s).sum::<usize>()
    }

    /// Learnable scalars in the front-end.
    pub fn parameter_count(&self) -> usize {
        let mut count = 0;
        let mut cin = 1;
        for l in &self.conv {
            count += self.maxout * l.kernel[0] * l.kernel[1] * cin * l.channels;
            count += 2 * l.channels;
            cin = l.channels;
        }
        count += self.flat_width() * self.height;
        count += self.maxout * self.expand_kernel[0] * self.expand_kernel[1] * self.depth;
        if self.activation_branch {
            count += self.flat_width() * self.height;
        }
        count
    }
}

/// Activations `[T, H]` paired with instantiation vectors `[T, H, D]`.
#[derive(Clone, Copy, Debug)]
pub struct CapsuleGroup {
    pub a: Var,
    pub u: Var,
}

pub struct ConvParams {
    /// One kernel `[KT, KF, C_in, C_out]` per maxout branch.
    pub branches: Vec<Var>,
    pub gamma: Var,
    pub beta: Var,
}

pub struct CapsulationParams {
    pub conv: Vec<ConvParams>,
    /// `[F·C, P_H]`.
    pub project_u: Var,
    /// One kernel `[KT, KH, 1, P_D]` per maxout branch.
    pub expand: Vec<Var>,
    /// `[F·C, P_H]`, present when the activation branch is enabled.
    pub project_a: Option<Var>,
}

/// Stochastic and normalization behavior of one forward pass.
pub struct Pass<'a> {
    /// Dropout source; `None` disables dropout.
    pub rng: Option<&'a mut ChaCha8Rng>,
    /// Frozen batch-norm statistics; `None` normalizes with the statistics
    /// of the current sequence.
    pub running: Option<&'a [NormStats]>,
}

impl Pass<'_> {
    pub fn inference(running: &[NormStats]) -> Pass<'_> {
        Pass {
            rng: None,
            running: Some(running),
        }
    }
}

fn maxout_conv(
    tape: &mut Tape,
    x: Var,
    branches: &[Var],
    stride: (usize, usize),
    rate: f64,
    pass: &mut Pass<'_>,
) -> Result<Var> {
    let mut outs = Vec::with_capacity(branches.len());
    for &k in branches {
        let y = tape.conv2d(x, k, stride, Padding::Same)?;
        let y = match pass.rng.as_deref_mut() {
            Some(rng) => tape.dropout(y, rate, rng)?,
            None => y,
        };
        outs.push(y);
    }
    tape.maximum(&outs)
}

/// Runs the convolution stack on `x: [T′, F′]`, giving `[T, F, C]` and the
/// batch-norm statistics observed (empty under frozen statistics).
pub fn conv_frontend(
    tape: &mut Tape,
    x: Var,
    cfg: &CapsulationConfig,
    params: &CapsulationParams,
    pass: &mut Pass<'_>,
) -> Result<(Var, Vec<NormStats>)> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 || shape[1] != cfg.input_dim {
        return Err(Error::shape(
            "conv_frontend",
            format!("input {shape:?}, expected [T, {}]", cfg.input_dim),
        ));
    }
    let required = cfg.min_frames();
    if shape[0] < required {
        return Err(Error::SequenceTooShort {
            len: shape[0],
            required,
        });
    }
    let mut h = tape.reshape(x, &[shape[0], shape[1], 1])?;
    let mut stats = Vec::new();
    for (i, (layer, p)) in cfg.conv.iter().zip(&params.conv).enumerate() {
        let stride = (layer.stride[0], layer.stride[1]);
        let y = maxout_conv(tape, h, &p.branches, stride, cfg.dropout, pass)?;
        h = match pass.running {
            Some(running) => {
                let s = &running[i];
                tape.batch_norm(y, p.gamma, p.beta, &s.mean, &s.var, BATCH_NORM_EPS)?
            }
            None => {
                let (v, s) = tape.batch_norm_train(y, p.gamma, p.beta, BATCH_NORM_EPS)?;
                stats.push(s);
                v
            }
        };
    }
    Ok((h, stats))
}

fn flatten(tape: &mut Tape, conv: Var) -> Result<Var> {
    let s = tape.shape(conv).to_vec();
    tape.reshape(conv, &[s[0], s[1] * s[2]])
}

/// Flattens `[T, F, C]` per frame and maps it linearly to `[T, P_H]`.
pub fn flatten_project_u(tape: &mut Tape, conv: Var, w_u: Var) -> Result<Var> {
    let flat = flatten(tape, conv)?;
    tape.matmul(flat, w_u)
}

/// Sigmoid of a separate linear projection of the flattened front-end
/// output, giving activations in `[0, 1]`.
pub fn project_activations(tape: &mut Tape, conv: Var, w_a: Option<Var>) -> Result<Var> {
    let w_a = w_a.ok_or_else(|| Error::config("activation_branch", "branch is disabled"))?;
    let flat = flatten(tape, conv)?;
    let z = tape.matmul(flat, w_a)?;
    tape.sigmoid(z)
}

/// Expands `[T, P_H]` to `[T, P_H, P_D]` with a maxout convolution.
pub fn expand_depth(
    tape: &mut Tape,
    u_prime: Var,
    kernels: &[Var],
    rate: f64,
    pass: &mut Pass<'_>,
) -> Result<Var> {
    let s = tape.shape(u_prime).to_vec();
    let img = tape.reshape(u_prime, &[s[0], s[1], 1])?;
    maxout_conv(tape, img, kernels, (1, 1), rate, pass)
}

/// Full capsulation block. `U` is returned unsquashed; `A` is the length of
/// the squashed `U` unless the activation branch is enabled.
pub fn capsulate(
    tape: &mut Tape,
    x: Var,
    cfg: &CapsulationConfig,
    params: &CapsulationParams,
    pass: &mut Pass<'_>,
) -> Result<(CapsuleGroup, Vec<NormStats>)> {
    let (conv, stats) = conv_frontend(tape, x, cfg, params, pass)?;
    let u_prime = flatten_project_u(tape, conv, params.project_u)?;
    let u = expand_depth(tape, u_prime, &params.expand, cfg.dropout, pass)?;
    let a = if cfg.activation_branch {
        project_activations(tape, conv, params.project_a)?
    } else {
        let squashed = tape.squash(u, 2)?;
        tape.vector_length(squashed, 2)?
    };
    Ok((CapsuleGroup { a, u }, stats))
}
