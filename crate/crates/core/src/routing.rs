//! Windowed capsule layers routed slice by slice.
//!
//! Every layer owns one transformation kernel `[ω·I_H, O_H, I_D, O_D]` that
//! is shared by all time slices. At slice `t` the input capsules of slices
//! `t - ω_L ..= t + ω_R` are stacked (zeros outside the sequence), mapped to
//! prediction vectors and routed to `O_H` output capsules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{MaskMode, Tape, Tensor, Var};

/// Routing algorithm of a capsule layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Plain dynamic routing; slices are independent.
    Dr,
    /// Sequential dynamic routing; each slice starts from the previous
    /// slice's output capsules.
    #[default]
    Sdr,
}

/// Context of the sliding window, in slices. The stride is always one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub left: usize,
    pub right: usize,
}

impl WindowConfig {
    pub fn new(left: usize, right: usize) -> Self {
        Self { left, right }
    }

    pub fn width(&self) -> usize {
        self.left + 1 + self.right
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub in_height: usize,
    pub in_depth: usize,
    pub height: usize,
    pub depth: usize,
    pub window: WindowConfig,
    pub iterations: usize,
    #[serde(default)]
    pub method: Method,
    /// Index of an output capsule that never receives coupling mass.
    #[serde(default)]
    pub mask_padding: Option<usize>,
    #[serde(default)]
    pub mask_mode: MaskMode,
}

impl LayerConfig {
    /// Checks the layer in isolation; `prefix` names it in error messages.
    pub fn validate(&self, prefix: &str) -> Result<()> {
        for (name, v) in [
            ("in_height", self.in_height),
            ("in_depth", self.in_depth),
            ("height", self.height),
            ("depth", self.depth),
            ("iterations", self.iterations),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{prefix}.{name}"), "must be at least 1"));
            }
        }
        if let Some(p) = self.mask_padding {
            if p >= self.height {
                return Err(Error::config(
                    format!("{prefix}.mask_padding"),
                    format!("index {p} outside 0..{}", self.height),
                ));
            }
        }
        Ok(())
    }

    /// Number of `I_D × O_D` matrices in the kernel.
    pub fn matrix_count(&self) -> usize {
        self.window.width() * self.in_height * self.height
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [
            self.window.width() * self.in_height,
            self.height,
            self.in_depth,
            self.depth,
        ]
    }

    fn mask(&self) -> Option<(usize, MaskMode)> {
        self.mask_padding.map(|p| (p, self.mask_mode))
    }
}

/// Output of routing one slice.
#[derive(Clone, Copy, Debug)]
pub struct Routed {
    /// Output instantiation vectors `[O_H, O_D]`.
    pub o: Var,
    /// Coupling coefficients `[N, O_H]` of the final iteration.
    pub coupling: Var,
}

/// Stacks the input capsules seen by slice `t` (zero based) into
/// `[ω·I_H, I_D]`.
pub fn slice_window(tape: &mut Tape, u: Var, t: usize, window: WindowConfig) -> Result<Var> {
    tape.window(u, t, window.left, window.right)
}

fn coupling(tape: &mut Tape, logits: Var, mask: Option<(usize, MaskMode)>) -> Result<Var> {
    match mask {
        Some((col, mode)) => tape.masked_softmax(logits, col, mode),
        None => tape.softmax(logits, 1),
    }
}

/// Row-wise coupling of routing logits `[N, O_H]`, with column `padding`
/// excluded from every row.
pub fn mask_padding_class(tape: &mut Tape, logits: Var, padding: usize, mode: MaskMode) -> Result<Var> {
    tape.masked_softmax(logits, padding, mode)
}

fn check_predictions(tape: &Tape, uhat: Var, iterations: usize) -> Result<(usize, usize, usize)> {
    if iterations == 0 {
        return Err(Error::config("iterations", "must be at least 1"));
    }
    let s = tape.shape(uhat);
    if s.len() != 3 {
        return Err(Error::shape("routing", format!("predictions must be [N, O_H, O_D], got {s:?}")));
    }
    Ok((s[0], s[1], s[2]))
}

/// Dynamic routing of prediction vectors `uhat: [N, O_H, O_D]`.
///
/// Logits start at zero; each iteration computes couplings, the weighted
/// sums and their squash, then adds the agreement to the logits. The
/// agreement after the final iteration would not be read, so it is skipped.
pub fn dynamic_routing(
    tape: &mut Tape,
    uhat: Var,
    iterations: usize,
    mask: Option<(usize, MaskMode)>,
) -> Result<Routed> {
    let (n, oh, _) = check_predictions(tape, uhat, iterations)?;
    let mut logits = tape.constant(Tensor::zeros(&[n, oh]))?;
    let mut routed = None;
    for it in 0..iterations {
        let c = coupling(tape, logits, mask)?;
        let s = tape.weighted_sum(c, uhat)?;
        let o = tape.squash(s, 1)?;
        routed = Some(Routed { o, coupling: c });
        if it + 1 < iterations {
            let agree = tape.agreement(uhat, o)?;
            logits = tape.add(logits, agree)?;
        }
    }
    Ok(routed.expect("at least one iteration"))
}

/// Sequential dynamic routing: like [`dynamic_routing`] but the output
/// capsules start at `o_prev` and every iteration updates the logits before
/// computing couplings.
pub fn sequential_dynamic_routing(
    tape: &mut Tape,
    uhat: Var,
    o_prev: Var,
    iterations: usize,
    mask: Option<(usize, MaskMode)>,
) -> Result<Routed> {
    let (n, oh, od) = check_predictions(tape, uhat, iterations)?;
    if tape.shape(o_prev) != [oh, od] {
        return Err(Error::shape(
            "sequential_dynamic_routing",
            format!("previous output {:?}, expected [{oh}, {od}]", tape.shape(o_prev)),
        ));
    }
    let mut logits = tape.constant(Tensor::zeros(&[n, oh]))?;
    let mut o = o_prev;
    let mut c = None;
    for _ in 0..iterations {
        let agree = tape.agreement(uhat, o)?;
        logits = tape.add(logits, agree)?;
        let cv = coupling(tape, logits, mask)?;
        let s = tape.weighted_sum(cv, uhat)?;
        o = tape.squash(s, 1)?;
        c = Some(cv);
    }
    Ok(Routed { o, coupling: c.expect("at least one iteration") })
}

/// Output of one capsule layer over a whole sequence.
pub struct LayerOutput {
    /// Instantiation vectors `[T, O_H, O_D]`.
    pub u: Var,
    /// Activations `[T, O_H]`, the lengths of `u`.
    pub a: Var,
    /// Final-iteration couplings per slice, when capture was requested.
    pub couplings: Vec<Tensor>,
}

/// Routes every slice of `u: [T, I_H, I_D]` through one layer.
///
/// Under SDR the previous output starts at zero for the first slice of each
/// call, so every utterance starts from a clean state.
pub fn layer_forward(
    tape: &mut Tape,
    u: Var,
    cfg: &LayerConfig,
    kernel: Var,
    capture: bool,
) -> Result<LayerOutput> {
    let shape = tape.shape(u).to_vec();
    if shape.len() != 3 || shape[1] != cfg.in_height || shape[2] != cfg.in_depth {
        return Err(Error::shape(
            "layer_forward",
            format!("input {shape:?}, expected [T, {}, {}]", cfg.in_height, cfg.in_depth),
        ));
    }
    if tape.shape(kernel) != cfg.kernel_shape() {
        return Err(Error::shape(
            "layer_forward",
            format!("kernel {:?}, expected {:?}", tape.shape(kernel), cfg.kernel_shape()),
        ));
    }
    let steps = shape[0];
    let mut outputs = Vec::with_capacity(steps);
    let mut couplings = Vec::new();
    let mut prev = match cfg.method {
        Method::Sdr => Some(tape.constant(Tensor::zeros(&[cfg.height, cfg.depth]))?),
        Method::Dr => None,
    };
    for t in 0..steps {
        let window = slice_window(tape, u, t, cfg.window)?;
        let uhat = tape.prediction_vectors(window, kernel)?;
        let routed = match prev {
            Some(o_prev) => sequential_dynamic_routing(tape, uhat, o_prev, cfg.iterations, cfg.mask())?,
            None => dynamic_routing(tape, uhat, cfg.iterations, cfg.mask())?,
        };
        if prev.is_some() {
            prev = Some(routed.o);
        }
        if capture {
            couplings.push(tape.value(routed.coupling).clone());
        }
        outputs.push(routed.o);
    }
    let u = tape.stack(&outputs)?;
    let a = tape.vector_length(u, 2)?;
    Ok(LayerOutput { u, a, couplings })
}

/// Slices of input seen by one output slice of `layers` stacked layers with
/// window width `width`.
pub fn receptive_field_slices(layers: usize, width: usize) -> usize {
    if layers == 0 {
        return 1;
    }
    width + (layers - 1) * (width - 1)
}

/// Receptive field in slices of a stack with per-layer windows.
pub fn stack_receptive_slices(windows: &[WindowConfig]) -> usize {
    1 + windows.iter().map(|w| w.width() - 1).sum::<usize>()
}

/// Look-ahead of a streaming model, in input frames and milliseconds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lookahead {
    pub frames: usize,
    pub ms: f64,
}

/// Future input frames needed before the output of a frame can be emitted.
///
/// The delay in milliseconds counts the hop of every future frame plus half
/// an analysis window.
pub fn lookahead_and_delay(
    right: usize,
    layers: usize,
    frontend_right_frames: usize,
    frames_per_slice: usize,
    hop_ms: f64,
    win_ms: f64,
    delta_frames: usize,
) -> Lookahead {
    let frames = delta_frames + frontend_right_frames + layers * right * frames_per_slice;
    Lookahead {
        frames,
        ms: hop_ms * frames as f64 + win_ms / 2.0,
    }
}

/// Total number of transformation matrices over `layers`.
pub fn transform_matrix_count(layers: &[LayerConfig]) -> usize {
    layers.iter().map(LayerConfig::matrix_count).sum()
}

/// Learnable scalars in the routing kernels of `layers`.
pub fn routing_parameter_count(layers: &[LayerConfig]) -> usize {
    layers
        .iter()
        .map(|l| l.matrix_count() * l.in_depth * l.depth)
        .sum()
}

/// Total look-ahead in slices of a stack: the sum of right contexts.
pub fn stack_right_context(windows: &[WindowConfig]) -> usize {
    windows.iter().map(|w| w.right).sum()
}
