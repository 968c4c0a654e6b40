use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use srf_core::ctc::{ctc_loss_value, greedy_decode, prefix_beam_decode, LabelAlphabet};
use srf_core::data::Utterance;
use srf_core::metrics::{
    argmax, column_sums, eos_detection_rate, export_coupling_heatmap, framewise_substitution_rate, token_error_rate,
    AlignmentResult, HeatmapFiles,
};
use srf_core::model::{Mode, SrfModel};
use srf_core::routing::{stack_receptive_slices, transform_matrix_count};
use srf_core::tensor::{Tape, Tensor};
use srf_core::trainer::{average_checkpoints, train as run_training, Checkpoint, EpochRecord, StepRecord, TrainState};

use crate::config::{RunConfig, SeedPurpose};
use crate::corpus;
use crate::error::{CliError, Result};

const LOSS_HEADER: &str = "epoch,step,train_loss,valid_loss,valid_error";
const STEPS_HEADER: &str = "epoch,step,rate,loss";

fn write_out(out: &mut dyn Write, text: std::fmt::Arguments<'_>) -> Result<()> {
    out.write_fmt(text).map_err(|e| CliError::io(Path::new("<stdout>"), e))
}

macro_rules! say {
    ($out:expr, $($arg:tt)*) => {
        write_out($out, format_args!("{}\n", format_args!($($arg)*)))
    };
}

pub fn build_model(cfg: &RunConfig) -> Result<SrfModel> {
    Ok(SrfModel::new(cfg.model.clone(), cfg.train.init_scale, &mut cfg.init_rng())?)
}

/// The configured model with the weights of a checkpoint.
pub fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<SrfModel> {
    let mut model = build_model(cfg)?;
    Checkpoint::load(checkpoint)?.restore(&mut model, cfg.train.adam)?;
    Ok(model)
}

pub fn checkpoint_path(cfg: &RunConfig, epoch: usize) -> PathBuf {
    cfg.output_dir.join("checkpoints").join(format!("epoch{epoch:04}.ckpt"))
}

pub fn loss_row(r: &EpochRecord) -> String {
    format!("{},{},{},{},{}", r.epoch, r.step, r.train_loss, r.valid_loss, r.valid_error)
}

fn step_row(r: &StepRecord) -> String {
    format!("{},{},{},{}", r.epoch, r.step, r.rate, r.loss)
}

/// Rewrites a CSV log keeping the header and the rows of epochs up to
/// `epoch`, which must be the first column.
fn truncate_log(path: &Path, header: &str, epoch: usize) -> Result<()> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(CliError::io(path, e)),
    };
    let mut kept = format!("{header}\n");
    for line in text.lines().skip(1) {
        let e: usize = line
            .split(',')
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| CliError::Usage(format!("{}: malformed row {line:?}", path.display())))?;
        if e <= epoch {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| CliError::io(path, e))
}

fn append(path: &Path, rows: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| CliError::io(path, e))?;
    f.write_all(rows.as_bytes()).map_err(|e| CliError::io(path, e))
}

pub struct TrainSummary {
    pub epochs: Vec<EpochRecord>,
    pub final_checkpoint: PathBuf,
}

/// Trains from scratch, or from an epoch checkpoint, writing one checkpoint
/// per epoch, `loss.csv`, `steps.csv` and the averaged `final.ckpt`.
pub fn train(cfg: &RunConfig, resume: Option<&Path>, out: &mut dyn Write) -> Result<TrainSummary> {
    let data = corpus::load(cfg)?;
    if data.train.is_empty() {
        return Err(CliError::config("data", "the training split is empty"));
    }
    let alphabet = cfg.alphabet.build()?;
    let mut state = TrainState::new(build_model(cfg)?, cfg.train.adam);
    if let Some(path) = resume {
        let (adam, epoch) = Checkpoint::load(path)?.restore(&mut state.model, cfg.train.adam)?;
        state.adam = adam;
        state.epoch = epoch;
    }

    let dir = cfg.output_dir.join("checkpoints");
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let loss_csv = cfg.output_dir.join("loss.csv");
    let steps_csv = cfg.output_dir.join("steps.csv");
    truncate_log(&loss_csv, LOSS_HEADER, state.epoch)?;
    truncate_log(&steps_csv, STEPS_HEADER, state.epoch)?;
    say!(
        out,
        "training {} utterances, {} validation, {} parameters, epochs {}..{}",
        data.train.len(),
        data.valid.len(),
        state.model.parameter_count(),
        state.epoch + 1,
        cfg.train.epochs
    )?;

    let seed = cfg.derived_seed(SeedPurpose::Train);
    let mut epochs = Vec::new();
    let history = run_training(
        &mut state,
        &data.train,
        &data.valid,
        &cfg.train,
        seed,
        alphabet.blank(),
        |record, ckpt| {
            let path = checkpoint_path(cfg, record.epoch);
            ckpt.save(&path)?;
            append(&loss_csv, &format!("{}\n", loss_row(record))).map_err(into_core)?;
            writeln!(
                out,
                "epoch {} step {} train_loss {:.6} valid_loss {:.6} valid_error {:.2}%",
                record.epoch, record.step, record.train_loss, record.valid_loss, record.valid_error
            )?;
            epochs.push(*record);
            Ok(())
        },
    );
    let history = history?;
    let rows: String = history.steps.iter().map(|s| step_row(s) + "\n").collect();
    append(&steps_csv, &rows)?;

    let last = state.epoch;
    let final_ckpt = if last == 0 {
        state.checkpoint()
    } else {
        let first = last.saturating_sub(cfg.train.average_last) + 1;
        let ckpts = (first..=last)
            .map(|e| Checkpoint::load(&checkpoint_path(cfg, e)))
            .collect::<srf_core::Result<Vec<_>>>()?;
        average_checkpoints(&ckpts)?
    };
    let final_checkpoint = cfg.output_dir.join("final.ckpt");
    final_ckpt.save(&final_checkpoint)?;
    say!(out, "wrote {}", final_checkpoint.display())?;
    Ok(TrainSummary { epochs, final_checkpoint })
}

fn into_core(e: CliError) -> srf_core::Error {
    match e {
        CliError::Core(e) => e,
        CliError::Io { source, .. } => srf_core::Error::Io(source),
        other => srf_core::Error::Io(std::io::Error::other(other.to_string())),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decoder {
    Greedy,
    Beam(usize),
}

impl Decoder {
    pub fn decode(self, log_probs: &Tensor, blank: usize) -> Vec<usize> {
        match self {
            Decoder::Greedy => greedy_decode(log_probs, blank),
            Decoder::Beam(width) => prefix_beam_decode(log_probs, blank, width),
        }
    }
}

/// Log-probabilities and hypothesis of one utterance.
pub type Decoded = (Tensor, Vec<usize>);

/// Hypotheses of every utterance, in input order, and the wall time spent
/// computing them.
pub fn decode_all(
    cfg: &RunConfig,
    model: &SrfModel,
    data: &[Utterance],
    decoder: Decoder,
) -> Result<(Vec<Decoded>, f64)> {
    let blank = cfg.alphabet.blank;
    let start = Instant::now();
    let results = cfg.train.execution.map(data, |_, u| -> srf_core::Result<Decoded> {
        let lp = model.log_probs(&u.features)?;
        let hyp = decoder.decode(&lp, blank);
        Ok((lp, hyp))
    });
    let seconds = start.elapsed().as_secs_f64();
    let results = results.into_iter().collect::<srf_core::Result<Vec<_>>>()?;
    Ok((results, seconds))
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub utterances: usize,
    pub loss: f64,
    pub alignment: AlignmentResult,
    pub eos_rate: Option<f64>,
    pub frames: usize,
    pub decode_seconds: f64,
    pub real_time_factor: f64,
    pub hypotheses: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn error_percent(&self) -> f64 {
        100.0 * self.alignment.error_rate()
    }
}

pub fn evaluate(cfg: &RunConfig, model: &SrfModel, data: &[Utterance], decoder: Decoder) -> Result<EvalReport> {
    let alphabet = cfg.alphabet.build()?;
    let (results, decode_seconds) = decode_all(cfg, model, data, decoder)?;
    let mut loss = 0.0;
    let mut alignment = AlignmentResult::default();
    let mut hypotheses = Vec::with_capacity(data.len());
    for ((lp, hyp), u) in results.into_iter().zip(data) {
        loss += ctc_loss_value(&lp, &u.labels, alphabet.blank())?;
        alignment += token_error_rate(&u.labels, &hyp);
        hypotheses.push(hyp);
    }
    let frames: usize = data.iter().map(Utterance::frames).sum();
    let audio_seconds = frames as f64 * cfg.timing.hop_ms / 1000.0;
    Ok(EvalReport {
        utterances: data.len(),
        loss: loss / data.len().max(1) as f64,
        alignment,
        eos_rate: alphabet.eos().map(|eos| eos_detection_rate(&hypotheses, eos)),
        frames,
        decode_seconds,
        real_time_factor: if frames > 0 { decode_seconds / audio_seconds } else { 0.0 },
        hypotheses,
    })
}

pub fn print_report(r: &EvalReport, decoder: Decoder, out: &mut dyn Write) -> Result<()> {
    let decoder = match decoder {
        Decoder::Greedy => "greedy".to_owned(),
        Decoder::Beam(w) => format!("beam {w}"),
    };
    say!(out, "decoder: {decoder}")?;
    say!(out, "utterances: {}", r.utterances)?;
    say!(out, "loss: {}", r.loss)?;
    say!(out, "token_error_rate: {}", r.error_percent())?;
    say!(out, "reference_tokens: {}", r.alignment.reference_len())?;
    say!(out, "substitutions: {}", r.alignment.substitutions)?;
    say!(out, "insertions: {}", r.alignment.insertions)?;
    say!(out, "deletions: {}", r.alignment.deletions)?;
    match r.eos_rate {
        Some(v) => say!(out, "eos_detection_rate: {v}")?,
        None => say!(out, "eos_detection_rate: n/a")?,
    }
    say!(out, "frames: {}", r.frames)?;
    say!(out, "decode_seconds: {}", r.decode_seconds)?;
    say!(out, "real_time_factor: {}", r.real_time_factor)
}

/// Writes `id<TAB>symbols` for every utterance.
pub fn decode(
    cfg: &RunConfig,
    model: &SrfModel,
    data: &[Utterance],
    decoder: Decoder,
    out: &mut dyn Write,
) -> Result<Vec<Vec<usize>>> {
    let alphabet = cfg.alphabet.build()?;
    let (results, _) = decode_all(cfg, model, data, decoder)?;
    let mut hyps = Vec::with_capacity(data.len());
    for ((_, hyp), u) in results.into_iter().zip(data) {
        say!(out, "{}\t{}", u.id, alphabet.render(&hyp))?;
        hyps.push(hyp);
    }
    Ok(hyps)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerInfo {
    pub matrices: usize,
    pub parameters: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Info {
    pub capsulation_parameters: usize,
    pub layers: Vec<LayerInfo>,
    pub matrices: usize,
    pub parameters: usize,
    pub receptive_slices: usize,
    pub receptive_frames: usize,
    pub lookahead_frames: usize,
    pub lookahead_ms: f64,
    pub min_frames: usize,
}

pub fn info(cfg: &RunConfig) -> Result<Info> {
    let model = build_model(cfg)?;
    let m = &cfg.model;
    let count = |prefix: &str| -> usize {
        model
            .params()
            .trainable()
            .filter(|(_, e)| e.name.starts_with(prefix))
            .map(|(_, e)| e.value.len())
            .sum()
    };
    let layers = m
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| LayerInfo {
            matrices: layer.matrix_count(),
            parameters: count(&format!("routing.layer{l}.")),
        })
        .collect();
    let windows: Vec<_> = m.layers.iter().map(|l| l.window).collect();
    let t = &cfg.timing;
    let look = m.lookahead(t.hop_ms, t.win_ms, t.delta_frames);
    Ok(Info {
        capsulation_parameters: count("capsulation."),
        layers,
        matrices: transform_matrix_count(&m.layers),
        parameters: model.parameter_count(),
        receptive_slices: stack_receptive_slices(&windows),
        receptive_frames: m.receptive_frames(t.delta_frames),
        lookahead_frames: look.frames,
        lookahead_ms: look.ms,
        min_frames: model.min_frames(),
    })
}

pub fn print_info(cfg: &RunConfig, info: &Info, out: &mut dyn Write) -> Result<()> {
    let cap = &cfg.model.capsulation;
    say!(
        out,
        "capsulation: primary {}x{}, time stride {}, parameters {}",
        cap.height,
        cap.depth,
        cap.time_stride(),
        info.capsulation_parameters
    )?;
    for (l, (layer, li)) in cfg.model.layers.iter().zip(&info.layers).enumerate() {
        say!(
            out,
            "layer {l}: {}x{} -> {}x{}, window {}-{}, {:?} x{}, matrices {}, parameters {}",
            layer.in_height,
            layer.in_depth,
            layer.height,
            layer.depth,
            layer.window.left,
            layer.window.right,
            layer.method,
            layer.iterations,
            li.matrices,
            li.parameters
        )?;
    }
    say!(out, "transformation_matrices: {}", info.matrices)?;
    say!(out, "parameters: {}", info.parameters)?;
    say!(out, "receptive_field_slices: {}", info.receptive_slices)?;
    say!(out, "receptive_field_frames: {}", info.receptive_frames)?;
    say!(out, "lookahead_frames: {}", info.lookahead_frames)?;
    say!(out, "lookahead_ms: {:.1}", info.lookahead_ms)?;
    say!(out, "min_frames: {}", info.min_frames)
}

#[derive(Clone, Debug)]
pub struct Inspection {
    /// Final-iteration couplings `[N, O_H]` of the inspected layer per slice.
    pub couplings: Vec<Tensor>,
    pub files: Vec<HeatmapFiles>,
    /// Per-frame argmax of class-layer coupling column sums.
    pub coupling_argmax: Vec<usize>,
    /// Per-frame argmax of the output distribution.
    pub output_argmax: Vec<usize>,
    /// Percentage of frames where the two disagree.
    pub substitution_rate: f64,
}

fn class_symbols(alphabet: &LabelAlphabet, height: usize, is_class_layer: bool) -> Vec<String> {
    if is_class_layer {
        alphabet.symbols().to_vec()
    } else {
        (0..height).map(|j| format!("c{j}")).collect()
    }
}

/// Writes a heatmap per slice of one layer's couplings for one utterance.
pub fn inspect(cfg: &RunConfig, model: &SrfModel, utt: &Utterance, layer: usize, dir: &Path) -> Result<Inspection> {
    let layers = &cfg.model.layers;
    if layer >= layers.len() {
        return Err(CliError::Usage(format!(
            "layer {layer} out of range, the model has {} capsule layers",
            layers.len()
        )));
    }
    let alphabet = cfg.alphabet.build()?;
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, &utt.features, Mode::Eval, true)?;
    let log_probs = tape.value(fwd.log_probs).clone();
    let last = layers.len() - 1;
    let symbols = class_symbols(&alphabet, layers[layer].height, layer == last);

    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let couplings = fwd.layers[layer].couplings.clone();
    let files = couplings
        .iter()
        .enumerate()
        .map(|(t, c)| export_coupling_heatmap(c, &symbols, dir, &format!("layer{layer}_t{t:04}")))
        .collect::<srf_core::Result<Vec<_>>>()?;

    let coupling_argmax: Vec<usize> = fwd.layers[last].couplings.iter().map(|c| argmax(&column_sums(c))).collect();
    let output_argmax: Vec<usize> = (0..log_probs.dim(0)).map(|t| argmax(log_probs.row(t))).collect();
    let substitution_rate = framewise_substitution_rate(&coupling_argmax, &output_argmax)?;
    Ok(Inspection {
        couplings,
        files,
        coupling_argmax,
        output_argmax,
        substitution_rate,
    })
}
