//! Loss, optimizer, the training and validation loops, progressive user
//! doubling, and checkpoint persistence.
//!
//! Training minimizes the summed per-user reconstruction error over random
//! co-transmission tuples with per-tuple SNR and gain draws. Validation is
//! a fixed measurement: tuple membership, SNR, gains, and noise are all
//! pure functions of the seed and a global user-slot position, so every
//! epoch — and every doubling stage — is scored against the same channel.
//! That positional construction is what lets a freshly doubled system
//! reproduce its parent's validation PSNR to floating-point accuracy: the
//! doubled codebook routes each parent transmission into an orthogonal
//! subspace, and the validation noise is composed through the same bases.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::psnr;
use crate::channel::{sample_gains, sample_noise, snr_db_to_noise_var, ChannelKind, ComplexTensor};
use crate::data::{build_eval_tuples, build_train_tuples, ImageDataset, TupleIndexSet};
use crate::error::{Error, Result};
use crate::model::{
    forward_system, stage_leaves, ModelParams, SystemConfig, UserChannelView,
};
use crate::numcore::{streams, RngSnapshot, RngStream, Tape, Tensor, Var};
use crate::projection::{double, init_single_user, realify, CodebookState, ComplexMatrix};

/// Substream slots hung off each validation user position.
const VAL_SLOT_SNR: u64 = 0;
const VAL_SLOT_GAIN: u64 = 1;
const VAL_SLOT_NOISE: u64 = 2;
const VAL_SLOTS: u64 = 8;

// ---------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------

/// Optimization hyperparameters and the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Per-tuple training SNR is uniform over this range (dB).
    pub snr_low_db: f64,
    pub snr_high_db: f64,
    /// Stop when validation PSNR improves by less than this (dB) ...
    pub early_stop_delta_db: f64,
    /// ... for this many consecutive epochs.
    pub patience: usize,
    pub max_epochs: usize,
    /// Training tuple count is this multiple of the dataset size.
    pub tuple_multiplier: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            snr_low_db: 0.0,
            snr_high_db: 20.0,
            early_stop_delta_db: 1e-3,
            patience: 10,
            max_epochs: 60,
            tuple_multiplier: 3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 || self.patience == 0 || self.tuple_multiplier == 0 {
            return Err(Error::Config(
                "batch size, patience, and tuple multiplier must be positive".to_string(),
            ));
        }
        if !(self.snr_low_db <= self.snr_high_db) {
            return Err(Error::Config(format!(
                "empty SNR range [{}, {}]",
                self.snr_low_db, self.snr_high_db
            )));
        }
        if !(self.beta1 >= 0.0 && self.beta1 < 1.0 && self.beta2 >= 0.0 && self.beta2 < 1.0) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".to_string()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------
// streams and state
// ---------------------------------------------------------------------

/// The stateful random streams a training run consumes. Everything else
/// (validation, tuple tables, shuffles) uses derived substreams and needs
/// no stored position.
#[derive(Debug, Clone)]
pub struct StreamSet {
    pub snr: RngStream,
    pub gains: RngStream,
    pub noise: RngStream,
    pub doubling: RngStream,
}

impl StreamSet {
    pub fn new(seed: u64) -> Self {
        StreamSet {
            snr: RngStream::new(seed, streams::TRAIN_SNR),
            gains: RngStream::new(seed, streams::TRAIN_GAINS),
            noise: RngStream::new(seed, streams::TRAIN_NOISE),
            doubling: RngStream::new(seed, streams::DOUBLING),
        }
    }

    fn snapshots(&self) -> BTreeMap<String, RngSnapshot> {
        let mut map = BTreeMap::new();
        map.insert("snr".to_string(), self.snr.snapshot());
        map.insert("gains".to_string(), self.gains.snapshot());
        map.insert("noise".to_string(), self.noise.snapshot());
        map.insert("doubling".to_string(), self.doubling.snapshot());
        map
    }

    fn restore(map: &BTreeMap<String, RngSnapshot>) -> Result<Self> {
        let get = |name: &str| {
            map.get(name)
                .map(RngStream::restore)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks rng stream '{name}'")))
        };
        Ok(StreamSet {
            snr: get("snr")?,
            gains: get("gains")?,
            noise: get("noise")?,
            doubling: get("doubling")?,
        })
    }
}

/// Everything a run carries between epochs and stages.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub sys: SystemConfig,
    pub tcfg: TrainConfig,
    pub channel: ChannelKind,
    pub params: ModelParams,
    pub codebook: CodebookState,
    pub adam: AdamState,
    /// Trained epochs so far, cumulative across doubling stages.
    pub epoch: u64,
    /// Validation PSNR of the retained (best) parameters from the last fit.
    pub best_val_psnr: f64,
    pub streams: StreamSet,
}

impl TrainState {
    /// Fresh single-user state; growing beyond one user goes through
    /// [`progressive_finetune`].
    pub fn new(sys: SystemConfig, tcfg: TrainConfig, channel: ChannelKind) -> Result<Self> {
        sys.validate()?;
        tcfg.validate()?;
        if sys.n != 1 {
            return Err(Error::Config(format!(
                "fresh training starts at one user (got n = {}); larger systems are grown by doubling",
                sys.n
            )));
        }
        let mut init_stream = RngStream::new(tcfg.seed, streams::PARAM_INIT);
        let params = ModelParams::init(&sys, &mut init_stream)?;
        let codebook = init_single_user(sys.m());
        let streams = StreamSet::new(tcfg.seed);
        Ok(TrainState {
            sys,
            tcfg,
            channel,
            params,
            codebook,
            adam: AdamState::new(),
            epoch: 0,
            best_val_psnr: f64::NEG_INFINITY,
            streams,
        })
    }
}

/// All parameters in canonical order with their trainability. The order
/// matches the names `stage_leaves` registers and fixes the checkpoint
/// layout.
pub fn named_parameters<'a>(
    params: &'a ModelParams,
    codebook: &'a CodebookState,
) -> Vec<(String, &'a Tensor, bool)> {
    let mut out = Vec::new();
    for (i, l) in params.enc.iter().enumerate() {
        out.push((format!("enc.{i}.weight"), &l.weight, true));
        out.push((format!("enc.{i}.bias"), &l.bias, true));
    }
    for (i, l) in params.dec.iter().enumerate() {
        out.push((format!("dec.{i}.weight"), &l.weight, true));
        out.push((format!("dec.{i}.bias"), &l.bias, true));
    }
    for (u, p) in codebook.pairs.iter().enumerate() {
        out.push((format!("proj.{u}.enc"), &p.enc, p.trainable));
        out.push((format!("proj.{u}.dec"), &p.dec, p.trainable));
    }
    out
}

fn named_parameters_mut<'a>(
    params: &'a mut ModelParams,
    codebook: &'a mut CodebookState,
) -> Vec<(String, &'a mut Tensor, bool)> {
    let mut out = Vec::new();
    for (i, l) in params.enc.iter_mut().enumerate() {
        out.push((format!("enc.{i}.weight"), &mut l.weight, true));
        out.push((format!("enc.{i}.bias"), &mut l.bias, true));
    }
    for (i, l) in params.dec.iter_mut().enumerate() {
        out.push((format!("dec.{i}.weight"), &mut l.weight, true));
        out.push((format!("dec.{i}.bias"), &mut l.bias, true));
    }
    for (u, p) in codebook.pairs.iter_mut().enumerate() {
        out.push((format!("proj.{u}.enc"), &mut p.enc, p.trainable));
        out.push((format!("proj.{u}.dec"), &mut p.dec, p.trainable));
    }
    out
}

// ---------------------------------------------------------------------
// loss
// ---------------------------------------------------------------------

/// Summed per-user mean-squared reconstruction error:
/// `sum_i ||x_i - xhat_i||^2 / (C*H*W)`.
pub fn reconstruction_loss(tape: &mut Tape, pairs: &[(Var, Var)]) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::shape("loss", "no reconstruction pairs".to_string()));
    }
    let mut total: Option<Var> = None;
    for (x, xhat) in pairs {
        let pixels = tape.value(*x).len();
        let diff = tape.sub(*xhat, *x)?;
        let sq = tape.l2_norm_sq(diff)?;
        let mse = tape.div_scalar(sq, pixels as f64)?;
        total = Some(match total {
            Some(t) => tape.add(t, mse)?,
            None => mse,
        });
    }
    Ok(total.expect("non-empty pairs"))
}

// ---------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------

/// Adam first/second-moment buffers, keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }
}

/// One bias-corrected Adam update. Parameters without a gradient entry
/// (frozen projections, or anything a pass did not touch) are skipped;
/// a non-finite gradient aborts with the parameter's name.
pub fn adam_step(
    adam: &mut AdamState,
    targets: Vec<(String, &mut Tensor, bool)>,
    grads: &BTreeMap<String, Tensor>,
    tcfg: &TrainConfig,
) -> Result<()> {
    adam.t += 1;
    let bc1 = 1.0 - tcfg.beta1.powi(adam.t as i32);
    let bc2 = 1.0 - tcfg.beta2.powi(adam.t as i32);
    for (name, tensor, trainable) in targets {
        let Some(g) = grads.get(&name) else { continue };
        if !trainable {
            return Err(Error::Graph(format!("gradient supplied for frozen parameter {name}")));
        }
        if g.shape() != tensor.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("gradient {:?} for parameter {name} {:?}", g.shape(), tensor.shape()),
            ));
        }
        if !g.all_finite() {
            return Err(Error::numeric("adam_step", format!("non-finite gradient for {name}")));
        }
        let m = adam.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(tensor.shape()));
        let v = adam.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(tensor.shape()));
        let (b1, b2) = (tcfg.beta1, tcfg.beta2);
        for i in 0..tensor.len() {
            let gi = g.data()[i];
            let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
            let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let step = tcfg.lr * (mi / bc1) / ((vi / bc2).sqrt() + tcfg.epsilon);
            tensor.data_mut()[i] -= step;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------
// training epoch
// ---------------------------------------------------------------------

/// Per-epoch accounting.
#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    /// Sum of per-tuple losses over the epoch.
    pub loss_sum: f64,
    pub tuples: usize,
}

/// One pass over all tuples in shuffled order, updating parameters on
/// mean batch gradients every `batch_size` tuples (the trailing partial
/// batch updates too).
pub fn train_epoch(
    state: &mut TrainState,
    ds: &ImageDataset,
    tuples: &TupleIndexSet,
) -> Result<EpochStats> {
    let n = state.sys.n;
    if tuples.n_users() != n {
        return Err(Error::Config(format!(
            "tuple table built for {} users, system has {n}",
            tuples.n_users()
        )));
    }
    let k = state.sys.k();
    let order = RngStream::new(state.tcfg.seed, streams::EPOCH_SHUFFLE)
        .substream(n as u64)
        .substream(state.epoch)
        .permutation(tuples.t_count());

    let mut loss_sum = 0.0;
    for chunk in order.chunks(state.tcfg.batch_size) {
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        for &t in chunk {
            let snr_db = state.streams.snr.uniform(state.tcfg.snr_low_db, state.tcfg.snr_high_db);
            let sigma = snr_db_to_noise_var(snr_db, state.sys.p_bar)?.sqrt();
            let gains = sample_gains(state.channel, n, &mut state.streams.gains);
            let noise = sample_noise(k, sigma, &mut state.streams.noise);
            let views: Vec<UserChannelView> = gains
                .iter()
                .map(|g| UserChannelView { gain: *g, sigma, snr_db })
                .collect();

            let mut tape = Tape::new();
            let gp = stage_leaves(&mut tape, &state.params, &state.codebook, true)?;
            let xs: Vec<Var> = tuples
                .row(t)
                .iter()
                .map(|idx| tape.leaf(ds.image(*idx).clone(), false))
                .collect::<Result<_>>()?;
            let out = forward_system(
                &mut tape,
                &gp,
                &xs,
                &views,
                Some(&noise),
                None,
                &state.codebook,
                &state.sys,
            )?;
            let pairs: Vec<(Var, Var)> = xs
                .iter()
                .zip(&out.recons)
                .map(|(x, r)| (*x, r.expect("all users active")))
                .collect();
            let loss = reconstruction_loss(&mut tape, &pairs)?;
            loss_sum += tape.value(loss).item();
            tape.backward(loss)?;
            for (name, var) in gp.trainable() {
                let g = tape
                    .grad(*var)
                    .ok_or_else(|| Error::Graph(format!("no gradient reached {name}")))?;
                match grads.get_mut(name) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    None => {
                        grads.insert(name.clone(), g.clone());
                    }
                }
            }
        }
        let scale = 1.0 / chunk.len() as f64;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
        adam_step(
            &mut state.adam,
            named_parameters_mut(&mut state.params, &mut state.codebook),
            &grads,
            &state.tcfg,
        )?;
    }
    state.epoch += 1;
    Ok(EpochStats { loss_sum, tuples: tuples.t_count() })
}

// ---------------------------------------------------------------------
// validation
// ---------------------------------------------------------------------

/// Per-user-slot channel draw for the fixed validation measurement.
/// Position `p` is the slot's index in the flattened evaluation
/// permutation, which is what keeps draws aligned across doubling stages.
fn val_draw(base: &RngStream, p: u64, snr_lo: f64, snr_hi: f64, kind: ChannelKind, p_bar: f64)
    -> Result<UserChannelView> {
    let snr_db = base.substream(p * VAL_SLOTS + VAL_SLOT_SNR).uniform(snr_lo, snr_hi);
    let gain = sample_gains(kind, 1, &mut base.substream(p * VAL_SLOTS + VAL_SLOT_GAIN))[0];
    let sigma = snr_db_to_noise_var(snr_db, p_bar)?.sqrt();
    Ok(UserChannelView { gain, sigma, snr_db })
}

fn tensor_add(a: &mut Tensor, b: &Tensor) {
    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
}

/// Builds the validation noise for positions `[lo, lo + size)` as a
/// position-major matrix `[latent area, 2*size*m]`: single slots draw
/// fresh complex noise at their own sigma; larger groups are the two
/// half-group noises composed through the doubling base that created the
/// group, exactly mirroring how the codebook spreads signals.
fn matched_noise_rec(
    codebook: &CodebookState,
    base: &RngStream,
    sigmas: &[f64],
    row_origin: u64,
    lo: usize,
    size: usize,
    area: usize,
) -> Result<Tensor> {
    let m = codebook.m;
    if size == 1 {
        let p = row_origin + lo as u64;
        let sigma = sigmas[lo];
        let mut t = Tensor::zeros(&[area, 2 * m]);
        base.substream(p * VAL_SLOTS + VAL_SLOT_NOISE).fill_normal(
            t.data_mut(),
            0.0,
            sigma / 2f64.sqrt(),
        );
        return Ok(t);
    }
    let half = size / 2;
    let a = matched_noise_rec(codebook, base, sigmas, row_origin, lo, half, area)?;
    let b = matched_noise_rec(codebook, base, sigmas, row_origin, lo + half, half, area)?;
    let stage = size.trailing_zeros() as usize - 1;
    let q = &codebook.stage_bases[stage];
    let k1 = realify(&q.row_block(0, half * m));
    let k2 = realify(&q.row_block(half * m, size * m));
    let mut out = a.matmul2(&k1)?;
    tensor_add(&mut out, &b.matmul2(&k2)?);
    Ok(out)
}

/// Converts a position-major `[area, 2nm]` noise matrix to the flat
/// filter-major complex layout transmitted vectors use.
fn noise_matrix_to_complex(mat: &Tensor, nm: usize, area: usize) -> ComplexTensor {
    let mut out = ComplexTensor::zeros(nm * area);
    for px in 0..area {
        for f in 0..nm {
            out.re.data_mut()[f * area + px] = mat.at2(px, f);
            out.im.data_mut()[f * area + px] = mat.at2(px, nm + f);
        }
    }
    out
}

/// Mean validation PSNR (dB) over every image of the fixed evaluation
/// tuples, under the positional channel draws described in the module
/// docs. Pure in the state: repeated calls agree bit-for-bit.
pub fn validate(state: &TrainState, val_ds: &ImageDataset) -> Result<f64> {
    let n = state.sys.n;
    let mut tuple_stream = RngStream::new(state.tcfg.seed, streams::VAL_TUPLES);
    let tuples = build_eval_tuples(val_ds.len(), n, &mut tuple_stream)?;
    let base = RngStream::new(state.tcfg.seed, streams::VAL_CHANNEL);
    let area = state.sys.latent_w() * state.sys.latent_h();
    let nm = n * state.sys.m();

    let mut psnr_sum = 0.0;
    let mut count = 0usize;
    for r in 0..tuples.t_count() {
        let row = tuples.row(r);
        let row_origin = (r * n) as u64;
        let mut views = Vec::with_capacity(n);
        let mut sigmas = Vec::with_capacity(n);
        for u in 0..n {
            let view = val_draw(
                &base,
                row_origin + u as u64,
                state.tcfg.snr_low_db,
                state.tcfg.snr_high_db,
                state.channel,
                state.sys.p_bar,
            )?;
            sigmas.push(view.sigma);
            views.push(view);
        }
        let noise_mat =
            matched_noise_rec(&state.codebook, &base, &sigmas, row_origin, 0, n, area)?;
        let noise = noise_matrix_to_complex(&noise_mat, nm, area);

        let mut tape = Tape::new();
        let gp = stage_leaves(&mut tape, &state.params, &state.codebook, false)?;
        let xs: Vec<Var> = row
            .iter()
            .map(|idx| tape.leaf(val_ds.image(*idx).clone(), false))
            .collect::<Result<_>>()?;
        let out = forward_system(
            &mut tape,
            &gp,
            &xs,
            &views,
            Some(&noise),
            None,
            &state.codebook,
            &state.sys,
        )?;
        for (x, r) in xs.iter().zip(&out.recons) {
            let recon = r.expect("all users active");
            psnr_sum += psnr(tape.value(*x), tape.value(recon), 1.0)?;
            count += 1;
        }
    }
    Ok(psnr_sum / count as f64)
}

// ---------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------

/// One trained epoch's record.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub train_loss: f64,
    pub val_psnr: f64,
}

/// What a fit run produced.
#[derive(Debug, Clone)]
pub struct FitReport {
    /// One record per trained epoch.
    pub history: Vec<EpochRecord>,
    /// Validation PSNR of the retained parameters.
    pub best_val_psnr: f64,
    /// Validation PSNR before the first update (the stage-start baseline).
    pub stage_start_psnr: f64,
}

/// Trains until validation PSNR stops improving (or `max_epochs`), then
/// restores the best-scoring parameters into `state`.
///
/// The pre-training baseline competes for retention — fine-tuning can
/// never leave the state worse than it started — but early stopping
/// references only trained epochs, so at least two epochs always run
/// (when `max_epochs` allows).
pub fn fit(state: &mut TrainState, train_ds: &ImageDataset, val_ds: &ImageDataset)
    -> Result<FitReport> {
    state.sys.validate()?;
    state.tcfg.validate()?;
    if train_ds.is_empty() {
        return Err(Error::Data("empty training dataset".to_string()));
    }
    let n = state.sys.n;
    let t_count = state.tcfg.tuple_multiplier * train_ds.len();
    let mut tuple_stream =
        RngStream::new(state.tcfg.seed, streams::TRAIN_TUPLES).substream(n as u64);
    let tuples = build_train_tuples(train_ds.len(), n, t_count, &mut tuple_stream)?;

    let stage_start_psnr = validate(state, val_ds)?;
    let mut best =
        (stage_start_psnr, state.params.clone(), state.codebook.clone());

    let mut history = Vec::new();
    let mut stop_ref: Option<f64> = None;
    let mut flat_epochs = 0usize;
    for _ in 0..state.tcfg.max_epochs {
        let stats = train_epoch(state, train_ds, &tuples)?;
        let val_psnr = validate(state, val_ds)?;
        history.push(EpochRecord { epoch: state.epoch, train_loss: stats.loss_sum, val_psnr });
        if val_psnr > best.0 {
            best = (val_psnr, state.params.clone(), state.codebook.clone());
        }
        match stop_ref {
            None => stop_ref = Some(val_psnr),
            Some(r) => {
                if val_psnr < r + state.tcfg.early_stop_delta_db {
                    flat_epochs += 1;
                } else {
                    flat_epochs = 0;
                }
                stop_ref = Some(r.max(val_psnr));
                if flat_epochs >= state.tcfg.patience {
                    break;
                }
            }
        }
    }
    state.params = best.1;
    state.codebook = best.2;
    state.best_val_psnr = best.0;
    Ok(FitReport { history, best_val_psnr: best.0, stage_start_psnr })
}

// ---------------------------------------------------------------------
// progressive doubling
// ---------------------------------------------------------------------

/// Result of one doubling stage.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    /// User count after this stage's doubling.
    pub n: usize,
    /// Parent system's validation PSNR measured just before doubling.
    pub parent_final_psnr: f64,
    /// Validation PSNR immediately after doubling, before fine-tuning.
    pub stage_start_psnr: f64,
    pub report: FitReport,
    /// The trained state exported at this stage.
    pub state: TrainState,
}

/// Doubles the user count `stages` times, fine-tuning after each doubling.
/// Each stage starts a fresh optimizer (projection shapes change) and is
/// scored against the same positional validation channel as its parent.
pub fn progressive_finetune(
    state: &mut TrainState,
    stages: usize,
    train_ds: &ImageDataset,
    val_ds: &ImageDataset,
) -> Result<Vec<StageOutcome>> {
    let mut outcomes = Vec::with_capacity(stages);
    for _ in 0..stages {
        let parent_final_psnr = validate(state, val_ds)?;
        state.codebook = double(&state.codebook, &mut state.streams.doubling)?;
        state.sys.n *= 2;
        state.adam = AdamState::new();
        let report = fit(state, train_ds, val_ds)?;
        outcomes.push(StageOutcome {
            n: state.sys.n,
            parent_final_psnr,
            stage_start_psnr: report.stage_start_psnr,
            report,
            state: state.clone(),
        });
    }
    Ok(outcomes)
}

// ---------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------

const CHECKPOINT_FORMAT: &str = "pnoma-checkpoint-v1";
const MANIFEST_FILE: &str = "manifest.json";
const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Serialize, Deserialize)]
struct SerializedSnapshot {
    seed: u64,
    stream_id: u64,
    /// u128 kept as a string for lossless JSON round-tripping.
    word_pos: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    n: usize,
    m: usize,
    system: SystemConfig,
    train: TrainConfig,
    channel: ChannelKind,
    epoch: u64,
    best_val_psnr: f64,
    adam_t: u64,
    rng: BTreeMap<String, SerializedSnapshot>,
    entries: Vec<ManifestEntry>,
}

fn snapshot_to_ser(s: &RngSnapshot) -> SerializedSnapshot {
    SerializedSnapshot {
        seed: s.seed,
        stream_id: s.stream_id,
        word_pos: s.word_pos.to_string(),
    }
}

fn snapshot_from_ser(s: &SerializedSnapshot) -> Result<RngSnapshot> {
    let word_pos = s
        .word_pos
        .parse::<u128>()
        .map_err(|_| Error::Data(format!("bad rng position '{}'", s.word_pos)))?;
    Ok(RngSnapshot { seed: s.seed, stream_id: s.stream_id, word_pos })
}

/// All (name, tensor, trainable) triples a checkpoint stores, in layout
/// order: parameters, doubling bases, Adam moments.
fn checkpoint_entries<'a>(
    state: &'a TrainState,
    stage_base_tensors: &'a [(String, Tensor)],
) -> Vec<(String, &'a Tensor, bool)> {
    let mut entries = named_parameters(&state.params, &state.codebook);
    for (name, t) in stage_base_tensors {
        entries.push((name.clone(), t, false));
    }
    for (name, t) in &state.adam.m {
        entries.push((format!("adam.m.{name}"), t, false));
    }
    for (name, t) in &state.adam.v {
        entries.push((format!("adam.v.{name}"), t, false));
    }
    entries
}

fn complex_matrix_to_tensors(q: &ComplexMatrix) -> (Tensor, Tensor) {
    let (r, c) = (q.rows(), q.cols());
    let mut re = Tensor::zeros(&[r, c]);
    let mut im = Tensor::zeros(&[r, c]);
    for i in 0..r {
        for j in 0..c {
            re.set2(i, j, q.at(i, j).re);
            im.set2(i, j, q.at(i, j).im);
        }
    }
    (re, im)
}

fn complex_matrix_from_tensors(re: &Tensor, im: &Tensor) -> Result<ComplexMatrix> {
    if re.shape() != im.shape() || re.shape().len() != 2 {
        return Err(Error::Data("mismatched doubling-base planes".to_string()));
    }
    let (r, c) = (re.shape()[0], re.shape()[1]);
    let mut q = ComplexMatrix::zeros(r, c);
    for i in 0..r {
        for j in 0..c {
            q.set(i, j, num_complex::Complex64::new(re.at2(i, j), im.at2(i, j)));
        }
    }
    Ok(q)
}

/// Writes `manifest.json` plus `params.bin` (little-endian 64-bit floats,
/// concatenated in manifest order). Same state, same bytes.
pub fn save_checkpoint(state: &TrainState, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let stage_base_tensors: Vec<(String, Tensor)> = state
        .codebook
        .stage_bases
        .iter()
        .enumerate()
        .flat_map(|(j, q)| {
            let (re, im) = complex_matrix_to_tensors(q);
            [(format!("stage_base.{j}.re"), re), (format!("stage_base.{j}.im"), im)]
        })
        .collect();
    let entries = checkpoint_entries(state, &stage_base_tensors);

    let mut blob = Vec::new();
    let mut manifest_entries = Vec::with_capacity(entries.len());
    for (name, tensor, trainable) in entries {
        manifest_entries.push(ManifestEntry {
            name,
            shape: tensor.shape().to_vec(),
            offset: blob.len() as u64,
            trainable,
        });
        for v in tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.to_string(),
        n: state.sys.n,
        m: state.sys.m(),
        system: state.sys.clone(),
        train: state.tcfg.clone(),
        channel: state.channel,
        epoch: state.epoch,
        best_val_psnr: state.best_val_psnr,
        adam_t: state.adam.t,
        rng: state.streams.snapshots().iter().map(|(k, v)| (k.clone(), snapshot_to_ser(v))).collect(),
        entries: manifest_entries,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Data(format!("encoding manifest: {e}")))?;
    std::fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
    std::fs::write(dir.join(PARAMS_FILE), blob)?;
    Ok(())
}

/// Reads a tensor back out of the blob at a manifest entry.
fn read_entry(blob: &[u8], entry: &ManifestEntry) -> Result<Tensor> {
    let len: usize = entry.shape.iter().product();
    let start = entry.offset as usize;
    let end = start + len * 8;
    if end > blob.len() {
        return Err(Error::Data(format!(
            "parameter blob truncated: {} needs bytes [{start}, {end}), file has {}",
            entry.name,
            blob.len()
        )));
    }
    let data: Vec<f64> = blob[start..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(entry.shape.clone(), data)
}

/// Restores a full training state from a checkpoint directory.
pub fn load_checkpoint(dir: &Path) -> Result<TrainState> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let json = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Data(format!("reading {}: {e}", manifest_path.display())))?;
    let manifest: Manifest = serde_json::from_str(&json)
        .map_err(|e| Error::Data(format!("parsing {}: {e}", manifest_path.display())))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Data(format!("unknown checkpoint format '{}'", manifest.format)));
    }
    manifest.system.validate()?;
    if manifest.n != manifest.system.n || manifest.m != manifest.system.m() {
        return Err(Error::Data(format!(
            "manifest n/m ({}, {}) disagree with config ({}, {})",
            manifest.n,
            manifest.m,
            manifest.system.n,
            manifest.system.m()
        )));
    }
    let blob = std::fs::read(dir.join(PARAMS_FILE))
        .map_err(|e| Error::Data(format!("reading {}: {e}", dir.join(PARAMS_FILE).display())))?;

    let by_name: BTreeMap<&str, &ManifestEntry> =
        manifest.entries.iter().map(|e| (e.name.as_str(), e)).collect();
    let fetch = |name: String| -> Result<(Tensor, bool)> {
        let entry = by_name
            .get(name.as_str())
            .ok_or_else(|| Error::Data(format!("checkpoint lacks entry '{name}'")))?;
        Ok((read_entry(&blob, entry)?, entry.trainable))
    };

    let sys = manifest.system.clone();
    let layer_count = sys.down_stages + 1;
    let mut load_stack = |prefix: &str| -> Result<Vec<crate::model::ConvLayer>> {
        (0..layer_count)
            .map(|i| {
                let (weight, _) = fetch(format!("{prefix}.{i}.weight"))?;
                let (bias, _) = fetch(format!("{prefix}.{i}.bias"))?;
                Ok(crate::model::ConvLayer { weight, bias })
            })
            .collect()
    };
    let params = ModelParams { enc: load_stack("enc")?, dec: load_stack("dec")? };

    let mut pairs = Vec::with_capacity(manifest.n);
    for u in 0..manifest.n {
        let (enc, enc_trainable) = fetch(format!("proj.{u}.enc"))?;
        let (dec, _) = fetch(format!("proj.{u}.dec"))?;
        pairs.push(crate::projection::ProjectionPair { enc, dec, trainable: enc_trainable });
    }
    let stage_count = manifest.n.trailing_zeros() as usize;
    let mut stage_bases = Vec::with_capacity(stage_count);
    for j in 0..stage_count {
        let (re, _) = fetch(format!("stage_base.{j}.re"))?;
        let (im, _) = fetch(format!("stage_base.{j}.im"))?;
        stage_bases.push(complex_matrix_from_tensors(&re, &im)?);
    }
    let codebook =
        CodebookState { n: manifest.n, m: manifest.m, pairs, stage_bases };
    codebook.validate()?;

    let mut adam = AdamState { t: manifest.adam_t, ..AdamState::default() };
    for entry in &manifest.entries {
        if let Some(name) = entry.name.strip_prefix("adam.m.") {
            adam.m.insert(name.to_string(), read_entry(&blob, entry)?);
        } else if let Some(name) = entry.name.strip_prefix("adam.v.") {
            adam.v.insert(name.to_string(), read_entry(&blob, entry)?);
        }
    }

    let mut rng = BTreeMap::new();
    for (name, ser) in &manifest.rng {
        rng.insert(name.clone(), snapshot_from_ser(ser)?);
    }
    let streams = StreamSet::restore(&rng)?;

    Ok(TrainState {
        sys,
        tcfg: manifest.train,
        channel: manifest.channel,
        params,
        codebook,
        adam,
        epoch: manifest.epoch,
        best_val_psnr: manifest.best_val_psnr,
        streams,
    })
}
