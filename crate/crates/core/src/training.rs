//! Maximum-likelihood training with Adam, dev-BLEU early stopping and a
//! finite-difference gradient checker.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var, LN_CLAMP};
use crate::corpus::{batch_iterator, Batch, EncodedSplit, Vocabulary};
use crate::error::{Error, Result};
use crate::evaluation::{bleu_corpus, BleuReport};
use crate::model::{Model, SentenceVisual, Wiring};
use crate::nn::Dropout;
use crate::params::{ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seeds: Vec<u64>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Stop after this many parameter updates, even mid-epoch.
    pub max_updates: Option<usize>,
    pub max_decode_len: usize,
    pub freeze_region_filter: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 0.001,
            dropout: 0.3,
            max_epochs: 15,
            patience: 3,
            seeds: vec![1, 2, 3, 4, 5],
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_updates: None,
            max_decode_len: 50,
            freeze_region_filter: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::Config(format!("{key}: {why}")));
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs", "must be at least 1");
        }
        if self.patience == 0 {
            return bad("patience", "must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", "must be in [0, 1)");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1/beta2", "must be in [0, 1)");
        }
        if self.epsilon <= 0.0 {
            return bad("epsilon", "must be positive");
        }
        if self.seeds.is_empty() {
            return bad("seeds", "need at least one seed");
        }
        if self.max_updates == Some(0) {
            return bad("max_updates", "must be at least 1");
        }
        if self.max_decode_len == 0 {
            return bad("max_decode_len", "must be at least 1");
        }
        Ok(())
    }
}

/// Mean of `-ln p(gold)` over unmasked steps, probabilities floored at
/// `1e-12`. Returns zero when every step is masked.
pub fn cross_entropy_loss<T: Scalar>(distributions: &[Vec<T>], gold: &[u32], mask: &[bool]) -> Result<f64> {
    if distributions.len() != gold.len() || gold.len() != mask.len() {
        return Err(Error::InvalidArgument(format!(
            "{} distributions, {} gold ids, {} mask entries",
            distributions.len(),
            gold.len(),
            mask.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for ((d, &g), &m) in distributions.iter().zip(gold).zip(mask) {
        if !m {
            continue;
        }
        let p = d.get(g as usize).ok_or(Error::IdOutOfRange {
            id: g as usize,
            size: d.len(),
        })?;
        total -= p.to_f64_lossy().max(LN_CLAMP).ln();
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<Matrix<T>>,
    pub v: Vec<Matrix<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros: Vec<Matrix<T>> = params
            .ids()
            .map(|id| {
                let (r, c) = params.get(id).shape();
                Matrix::zeros(r, c)
            })
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam step over every unfrozen parameter. Nothing is
/// modified when any gradient is non-finite.
pub fn adam_update<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &[Matrix<T>],
    opt: &mut OptimizerState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || opt.m.len() != params.len() {
        return Err(Error::shape(
            "adam_update",
            format!("{} params, {} grads, {} moments", params.len(), grads.len(), opt.m.len()),
        ));
    }
    for (id, g) in params.ids().zip(grads) {
        if g.shape() != params.get(id).shape() {
            return Err(Error::shape(
                "adam_update",
                format!("{}: {:?} vs {:?}", params.name(id), g.shape(), params.get(id).shape()),
            ));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(params.name(id).to_string()));
        }
    }
    opt.step += 1;
    let t = opt.step as i32;
    let b1 = T::of(cfg.beta1);
    let b2 = T::of(cfg.beta2);
    let one = T::one();
    let c1 = one - T::of(cfg.beta1.powi(t));
    let c2 = one - T::of(cfg.beta2.powi(t));
    let lr = T::of(cfg.learning_rate);
    let eps = T::of(cfg.epsilon);
    let ids: Vec<ParamId> = params.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        if params.is_frozen(id) {
            continue;
        }
        let g = grads[i].as_slice();
        let m = opt.m[i].as_mut_slice();
        let v = opt.v[i].as_mut_slice();
        let w = params.get_mut(id).as_mut_slice();
        for k in 0..w.len() {
            m[k] = b1 * m[k] + (one - b1) * g[k];
            v[k] = b2 * v[k] + (one - b2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            w[k] = w[k] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Outcome of one early-stopping observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Verdict {
    pub improved: bool,
    pub stop: bool,
}

/// Stops after `patience` consecutive epochs without a strictly greater
/// dev score, or once `max_epochs` epochs have run.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub max_epochs: usize,
    pub best: Option<f64>,
    pub best_epoch: usize,
    pub since_best: usize,
    pub epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, max_epochs: usize) -> Self {
        Self {
            patience,
            max_epochs,
            best: None,
            best_epoch: 0,
            since_best: 0,
            epochs: 0,
        }
    }

    pub fn observe(&mut self, score: f64) -> Verdict {
        self.epochs += 1;
        let improved = self.best.is_none_or(|b| score > b);
        if improved {
            self.best = Some(score);
            self.best_epoch = self.epochs;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        Verdict {
            improved,
            stop: self.since_best >= self.patience || self.epochs >= self.max_epochs,
        }
    }
}

/// A split ready for training or evaluation.
#[derive(Debug, Clone)]
pub struct PreparedSplit<T> {
    pub encoded: EncodedSplit,
    /// Retrieved material per pair, parallel to `encoded`.
    pub visuals: Vec<SentenceVisual<T>>,
    /// Target tokens used as BLEU references.
    pub references: Vec<Vec<String>>,
}

/// A prepared split with the wiring used to read it.
#[derive(Clone, Copy)]
pub struct SplitInput<'a, T> {
    pub wiring: Wiring<'a, T>,
    pub data: &'a PreparedSplit<T>,
}

impl<T> PreparedSplit<T> {
    pub fn len(&self) -> usize {
        self.encoded.len()
    }

    pub fn is_empty(&self) -> bool {
        self.encoded.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub dev_bleu: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedModel<T> {
    /// Parameters of the best dev-BLEU epoch.
    pub model: Model<T>,
    pub best_dev_bleu: f64,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub updates: usize,
    /// Mean loss of every update, in order.
    pub losses: Vec<f64>,
}

/// Training log as TSV `epoch<TAB>loss<TAB>dev_bleu`.
pub fn history_tsv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch\tloss\tdev_bleu\n");
    for r in history {
        let _ = writeln!(out, "{}\t{}\t{}", r.epoch, r.loss, r.dev_bleu);
    }
    out
}

pub fn write_history(history: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, history_tsv(history)).map_err(|e| Error::io(path, e))
}

/// Mean per-token negative log-likelihood of a batch.
pub fn batch_loss_on<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    input: SplitInput<'_, T>,
    batch: &Batch,
    dropout: &mut Option<&mut Dropout>,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    let mut count = 0;
    for (k, &i) in batch.indices.iter().enumerate() {
        let (nll, n) = model.sentence_nll_on(
            tape,
            &input.wiring,
            &batch.source[k],
            &batch.target[k],
            &input.data.visuals[i],
            dropout,
        )?;
        count += n;
        total = Some(match total {
            Some(t) => tape.add(t, nll)?,
            None => nll,
        });
    }
    let total = total.ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    Ok(tape.scale(total, T::one() / T::of(count as f64)))
}

/// Greedy translations of a whole split, as target tokens.
pub fn translate_split<T: Scalar>(
    model: &Model<T>,
    input: SplitInput<'_, T>,
    tgt_vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<Vec<String>>> {
    let split = input.data;
    (0..split.len())
        .map(|i| {
            let ids = model.translate(&input.wiring, &split.encoded.sources[i], &split.visuals[i], max_len)?;
            Ok(tgt_vocab.decode(&ids))
        })
        .collect()
}

pub fn evaluate_bleu<T: Scalar>(
    model: &Model<T>,
    input: SplitInput<'_, T>,
    tgt_vocab: &Vocabulary,
    max_len: usize,
) -> Result<BleuReport> {
    let hyps = translate_split(model, input, tgt_vocab, max_len)?;
    bleu_corpus(&hyps, &input.data.references)
}

fn shuffle_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64)
}

/// Trains `model` from its current parameters; returns the best dev-BLEU
/// checkpoint. Dropout is active for training batches only.
pub fn train_model<T: Scalar>(
    mut model: Model<T>,
    train: SplitInput<'_, T>,
    dev: SplitInput<'_, T>,
    tgt_vocab: &Vocabulary,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainedModel<T>> {
    cfg.validate()?;
    if train.data.is_empty() || dev.data.is_empty() {
        return Err(Error::EmptySplit);
    }
    model.set_region_frozen(cfg.freeze_region_filter);
    let mut opt = OptimizerState::new(&model.params);
    let mut stream = ChaCha8Rng::seed_from_u64(seed);
    stream.set_stream(1);
    let mut dropout = Dropout::new(cfg.dropout, stream);
    let mut stopper = EarlyStopping::new(cfg.patience, cfg.max_epochs);
    let mut best = model.params.clone();
    let mut history = Vec::new();
    let mut losses = Vec::new();
    let mut updates = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (step, batch) in batch_iterator(&train.data.encoded, cfg.batch_size, shuffle_seed(seed, epoch))?.enumerate() {
            let mut tape = Tape::new();
            model.params.bind(&mut tape);
            let mut d = (cfg.dropout > 0.0).then_some(&mut dropout);
            let loss = batch_loss_on(&mut tape, &model, train, &batch, &mut d)?;
            let value = tape.scalar(loss).to_f64_lossy();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: step + 1,
                    loss: value,
                });
            }
            let grads = model.params.collect_grads(&tape.backward(loss));
            adam_update(&mut model.params, &grads, &mut opt, cfg)?;
            epoch_loss += value;
            batches += 1;
            updates += 1;
            losses.push(value);
            if cfg.max_updates.is_some_and(|cap| updates >= cap) {
                break;
            }
        }
        let dev_bleu = evaluate_bleu(&model, dev, tgt_vocab, cfg.max_decode_len)?.score;
        history.push(EpochRecord {
            epoch,
            loss: epoch_loss / batches.max(1) as f64,
            dev_bleu,
        });
        let verdict = stopper.observe(dev_bleu);
        if verdict.improved {
            best = model.params.clone();
        }
        if verdict.stop || cfg.max_updates.is_some_and(|cap| updates >= cap) {
            break;
        }
    }
    model.params = best;
    Ok(TrainedModel {
        model,
        best_dev_bleu: stopper.best.unwrap_or(0.0),
        best_epoch: stopper.best_epoch,
        history,
        updates,
        losses,
    })
}

/// Largest relative error of one parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_relative_error: f64,
    pub max_abs_gradient: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_relative_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error))
    }
}

pub const GRADCHECK_STEP: f64 = 1e-5;

/// `|a - n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares backpropagated gradients of `forward`'s `1 x 1` output against
/// central differences for every entry of the parameters in `ids`.
/// `forward` receives a tape with `params` already bound.
pub fn gradient_check<F>(params: &ParamSet<f64>, ids: &[ParamId], forward: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>) -> Result<Var>,
{
    let eval = |p: &ParamSet<f64>| -> Result<(Tape<f64>, Var)> {
        let mut tape = Tape::new();
        p.bind(&mut tape);
        let out = forward(&mut tape)?;
        if tape.shape(out) != (1, 1) {
            return Err(Error::shape("gradient_check", format!("output is {:?}", tape.shape(out))));
        }
        Ok((tape, out))
    };
    let (tape, out) = eval(params)?;
    let analytic = params.collect_grads(&tape.backward(out));
    let mut work = params.clone();
    let mut entries = Vec::with_capacity(ids.len());
    for &id in ids {
        let mut worst = 0.0f64;
        let mut largest = 0.0f64;
        for k in 0..params.get(id).len() {
            let orig = params.get(id).as_slice()[k];
            work.get_mut(id).as_mut_slice()[k] = orig + GRADCHECK_STEP;
            let (t, o) = eval(&work)?;
            let plus = t.scalar(o);
            work.get_mut(id).as_mut_slice()[k] = orig - GRADCHECK_STEP;
            let (t, o) = eval(&work)?;
            let minus = t.scalar(o);
            work.get_mut(id).as_mut_slice()[k] = orig;
            let numeric = (plus - minus) / (2.0 * GRADCHECK_STEP);
            let a = analytic[id.index()].as_slice()[k];
            worst = worst.max(relative_error(a, numeric));
            largest = largest.max(a.abs());
        }
        entries.push(GradCheckEntry {
            name: params.name(id).to_string(),
            max_relative_error: worst,
            max_abs_gradient: largest,
        });
    }
    Ok(GradCheckReport { entries })
}
