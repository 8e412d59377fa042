//! Batch construction, the three-term objective and the optimization loop.
//!
//! A batch holds `N_w` writer slots. Each slot has one anchor, `N_g − 1`
//! positives (the writer's other genuine samples), `N_f1` skilled forgeries
//! of that writer and `N_f2` random forgeries, which are genuine samples of
//! other writers. Every slot is evaluated on its own tape, in parallel, and
//! the gradients are reduced in slot order so results do not depend on
//! thread scheduling.

mod optim;

pub use optim::{cosine_lr, AdamW};

use std::io::Write;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::tape_soft_dtw;
use crate::autodiff::{Objective, Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::network::{forward_on_tape, ModelConfig, ModelParams};
use crate::scalar::{softplus, Scalar};
use crate::signal::{FeatureSequence, SampleKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Weight of the intra-writer term.
    pub lambda: f64,
    /// Soft-DTW smoothing.
    pub gamma: f64,
    pub margin: f64,
    pub writers_per_batch: usize,
    pub genuine_per_writer: usize,
    pub skilled_per_writer: usize,
    pub random_per_writer: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            lr_start: 5e-4,
            lr_end: 5e-7,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lambda: 0.01,
            gamma: 5.0,
            margin: 1.0,
            writers_per_batch: 4,
            genuine_per_writer: 5,
            skilled_per_writer: 5,
            random_per_writer: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_start", self.lr_start),
            ("gamma", self.gamma),
            ("margin", self.margin),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidInput(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.lr_end >= 0.0 && self.lr_end < self.lr_start) {
            return Err(Error::InvalidInput(format!(
                "lr_end {} must lie in [0, lr_start {})",
                self.lr_end, self.lr_start
            )));
        }
        if !(self.weight_decay >= 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::InvalidInput("weight_decay and lambda must be non-negative".into()));
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(Error::InvalidInput("Adam betas must be below 1".into()));
        }
        if self.writers_per_batch == 0 || self.genuine_per_writer < 2 {
            return Err(Error::InvalidInput(
                "a batch needs at least one writer with an anchor and a positive".into(),
            ));
        }
        if self.skilled_per_writer + self.random_per_writer == 0 {
            return Err(Error::InvalidInput("a batch needs at least one negative per writer".into()));
        }
        Ok(())
    }

    pub fn samples_per_batch(&self) -> usize {
        self.writers_per_batch * (self.genuine_per_writer + self.skilled_per_writer + self.random_per_writer)
    }
}

#[derive(Clone, Debug)]
pub struct WriterData<T> {
    pub id: String,
    pub genuine: Vec<FeatureSequence<T>>,
    pub skilled: Vec<FeatureSequence<T>>,
}

/// Preprocessed training data grouped by writer.
#[derive(Clone, Debug, Default)]
pub struct TrainSet<T> {
    pub writers: Vec<WriterData<T>>,
}

impl<T: Scalar> TrainSet<T> {
    /// Groups samples by writer id, keeping first-seen writer order.
    pub fn from_samples(samples: impl IntoIterator<Item = (String, SampleKind, FeatureSequence<T>)>) -> Self {
        let mut writers: Vec<WriterData<T>> = Vec::new();
        for (id, kind, f) in samples {
            let idx = match writers.iter().position(|w| w.id == id) {
                Some(i) => i,
                None => {
                    writers.push(WriterData {
                        id,
                        genuine: Vec::new(),
                        skilled: Vec::new(),
                    });
                    writers.len() - 1
                }
            };
            match kind {
                SampleKind::Genuine => writers[idx].genuine.push(f),
                SampleKind::Skilled => writers[idx].skilled.push(f),
            }
        }
        Self { writers }
    }

    fn check(&self, cfg: &TrainConfig) -> Result<()> {
        let deficient: Vec<String> = self
            .writers
            .iter()
            .filter(|w| w.genuine.len() < cfg.genuine_per_writer || w.skilled.len() < cfg.skilled_per_writer)
            .map(|w| format!("{} ({} genuine, {} skilled)", w.id, w.genuine.len(), w.skilled.len()))
            .collect();
        if !deficient.is_empty() {
            return Err(Error::InsufficientData(format!(
                "writers below {} genuine / {} skilled: {}",
                cfg.genuine_per_writer,
                cfg.skilled_per_writer,
                deficient.join(", ")
            )));
        }
        let need = cfg.writers_per_batch.max(cfg.random_per_writer + 1);
        if self.writers.len() < need {
            return Err(Error::InsufficientData(format!(
                "{} training writers, need at least {need}",
                self.writers.len()
            )));
        }
        Ok(())
    }

    fn get(&self, r: SampleRef) -> &FeatureSequence<T> {
        let w = &self.writers[r.writer];
        match r.kind {
            SampleKind::Genuine => &w.genuine[r.index],
            SampleKind::Skilled => &w.skilled[r.index],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SampleRef {
    pub writer: usize,
    pub kind: SampleKind,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WriterSlot {
    pub writer: usize,
    pub anchor: SampleRef,
    pub positives: Vec<SampleRef>,
    pub skilled: Vec<SampleRef>,
    pub random: Vec<SampleRef>,
}

impl WriterSlot {
    /// Anchor, positives, skilled, random.
    pub fn samples(&self) -> impl Iterator<Item = SampleRef> + '_ {
        std::iter::once(self.anchor)
            .chain(self.positives.iter().copied())
            .chain(self.skilled.iter().copied())
            .chain(self.random.iter().copied())
    }

    pub fn len(&self) -> usize {
        1 + self.positives.len() + self.skilled.len() + self.random.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub slots: Vec<WriterSlot>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.slots.iter().map(WriterSlot::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

fn random_forgeries<T>(set: &TrainSet<T>, writer: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<SampleRef> {
    let others: Vec<usize> = (0..set.writers.len())
        .filter(|&w| w != writer && !set.writers[w].genuine.is_empty())
        .collect();
    others
        .choose_multiple(rng, count)
        .map(|&w| SampleRef {
            writer: w,
            kind: SampleKind::Genuine,
            index: rng.random_range(0..set.writers[w].genuine.len()),
        })
        .collect()
}

fn make_slot<T>(
    set: &TrainSet<T>,
    cfg: &TrainConfig,
    writer: usize,
    genuine: &[usize],
    skilled: &[usize],
    rng: &mut ChaCha8Rng,
) -> WriterSlot {
    let refs = |kind, idx: &[usize]| -> Vec<SampleRef> { idx.iter().map(|&index| SampleRef { writer, kind, index }).collect() };
    let mut gen = refs(SampleKind::Genuine, genuine);
    let a = rng.random_range(0..gen.len());
    let anchor = gen.swap_remove(a);
    gen.sort_by_key(|r| r.index);
    WriterSlot {
        writer,
        anchor,
        positives: gen,
        skilled: refs(SampleKind::Skilled, skilled),
        random: random_forgeries(set, writer, cfg.random_per_writer, rng),
    }
}

/// One batch of `N_w` distinct writers drawn at random.
pub fn sample_batch<T>(set: &TrainSet<T>, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Batch>
where
    T: Scalar,
{
    cfg.validate()?;
    set.check(cfg)?;
    let writers: Vec<usize> = rand::seq::index::sample(rng, set.writers.len(), cfg.writers_per_batch).into_vec();
    let slots = writers
        .into_iter()
        .map(|w| {
            let data = &set.writers[w];
            let g = rand::seq::index::sample(rng, data.genuine.len(), cfg.genuine_per_writer).into_vec();
            let s = rand::seq::index::sample(rng, data.skilled.len(), cfg.skilled_per_writer).into_vec();
            make_slot(set, cfg, w, &g, &s, rng)
        })
        .collect();
    Ok(Batch { slots })
}

pub fn sample_batch_seeded<T: Scalar>(set: &TrainSet<T>, cfg: &TrainConfig, seed: u64) -> Result<Batch> {
    sample_batch(set, cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Number of slots one epoch yields for a writer: its genuine and skilled
/// samples are consumed in chunks of the per-slot counts.
fn slots_for(w: &WriterData<impl Sized>, cfg: &TrainConfig) -> usize {
    let by_genuine = w.genuine.len() / cfg.genuine_per_writer;
    match w.skilled.len().checked_div(cfg.skilled_per_writer) {
        Some(by_skilled) => by_genuine.min(by_skilled),
        None => by_genuine,
    }
}

pub fn batches_per_epoch<T>(set: &TrainSet<T>, cfg: &TrainConfig) -> usize {
    let slots: usize = set.writers.iter().map(|w| slots_for(w, cfg)).sum();
    slots.div_ceil(cfg.writers_per_batch)
}

/// Shuffled pass over every writer's samples. The last batch may hold
/// fewer than `N_w` slots.
pub fn epoch_batches<T: Scalar>(set: &TrainSet<T>, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Batch>> {
    cfg.validate()?;
    set.check(cfg)?;
    let mut plan: Vec<(usize, Vec<usize>, Vec<usize>)> = Vec::new();
    for (wi, w) in set.writers.iter().enumerate() {
        let n = slots_for(w, cfg);
        let mut g: Vec<usize> = (0..w.genuine.len()).collect();
        let mut s: Vec<usize> = (0..w.skilled.len()).collect();
        g.shuffle(rng);
        s.shuffle(rng);
        for k in 0..n {
            let gk = g[k * cfg.genuine_per_writer..(k + 1) * cfg.genuine_per_writer].to_vec();
            let sk = s[k * cfg.skilled_per_writer..(k + 1) * cfg.skilled_per_writer].to_vec();
            plan.push((wi, gk, sk));
        }
    }
    plan.shuffle(rng);
    let mut batches = Vec::with_capacity(plan.len().div_ceil(cfg.writers_per_batch));
    for chunk in plan.chunks(cfg.writers_per_batch) {
        let slots = chunk
            .iter()
            .map(|(w, g, s)| make_slot(set, cfg, *w, g, s, rng))
            .collect();
        batches.push(Batch { slots });
    }
    Ok(batches)
}

/// `max(0, d_pos + margin − d_neg)`.
pub fn triplet_term<T: Scalar>(d_pos: T, d_neg: T, margin: T) -> T {
    (d_pos + margin - d_neg).max(T::zero())
}

/// Lifted aggregation: per writer, the sum of its triplet terms over one
/// plus the number of active terms; then the mean over writers.
pub fn triplet_loss<T: Scalar>(per_writer_terms: &[Vec<T>]) -> T {
    if per_writer_terms.is_empty() {
        return T::zero();
    }
    let total: T = per_writer_terms
        .iter()
        .map(|terms| {
            let active = terms.iter().filter(|&&l| l > T::zero()).count();
            terms.iter().copied().sum::<T>() / T::from_usize_lossy(active + 1)
        })
        .sum();
    total / T::from_usize_lossy(per_writer_terms.len())
}

/// Mean distance from the anchor to each positive.
pub fn intra_loss<T: Scalar, S>(anchor: &S, positives: &[S], distance: impl Fn(&S, &S) -> Result<T>) -> Result<T> {
    if positives.is_empty() {
        return Err(Error::InvalidInput("intra-writer term needs at least one positive".into()));
    }
    let mut s = T::zero();
    for p in positives {
        s += distance(anchor, p)?;
    }
    Ok(s / T::from_usize_lossy(positives.len()))
}

/// Mean binary cross-entropy of logits against `{0, 1}` labels.
pub fn bce_loss<T: Scalar>(logits: &[T], labels: &[T]) -> Result<T> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::Shape {
            op: "bce_loss",
            detail: format!("{} logits, {} labels", logits.len(), labels.len()),
        });
    }
    let s: T = logits.iter().zip(labels).map(|(&z, &y)| softplus(z) - y * z).sum();
    Ok(s / T::from_usize_lossy(logits.len()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossTerms {
    pub tri: f64,
    pub intra: f64,
    pub bce: f64,
}

impl LossTerms {
    pub fn total(&self, lambda: f64) -> f64 {
        lambda * self.intra + self.tri + self.bce
    }
}

/// Arithmetic form of the full objective.
pub fn total_loss<T: Scalar>(intra: T, tri: T, bce: T, lambda: T) -> T {
    lambda * intra + tri + bce
}

struct SlotLoss {
    /// Already divided by the number of slots.
    objective: Var,
    terms: LossTerms,
}

/// Records one writer slot's share of the objective on `t`.
fn slot_loss<T: Scalar>(
    t: &mut Tape<T>,
    vars: &[Var],
    params: &ModelParams<T>,
    set: &TrainSet<T>,
    slot: &WriterSlot,
    cfg: &TrainConfig,
    n_slots: usize,
) -> Result<SlotLoss> {
    let b = params.bind_vars(vars);
    let mut f_t = Vec::with_capacity(slot.len());
    let mut logits = Vec::with_capacity(slot.len());
    for r in slot.samples() {
        let x = t.constant(set.get(r).values.clone());
        let ev = forward_on_tape(t, &b, params.layout(), x)?;
        f_t.push(ev.f_t);
        logits.push(ev.logit);
    }
    let gamma = T::lit(cfg.gamma);
    let anchor = f_t[0];
    let n_pos = slot.positives.len();
    let mut d_pos = Vec::with_capacity(n_pos);
    for &p in &f_t[1..=n_pos] {
        d_pos.push(tape_soft_dtw(t, anchor, p, gamma)?);
    }
    let mut d_neg = Vec::with_capacity(f_t.len() - n_pos - 1);
    for &n in &f_t[n_pos + 1..] {
        d_neg.push(tape_soft_dtw(t, anchor, n, gamma)?);
    }

    let margin = T::lit(cfg.margin);
    let mut terms = Vec::with_capacity(n_pos * d_neg.len());
    let mut active = 0usize;
    for &dp in &d_pos {
        for &dn in &d_neg {
            let diff = t.sub(dp, dn)?;
            let shifted = t.add_scalar(diff, margin);
            let l = t.relu(shifted);
            if t.scalar(l) > T::zero() {
                active += 1;
            }
            terms.push(l);
        }
    }
    let tri_sum = t.sum_scalars(&terms)?;
    let tri = t.scale(tri_sum, T::one() / T::from_usize_lossy(active + 1));
    let intra_sum = t.sum_scalars(&d_pos)?;
    let intra = t.scale(intra_sum, T::one() / T::from_usize_lossy(n_pos));

    let stacked = t.concat_rows(&logits)?;
    let labels: Vec<T> = (0..slot.len())
        .map(|i| if i <= n_pos { T::one() } else { T::zero() })
        .collect();
    let bce = t.bce_with_logits(stacked, labels)?;

    let terms = LossTerms {
        tri: t.scalar(tri).to_f64_lossy(),
        intra: t.scalar(intra).to_f64_lossy(),
        bce: t.scalar(bce).to_f64_lossy(),
    };
    for (name, v) in [("L_tri", terms.tri), ("L_intra", terms.intra), ("L_BCE", terms.bce)] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { term: name });
        }
    }
    let weighted = t.scale(intra, T::lit(cfg.lambda));
    let sum = t.add(weighted, tri)?;
    let sum = t.add(sum, bce)?;
    let objective = t.scale(sum, T::one() / T::from_usize_lossy(n_slots));
    Ok(SlotLoss { objective, terms })
}

/// Objective value, loss terms (averaged over slots) and gradients.
type SlotGrad<T> = (T, LossTerms, Vec<Matrix<T>>);

pub fn batch_loss_and_grad<T: Scalar>(
    params: &ModelParams<T>,
    set: &TrainSet<T>,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<(T, LossTerms, Vec<Matrix<T>>)> {
    let n = batch.slots.len();
    let results: Vec<Result<SlotGrad<T>>> = batch
        .slots
        .par_iter()
        .map(|slot| {
            let mut t = Tape::new();
            let vars: Vec<Var> = params.bind(&mut t, true).vars().to_vec();
            let sl = slot_loss(&mut t, &vars, params, set, slot, cfg, n)?;
            let g = t.backward(sl.objective)?;
            let grads = vars
                .iter()
                .zip(params.tensors())
                .map(|(&v, p)| g.get_or_zeros(v, p))
                .collect();
            Ok((t.scalar(sl.objective), sl.terms, grads))
        })
        .collect();
    let mut value = T::zero();
    let mut terms = LossTerms::default();
    let mut grads: Option<Vec<Matrix<T>>> = None;
    let inv = 1.0 / n as f64;
    for r in results {
        let (v, tm, g) = r?;
        value += v;
        terms.tri += tm.tri * inv;
        terms.intra += tm.intra * inv;
        terms.bce += tm.bce * inv;
        match &mut grads {
            None => grads = Some(g),
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
        }
    }
    Ok((value, terms, grads.unwrap_or_default()))
}

/// Objective value alone, without recording gradients.
pub fn batch_loss<T: Scalar>(params: &ModelParams<T>, set: &TrainSet<T>, batch: &Batch, cfg: &TrainConfig) -> Result<(T, LossTerms)> {
    let n = batch.slots.len();
    let mut value = T::zero();
    let mut terms = LossTerms::default();
    for slot in &batch.slots {
        let mut t = Tape::new();
        let vars: Vec<Var> = params.bind(&mut t, false).vars().to_vec();
        let sl = slot_loss(&mut t, &vars, params, set, slot, cfg, n)?;
        value += t.scalar(sl.objective);
        terms.tri += sl.terms.tri / n as f64;
        terms.intra += sl.terms.intra / n as f64;
        terms.bce += sl.terms.bce / n as f64;
    }
    Ok((value, terms))
}

/// The batch objective as a function of the model parameters, for
/// gradient checking.
pub struct BatchObjective<'a, T: Scalar> {
    pub params: &'a ModelParams<T>,
    pub set: &'a TrainSet<T>,
    pub batch: &'a Batch,
    pub cfg: &'a TrainConfig,
}

impl<T: Scalar> BatchObjective<'_, T> {
    fn with(&self, tensors: &[Matrix<T>]) -> Result<ModelParams<T>> {
        let mut p = self.params.clone();
        p.set_tensors(tensors.to_vec())?;
        Ok(p)
    }
}

impl<T: Scalar> Objective<T> for BatchObjective<'_, T> {
    fn params(&self) -> &[Matrix<T>] {
        self.params.tensors()
    }

    fn param_name(&self, i: usize) -> String {
        self.params.names()[i].clone()
    }

    fn value(&self, params: &[Matrix<T>]) -> Result<T> {
        Ok(batch_loss(&self.with(params)?, self.set, self.batch, self.cfg)?.0)
    }

    fn value_and_grad(&self, params: &[Matrix<T>]) -> Result<(T, Vec<Matrix<T>>)> {
        let (v, _, g) = batch_loss_and_grad(&self.with(params)?, self.set, self.batch, self.cfg)?;
        Ok((v, g))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub tri: f64,
    pub intra: f64,
    pub bce: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
}

pub struct TrainOutcome<T: Scalar> {
    pub params: ModelParams<T>,
    pub history: Vec<StepLog>,
    pub epochs: Vec<EpochReport>,
}

/// Trains a freshly initialized model. `on_epoch` runs after every epoch
/// with the current parameters (checkpointing hooks in here).
pub fn train<T: Scalar>(
    set: &TrainSet<T>,
    model: ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
    on_epoch: impl FnMut(&EpochReport, &ModelParams<T>) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    let params = ModelParams::init(model, seed)?;
    train_from(set, params, cfg, seed, on_epoch)
}

/// Continues training from given parameters.
pub fn train_from<T: Scalar>(
    set: &TrainSet<T>,
    mut params: ModelParams<T>,
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochReport, &ModelParams<T>) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    set.check(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba7c_0000_0001);
    let per_epoch = batches_per_epoch(set, cfg);
    let total_steps = cfg.epochs * per_epoch;
    let mut opt = AdamW::new(params.tensors(), cfg);
    let mut history = Vec::with_capacity(total_steps);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(set, cfg, &mut rng)?;
        let mut sum = 0.0;
        for batch in &batches {
            let lr = cosine_lr(step, total_steps, cfg.lr_start, cfg.lr_end);
            let (value, terms, grads) = batch_loss_and_grad(&params, set, batch, cfg)?;
            let total = value.to_f64_lossy();
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss { term: "total" });
            }
            opt.step(params.tensors_mut(), &grads, lr);
            log::debug!("step {step} lr {lr:.3e} loss {total:.5}");
            history.push(StepLog {
                step,
                lr,
                tri: terms.tri,
                intra: terms.intra,
                bce: terms.bce,
                total,
            });
            sum += total;
            step += 1;
        }
        let report = EpochReport {
            epoch,
            steps: batches.len(),
            mean_loss: sum / batches.len().max(1) as f64,
        };
        log::info!("epoch {} mean loss {:.5}", epoch + 1, report.mean_loss);
        on_epoch(&report, &params)?;
        epochs.push(report);
    }
    Ok(TrainOutcome { params, history, epochs })
}

/// `step,lr,L_tri,L_intra,L_BCE,total` rows.
pub fn write_log_csv<W: Write>(history: &[StepLog], mut out: W) -> std::io::Result<()> {
    writeln!(out, "step,lr,L_tri,L_intra,L_BCE,total")?;
    for h in history {
        writeln!(out, "{},{:e},{},{},{},{}", h.step, h.lr, h.tri, h.intra, h.bce, h.total)?;
    }
    Ok(())
}
