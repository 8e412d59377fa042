//! Template scoring, the multi-domain decision rule and EER evaluation.
//!
//! Scores are distances, so smaller means more genuine: a query is accepted
//! when its decision statistic falls below the threshold.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::dtw;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::network::{forward_many, Embeddings, ModelParams};
use crate::scalar::{sigmoid, Scalar};
use crate::training::WriterData;

/// Floor on the template normalizer so identical templates stay finite.
pub const NORM_FLOOR: f64 = 1e-6;
/// Cap on random-forgery trials per writer.
pub const RANDOM_TRIALS_CAP: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreQuadruple {
    pub t_min: f64,
    pub t_avg: f64,
    pub f_min: f64,
    pub f_avg: f64,
}

impl ScoreQuadruple {
    /// `s_Tmin(1 + σ(s_Fmin)) + s_Tavg(1 − σ(s_Favg))`.
    pub fn mdv_statistic(&self) -> f64 {
        self.t_min * (1.0 + sigmoid(self.f_min)) + self.t_avg * (1.0 - sigmoid(self.f_avg))
    }

    pub fn temporal_statistic(&self) -> f64 {
        self.t_min + self.t_avg
    }
}

pub fn mdv_decide(q: &ScoreQuadruple, c: f64) -> bool {
    q.mdv_statistic() < c
}

pub fn temporal_only_decide(q: &ScoreQuadruple, c: f64) -> bool {
    q.temporal_statistic() < c
}

/// Distance between frequency embeddings.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FreqDistance {
    #[default]
    Squared,
    Euclidean,
}

impl FreqDistance {
    pub fn eval<T: Scalar>(self, a: &[T], b: &[T]) -> Result<f64> {
        if a.len() != b.len() {
            return Err(Error::Shape {
                op: "frequency distance",
                detail: format!("{} vs {}", a.len(), b.len()),
            });
        }
        let sq: f64 = a.iter().zip(b).map(|(&x, &y)| (x - y).to_f64_lossy().powi(2)).sum();
        Ok(match self {
            Self::Squared => sq,
            Self::Euclidean => sq.sqrt(),
        })
    }
}

/// Mean DTW distance over unordered template pairs, floored; 1 for a
/// single template.
pub fn template_norm<T: Scalar>(templates: &[Matrix<T>]) -> Result<f64> {
    let dists = pairwise_dtw(templates)?;
    if templates.len() == 1 {
        return Ok(1.0);
    }
    Ok(norm_from_pairwise(&dists))
}

fn pairwise_dtw<T: Scalar>(templates: &[Matrix<T>]) -> Result<Vec<f64>> {
    if templates.is_empty() {
        return Err(Error::InvalidInput("at least one template is required".into()));
    }
    let mut out = Vec::new();
    for i in 0..templates.len() {
        for j in i + 1..templates.len() {
            out.push(dtw(&templates[i], &templates[j])?.to_f64_lossy());
        }
    }
    Ok(out)
}

/// Mean of the given pairwise distances, floored. Empty input means a
/// single template.
pub fn norm_from_pairwise(dists: &[f64]) -> f64 {
    if dists.is_empty() {
        return 1.0;
    }
    (dists.iter().sum::<f64>() / dists.len() as f64).max(NORM_FLOOR)
}

/// Quadruple from raw per-template distances and the template normalizer.
pub fn quadruple_from_distances(d_t: &[f64], d_f: &[f64], d_bar: f64) -> Result<ScoreQuadruple> {
    if d_t.is_empty() || d_t.len() != d_f.len() {
        return Err(Error::InvalidInput(format!(
            "need one temporal and one frequency distance per template, got {} and {}",
            d_t.len(),
            d_f.len()
        )));
    }
    let s = d_bar.max(NORM_FLOOR).sqrt();
    let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min) / s;
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64 / s;
    Ok(ScoreQuadruple {
        t_min: min(d_t),
        t_avg: avg(d_t),
        f_min: min(d_f),
        f_avg: avg(d_f),
    })
}

/// Scores a query against templates whose normalizer is already known.
pub fn score_with_norm<T: Scalar>(
    templates: &[Embeddings<T>],
    query: &Embeddings<T>,
    d_bar: f64,
    freq: FreqDistance,
) -> Result<ScoreQuadruple> {
    let mut d_t = Vec::with_capacity(templates.len());
    let mut d_f = Vec::with_capacity(templates.len());
    for p in templates {
        d_t.push(dtw(&p.f_t, &query.f_t)?.to_f64_lossy());
        d_f.push(freq.eval(&p.f_f, &query.f_f)?);
    }
    quadruple_from_distances(&d_t, &d_f, d_bar)
}

pub fn score_query<T: Scalar>(templates: &[Embeddings<T>], query: &Embeddings<T>, freq: FreqDistance) -> Result<ScoreQuadruple> {
    let f_t: Vec<Matrix<T>> = templates.iter().map(|e| e.f_t.clone()).collect();
    let d_bar = template_norm(&f_t)?;
    score_with_norm(templates, query, d_bar, freq)
}

/// Threshold grid `[min, max]` with spacing `step`. With `extend`, the
/// upper end grows to cover the largest statistic seen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdGrid {
    pub min: f64,
    pub max: f64,
    pub step: f64,
    pub extend: bool,
}

impl Default for ThresholdGrid {
    fn default() -> Self {
        Self {
            min: 0.0,
            max: 50.0,
            step: 0.01,
            extend: true,
        }
    }
}

impl ThresholdGrid {
    pub fn fixed(min: f64, max: f64, step: f64) -> Self {
        Self {
            min,
            max,
            step,
            extend: false,
        }
    }

    fn points(&self, largest: f64) -> Result<usize> {
        if !(self.step > 0.0) || !self.step.is_finite() || !(self.max >= self.min) {
            return Err(Error::InvalidInput(format!(
                "bad threshold grid [{}, {}] step {}",
                self.min, self.max, self.step
            )));
        }
        let top = if self.extend && largest >= self.max {
            largest + self.step
        } else {
            self.max
        };
        Ok(((top - self.min) / self.step + 1e-9).floor() as usize + 1)
    }

    fn at(&self, i: usize) -> f64 {
        self.min + i as f64 * self.step
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EerPoint {
    /// Percent.
    pub eer: f64,
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

fn count_below(sorted: &[f64], c: f64) -> usize {
    sorted.partition_point(|&v| v < c)
}

fn sorted_finite(v: &[f64], what: &str) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::InsufficientData(format!("no {what} statistics")));
    }
    if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite {what} statistic {bad}")));
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(s)
}

/// Grid search for the threshold where FAR and FRR are closest; the EER
/// is their mean there. Ties go to the smallest threshold.
pub fn sweep_eer(genuine: &[f64], forged: &[f64], grid: &ThresholdGrid) -> Result<EerPoint> {
    let g = sorted_finite(genuine, "genuine")?;
    let f = sorted_finite(forged, "forged")?;
    let largest = g[g.len() - 1].max(f[f.len() - 1]);
    let n = grid.points(largest)?;
    let (ng, nf) = (g.len() as f64, f.len() as f64);
    let mut best: Option<(f64, EerPoint)> = None;
    for i in 0..n {
        let c = grid.at(i);
        let frr = (g.len() - count_below(&g, c)) as f64 / ng;
        let far = count_below(&f, c) as f64 / nf;
        let gap = (far - frr).abs();
        if best.as_ref().is_none_or(|(b, _)| gap < *b) {
            best = Some((
                gap,
                EerPoint {
                    eer: 50.0 * (far + frr),
                    threshold: c,
                    far,
                    frr,
                },
            ));
        }
    }
    Ok(best.expect("grid has at least one point").1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WriterTrials {
    pub writer_id: String,
    pub genuine: Vec<f64>,
    pub forged: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LocalEer {
    /// Percent, mean over included writers.
    pub eer: f64,
    pub per_writer: Vec<(String, f64)>,
    pub excluded: Vec<String>,
}

/// Per-writer thresholds: the mean of each writer's own EER.
pub fn local_eer(writers: &[WriterTrials], grid: &ThresholdGrid) -> Result<LocalEer> {
    let mut per_writer = Vec::new();
    let mut excluded = Vec::new();
    for w in writers {
        if w.genuine.is_empty() || w.forged.is_empty() {
            log::warn!("writer {} lacks a trial class; excluded from local EER", w.writer_id);
            excluded.push(w.writer_id.clone());
            continue;
        }
        per_writer.push((w.writer_id.clone(), sweep_eer(&w.genuine, &w.forged, grid)?.eer));
    }
    if per_writer.is_empty() {
        return Err(Error::InsufficientData("no writer has both genuine and forged trials".into()));
    }
    let eer = per_writer.iter().map(|(_, e)| e).sum::<f64>() / per_writer.len() as f64;
    Ok(LocalEer {
        eer,
        per_writer,
        excluded,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForgeryKind {
    Skilled,
    Random,
}

/// `n` templates against one forgery kind, written `"4v1-skilled"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Protocol {
    pub templates: usize,
    pub forgery: ForgeryKind,
}

impl Protocol {
    pub fn all() -> Vec<Protocol> {
        let mut v = Vec::new();
        for forgery in [ForgeryKind::Skilled, ForgeryKind::Random] {
            for templates in (1..=4).rev() {
                v.push(Protocol { templates, forgery });
            }
        }
        v
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.forgery {
            ForgeryKind::Skilled => "skilled",
            ForgeryKind::Random => "random",
        };
        write!(f, "{}v1-{kind}", self.templates)
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("unknown protocol {s:?}; expected e.g. 4v1-skilled"));
        let (n, kind) = s.split_once("v1-").ok_or_else(bad)?;
        let templates: usize = n.parse().map_err(|_| bad())?;
        if !(1..=4).contains(&templates) {
            return Err(bad());
        }
        let forgery = match kind {
            "skilled" => ForgeryKind::Skilled,
            "random" => ForgeryKind::Random,
            _ => return Err(bad()),
        };
        Ok(Protocol { templates, forgery })
    }
}

impl Serialize for Protocol {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolOptions {
    pub freq_distance: FreqDistance,
    pub grid: ThresholdGrid,
    pub random_cap: usize,
    pub seed: u64,
}

impl Default for ProtocolOptions {
    fn default() -> Self {
        Self {
            freq_distance: FreqDistance::default(),
            grid: ThresholdGrid::default(),
            random_cap: RANDOM_TRIALS_CAP,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialKind {
    Genuine,
    Skilled,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Trial {
    pub writer_id: String,
    pub kind: TrialKind,
    pub scores: ScoreQuadruple,
    pub mdv: f64,
    pub temporal: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EerReport {
    pub protocol: Protocol,
    pub eer_global: f64,
    pub eer_local: f64,
    pub threshold_at_eer: f64,
    pub genuine_trials: usize,
    pub forgery_trials: usize,
    pub temporal_eer_global: f64,
    pub temporal_eer_local: f64,
    pub temporal_threshold_at_eer: f64,
    pub writers: usize,
    pub excluded_writers: Vec<String>,
}

/// Embedded samples of one test writer, genuine samples in their
/// canonical order.
#[derive(Clone, Debug)]
pub struct WriterEmbeddings<T> {
    pub id: String,
    pub genuine: Vec<Embeddings<T>>,
    pub skilled: Vec<Embeddings<T>>,
}

pub fn embed_writers<T: Scalar>(writers: &[WriterData<T>], params: &ModelParams<T>) -> Result<Vec<WriterEmbeddings<T>>> {
    writers
        .par_iter()
        .map(|w| {
            let strip = |v: Vec<_>| v.into_iter().map(|(e, _)| e).collect();
            Ok(WriterEmbeddings {
                id: w.id.clone(),
                genuine: strip(forward_many(&w.genuine, params)?),
                skilled: strip(forward_many(&w.skilled, params)?),
            })
        })
        .collect()
}

fn writer_seed(seed: u64, writer: usize) -> u64 {
    seed ^ (writer as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Trials of one protocol over already-embedded writers.
pub fn protocol_trials<T: Scalar>(
    writers: &[WriterEmbeddings<T>],
    protocol: Protocol,
    opts: &ProtocolOptions,
) -> Result<(Vec<Trial>, Vec<String>)> {
    let n = protocol.templates;
    let per_writer: Vec<Result<Option<Vec<Trial>>>> = writers
        .par_iter()
        .enumerate()
        .map(|(wi, w)| {
            if w.genuine.len() < n + 1 {
                log::warn!("writer {} has {} genuine samples, needs {}; excluded", w.id, w.genuine.len(), n + 1);
                return Ok(None);
            }
            let templates = &w.genuine[..n];
            let f_t: Vec<Matrix<T>> = templates.iter().map(|e| e.f_t.clone()).collect();
            let d_bar = template_norm(&f_t)?;
            let mut negatives: Vec<&Embeddings<T>> = match protocol.forgery {
                ForgeryKind::Skilled => w.skilled.iter().collect(),
                ForgeryKind::Random => writers
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != wi)
                    .flat_map(|(_, o)| o.genuine.iter())
                    .collect(),
            };
            if negatives.len() > opts.random_cap && protocol.forgery == ForgeryKind::Random {
                let mut rng = ChaCha8Rng::seed_from_u64(writer_seed(opts.seed, wi));
                let mut keep = sample(&mut rng, negatives.len(), opts.random_cap).into_vec();
                keep.sort_unstable();
                negatives = keep.into_iter().map(|i| negatives[i]).collect();
            }
            let neg_kind = match protocol.forgery {
                ForgeryKind::Skilled => TrialKind::Skilled,
                ForgeryKind::Random => TrialKind::Random,
            };
            let queries = w.genuine[n..]
                .iter()
                .map(|q| (TrialKind::Genuine, q))
                .chain(negatives.into_iter().map(|q| (neg_kind, q)));
            let mut trials = Vec::new();
            for (kind, q) in queries {
                let scores = score_with_norm(templates, q, d_bar, opts.freq_distance)?;
                trials.push(Trial {
                    writer_id: w.id.clone(),
                    kind,
                    mdv: scores.mdv_statistic(),
                    temporal: scores.temporal_statistic(),
                    scores,
                });
            }
            Ok(Some(trials))
        })
        .collect();
    let mut trials = Vec::new();
    let mut excluded = Vec::new();
    for (w, r) in writers.iter().zip(per_writer) {
        match r? {
            Some(t) => trials.extend(t),
            None => excluded.push(w.id.clone()),
        }
    }
    Ok((trials, excluded))
}

fn split_trials(trials: &[Trial], stat: impl Fn(&Trial) -> f64) -> Vec<WriterTrials> {
    let mut out: Vec<WriterTrials> = Vec::new();
    for t in trials {
        if out.last().is_none_or(|w| w.writer_id != t.writer_id) {
            out.push(WriterTrials {
                writer_id: t.writer_id.clone(),
                genuine: Vec::new(),
                forged: Vec::new(),
            });
        }
        let w = out.last_mut().expect("pushed above");
        match t.kind {
            TrialKind::Genuine => w.genuine.push(stat(t)),
            _ => w.forged.push(stat(t)),
        }
    }
    out
}

/// Global and local EER for both the multi-domain and temporal-only
/// statistics.
pub fn report_from_trials(protocol: Protocol, trials: &[Trial], excluded: Vec<String>, grid: &ThresholdGrid) -> Result<EerReport> {
    let eval = |stat: &dyn Fn(&Trial) -> f64| -> Result<(EerPoint, LocalEer)> {
        let per = split_trials(trials, stat);
        let g: Vec<f64> = per.iter().flat_map(|w| w.genuine.iter().copied()).collect();
        let f: Vec<f64> = per.iter().flat_map(|w| w.forged.iter().copied()).collect();
        Ok((sweep_eer(&g, &f, grid)?, local_eer(&per, grid)?))
    };
    let (mg, ml) = eval(&|t| t.mdv)?;
    let (tg, tl) = eval(&|t| t.temporal)?;
    let genuine_trials = trials.iter().filter(|t| t.kind == TrialKind::Genuine).count();
    let mut excluded_writers = excluded;
    excluded_writers.extend(ml.excluded.iter().cloned());
    Ok(EerReport {
        protocol,
        eer_global: mg.eer,
        eer_local: ml.eer,
        threshold_at_eer: mg.threshold,
        genuine_trials,
        forgery_trials: trials.len() - genuine_trials,
        temporal_eer_global: tg.eer,
        temporal_eer_local: tl.eer,
        temporal_threshold_at_eer: tg.threshold,
        writers: ml.per_writer.len(),
        excluded_writers,
    })
}

pub fn run_protocol_embedded<T: Scalar>(
    writers: &[WriterEmbeddings<T>],
    protocol: Protocol,
    opts: &ProtocolOptions,
) -> Result<(EerReport, Vec<Trial>)> {
    let (trials, excluded) = protocol_trials(writers, protocol, opts)?;
    let report = report_from_trials(protocol, &trials, excluded, &opts.grid)?;
    Ok((report, trials))
}

/// Embeds the test writers with `params` and evaluates one protocol.
pub fn run_protocol<T: Scalar>(
    test: &[WriterData<T>],
    params: &ModelParams<T>,
    protocol: Protocol,
    opts: &ProtocolOptions,
) -> Result<(EerReport, Vec<Trial>)> {
    let embedded = embed_writers(test, params)?;
    run_protocol_embedded(&embedded, protocol, opts)
}

/// Treats the preprocessed features themselves as the temporal embedding,
/// with an empty frequency embedding. Pair with the temporal-only statistic
/// for a plain DTW baseline.
pub fn feature_embeddings<T: Scalar>(writers: &[WriterData<T>]) -> Vec<WriterEmbeddings<T>> {
    let wrap = |v: &[crate::signal::FeatureSequence<T>]| {
        v.iter()
            .map(|f| Embeddings {
                f_t: f.values.clone(),
                f_f: Vec::new(),
                logit: T::zero(),
            })
            .collect()
    };
    writers
        .iter()
        .map(|w| WriterEmbeddings {
            id: w.id.clone(),
            genuine: wrap(&w.genuine),
            skilled: wrap(&w.skilled),
        })
        .collect()
}

/// `writer_id,trial_kind,statistic_mdv,statistic_temporal` rows.
pub fn write_scores_csv<W: Write>(trials: &[Trial], mut out: W) -> std::io::Result<()> {
    writeln!(out, "writer_id,trial_kind,statistic_mdv,statistic_temporal")?;
    for t in trials {
        let kind = match t.kind {
            TrialKind::Genuine => "genuine",
            TrialKind::Skilled => "skilled",
            TrialKind::Random => "random",
        };
        writeln!(out, "{},{kind},{},{}", t.writer_id, t.mdv, t.temporal)?;
    }
    Ok(())
}
