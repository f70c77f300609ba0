//! Pairwise labels from noisy energies and two-model consensus training.
//!
//! Each predictor in turn acts as a teacher: it keeps only the pairwise
//! labels whose sign it agrees with, and the other predictor is fine-tuned
//! on what was kept with a logistic ranking loss.

use std::path::Path;

use log::warn;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::nn::{self, sigmoid, softplus, Adam, AdamConfig};
use crate::predictors::{ComplexBank, Predictor, SeqPredictor, StructPredictor};
use crate::rng::Rng;
use crate::stats;
use crate::tables::format_f64;

pub const DEFAULT_TIE_EPSILON: f64 = 1e-9;

/// Preference between antibodies j and k on antigen i:
/// `ddg = dG_ij - dG_ik`, and `y` is true when k binds more strongly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairwiseLabel {
    pub antigen_id: usize,
    pub j: usize,
    pub k: usize,
    pub ddg: f64,
    pub y: bool,
}

impl PairwiseLabel {
    /// `None` for self-pairs and for |ddg| below `tie_epsilon`.
    pub fn new(antigen_id: usize, j: usize, k: usize, ddg: f64, tie_epsilon: f64) -> Option<Self> {
        if j == k || ddg.abs() < tie_epsilon || !ddg.is_finite() {
            return None;
        }
        Some(PairwiseLabel {
            antigen_id,
            j,
            k,
            ddg,
            y: ddg > 0.0,
        })
    }

    /// The same comparison with j and k swapped.
    pub fn reversed(&self) -> Self {
        PairwiseLabel {
            antigen_id: self.antigen_id,
            j: self.k,
            k: self.j,
            ddg: -self.ddg,
            y: -self.ddg > 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairSet {
    pub labels: Vec<PairwiseLabel>,
    /// Requested pairs exceeded the available ones for some antigen.
    pub clamped: bool,
    /// Sampled pairs discarded as ties.
    pub ties: usize,
}

/// Sample `pairs_per_antigen` unordered antibody pairs per antigen without
/// replacement and label them from the noisy energies.
pub fn build_pairs(
    dataset: &Dataset,
    antigens: &[usize],
    pairs_per_antigen: usize,
    tie_epsilon: f64,
    rng: &mut Rng,
) -> Result<PairSet> {
    let a = dataset.antibodies.len();
    if a < 2 {
        return Err(Error::InvalidConfig("pair labels need at least two antibodies".into()));
    }
    let available = a * (a - 1) / 2;
    let mut clamped = false;
    let mut ties = 0;
    let mut labels = Vec::new();
    for &i in antigens {
        if i >= dataset.antigens.len() {
            return Err(Error::UnknownId { kind: "antigen", id: i });
        }
        let n = if pairs_per_antigen > available {
            if !clamped {
                warn!("pairs_per_antigen {pairs_per_antigen} exceeds {available} available pairs; clamping");
            }
            clamped = true;
            available
        } else {
            pairs_per_antigen
        };
        let mut picks: Vec<(usize, usize)> = sample(rng, available, n)
            .into_iter()
            .map(|t| unrank_pair(t, a))
            .collect();
        picks.sort_unstable();
        let recs = dataset.records_for(i);
        for (j, k) in picks {
            let ddg = recs[j].delta_g_noisy - recs[k].delta_g_noisy;
            match PairwiseLabel::new(i, j, k, ddg, tie_epsilon) {
                Some(l) => labels.push(l),
                None => ties += 1,
            }
        }
    }
    Ok(PairSet { labels, clamped, ties })
}

/// Index t in [0, a(a-1)/2) to the pair (j, k), j < k, in row-major order.
fn unrank_pair(mut t: usize, a: usize) -> (usize, usize) {
    for j in 0..a {
        let row = a - 1 - j;
        if t < row {
            return (j, j + 1 + t);
        }
        t -= row;
    }
    unreachable!("pair index out of range")
}

/// Predicted label (strict `>`) and margin `dG_ij - dG_ik` under `p`.
pub fn predict_pair_label<P: Predictor>(p: &P, label: &PairwiseLabel, bank: &ComplexBank<'_>) -> Result<(bool, f64)> {
    let m = bank.predict(p, label.antigen_id, label.j)? - bank.predict(p, label.antigen_id, label.k)?;
    Ok((m > 0.0, m))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsensusReport {
    pub kept: Vec<PairwiseLabel>,
    pub dropped: Vec<PairwiseLabel>,
    pub agreement_rate: f64,
}

/// Split labels by whether the teacher's predicted sign matches.
pub fn consensus_filter<P: Predictor>(
    teacher: &P,
    labels: &[PairwiseLabel],
    bank: &ComplexBank<'_>,
) -> Result<ConsensusReport> {
    let agree: Vec<bool> = labels
        .par_iter()
        .map(|l| predict_pair_label(teacher, l, bank).map(|(y, _)| y == l.y))
        .collect::<Result<_>>()?;
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (l, a) in labels.iter().zip(agree) {
        if a {
            kept.push(*l);
        } else {
            dropped.push(*l);
        }
    }
    let agreement_rate = if labels.is_empty() {
        1.0
    } else {
        kept.len() as f64 / labels.len() as f64
    };
    Ok(ConsensusReport {
        kept,
        dropped,
        agreement_rate,
    })
}

/// Binary cross-entropy with `p(y = 1) = sigmoid(margin)`.
pub fn pairwise_loss(margin: f64, y: bool) -> f64 {
    softplus(margin) - if y { margin } else { 0.0 }
}

/// d loss / d margin.
pub fn pairwise_loss_grad(margin: f64, y: bool) -> f64 {
    sigmoid(margin) - if y { 1.0 } else { 0.0 }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 40,
            batch_size: 256,
            learning_rate: 3e-4,
        }
    }
}

/// Mean pairwise loss of `p` over `labels` and its parameter gradient.
pub fn pairwise_loss_and_grad<P: Predictor>(
    p: &P,
    labels: &[PairwiseLabel],
    bank: &ComplexBank<'_>,
) -> Result<(f64, Vec<f64>)> {
    let mut grad = p.params().zeros_like();
    let loss = accumulate_pairwise(p, labels, bank, &mut grad)?;
    Ok((loss, grad))
}

fn accumulate_pairwise<P: Predictor>(
    p: &P,
    labels: &[PairwiseLabel],
    bank: &ComplexBank<'_>,
    grad: &mut [f64],
) -> Result<f64> {
    let inv = 1.0 / labels.len() as f64;
    let mut loss = 0.0;
    for l in labels {
        let ij = bank.get(l.antigen_id, l.j)?;
        let ik = bank.get(l.antigen_id, l.k)?;
        let m = p.predict_input(ij) - p.predict_input(ik);
        loss += pairwise_loss(m, l.y) * inv;
        let d = pairwise_loss_grad(m, l.y) * inv;
        p.backprop_params(ij, d, grad);
        p.backprop_params(ik, -d, grad);
    }
    Ok(loss)
}

/// Fine-tune on pairwise labels with Adam; returns the per-epoch mean loss.
pub fn pairwise_finetune<P: Predictor>(
    student: &mut P,
    kept: &[PairwiseLabel],
    bank: &ComplexBank<'_>,
    cfg: &FinetuneConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if kept.is_empty() {
        return Err(Error::Empty("pairwise labels"));
    }
    let mut opt = Adam::new(
        student.params().len(),
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut order: Vec<usize> = (0..kept.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| kept[i]));
            let (loss, grad) = pairwise_loss_and_grad(student, &batch, bank)?;
            if !loss.is_finite() || !nn::all_finite(&grad) {
                return Err(Error::NonFiniteLoss { epoch, loss });
            }
            opt.step(student.params_mut().data_mut(), &grad);
            total += loss * chunk.len() as f64;
        }
        curve.push(total / kept.len() as f64);
    }
    Ok(curve)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherOrder {
    /// The sequence model filters for the structure model first.
    #[default]
    SequenceFirst,
    StructureFirst,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoteachConfig {
    pub rounds: usize,
    /// Leading rounds that fine-tune both models on every label before any
    /// filtering; they count towards `rounds`.
    pub warmup_rounds: usize,
    pub pairs_per_antigen: usize,
    pub tie_epsilon: f64,
    pub order: TeacherOrder,
    /// When false every label is kept; the schedule is otherwise identical.
    pub selection: bool,
    pub finetune: FinetuneConfig,
}

impl Default for CoteachConfig {
    fn default() -> Self {
        CoteachConfig {
            rounds: 3,
            warmup_rounds: 1,
            pairs_per_antigen: 64,
            tie_epsilon: DEFAULT_TIE_EPSILON,
            order: TeacherOrder::default(),
            selection: true,
            finetune: FinetuneConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Sequence,
    Structure,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Sequence => "seq",
            Role::Structure => "struct",
        }
    }
}

/// One filter-then-tune step.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub teacher: Role,
    /// False for warm-up steps and when selection is disabled.
    pub filtered: bool,
    pub kept: usize,
    pub dropped: usize,
    pub agreement: f64,
    /// Fraction of kept labels whose noisy sign matches the exact energies.
    pub kept_clean_fraction: f64,
    pub post_spearman_seq: Option<f64>,
    pub post_spearman_struct: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct CoteachOutcome {
    pub seq: SeqPredictor,
    pub structure: StructPredictor,
    pub reports: Vec<RoundReport>,
}

/// Alternate filtering and fine-tuning for `cfg.rounds` rounds, the first
/// `cfg.warmup_rounds` of them without filtering. When `eval_antigens` is
/// given, both models are scored after every step.
pub fn coteach(
    seq: &SeqPredictor,
    structure: &StructPredictor,
    labels: &[PairwiseLabel],
    bank: &ComplexBank<'_>,
    cfg: &CoteachConfig,
    eval_antigens: Option<&[usize]>,
    rng: &mut Rng,
) -> Result<CoteachOutcome> {
    if cfg.rounds == 0 {
        return Err(Error::InvalidConfig("co-teaching needs at least one round".into()));
    }
    if cfg.warmup_rounds > cfg.rounds {
        return Err(Error::InvalidConfig("warmup_rounds cannot exceed rounds".into()));
    }
    let mut seq = seq.clone();
    let mut structure = structure.clone();
    let mut reports = Vec::with_capacity(2 * cfg.rounds);
    let teachers = match cfg.order {
        TeacherOrder::SequenceFirst => [Role::Sequence, Role::Structure],
        TeacherOrder::StructureFirst => [Role::Structure, Role::Sequence],
    };
    for round in 1..=cfg.rounds {
        for teacher in teachers {
            let report = match teacher {
                Role::Sequence => consensus_filter(&seq, labels, bank)?,
                Role::Structure => consensus_filter(&structure, labels, bank)?,
            };
            let filtered = cfg.selection && round > cfg.warmup_rounds;
            let kept: &[PairwiseLabel] = if filtered { &report.kept } else { labels };
            if kept.is_empty() {
                warn!(
                    "round {round}: {} teacher kept no labels; skipping fine-tune",
                    teacher.name()
                );
            } else {
                match teacher {
                    Role::Sequence => {
                        pairwise_finetune(&mut structure, kept, bank, &cfg.finetune, rng)?;
                    }
                    Role::Structure => {
                        pairwise_finetune(&mut seq, kept, bank, &cfg.finetune, rng)?;
                    }
                }
            }
            let (post_spearman_seq, post_spearman_struct) = match eval_antigens {
                Some(ags) => (
                    Some(spearman_eval(&seq, ags, bank)?.mean),
                    Some(spearman_eval(&structure, ags, bank)?.mean),
                ),
                None => (None, None),
            };
            reports.push(RoundReport {
                round,
                teacher,
                filtered,
                kept: kept.len(),
                dropped: labels.len() - kept.len(),
                agreement: report.agreement_rate,
                kept_clean_fraction: clean_fraction(kept, bank.dataset()),
                post_spearman_seq,
                post_spearman_struct,
            });
        }
    }
    Ok(CoteachOutcome {
        seq,
        structure,
        reports,
    })
}

fn clean_fraction(labels: &[PairwiseLabel], ds: &Dataset) -> f64 {
    if labels.is_empty() {
        return f64::NAN;
    }
    let clean = labels
        .iter()
        .filter(|l| {
            let r = ds.records_for(l.antigen_id);
            (r[l.j].delta_g - r[l.k].delta_g > 0.0) == l.y
        })
        .count();
    clean as f64 / labels.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpearmanReport {
    pub mean: f64,
    /// `(antigen, R, undefined)`; undefined correlations count as 0.
    pub per_antigen: Vec<(usize, f64, bool)>,
}

/// Mean over antigens of the rank correlation between predicted and exact
/// energies across all antibodies.
pub fn spearman_eval<P: Predictor>(p: &P, antigens: &[usize], bank: &ComplexBank<'_>) -> Result<SpearmanReport> {
    if antigens.is_empty() {
        return Err(Error::Empty("evaluation antigens"));
    }
    let ds = bank.dataset();
    if ds.antibodies.len() < 2 {
        return Err(Error::InvalidConfig(
            "rank correlation needs at least two antibodies".into(),
        ));
    }
    let per_antigen = antigens
        .par_iter()
        .map(|&i| {
            let pred = (0..ds.antibodies.len())
                .map(|j| bank.predict(p, i, j))
                .collect::<Result<Vec<f64>>>()?;
            let truth: Vec<f64> = ds.records_for(i).iter().map(|r| r.delta_g).collect();
            Ok(match stats::spearman(&pred, &truth) {
                Some(r) => (i, r, false),
                None => (i, 0.0, true),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = per_antigen.iter().map(|x| x.1).sum::<f64>() / per_antigen.len() as f64;
    Ok(SpearmanReport { mean, per_antigen })
}

pub fn write_pairs(path: &Path, labels: &[PairwiseLabel]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["i", "j", "k", "ddg", "y"])?;
    for l in labels {
        w.write_record([
            l.antigen_id.to_string(),
            l.j.to_string(),
            l.k.to_string(),
            format_f64(l.ddg),
            (l.y as u8).to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_pairs(path: &Path) -> Result<Vec<PairwiseLabel>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut rd = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row?;
        let bad = |i: usize| Error::format("pairs.csv", format!("bad field {:?}", &row[i]));
        let ddg: f64 = row[3].parse().map_err(|_| bad(3))?;
        out.push(PairwiseLabel {
            antigen_id: row[0].parse().map_err(|_| bad(0))?,
            j: row[1].parse().map_err(|_| bad(1))?,
            k: row[2].parse().map_err(|_| bad(2))?,
            ddg,
            y: match &row[4] {
                "1" => true,
                "0" => false,
                _ => return Err(bad(4)),
            },
        });
    }
    Ok(out)
}

fn opt_f64(v: Option<f64>) -> String {
    v.map(format_f64).unwrap_or_default()
}

pub fn write_report(path: &Path, reports: &[RoundReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "round",
        "teacher",
        "filtered",
        "kept",
        "dropped",
        "agreement",
        "post_spearman_seq",
        "post_spearman_struct",
    ])?;
    for r in reports {
        w.write_record([
            r.round.to_string(),
            r.teacher.name().to_string(),
            (r.filtered as u8).to_string(),
            r.kept.to_string(),
            r.dropped.to_string(),
            format_f64(r.agreement),
            opt_f64(r.post_spearman_seq),
            opt_f64(r.post_spearman_struct),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
