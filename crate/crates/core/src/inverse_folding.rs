//! Structure-conditioned mutation proposals and sequence-score selection.
//!
//! A per-position classifier maps local geometry at a CDR residue to a
//! distribution over the 20 residue types. Local geometry is read through
//! rotation-invariant quantities: bond lengths, turning angles and torsions
//! in a three-vertex window, plus sorted distances to the nearest antigen
//! residues.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{self, Adam, AdamConfig, BlockId, Mlp, MlpCache, Params};
use crate::predictors::{SeqPredictor, DISTANCE_SCALE, PAD_DISTANCE};
use crate::residue::{ResidueType, Sequence, NUM_RESIDUE_TYPES};
use crate::rng::Rng;
use crate::structure::{cross, dot, norm, sub, Structure};
use crate::tables::format_f64;
use crate::world::ComplexLayout;

const WINDOW: [isize; 3] = [-1, 0, 1];

#[derive(Clone, Debug, PartialEq)]
pub struct IfArch {
    pub hidden: usize,
    pub neighbors: usize,
}

impl Default for IfArch {
    fn default() -> Self {
        IfArch {
            hidden: 64,
            neighbors: 8,
        }
    }
}

impl IfArch {
    /// Two bond lengths, then per window vertex a turning cosine and a
    /// torsion (sin, cos), then the neighbour distances.
    pub fn input_dim(&self) -> usize {
        2 + 3 * WINDOW.len() + self.neighbors
    }
}

#[derive(Clone, Debug)]
pub struct InverseFoldModel {
    arch: IfArch,
    params: Params,
    mlp: Mlp,
}

impl InverseFoldModel {
    pub const KIND: &'static str = "inverse_fold";

    /// Fresh model with a zeroed output layer, so every position starts
    /// uniform.
    pub fn new(arch: IfArch, rng: &mut Rng) -> Self {
        let mut params = Params::new();
        let mlp = Mlp::new(
            &mut params,
            "if",
            &[arch.input_dim(), arch.hidden, NUM_RESIDUE_TYPES],
            rng,
        );
        let (w, _) = mlp.last_layer();
        params.block_mut(w).fill(0.0);
        InverseFoldModel { arch, params, mlp }
    }

    pub fn arch(&self) -> &IfArch {
        &self.arch
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn output_layer(&self) -> (BlockId, BlockId) {
        self.mlp.last_layer()
    }

    /// Features of residue `p` (a global index) in the complex.
    pub fn features(&self, x: &Structure, layout: &ComplexLayout, p: usize) -> Vec<f64> {
        let n = x.len() as isize;
        let at = |i: isize| (0..n).contains(&i).then(|| x[i as usize]);
        let bond = |i: isize| Some(sub(at(i + 1)?, at(i)?));
        let p = p as isize;
        let mut f = Vec::with_capacity(self.arch.input_dim());
        f.push(bond(p - 1).map_or(0.0, norm));
        f.push(bond(p).map_or(0.0, norm));
        for o in WINDOW {
            let v = p + o;
            let turn = match (bond(v - 1), bond(v)) {
                (Some(a), Some(b)) => cosine(a, b),
                _ => 0.0,
            };
            f.push(turn);
            let (s, c) = match (bond(v - 1), bond(v), bond(v + 1)) {
                (Some(a), Some(b), Some(c)) => torsion(a, b, c),
                _ => (0.0, 0.0),
            };
            f.push(s);
            f.push(c);
        }
        let mut d: Vec<f64> = layout.antigen_range().map(|q| x.distance(p as usize, q)).collect();
        d.sort_by(f64::total_cmp);
        for j in 0..self.arch.neighbors {
            f.push(d.get(j).copied().unwrap_or(PAD_DISTANCE) / DISTANCE_SCALE);
        }
        f
    }

    pub fn logits(&self, features: &[f64]) -> Vec<f64> {
        self.mlp.forward_eval(&self.params, features)
    }

    /// Residue distribution at global position `p`.
    pub fn distribution(&self, x: &Structure, layout: &ComplexLayout, p: usize) -> Vec<f64> {
        nn::softmax(&self.logits(&self.features(x, layout, p)))
    }

    /// Mean cross-entropy over examples and its parameter gradient (added
    /// into `grad` when given).
    fn cross_entropy(&self, examples: &[&IfExample], mut grad: Option<&mut [f64]>) -> f64 {
        let mut cache = MlpCache::default();
        let mut total = 0.0;
        let w = 1.0 / examples.len() as f64;
        for ex in examples {
            let logits = self.mlp.forward(&self.params, &ex.features, &mut cache);
            let p = nn::softmax(&logits);
            total -= p[ex.target].max(f64::MIN_POSITIVE).ln();
            if let Some(g) = grad.as_deref_mut() {
                let mut d = p;
                d[ex.target] -= 1.0;
                d.iter_mut().for_each(|v| *v *= w);
                self.mlp.backward(&self.params, &cache, &d, g, None);
            }
        }
        total * w
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut meta = BTreeMap::new();
        meta.insert("hidden".into(), self.arch.hidden.to_string());
        meta.insert("neighbors".into(), self.arch.neighbors.to_string());
        Checkpoint {
            kind: Self::KIND.into(),
            meta,
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != Self::KIND {
            return Err(Error::format(
                "checkpoint",
                format!("expected {}, found {}", Self::KIND, ck.kind),
            ));
        }
        let get = |k: &str| -> Result<usize> {
            ck.meta
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format("checkpoint", format!("missing {k}")))
        };
        let arch = IfArch {
            hidden: get("hidden")?,
            neighbors: get("neighbors")?,
        };
        let mut m = InverseFoldModel::new(arch, &mut crate::rng::seeded(0));
        if !m.params.load_from(&ck.params) {
            return Err(Error::format(
                "checkpoint",
                "parameter layout does not match the architecture",
            ));
        }
        Ok(m)
    }
}

fn cosine(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = norm(a) * norm(b);
    if d > 0.0 {
        dot(a, b) / d
    } else {
        0.0
    }
}

/// Dihedral of three consecutive bonds as (sin, cos); zeros when degenerate.
fn torsion(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> (f64, f64) {
    let n1 = cross(a, b);
    let n2 = cross(b, c);
    let m = cross(n1, n2);
    let y = dot(m, b) / norm(b).max(f64::MIN_POSITIVE);
    let x = dot(n1, n2);
    let r = (x * x + y * y).sqrt();
    if r > 1e-12 {
        (y / r, x / r)
    } else {
        (0.0, 0.0)
    }
}

/// One training example: features at a CDR position and the true residue.
#[derive(Clone, Debug)]
pub struct IfExample {
    pub features: Vec<f64>,
    pub target: usize,
}

/// Examples at every CDR position of every corpus complex.
pub fn if_examples(model: &InverseFoldModel, corpus: &[(ComplexLayout, Structure)]) -> Vec<IfExample> {
    corpus
        .iter()
        .flat_map(|(layout, x)| {
            layout.cdr_positions().iter().map(move |&p| IfExample {
                features: model.features(x, layout, p),
                target: layout.antibody().get(p).index(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IfTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of complexes held out to report accuracy.
    pub holdout_fraction: f64,
}

impl Default for IfTrainConfig {
    fn default() -> Self {
        IfTrainConfig {
            epochs: 30,
            batch_size: 64,
            learning_rate: 3e-3,
            holdout_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IfReport {
    pub initial_loss: f64,
    pub loss_curve: Vec<f64>,
    /// Top-1 accuracy on held-out complexes; `None` without a holdout.
    pub holdout_accuracy: Option<f64>,
}

pub fn train_if(
    model: &mut InverseFoldModel,
    corpus: &[(ComplexLayout, Structure)],
    cfg: &IfTrainConfig,
    rng: &mut Rng,
) -> Result<IfReport> {
    if corpus.is_empty() {
        return Err(Error::Empty("inverse-folding corpus"));
    }
    let mut idx: Vec<usize> = (0..corpus.len()).collect();
    idx.shuffle(rng);
    let n_hold = ((corpus.len() as f64) * cfg.holdout_fraction).floor() as usize;
    let n_hold = n_hold.min(corpus.len() - 1);
    let pick = |ids: &[usize]| ids.iter().map(|&i| corpus[i].clone()).collect::<Vec<_>>();
    let hold = if_examples(model, &pick(&idx[..n_hold]));
    let train = if_examples(model, &pick(&idx[n_hold..]));
    let all: Vec<&IfExample> = train.iter().collect();
    let initial_loss = model.cross_entropy(&all, None);
    let mut opt = Adam::new(
        model.params.len(),
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let ex: Vec<&IfExample> = batch.iter().map(|&i| &train[i]).collect();
            let mut grad = model.params.zeros_like();
            let l = model.cross_entropy(&ex, Some(&mut grad));
            if !l.is_finite() || !nn::all_finite(&grad) {
                return Err(Error::NonFiniteLoss { epoch, loss: l });
            }
            total += l * ex.len() as f64;
            opt.step(model.params.data_mut(), &grad);
        }
        curve.push(total / train.len() as f64);
    }
    let holdout_accuracy = (!hold.is_empty()).then(|| {
        let hit = hold
            .iter()
            .filter(|e| argmax(&model.logits(&e.features)) == e.target)
            .count();
        hit as f64 / hold.len() as f64
    });
    Ok(IfReport {
        initial_loss,
        loss_curve: curve,
        holdout_accuracy,
    })
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MutationProposal {
    /// Mutated antibody.
    pub sequence: Sequence,
    pub arity: usize,
    /// Sorted antibody positions that differ from the parent.
    pub positions: Vec<usize>,
    /// Sequence-predictor score, filled by [`post_select`].
    pub seq_score: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionWeighting {
    /// Weighted by the classifier's entropy at each position.
    #[default]
    Entropy,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MutationConfig {
    pub arities: Vec<usize>,
    pub per_arity: usize,
    pub top_m: usize,
    pub weighting: PositionWeighting,
}

impl Default for MutationConfig {
    fn default() -> Self {
        MutationConfig {
            arities: vec![1, 2, 3],
            per_arity: 8,
            top_m: 4,
            weighting: PositionWeighting::Entropy,
        }
    }
}

impl MutationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.arities.is_empty() || self.arities.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "arities must be positive: {:?}",
                self.arities
            )));
        }
        if self.per_arity == 0 || self.top_m == 0 {
            return Err(Error::InvalidConfig("per_arity and top_m must be at least 1".into()));
        }
        Ok(())
    }
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Draws from `weights` (non-negative); uniform if they sum to zero.
fn draw(weights: &[f64], rng: &mut Rng) -> usize {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        let live: Vec<usize> = (0..weights.len()).collect();
        return live[rng.random_range(0..live.len())];
    }
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).expect("positive total")
}

/// Samples `per_arity` proposals for each arity; duplicates are dropped.
pub fn propose_mutations(
    model: &InverseFoldModel,
    x: &Structure,
    layout: &ComplexLayout,
    cfg: &MutationConfig,
    rng: &mut Rng,
) -> Result<Vec<MutationProposal>> {
    cfg.validate()?;
    let cdr = layout.cdr_positions();
    if let Some(&a) = cfg.arities.iter().find(|&&a| a > cdr.len()) {
        return Err(Error::ArityTooLarge {
            arity: a,
            available: cdr.len(),
        });
    }
    let parent = layout.antibody();
    let dists: Vec<Vec<f64>> = cdr.iter().map(|&p| model.distribution(x, layout, p)).collect();
    let pos_weights: Vec<f64> = match cfg.weighting {
        PositionWeighting::Entropy => dists.iter().map(|d| entropy(d)).collect(),
        PositionWeighting::Uniform => vec![1.0; cdr.len()],
    };
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for &arity in &cfg.arities {
        for _ in 0..cfg.per_arity {
            let mut w = pos_weights.clone();
            let mut chosen = Vec::with_capacity(arity);
            for _ in 0..arity {
                if w.iter().sum::<f64>() <= 0.0 {
                    // Only zero-entropy positions left: fall back to uniform
                    // over the positions not yet taken.
                    for (i, v) in w.iter_mut().enumerate() {
                        if !chosen.contains(&i) {
                            *v = 1.0;
                        }
                    }
                }
                let i = draw(&w, rng);
                w[i] = 0.0;
                chosen.push(i);
            }
            chosen.sort_unstable();
            let mut residues = parent.residues().to_vec();
            for &i in &chosen {
                let p = cdr[i];
                let current = residues[p].index();
                let mut probs = dists[i].clone();
                probs[current] = 0.0;
                if probs.iter().sum::<f64>() <= 0.0 {
                    probs = vec![1.0; NUM_RESIDUE_TYPES];
                    probs[current] = 0.0;
                }
                residues[p] = ResidueType::from_index(draw(&probs, rng));
            }
            let sequence = Sequence::new(residues)?;
            if seen.insert(sequence.to_string()) {
                out.push(MutationProposal {
                    sequence,
                    arity,
                    positions: chosen.iter().map(|&i| cdr[i]).collect(),
                    seq_score: None,
                });
            }
        }
    }
    Ok(out)
}

/// Scores proposals with the sequence predictor against `antigen` and keeps
/// the `top_m` lowest, ties broken by arity then sequence.
pub fn post_select(
    fa: &SeqPredictor,
    antigen: &Sequence,
    proposals: &[MutationProposal],
    top_m: usize,
) -> Result<Vec<MutationProposal>> {
    if proposals.is_empty() {
        return Err(Error::Empty("proposal list"));
    }
    if top_m == 0 {
        return Err(Error::InvalidConfig("top_m must be at least 1".into()));
    }
    let mut scored: Vec<MutationProposal> = proposals
        .iter()
        .map(|p| MutationProposal {
            seq_score: Some(fa.predict(&p.sequence, antigen)),
            ..p.clone()
        })
        .collect();
    sort_by_score(&mut scored);
    scored.truncate(top_m);
    Ok(scored)
}

/// Ascending score, then arity, then sequence string. Unscored sort last.
pub fn sort_by_score(v: &mut [MutationProposal]) {
    v.sort_by(|a, b| {
        let sa = a.seq_score.unwrap_or(f64::INFINITY);
        let sb = b.seq_score.unwrap_or(f64::INFINITY);
        sa.total_cmp(&sb)
            .then(a.arity.cmp(&b.arity))
            .then_with(|| a.sequence.to_string().cmp(&b.sequence.to_string()))
    });
}

/// One row of the proposal log.
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalRow {
    pub antigen_id: usize,
    pub iteration: usize,
    pub parent: Sequence,
    pub proposal: MutationProposal,
}

pub fn write_proposals(path: &Path, rows: &[ProposalRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "antigen_id",
        "iteration",
        "arity",
        "positions",
        "parent_hash",
        "mutant_sequence",
        "seq_score",
    ])?;
    for r in rows {
        let positions = r
            .proposal
            .positions
            .iter()
            .map(|p| p.to_string())
            .collect::<Vec<_>>()
            .join(";");
        w.write_record([
            r.antigen_id.to_string(),
            r.iteration.to_string(),
            r.proposal.arity.to_string(),
            positions,
            r.parent.short_hash(),
            r.proposal.sequence.to_string(),
            r.proposal.seq_score.map(format_f64).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
