//! Binding-energy estimators.
//!
//! [`SeqPredictor`] reads only the two sequences; [`StructPredictor`] reads
//! the complex coordinates around the CDR and is differentiable in them.
//! Both implement [`Predictor`], which is all the training loops need.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use rand::seq::SliceRandom;

use crate::checkpoint::Checkpoint;
use crate::dataset::{Dataset, LabeledPair};
use crate::error::{Error, Result};
use crate::nn::{self, Adam, AdamConfig, BlockId, Mlp, MlpCache, Params};
use crate::residue::{Sequence, NUM_RESIDUE_TYPES};
use crate::rng::{self, Rng};
use crate::structure::{scale, sub, Structure, Vec3};
use crate::world::{ComplexLayout, DockingNoise, ToyWorld};

/// Scale applied to neighbour distances before they enter the network.
pub const DISTANCE_SCALE: f64 = 4.0;
/// Distance feature used for missing neighbours when the antigen is shorter
/// than the neighbour count.
pub const PAD_DISTANCE: f64 = 12.0;
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct PredictorArch {
    pub embed_dim: usize,
    pub hidden: usize,
    /// Antigen neighbours per CDR residue (structure predictor only).
    pub neighbors: usize,
}

impl Default for PredictorArch {
    fn default() -> Self {
        PredictorArch {
            embed_dim: 16,
            hidden: 64,
            neighbors: 8,
        }
    }
}

/// A complex as seen by a predictor. The sequence predictor ignores the
/// structure.
#[derive(Clone, Copy, Debug)]
pub struct ComplexInput<'a> {
    pub layout: &'a ComplexLayout,
    pub structure: &'a Structure,
}

pub trait Predictor: Clone + Send + Sync {
    fn params(&self) -> &Params;
    fn params_mut(&mut self) -> &mut Params;
    fn predict_input(&self, input: ComplexInput<'_>) -> f64;
    /// Adds `d_out * d(prediction)/d(params)` into `grad`; returns the
    /// prediction.
    fn backprop_params(&self, input: ComplexInput<'_>, d_out: f64, grad: &mut [f64]) -> f64;
    fn to_checkpoint(&self) -> Checkpoint;
}

fn arch_meta(arch: &PredictorArch) -> BTreeMap<String, String> {
    let mut meta = BTreeMap::new();
    meta.insert("embed_dim".into(), arch.embed_dim.to_string());
    meta.insert("hidden".into(), arch.hidden.to_string());
    meta.insert("neighbors".into(), arch.neighbors.to_string());
    meta
}

fn arch_from_meta(ck: &Checkpoint) -> Result<PredictorArch> {
    Ok(PredictorArch {
        embed_dim: ck.meta_usize("embed_dim")?,
        hidden: ck.meta_usize("hidden")?,
        neighbors: ck.meta_usize("neighbors")?,
    })
}

/// Mean-pooled residue embeddings of antibody and antigen, concatenated and
/// passed through a three-layer MLP.
#[derive(Clone, Debug)]
pub struct SeqPredictor {
    arch: PredictorArch,
    params: Params,
    embed: BlockId,
    mlp: Mlp,
}

impl SeqPredictor {
    pub const KIND: &'static str = "seq_predictor";

    pub fn new(arch: PredictorArch, rng: &mut Rng) -> Self {
        let mut params = Params::new();
        let embed = params.add("seq.embed", NUM_RESIDUE_TYPES, arch.embed_dim);
        params.fill_normal(embed, 1.0, rng);
        let e = arch.embed_dim;
        let mlp = Mlp::new(&mut params, "seq.mlp", &[2 * e, arch.hidden, arch.hidden, 1], rng);
        SeqPredictor {
            arch,
            params,
            embed,
            mlp,
        }
    }

    pub fn arch(&self) -> &PredictorArch {
        &self.arch
    }

    pub fn output_layer(&self) -> (BlockId, BlockId) {
        self.mlp.last_layer()
    }

    fn pooled(&self, seq: &Sequence, out: &mut Vec<f64>) {
        let e = self.arch.embed_dim;
        let table = self.params.block(self.embed);
        let start = out.len();
        out.resize(start + e, 0.0);
        let inv = 1.0 / seq.len() as f64;
        for r in seq.residues() {
            let row = &table[r.index() * e..(r.index() + 1) * e];
            for (o, v) in out[start..].iter_mut().zip(row) {
                *o += v * inv;
            }
        }
    }

    fn features(&self, ab: &Sequence, ag: &Sequence) -> Vec<f64> {
        let mut f = Vec::with_capacity(2 * self.arch.embed_dim);
        self.pooled(ab, &mut f);
        self.pooled(ag, &mut f);
        f
    }

    pub fn predict(&self, ab: &Sequence, ag: &Sequence) -> f64 {
        self.mlp.forward_eval(&self.params, &self.features(ab, ag))[0]
    }

    fn backprop(&self, ab: &Sequence, ag: &Sequence, d_out: f64, grad: &mut [f64]) -> f64 {
        let mut cache = MlpCache::default();
        let y = self.mlp.forward(&self.params, &self.features(ab, ag), &mut cache)[0];
        let e = self.arch.embed_dim;
        let mut d_in = vec![0.0; 2 * e];
        self.mlp.backward(&self.params, &cache, &[d_out], grad, Some(&mut d_in));
        let off = self.params.block_info(self.embed).offset;
        for (seq, d) in [(ab, &d_in[..e]), (ag, &d_in[e..])] {
            let inv = 1.0 / seq.len() as f64;
            for r in seq.residues() {
                for (g, v) in grad[off + r.index() * e..off + (r.index() + 1) * e].iter_mut().zip(d) {
                    *g += v * inv;
                }
            }
        }
        y
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(Self::KIND)?;
        let mut p = SeqPredictor::new(arch_from_meta(ck)?, &mut rng::seeded(0));
        if !p.params.load_from(&ck.params) {
            return Err(Error::format("checkpoint", "sequence predictor layout mismatch"));
        }
        Ok(p)
    }
}

impl Predictor for SeqPredictor {
    fn params(&self) -> &Params {
        &self.params
    }

    fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    fn predict_input(&self, input: ComplexInput<'_>) -> f64 {
        self.predict(input.layout.antibody(), input.layout.antigen())
    }

    fn backprop_params(&self, input: ComplexInput<'_>, d_out: f64, grad: &mut [f64]) -> f64 {
        self.backprop(input.layout.antibody(), input.layout.antigen(), d_out, grad)
    }

    fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: Self::KIND.into(),
            meta: arch_meta(&self.arch),
            params: self.params.clone(),
        }
    }
}

/// Per-CDR-residue features, summed network output.
///
/// Each CDR residue p contributes `mlp([emb(a_p), d_1/s .. d_k/s,
/// x_p - x_{p-1}, x_{p+1} - x_p])` where `d_1 <= .. <= d_k` are its
/// distances to the k nearest antigen residues. Missing chain neighbours
/// contribute zero bond vectors.
#[derive(Clone, Debug)]
pub struct StructPredictor {
    arch: PredictorArch,
    params: Params,
    embed: BlockId,
    mlp: Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StructEval {
    pub value: f64,
    /// Two antigen residues were within [`TIE_TOLERANCE`] of each other in
    /// some CDR residue's neighbour ranking; ties are broken by index.
    pub knn_tie: bool,
}

struct ResidueFeatures {
    input: Vec<f64>,
    p: usize,
    /// Global index and unit vector `(x_p - x_q) / d` of each neighbour.
    neighbors: Vec<(usize, Vec3)>,
    prev: Option<usize>,
    next: Option<usize>,
}

impl StructPredictor {
    pub const KIND: &'static str = "struct_predictor";

    pub fn new(arch: PredictorArch, rng: &mut Rng) -> Self {
        let mut params = Params::new();
        let embed = params.add("struct.embed", NUM_RESIDUE_TYPES, arch.embed_dim);
        params.fill_normal(embed, 1.0, rng);
        let input = arch.embed_dim + arch.neighbors + 6;
        let mlp = Mlp::new(&mut params, "struct.mlp", &[input, arch.hidden, arch.hidden, 1], rng);
        StructPredictor {
            arch,
            params,
            embed,
            mlp,
        }
    }

    pub fn arch(&self) -> &PredictorArch {
        &self.arch
    }

    pub fn output_layer(&self) -> (BlockId, BlockId) {
        self.mlp.last_layer()
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    fn featurize(&self, x: &Structure, layout: &ComplexLayout) -> (Vec<ResidueFeatures>, bool) {
        let e = self.arch.embed_dim;
        let k = self.arch.neighbors;
        let table = self.params.block(self.embed);
        let ag = layout.antigen_range();
        let n = x.len();
        let mut tie = false;
        let mut dists: Vec<(f64, usize)> = Vec::with_capacity(ag.len());
        let feats = layout
            .cdr_positions()
            .iter()
            .map(|&p| {
                let mut input = Vec::with_capacity(self.mlp.input_dim());
                let a = layout.antibody().get(p).index();
                input.extend_from_slice(&table[a * e..(a + 1) * e]);

                dists.clear();
                dists.extend(ag.clone().map(|q| (x.distance(p, q), q)));
                dists.sort_by(|u, v| u.0.total_cmp(&v.0).then(u.1.cmp(&v.1)));
                let considered = dists.len().min(k + 1);
                if dists[..considered]
                    .windows(2)
                    .any(|w| (w[1].0 - w[0].0).abs() <= TIE_TOLERANCE)
                {
                    tie = true;
                }
                let mut neighbors = Vec::with_capacity(k);
                for j in 0..k {
                    match dists.get(j) {
                        Some(&(d, q)) => {
                            input.push(d / DISTANCE_SCALE);
                            let u = if d > 0.0 {
                                scale(sub(x[p], x[q]), 1.0 / d)
                            } else {
                                [0.0; 3]
                            };
                            neighbors.push((q, u));
                        }
                        None => input.push(PAD_DISTANCE / DISTANCE_SCALE),
                    }
                }

                let prev = p.checked_sub(1);
                let next = (p + 1 < n).then_some(p + 1);
                match prev {
                    Some(i) => input.extend_from_slice(&sub(x[p], x[i])),
                    None => input.extend_from_slice(&[0.0; 3]),
                }
                match next {
                    Some(i) => input.extend_from_slice(&sub(x[i], x[p])),
                    None => input.extend_from_slice(&[0.0; 3]),
                }
                ResidueFeatures {
                    input,
                    p,
                    neighbors,
                    prev,
                    next,
                }
            })
            .collect();
        (feats, tie)
    }

    pub fn evaluate(&self, x: &Structure, layout: &ComplexLayout) -> Result<StructEval> {
        x.check_len(layout.global_len())?;
        let (feats, knn_tie) = self.featurize(x, layout);
        let value = feats
            .iter()
            .map(|f| self.mlp.forward_eval(&self.params, &f.input)[0])
            .sum();
        Ok(StructEval { value, knn_tie })
    }

    pub fn predict(&self, x: &Structure, layout: &ComplexLayout) -> Result<f64> {
        Ok(self.evaluate(x, layout)?.value)
    }

    /// Prediction and its exact gradient with respect to every coordinate.
    /// Only CDR residues, their chain neighbours and their nearest antigen
    /// residues receive non-zero entries.
    pub fn grad_struct(&self, x: &Structure, layout: &ComplexLayout) -> Result<(StructEval, Structure)> {
        x.check_len(layout.global_len())?;
        let (feats, knn_tie) = self.featurize(x, layout);
        let e = self.arch.embed_dim;
        let k = self.arch.neighbors;
        let mut g = Structure::zeros(x.len());
        let mut value = 0.0;
        let mut cache = MlpCache::default();
        for f in &feats {
            value += self.mlp.forward(&self.params, &f.input, &mut cache)[0];
            let d_in = self.mlp.input_gradient(&self.params, &cache, &[1.0]);
            accumulate_coord_grad(&mut g, f, &d_in, e, k);
        }
        Ok((StructEval { value, knn_tie }, g))
    }

    fn backprop(&self, x: &Structure, layout: &ComplexLayout, d_out: f64, grad: &mut [f64]) -> f64 {
        let (feats, _) = self.featurize(x, layout);
        let e = self.arch.embed_dim;
        let off = self.params.block_info(self.embed).offset;
        let mut d_in = vec![0.0; self.mlp.input_dim()];
        let mut cache = MlpCache::default();
        let mut value = 0.0;
        for f in &feats {
            value += self.mlp.forward(&self.params, &f.input, &mut cache)[0];
            self.mlp.backward(&self.params, &cache, &[d_out], grad, Some(&mut d_in));
            let a = layout.antibody().get(f.p).index();
            for (gi, d) in grad[off + a * e..off + (a + 1) * e].iter_mut().zip(&d_in[..e]) {
                *gi += d;
            }
        }
        value
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(Self::KIND)?;
        let mut p = StructPredictor::new(arch_from_meta(ck)?, &mut rng::seeded(0));
        if !p.params.load_from(&ck.params) {
            return Err(Error::format("checkpoint", "structure predictor layout mismatch"));
        }
        Ok(p)
    }
}

fn accumulate_coord_grad(g: &mut Structure, f: &ResidueFeatures, d_in: &[f64], e: usize, k: usize) {
    let p = f.p;
    for (j, &(q, u)) in f.neighbors.iter().enumerate() {
        let s = d_in[e + j] / DISTANCE_SCALE;
        for c in 0..3 {
            g[p][c] += s * u[c];
            g[q][c] -= s * u[c];
        }
    }
    let b1 = &d_in[e + k..e + k + 3];
    let b2 = &d_in[e + k + 3..e + k + 6];
    if let Some(i) = f.prev {
        for c in 0..3 {
            g[p][c] += b1[c];
            g[i][c] -= b1[c];
        }
    }
    if let Some(i) = f.next {
        for c in 0..3 {
            g[i][c] += b2[c];
            g[p][c] -= b2[c];
        }
    }
}

impl Predictor for StructPredictor {
    fn params(&self) -> &Params {
        &self.params
    }

    fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    fn predict_input(&self, input: ComplexInput<'_>) -> f64 {
        self.evaluate(input.structure, input.layout)
            .map(|e| e.value)
            .unwrap_or(f64::NAN)
    }

    fn backprop_params(&self, input: ComplexInput<'_>, d_out: f64, grad: &mut [f64]) -> f64 {
        self.backprop(input.structure, input.layout, d_out, grad)
    }

    fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: Self::KIND.into(),
            meta: arch_meta(&self.arch),
            params: self.params.clone(),
        }
    }
}

/// Layouts and structures of dataset complexes, built on first use.
///
/// Each registry complex is represented by one docked structure drawn with
/// a per-complex seed, so the bank is deterministic and order-independent.
/// With exact docking it is the world's mean structure.
pub struct ComplexBank<'a> {
    world: &'a ToyWorld,
    dataset: &'a Dataset,
    docking: DockingNoise,
    seed: u64,
    cache: Vec<OnceLock<(ComplexLayout, Structure)>>,
}

impl<'a> ComplexBank<'a> {
    pub fn new(world: &'a ToyWorld, dataset: &'a Dataset) -> Self {
        ComplexBank::docked(world, dataset, DockingNoise::exact(), 0)
    }

    pub fn docked(world: &'a ToyWorld, dataset: &'a Dataset, docking: DockingNoise, seed: u64) -> Self {
        let n = world_len(dataset);
        ComplexBank {
            world,
            dataset,
            docking,
            seed,
            cache: (0..n).map(|_| OnceLock::new()).collect(),
        }
    }

    pub fn world(&self) -> &'a ToyWorld {
        self.world
    }

    pub fn dataset(&self) -> &'a Dataset {
        self.dataset
    }

    pub fn get(&self, antigen_id: usize, antibody_id: usize) -> Result<ComplexInput<'_>> {
        let ds = self.dataset;
        if antigen_id >= ds.antigens.len() {
            return Err(Error::UnknownId {
                kind: "antigen",
                id: antigen_id,
            });
        }
        if antibody_id >= ds.antibodies.len() {
            return Err(Error::UnknownId {
                kind: "antibody",
                id: antibody_id,
            });
        }
        let slot = antigen_id * ds.antibodies.len() + antibody_id;
        let (layout, structure) = self.cache[slot].get_or_init(|| {
            let layout = ds.layout(antigen_id, antibody_id);
            let s = if self.docking.is_exact() {
                self.world.mean_structure(&layout.sequence())
            } else {
                let mut rng = rng::seeded(rng::child_seed(self.seed, slot as u64));
                self.world.docked_structure(&layout, &self.docking, &mut rng)
            };
            (layout, s)
        });
        Ok(ComplexInput { layout, structure })
    }

    /// Build every complex of the given antigens up front, in parallel.
    pub fn warm(&self, antigens: &[usize]) {
        use rayon::prelude::*;
        let a = self.dataset.antibodies.len();
        antigens
            .par_iter()
            .flat_map(|&i| (0..a).into_par_iter().map(move |j| (i, j)))
            .for_each(|(i, j)| {
                let _ = self.get(i, j);
            });
    }

    pub fn predict<P: Predictor>(&self, p: &P, antigen_id: usize, antibody_id: usize) -> Result<f64> {
        Ok(p.predict_input(self.get(antigen_id, antibody_id)?))
    }
}

fn world_len(ds: &Dataset) -> usize {
    ds.antigens.len() * ds.antibodies.len()
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupervisedConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of labelled antigens withheld from training and used only
    /// for validation.
    pub validation_fraction: f64,
    /// Keep the parameters of the epoch with the lowest validation error.
    pub early_stopping: bool,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        SupervisedConfig {
            epochs: 100,
            batch_size: 16,
            learning_rate: 1e-3,
            validation_fraction: 0.2,
            early_stopping: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupervisedReport {
    pub initial_mse: f64,
    /// Mean training MSE per epoch.
    pub loss_curve: Vec<f64>,
    pub train_labels: usize,
    pub validation_labels: usize,
    pub validation_mse: Option<f64>,
    /// Per-epoch validation error, when there is a validation split.
    pub validation_curve: Vec<f64>,
    /// Epoch whose parameters were kept (0 = initialisation).
    pub kept_epoch: usize,
}

/// Split labels by antigen: roughly `fraction` of the distinct antigens go
/// to validation. At least one antigen always stays in training.
pub fn split_by_antigen(labels: &[LabeledPair], fraction: f64, rng: &mut Rng) -> (Vec<LabeledPair>, Vec<LabeledPair>) {
    let mut antigens: Vec<usize> = labels.iter().map(|l| l.antigen_id).collect();
    antigens.sort_unstable();
    antigens.dedup();
    antigens.shuffle(rng);
    let n_val = ((antigens.len() as f64 * fraction).round() as usize).min(antigens.len().saturating_sub(1));
    let val: Vec<usize> = antigens[..n_val].to_vec();
    labels.iter().partition(|l| !val.contains(&l.antigen_id))
}

fn mse<P: Predictor>(p: &P, labels: &[LabeledPair], bank: &ComplexBank<'_>) -> Result<f64> {
    let mut s = 0.0;
    for l in labels {
        let r = bank.predict(p, l.antigen_id, l.antibody_id)? - l.delta_g;
        s += r * r;
    }
    Ok(s / labels.len() as f64)
}

/// Mean-squared-error regression of the predictor onto exact labels.
pub fn supervised_train<P: Predictor>(
    predictor: &mut P,
    labels: &[LabeledPair],
    bank: &ComplexBank<'_>,
    cfg: &SupervisedConfig,
    rng: &mut Rng,
) -> Result<SupervisedReport> {
    if labels.is_empty() {
        return Err(Error::Empty("labelled set"));
    }
    let (train, val) = split_by_antigen(labels, cfg.validation_fraction, rng);
    let initial_mse = mse(predictor, &train, bank)?;
    let mut opt = Adam::new(
        predictor.params().len(),
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut val_curve = Vec::new();
    let track = cfg.early_stopping && !val.is_empty();
    let mut best = if track {
        Some((mse(predictor, &val, bank)?, 0, predictor.params().clone()))
    } else {
        None
    };
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut grad = predictor.params().zeros_like();
            let scale = 2.0 / batch.len() as f64;
            for &i in batch {
                let l = &train[i];
                let input = bank.get(l.antigen_id, l.antibody_id)?;
                // d/dθ (y - t)^2 = 2 (y - t) dy/dθ; residual needs y first.
                let y = predictor.predict_input(input);
                let r = y - l.delta_g;
                predictor.backprop_params(input, scale * r, &mut grad);
                total += r * r;
            }
            if !total.is_finite() || !nn::all_finite(&grad) {
                return Err(Error::NonFiniteLoss { epoch, loss: total });
            }
            opt.step(predictor.params_mut().data_mut(), &grad);
        }
        curve.push(total / train.len() as f64);
        if !val.is_empty() {
            let v = mse(predictor, &val, bank)?;
            val_curve.push(v);
            if let Some(b) = best.as_mut() {
                if v < b.0 {
                    *b = (v, epoch + 1, predictor.params().clone());
                }
            }
        }
    }
    let mut kept_epoch = cfg.epochs;
    if let Some((_, e, params)) = best {
        kept_epoch = e;
        *predictor.params_mut() = params;
    }
    let validation_mse = if val.is_empty() {
        None
    } else {
        Some(mse(predictor, &val, bank)?)
    };
    Ok(SupervisedReport {
        initial_mse,
        loss_curve: curve,
        train_labels: train.len(),
        validation_labels: val.len(),
        validation_mse,
        validation_curve: val_curve,
        kept_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DatasetSpec;
    use crate::nn::testing::{central_diff, rel_err};
    use crate::rng::seeded;
    use crate::world::make_complex;
    use rand::Rng as _;

    fn small_arch() -> PredictorArch {
        PredictorArch {
            embed_dim: 4,
            hidden: 8,
            neighbors: 3,
        }
    }

    fn seq(s: &str) -> Sequence {
        s.parse().unwrap()
    }

    fn random_complex(rng: &mut Rng) -> (ComplexLayout, Structure) {
        let ab = crate::world::uniform_sequence(8, rng);
        let ag = crate::world::uniform_sequence(6, rng);
        let (layout, _) = make_complex(&ab, &ag, 1, &[3, 4, 5]).unwrap();
        let x = crate::flow::random_structure(layout.global_len(), 3.0, rng);
        (layout, x)
    }

    #[test]
    fn seq_predictor_basic_properties() {
        let mut p = SeqPredictor::new(small_arch(), &mut seeded(1));
        let ab = seq("ACDEFGHIK");
        let ag = seq("LMNPQRST");
        assert_eq!(p.predict(&ab, &ag), p.predict(&ab, &ag));
        let rev: Sequence = ag.to_string().chars().rev().collect::<String>().parse().unwrap();
        assert!((p.predict(&ab, &ag) - p.predict(&ab, &rev)).abs() < 1e-12);
        let (w, b) = p.output_layer();
        p.params_mut().block_mut(w).fill(0.0);
        p.params_mut().block_mut(b)[0] = 0.7;
        assert_eq!(p.predict(&ab, &ag), 0.7);
        assert_eq!(p.predict(&seq("WWW"), &seq("Y")), 0.7);
    }

    #[test]
    fn seq_parameter_gradient_matches_finite_differences() {
        let p = SeqPredictor::new(small_arch(), &mut seeded(2));
        let ab = seq("ACDEFGHIKAC");
        let ag = seq("LMNPQRSTW");
        let mut g = p.params().zeros_like();
        p.backprop(&ab, &ag, 1.0, &mut g);
        let mut rng = seeded(3);
        for _ in 0..20 {
            let i = rng.random_range(0..p.params().len());
            let mut f = |v: f64| {
                let mut q = p.clone();
                q.params_mut().data_mut()[i] = v;
                q.predict(&ab, &ag)
            };
            let n = central_diff(&mut f, p.params().data()[i], 1e-5);
            assert!(rel_err(g[i], n) < 1e-4, "{i}: {} vs {n}", g[i]);
        }
    }

    #[test]
    fn struct_prediction_is_translation_invariant() {
        let p = StructPredictor::new(small_arch(), &mut seeded(4));
        let mut rng = seeded(5);
        let (layout, x) = random_complex(&mut rng);
        let y = x.translated([3.5, -20.0, 7.25]);
        let a = p.predict(&x, &layout).unwrap();
        let b = p.predict(&y, &layout).unwrap();
        assert!((a - b).abs() < 1e-10);
        let (_, ga) = p.grad_struct(&x, &layout).unwrap();
        let (_, gb) = p.grad_struct(&y, &layout).unwrap();
        assert!(ga.max_abs_diff(&gb) < 1e-10);
    }

    #[test]
    fn struct_zero_output_layer_is_constant_with_zero_gradient() {
        let mut p = StructPredictor::new(small_arch(), &mut seeded(6));
        let (w, b) = p.output_layer();
        p.params_mut().block_mut(w).fill(0.0);
        p.params_mut().block_mut(b)[0] = 0.25;
        let mut rng = seeded(7);
        let (layout, x) = random_complex(&mut rng);
        // Three CDR residues each contribute the bias.
        assert!((p.predict(&x, &layout).unwrap() - 0.75).abs() < 1e-15);
        let (_, g) = p.grad_struct(&x, &layout).unwrap();
        assert!(g.coords().iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn struct_matches_hand_featurisation() {
        // Two CDR residues at the end of a 3-residue antibody, a one-residue
        // linker-free antigen pair; features built by hand.
        let arch = PredictorArch {
            embed_dim: 2,
            hidden: 5,
            neighbors: 3,
        };
        let p = StructPredictor::new(arch, &mut seeded(8));
        let ab = seq("AWY");
        let ag = seq("KD");
        let (layout, _) = make_complex(&ab, &ag, 0, &[1, 2]).unwrap();
        let x = Structure::new(vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [1.0, 1.0, 0.0],
            [4.0, 1.0, 0.0],
            [1.0, 1.0, 2.0],
        ]);
        let emb = p.params().block(p.embed).to_vec();
        let row = |c: char| {
            let i = crate::residue::ResidueType::from_code(c).unwrap().index();
            vec![emb[2 * i], emb[2 * i + 1]]
        };
        let s = DISTANCE_SCALE;
        let pad = PAD_DISTANCE / s;
        // Residue 1 at (1,0,0): antigen at (4,1,0) d=sqrt(10), (1,1,2) d=sqrt(5).
        let mut f1 = row('W');
        f1.extend([5f64.sqrt() / s, 10f64.sqrt() / s, pad]);
        f1.extend([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        // Residue 2 at (1,1,0): d=3 and d=2.
        let mut f2 = row('Y');
        f2.extend([2.0 / s, 3.0 / s, pad]);
        f2.extend([0.0, 1.0, 0.0, 3.0, 0.0, 0.0]);
        let expect = p.mlp.forward_eval(p.params(), &f1)[0] + p.mlp.forward_eval(p.params(), &f2)[0];
        let got = p.evaluate(&x, &layout).unwrap();
        assert!((got.value - expect).abs() < 1e-14);
        assert!(!got.knn_tie);
    }

    #[test]
    fn struct_flags_neighbour_ties() {
        let p = StructPredictor::new(small_arch(), &mut seeded(9));
        let (layout, _) = make_complex(&seq("AW"), &seq("KD"), 0, &[1]).unwrap();
        let x = Structure::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [1.0, 2.0, 0.0], [1.0, -2.0, 0.0]]);
        assert!(p.evaluate(&x, &layout).unwrap().knn_tie);
    }

    #[test]
    fn grad_struct_matches_finite_differences() {
        let p = StructPredictor::new(PredictorArch::default(), &mut seeded(10));
        let mut rng = seeded(11);
        let world = ToyWorld::default();
        let ab = crate::world::uniform_sequence(24, &mut rng);
        let ag = crate::world::uniform_sequence(16, &mut rng);
        let (layout, full) = make_complex(&ab, &ag, 4, &(17..23).collect::<Vec<_>>()).unwrap();
        let x = world.ensemble_sample(&full, 0.3, &mut rng);
        let (_, g) = p.grad_struct(&x, &layout).unwrap();
        let mut checked = 0;
        while checked < 20 {
            let i = rng.random_range(0..x.len());
            if g[i].iter().all(|v| *v == 0.0) && rng.random::<f64>() < 0.9 {
                continue;
            }
            let c = rng.random_range(0..3);
            let mut f = |v: f64| {
                let mut y = x.clone();
                y[i][c] = v;
                p.predict(&y, &layout).unwrap()
            };
            let n = central_diff(&mut f, x[i][c], 1e-5);
            assert!(rel_err(g[i][c], n) < 1e-4, "({i},{c}): {} vs {n}", g[i][c]);
            checked += 1;
        }
    }

    #[test]
    fn gradient_support_is_local() {
        let p = StructPredictor::new(PredictorArch::default(), &mut seeded(12));
        let mut rng = seeded(13);
        let ab = crate::world::uniform_sequence(24, &mut rng);
        let ag = crate::world::uniform_sequence(16, &mut rng);
        let cdr: Vec<usize> = (17..23).collect();
        let (layout, full) = make_complex(&ab, &ag, 4, &cdr).unwrap();
        let x = ToyWorld::default().mean_structure(&full);
        let (_, g) = p.grad_struct(&x, &layout).unwrap();
        let linker = layout.antibody().len()..layout.antigen_offset();
        for i in 0..x.len() {
            let allowed = (16..=23).contains(&i) || layout.antigen_range().contains(&i);
            if !allowed {
                assert!(g[i].iter().all(|v| *v == 0.0), "residue {i} has gradient");
            }
            if linker.contains(&i) && i != 24 {
                assert!(g[i].iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn struct_parameter_gradient_matches_finite_differences() {
        let p = StructPredictor::new(small_arch(), &mut seeded(14));
        let mut rng = seeded(15);
        let (layout, x) = random_complex(&mut rng);
        let mut g = p.params().zeros_like();
        p.backprop(&x, &layout, 1.0, &mut g);
        for _ in 0..20 {
            let i = rng.random_range(0..p.params().len());
            let mut f = |v: f64| {
                let mut q = p.clone();
                q.params_mut().data_mut()[i] = v;
                q.predict(&x, &layout).unwrap()
            };
            let n = central_diff(&mut f, p.params().data()[i], 1e-5);
            assert!(rel_err(g[i], n) < 1e-4, "{i}: {} vs {n}", g[i]);
        }
    }

    fn tiny_dataset() -> (ToyWorld, Dataset) {
        let spec = DatasetSpec {
            num_antibodies: 12,
            num_antigens: 8,
            test_antigens: 2,
            ..DatasetSpec::default()
        };
        crate::dataset::standard_dataset(&spec, 5).unwrap()
    }

    #[test]
    fn supervised_training_reduces_error_and_is_reproducible() {
        let (world, ds) = tiny_dataset();
        let bank = ComplexBank::new(&world, &ds);
        let labels = crate::dataset::sample_labeled(&ds, 40, &mut seeded(16));
        let cfg = SupervisedConfig {
            epochs: 30,
            ..SupervisedConfig::default()
        };
        let run = || {
            let mut p = SeqPredictor::new(PredictorArch::default(), &mut seeded(17));
            let rep = supervised_train(&mut p, &labels, &bank, &cfg, &mut seeded(18)).unwrap();
            (p, rep)
        };
        let (a, rep) = run();
        let (b, _) = run();
        assert_eq!(a.params(), b.params());
        assert!(*rep.loss_curve.last().unwrap() < rep.initial_mse);
        assert!(rep.validation_labels > 0);

        let mut s = StructPredictor::new(PredictorArch::default(), &mut seeded(19));
        let rep = supervised_train(&mut s, &labels, &bank, &cfg, &mut seeded(20)).unwrap();
        assert!(*rep.loss_curve.last().unwrap() < rep.initial_mse);
    }

    #[test]
    fn single_label_is_interpolated() {
        let (world, ds) = tiny_dataset();
        let bank = ComplexBank::new(&world, &ds);
        let labels = crate::dataset::sample_labeled(&ds, 1, &mut seeded(21));
        let cfg = SupervisedConfig {
            epochs: 400,
            batch_size: 1,
            learning_rate: 3e-3,
            validation_fraction: 0.2,
            early_stopping: true,
        };
        let mut p = StructPredictor::new(PredictorArch::default(), &mut seeded(22));
        let rep = supervised_train(&mut p, &labels, &bank, &cfg, &mut seeded(23)).unwrap();
        assert_eq!(rep.train_labels, 1);
        assert!(*rep.loss_curve.last().unwrap() < 1e-4);
        assert!(mse(&p, &labels, &bank).unwrap() < 1e-4);
    }

    #[test]
    fn zero_epochs_and_empty_labels() {
        let (world, ds) = tiny_dataset();
        let bank = ComplexBank::new(&world, &ds);
        let labels = crate::dataset::sample_labeled(&ds, 10, &mut seeded(24));
        let mut p = SeqPredictor::new(PredictorArch::default(), &mut seeded(25));
        let before = p.params().clone();
        let cfg = SupervisedConfig {
            epochs: 0,
            ..SupervisedConfig::default()
        };
        supervised_train(&mut p, &labels, &bank, &cfg, &mut seeded(26)).unwrap();
        assert_eq!(p.params(), &before);
        assert!(supervised_train(&mut p, &[], &bank, &cfg, &mut seeded(26)).is_err());
        assert!(matches!(bank.get(99, 0), Err(Error::UnknownId { .. })));
    }

    #[test]
    fn checkpoints_roundtrip() {
        let s = SeqPredictor::new(small_arch(), &mut seeded(27));
        let back = SeqPredictor::from_checkpoint(&s.to_checkpoint()).unwrap();
        assert_eq!(back.params(), s.params());
        let t = StructPredictor::new(small_arch(), &mut seeded(28));
        let back = StructPredictor::from_checkpoint(&t.to_checkpoint()).unwrap();
        assert_eq!(back.params(), t.params());
        assert!(SeqPredictor::from_checkpoint(&t.to_checkpoint()).is_err());
    }
}
