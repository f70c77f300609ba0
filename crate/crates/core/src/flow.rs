//! Conditional flow matching over chain coordinates.
//!
//! The path interpolates linearly between a harmonic-chain prior sample
//! (t = 0) and a data structure (t = 1). The learned field is expressed
//! through a denoiser that predicts the clean structure:
//! `v(x, t) = (x1_hat(x, t) - x) / (1 - t)`.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{self, Adam, AdamConfig, BlockId, Mlp, MlpCache, Params};
use crate::residue::{Sequence, NUM_RESIDUE_TYPES};
use crate::rng::{self, Rng};
use crate::structure::{add, scale, Structure, Vec3};

/// Flow time in [0, 1]; 0 is the prior, 1 the data.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct TimePoint(f64);

impl TimePoint {
    pub fn new(t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidTime { t, what: "flow time" });
        }
        Ok(TimePoint(t))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// Rejects t = 1, where the x1-parameterised field is singular.
    fn before_end(self, what: &'static str) -> Result<f64> {
        if self.0 >= 1.0 {
            return Err(Error::InvalidTime { t: self.0, what });
        }
        Ok(self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HarmonicPriorSpec {
    pub chain_length: usize,
    pub stiffness: f64,
}

impl HarmonicPriorSpec {
    pub fn new(chain_length: usize, stiffness: f64) -> Result<Self> {
        if chain_length < 2 || !(stiffness > 0.0) || !stiffness.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "harmonic prior needs length >= 2 and stiffness > 0, got {chain_length}, {stiffness}"
            )));
        }
        Ok(HarmonicPriorSpec {
            chain_length,
            stiffness,
        })
    }
}

/// Exact sample of the centred harmonic chain: i.i.d. Normal(0, 1/k) bond
/// vectors, cumulatively summed, then shifted to zero centroid.
pub fn harmonic_prior_sample(spec: &HarmonicPriorSpec, rng: &mut Rng) -> Structure {
    let normal = Normal::new(0.0, (1.0 / spec.stiffness).sqrt()).expect("positive variance");
    let mut coords = Vec::with_capacity(spec.chain_length);
    let mut cur: Vec3 = [0.0; 3];
    coords.push(cur);
    for _ in 1..spec.chain_length {
        let b = [normal.sample(rng), normal.sample(rng), normal.sample(rng)];
        cur = add(cur, b);
        coords.push(cur);
    }
    Structure::new(coords).centered()
}

pub fn interpolate(x0: &Structure, x1: &Structure, t: TimePoint) -> Result<Structure> {
    x1.check_len(x0.len())?;
    let t = t.value();
    Ok(Structure::new(
        x0.coords()
            .iter()
            .zip(x1.coords())
            .map(|(&a, &b)| add(scale(a, 1.0 - t), scale(b, t)))
            .collect(),
    ))
}

/// `u = (x1 - x) / (1 - t)`.
pub fn conditional_vector_field(x: &Structure, x1: &Structure, t: TimePoint) -> Result<Structure> {
    x1.check_len(x.len())?;
    let t = t.before_end("conditional vector field")?;
    Ok(x1.axpy(-1.0, x).scaled(1.0 / (1.0 - t)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowArch {
    pub embed_dim: usize,
    pub hidden: usize,
    pub time_freqs: Vec<f64>,
    pub position_freqs: Vec<f64>,
    /// Stiffness of the harmonic prior the model was trained against.
    pub prior_stiffness: f64,
}

impl Default for FlowArch {
    fn default() -> Self {
        FlowArch {
            embed_dim: 8,
            hidden: 64,
            time_freqs: vec![0.25, 0.5, 1.0, 2.0],
            position_freqs: vec![0.5, 1.0, 2.0, 4.0, 8.0, 16.0],
            prior_stiffness: 3.0,
        }
    }
}

impl FlowArch {
    fn input_dim(&self) -> usize {
        3 + 2 * self.time_freqs.len() + 2 * self.embed_dim + 2 * self.position_freqs.len()
    }
}

/// Sequence-conditioned denoiser `x1_hat(x, t)`.
///
/// Each residue is mapped independently by a two-hidden-layer MLP whose
/// input concatenates its noisy coordinate, a sinusoidal time embedding, its
/// learned residue-type embedding, the mean embedding of the whole sequence
/// and a sinusoidal encoding of its chain position. The output is added to
/// `t * x`, so the denoiser tends to the identity as t -> 1.
#[derive(Clone, Debug)]
pub struct FlowModel {
    arch: FlowArch,
    params: Params,
    embed: BlockId,
    mlp: Mlp,
}

struct Forward {
    out: Structure,
    caches: Vec<MlpCache>,
}

impl FlowModel {
    pub fn new(arch: FlowArch, rng: &mut Rng) -> Self {
        let mut params = Params::new();
        let embed = params.add("flow.embed", NUM_RESIDUE_TYPES, arch.embed_dim);
        params.fill_normal(embed, 0.3, rng);
        let mlp = Mlp::new(
            &mut params,
            "flow.mlp",
            &[arch.input_dim(), arch.hidden, arch.hidden, 3],
            rng,
        );
        FlowModel {
            arch,
            params,
            embed,
            mlp,
        }
    }

    pub fn arch(&self) -> &FlowArch {
        &self.arch
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn prior(&self, chain_length: usize) -> Result<HarmonicPriorSpec> {
        HarmonicPriorSpec::new(chain_length, self.arch.prior_stiffness)
    }

    fn features(&self, x: &Structure, t: f64, seq: &Sequence) -> Vec<Vec<f64>> {
        let e = self.arch.embed_dim;
        let table = self.params.block(self.embed);
        let n = seq.len();
        let mut ctx = vec![0.0; e];
        for r in seq.residues() {
            for (c, v) in ctx.iter_mut().zip(&table[r.index() * e..(r.index() + 1) * e]) {
                *c += v / n as f64;
            }
        }
        let mut time = Vec::new();
        nn::sinusoidal(t, &self.arch.time_freqs, &mut time);
        (0..n)
            .map(|i| {
                let mut f = Vec::with_capacity(self.arch.input_dim());
                f.extend_from_slice(&x[i]);
                f.extend_from_slice(&time);
                let a = seq.get(i).index();
                f.extend_from_slice(&table[a * e..(a + 1) * e]);
                f.extend_from_slice(&ctx);
                let u = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
                nn::sinusoidal(u, &self.arch.position_freqs, &mut f);
                f
            })
            .collect()
    }

    fn forward(&self, x: &Structure, t: f64, seq: &Sequence) -> Forward {
        let feats = self.features(x, t, seq);
        let mut caches = Vec::with_capacity(feats.len());
        let coords = feats
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let mut cache = MlpCache::default();
                let g = self.mlp.forward(&self.params, f, &mut cache);
                caches.push(cache);
                add(scale(x[i], t), [g[0], g[1], g[2]])
            })
            .collect();
        Forward {
            out: Structure::new(coords),
            caches,
        }
    }

    /// Predicted clean structure.
    pub fn denoise(&self, x: &Structure, t: TimePoint, seq: &Sequence) -> Result<Structure> {
        x.check_len(seq.len())?;
        Ok(self.forward(x, t.value(), seq).out)
    }

    /// `(x1_hat(x, t) - x) / (1 - t)`.
    pub fn vector_field(&self, x: &Structure, t: TimePoint, seq: &Sequence) -> Result<Structure> {
        let tv = t.before_end("model vector field")?;
        let x1 = self.denoise(x, t, seq)?;
        Ok(field_from_denoised(x, &x1, tv))
    }

    /// Backpropagate `d_out = dL/dx1_hat` into parameter gradients (added to
    /// `grad`) and return `dL/dx`.
    fn backward(&self, fw: &Forward, t: f64, seq: &Sequence, d_out: &Structure, grad: &mut [f64]) -> Structure {
        let e = self.arch.embed_dim;
        let n = seq.len();
        let emb_off = 3 + 2 * self.arch.time_freqs.len();
        let ctx_off = emb_off + e;
        let table_off = self.params.block_info(self.embed).offset;
        let mut d_in = vec![0.0; self.arch.input_dim()];
        let mut d_ctx = vec![0.0; e];
        let mut dx = Vec::with_capacity(n);
        for i in 0..n {
            let d = d_out[i];
            self.mlp
                .backward(&self.params, &fw.caches[i], &d, grad, Some(&mut d_in));
            dx.push([d[0] * t + d_in[0], d[1] * t + d_in[1], d[2] * t + d_in[2]]);
            let a = seq.get(i).index();
            for k in 0..e {
                grad[table_off + a * e + k] += d_in[emb_off + k];
                d_ctx[k] += d_in[ctx_off + k];
            }
        }
        for r in seq.residues() {
            for k in 0..e {
                grad[table_off + r.index() * e + k] += d_ctx[k] / n as f64;
            }
        }
        Structure::new(dx)
    }

    /// Mean squared error of `x1_hat(xt, t)` against `x1`, with its
    /// parameter gradient.
    pub fn loss_and_grad(&self, xt: &Structure, t: f64, seq: &Sequence, x1: &Structure) -> (f64, Vec<f64>) {
        let mut grad = self.params.zeros_like();
        let loss = self.accumulate_loss_grad(xt, t, seq, x1, &mut grad);
        (loss, grad)
    }

    fn accumulate_loss_grad(&self, xt: &Structure, t: f64, seq: &Sequence, x1: &Structure, grad: &mut [f64]) -> f64 {
        let fw = self.forward(xt, t, seq);
        let m = (3 * seq.len()) as f64;
        let mut loss = 0.0;
        let d_out = Structure::new(
            fw.out
                .coords()
                .iter()
                .zip(x1.coords())
                .map(|(p, q)| {
                    let r = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
                    loss += (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]) / m;
                    scale(r, 2.0 / m)
                })
                .collect(),
        );
        self.backward(&fw, t, seq, &d_out, grad);
        loss
    }

    pub fn loss(&self, xt: &Structure, t: f64, seq: &Sequence, x1: &Structure) -> f64 {
        let out = self.forward(xt, t, seq).out;
        let m = (3 * seq.len()) as f64;
        out.coords()
            .iter()
            .flatten()
            .zip(x1.coords().iter().flatten())
            .map(|(a, b)| (a - b) * (a - b) / m)
            .sum()
    }

    /// Vector-Jacobian product of the denoiser: `J^T cotangent` with
    /// `J = d x1_hat / d x`.
    pub fn denoiser_vjp(&self, x: &Structure, t: f64, seq: &Sequence, cotangent: &Structure) -> Structure {
        let fw = self.forward(x, t, seq);
        let mut scratch = self.params.zeros_like();
        self.backward(&fw, t, seq, cotangent, &mut scratch)
    }

    pub fn to_checkpoint(&self, extra: &[(&str, String)]) -> Checkpoint {
        let mut meta = BTreeMap::new();
        let list = |v: &[f64]| v.iter().map(|f| f.to_string()).collect::<Vec<_>>().join(",");
        meta.insert("embed_dim".into(), self.arch.embed_dim.to_string());
        meta.insert("hidden".into(), self.arch.hidden.to_string());
        meta.insert("time_freqs".into(), list(&self.arch.time_freqs));
        meta.insert("position_freqs".into(), list(&self.arch.position_freqs));
        meta.insert("prior_stiffness".into(), self.arch.prior_stiffness.to_string());
        for (k, v) in extra {
            meta.insert(k.to_string(), v.clone());
        }
        Checkpoint {
            kind: "flow".into(),
            meta,
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("flow")?;
        let list = |key: &str| -> Result<Vec<f64>> {
            ck.meta_str(key)?
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|_| Error::format("checkpoint", format!("bad {key}")))
                })
                .collect()
        };
        let arch = FlowArch {
            embed_dim: ck.meta_usize("embed_dim")?,
            hidden: ck.meta_usize("hidden")?,
            time_freqs: list("time_freqs")?,
            position_freqs: list("position_freqs")?,
            prior_stiffness: ck.meta_f64("prior_stiffness")?,
        };
        let mut model = FlowModel::new(arch, &mut rng::seeded(0));
        if !model.params.load_from(&ck.params) {
            return Err(Error::format("checkpoint", "flow parameter layout mismatch"));
        }
        Ok(model)
    }
}

pub(crate) fn field_from_denoised(x: &Structure, x1_hat: &Structure, t: f64) -> Structure {
    x1_hat.axpy(-1.0, x).scaled(1.0 / (1.0 - t))
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate decays linearly to `learning_rate * final_lr_fraction`.
    pub final_lr_fraction: f64,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        FlowTrainConfig {
            epochs: 40,
            batch_size: 32,
            learning_rate: 2e-3,
            final_lr_fraction: 0.05,
        }
    }
}

/// Regress `x1_hat(xt, t)` onto `x1` with t ~ U(0,1), x0 ~ prior. Returns
/// the per-epoch mean training loss.
pub fn train_flow(
    model: &mut FlowModel,
    data: &[(Sequence, Structure)],
    cfg: &FlowTrainConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Empty("flow training set"));
    }
    for (s, x) in data {
        x.check_len(s.len())?;
    }
    let mut opt = Adam::new(
        model.params.len(),
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size.max(1));
    let total_steps = (cfg.epochs * steps_per_epoch).max(1);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut grad = model.params.zeros_like();
            let mut batch_loss = 0.0;
            for &k in batch {
                let (seq, x1) = &data[k];
                let t: f64 = rng.random();
                let x0 = harmonic_prior_sample(&model.prior(seq.len())?, rng);
                let xt = interpolate(&x0, x1, TimePoint(t))?;
                batch_loss += model.accumulate_loss_grad(&xt, t, seq, x1, &mut grad);
            }
            let inv = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            if !batch_loss.is_finite() || !nn::all_finite(&grad) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    loss: batch_loss,
                });
            }
            let frac = step as f64 / total_steps as f64;
            opt.set_learning_rate(cfg.learning_rate * (1.0 - (1.0 - cfg.final_lr_fraction) * frac));
            opt.step(model.params.data_mut(), &grad);
            step += 1;
            epoch_loss += batch_loss;
        }
        curve.push(epoch_loss / data.len() as f64);
    }
    Ok(curve)
}

/// How schedule levels map to flow time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleSemantics {
    /// Levels are noise levels s; flow time is t = 1 - s.
    #[default]
    NoiseLevel,
    /// Levels are flow times listed from the end; t runs over them reversed.
    FlowTime,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    levels: Vec<f64>,
    semantics: ScheduleSemantics,
}

impl Schedule {
    pub fn new(levels: Vec<f64>, semantics: ScheduleSemantics) -> Result<Self> {
        if levels.len() < 2 {
            return Err(Error::InvalidSchedule("needs at least two levels".into()));
        }
        if levels.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::InvalidSchedule(format!("levels outside [0,1]: {levels:?}")));
        }
        if levels.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidSchedule(format!(
                "levels must strictly decrease: {levels:?}"
            )));
        }
        if *levels.last().expect("non-empty") != 0.0 {
            return Err(Error::InvalidSchedule("last level must be 0.0".into()));
        }
        if semantics == ScheduleSemantics::NoiseLevel && levels[0] != 1.0 {
            // The sampler starts from the prior, i.e. noise level 1.
            return Err(Error::InvalidSchedule("noise-level schedules must start at 1.0".into()));
        }
        Ok(Schedule { levels, semantics })
    }

    /// `[1.0, 0.6, 0.3, 0.0]`, three steps.
    pub fn default_three_step() -> Self {
        Schedule::new(vec![1.0, 0.6, 0.3, 0.0], ScheduleSemantics::NoiseLevel).expect("valid")
    }

    /// `steps` equal noise-level decrements from 1 to 0.
    pub fn uniform(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidSchedule("needs at least one step".into()));
        }
        let levels = (0..=steps).map(|k| 1.0 - k as f64 / steps as f64).collect::<Vec<_>>();
        let mut levels = levels;
        *levels.last_mut().expect("non-empty") = 0.0;
        Schedule::new(levels, ScheduleSemantics::NoiseLevel)
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn semantics(&self) -> ScheduleSemantics {
        self.semantics
    }

    pub fn steps(&self) -> usize {
        self.levels.len() - 1
    }

    /// Ascending flow times, ending at 1.
    pub fn times(&self) -> Vec<f64> {
        match self.semantics {
            ScheduleSemantics::NoiseLevel => self.levels.iter().map(|s| 1.0 - s).collect(),
            ScheduleSemantics::FlowTime => {
                let mut t: Vec<f64> = self.levels.iter().rev().copied().collect();
                // Listed from the end: the largest level is where integration stops.
                let top = t.last().copied().unwrap_or(1.0);
                t.iter_mut().for_each(|v| *v /= top);
                t
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OdeSample {
    pub structure: Structure,
    /// `(t, x_t)` at every schedule knot, starting with the prior draw.
    pub trajectory: Vec<(f64, Structure)>,
}

impl OdeSample {
    pub fn steps(&self) -> usize {
        self.trajectory.len() - 1
    }
}

/// Field evaluated by the sampler; `None` uses the model's own field.
pub type FieldFn<'a> = dyn Fn(&Structure, TimePoint) -> Result<Structure> + 'a;

/// Euler integration from a prior draw at t = 0 through the schedule knots.
pub fn sample_ode(
    model: &FlowModel,
    seq: &Sequence,
    schedule: &Schedule,
    rng: &mut Rng,
    field_override: Option<&FieldFn<'_>>,
) -> Result<OdeSample> {
    let x0 = harmonic_prior_sample(&model.prior(seq.len())?, rng);
    integrate(x0, schedule, |x, t| match field_override {
        Some(f) => f(x, t),
        None => model.vector_field(x, t, seq),
    })
}

pub(crate) fn integrate(
    x0: Structure,
    schedule: &Schedule,
    field: impl Fn(&Structure, TimePoint) -> Result<Structure>,
) -> Result<OdeSample> {
    let times = schedule.times();
    let mut x = x0;
    let mut trajectory = vec![(times[0], x.clone())];
    for (step, w) in times.windows(2).enumerate() {
        let v = field(&x, TimePoint::new(w[0])?)?;
        x = x.axpy(w[1] - w[0], &v);
        if !x.is_finite() {
            return Err(Error::NonFiniteTrajectory { step });
        }
        trajectory.push((w[1], x.clone()));
    }
    Ok(OdeSample {
        structure: x,
        trajectory,
    })
}

/// Mean squared bond length, used for prior diagnostics.
pub fn mean_squared_bond(s: &Structure) -> f64 {
    let n = s.len();
    (0..n - 1)
        .map(|i| {
            let b = crate::structure::sub(s[i + 1], s[i]);
            crate::structure::dot(b, b)
        })
        .sum::<f64>()
        / (n - 1) as f64
}

/// Random initial state helper for tests and benches.
pub fn random_structure(n: usize, spread: f64, rng: &mut Rng) -> Structure {
    Structure::new(
        (0..n)
            .map(|_| {
                [
                    rng.random_range(-spread..spread),
                    rng.random_range(-spread..spread),
                    rng.random_range(-spread..spread),
                ]
            })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testing::{central_diff, rel_err};
    use crate::rng::seeded;

    fn tp(t: f64) -> TimePoint {
        TimePoint::new(t).unwrap()
    }

    fn seq(s: &str) -> Sequence {
        s.parse().unwrap()
    }

    #[test]
    fn prior_is_centred_and_scales_with_stiffness() {
        let mut rng = seeded(1);
        let spec = HarmonicPriorSpec::new(20, 3.0).unwrap();
        for _ in 0..20 {
            let s = harmonic_prior_sample(&spec, &mut rng);
            assert!(s.centroid().iter().all(|c| c.abs() < 1e-12));
        }
        let stiff = HarmonicPriorSpec::new(20, 1e6).unwrap();
        let s = harmonic_prior_sample(&stiff, &mut rng);
        let mean_len = (0..19).map(|i| s.distance(i, i + 1)).sum::<f64>() / 19.0;
        assert!(mean_len < 0.01);
        assert!(HarmonicPriorSpec::new(1, 1.0).is_err());
        assert!(HarmonicPriorSpec::new(4, 0.0).is_err());
    }

    #[test]
    fn prior_bond_second_moment_matches_closed_form() {
        // E|b|^2 = 3 / k; standard error from the per-sample estimator spread.
        let mut rng = seeded(2);
        let spec = HarmonicPriorSpec::new(12, 2.5).unwrap();
        let vals: Vec<f64> = (0..10_000)
            .map(|_| mean_squared_bond(&harmonic_prior_sample(&spec, &mut rng)))
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
        let se = (var / vals.len() as f64).sqrt();
        assert!((mean - 3.0 / 2.5).abs() < 3.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn interpolation_identities() {
        let mut rng = seeded(3);
        let x0 = random_structure(5, 2.0, &mut rng);
        let x1 = random_structure(5, 2.0, &mut rng);
        assert_eq!(interpolate(&x0, &x1, tp(0.0)).unwrap(), x0);
        assert_eq!(interpolate(&x0, &x1, tp(1.0)).unwrap(), x1);
        let a = Structure::new(vec![[0.0; 3]]);
        let b = Structure::new(vec![[2.0; 3]]);
        assert_eq!(interpolate(&a, &b, tp(0.5)).unwrap()[0], [1.0; 3]);
        let xt = interpolate(&x0, &x1, tp(0.3)).unwrap();
        let back = xt.axpy(-0.3, &x1).scaled(1.0 / 0.7);
        assert!(back.max_abs_diff(&x0) < 1e-12);
        assert!(interpolate(&x0, &random_structure(4, 1.0, &mut rng), tp(0.5)).is_err());
    }

    #[test]
    fn conditional_field_cases() {
        let x = Structure::new(vec![[1.0; 3]]);
        let x1 = Structure::new(vec![[2.0; 3]]);
        assert_eq!(conditional_vector_field(&x, &x1, tp(0.5)).unwrap()[0], [2.0; 3]);
        assert_eq!(conditional_vector_field(&x1, &x1, tp(0.2)).unwrap()[0], [0.0; 3]);
        assert!(matches!(
            conditional_vector_field(&x, &x1, tp(1.0)),
            Err(Error::InvalidTime { .. })
        ));
        assert!(TimePoint::new(1.5).is_err());
    }

    #[test]
    fn schedules() {
        let s = Schedule::default_three_step();
        assert_eq!(s.steps(), 3);
        let t = s.times();
        assert_eq!(t.len(), 4);
        for (a, b) in t.iter().zip([0.0, 0.4, 0.7, 1.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        let ft = Schedule::new(vec![1.0, 0.6, 0.3, 0.0], ScheduleSemantics::FlowTime).unwrap();
        assert_eq!(ft.times(), vec![0.0, 0.3, 0.6, 1.0]);
        assert!(Schedule::new(vec![1.0, 0.5, 0.6, 0.0], ScheduleSemantics::NoiseLevel).is_err());
        assert!(Schedule::new(vec![1.0, 0.5], ScheduleSemantics::NoiseLevel).is_err());
        assert!(Schedule::new(vec![1.0], ScheduleSemantics::NoiseLevel).is_err());
        assert_eq!(Schedule::uniform(4).unwrap().levels(), &[1.0, 0.75, 0.5, 0.25, 0.0]);
    }

    fn small_model(seed: u64) -> FlowModel {
        let arch = FlowArch {
            hidden: 12,
            ..FlowArch::default()
        };
        let mut m = FlowModel::new(arch, &mut seeded(seed));
        // Non-zero biases so every parameter path is exercised.
        let b = m.params.find("flow.mlp.l2.b").unwrap();
        m.params.fill_normal(b, 0.5, &mut seeded(seed + 1));
        m
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let model = small_model(4);
        let mut rng = seeded(5);
        let s = seq("ACDWYK");
        let xt = random_structure(6, 1.5, &mut rng);
        let x1 = random_structure(6, 1.5, &mut rng);
        let t = 0.37;
        let (_, g) = model.loss_and_grad(&xt, t, &s, &x1);
        for _ in 0..20 {
            let i = rng.random_range(0..model.params.len());
            let mut f = |v: f64| {
                let mut m = model.clone();
                m.params.data_mut()[i] = v;
                m.loss(&xt, t, &s, &x1)
            };
            let n = central_diff(&mut f, model.params.data()[i], 1e-5);
            assert!(rel_err(g[i], n) < 1e-4, "param {i}: {} vs {n}", g[i]);
        }
    }

    #[test]
    fn denoiser_vjp_matches_finite_differences() {
        let model = small_model(6);
        let mut rng = seeded(7);
        let s = seq("GGSWY");
        let x = random_structure(5, 1.0, &mut rng);
        let cot = random_structure(5, 1.0, &mut rng);
        let t = 0.6;
        let vjp = model.denoiser_vjp(&x, t, &s, &cot);
        let objective = |x: &Structure| -> f64 {
            let y = model.denoise(x, tp(t), &s).unwrap();
            y.coords()
                .iter()
                .flatten()
                .zip(cot.coords().iter().flatten())
                .map(|(a, b)| a * b)
                .sum()
        };
        for i in 0..5 {
            for k in 0..3 {
                let mut f = |v: f64| {
                    let mut y = x.clone();
                    y[i][k] = v;
                    objective(&y)
                };
                let n = central_diff(&mut f, x[i][k], 1e-4);
                assert!(rel_err(vjp[i][k], n) < 1e-4);
            }
        }
    }

    #[test]
    fn identity_denoiser_gives_zero_field() {
        let mut model = small_model(8);
        // Zero the MLP output layer: x1_hat = t * x, so at t = 0 with x = 0 ...
        let (w, b) = model.mlp.last_layer();
        model.params.block_mut(w).fill(0.0);
        model.params.block_mut(b).fill(0.0);
        // ... and at any t the residual is (t - 1) x; pick x = 0 so x1_hat = x.
        let x = Structure::zeros(4);
        let v = model.vector_field(&x, tp(0.3), &seq("ACDE")).unwrap();
        assert!(v.coords().iter().flatten().all(|c| *c == 0.0));
        assert!(model.vector_field(&x, tp(1.0), &seq("ACDE")).is_err());
    }

    #[test]
    fn one_step_schedule_lands_on_denoiser_output() {
        let model = small_model(9);
        let s = seq("ACDEFG");
        let sched = Schedule::new(vec![1.0, 0.0], ScheduleSemantics::NoiseLevel).unwrap();
        let out = sample_ode(&model, &s, &sched, &mut seeded(10), None).unwrap();
        let x0 = &out.trajectory[0].1;
        let expect = model.denoise(x0, tp(0.0), &s).unwrap();
        assert!(out.structure.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn default_schedule_takes_three_steps_deterministically() {
        let model = small_model(11);
        let s = seq("ACDEFG");
        let a = sample_ode(&model, &s, &Schedule::default_three_step(), &mut seeded(12), None).unwrap();
        let b = sample_ode(&model, &s, &Schedule::default_three_step(), &mut seeded(12), None).unwrap();
        assert_eq!(a.steps(), 3);
        assert_eq!(a, b);
    }

    #[test]
    fn conditional_override_lands_on_target() {
        let model = small_model(13);
        let s = seq("ACDEFGHI");
        let target = random_structure(8, 3.0, &mut seeded(14));
        let field = |x: &Structure, t: TimePoint| conditional_vector_field(x, &target, t);
        for sched in [
            Schedule::default_three_step(),
            Schedule::uniform(1).unwrap(),
            Schedule::uniform(7).unwrap(),
        ] {
            let out = sample_ode(&model, &s, &sched, &mut seeded(15), Some(&field)).unwrap();
            assert!(out.structure.max_abs_diff(&target) < 1e-10);
        }
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let mut model = small_model(16);
        let before = model.params.clone();
        let data = vec![(seq("ACDE"), random_structure(4, 1.0, &mut seeded(17)))];
        let cfg = FlowTrainConfig {
            epochs: 0,
            ..FlowTrainConfig::default()
        };
        let curve = train_flow(&mut model, &data, &cfg, &mut seeded(18)).unwrap();
        assert!(curve.is_empty());
        assert_eq!(model.params, before);
        assert!(train_flow(&mut model, &[], &cfg, &mut seeded(18)).is_err());
    }

    #[test]
    fn overfits_a_single_datapoint() {
        let arch = FlowArch {
            hidden: 32,
            ..FlowArch::default()
        };
        let mut model = FlowModel::new(arch, &mut seeded(19));
        let s = seq("ACDEFGHI");
        let x1 = crate::world::ToyWorld::default().mean_structure(&s).centered();
        let data = vec![(s.clone(), x1.clone()); 32];
        let cfg = FlowTrainConfig {
            epochs: 400,
            batch_size: 8,
            learning_rate: 3e-3,
            final_lr_fraction: 0.02,
        };
        let curve = train_flow(&mut model, &data, &cfg, &mut seeded(20)).unwrap();
        let last = *curve.last().unwrap();
        assert!(last < 1e-3, "final loss {last}");

        // A denoiser that reproduces x1 reproduces the conditional field.
        let mut rng = seeded(21);
        let x0 = harmonic_prior_sample(&model.prior(8).unwrap(), &mut rng);
        let xt = interpolate(&x0, &x1, tp(0.5)).unwrap();
        let v = model.vector_field(&xt, tp(0.5), &s).unwrap();
        let u = conditional_vector_field(&xt, &x1, tp(0.5)).unwrap();
        let rms = (v
            .coords()
            .iter()
            .flatten()
            .zip(u.coords().iter().flatten())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / 24.0)
            .sqrt();
        // |v - u| = |x1_hat - x1| / (1 - t)
        assert!(rms < 2.0 * 0.05, "field rms error {rms}");
    }

    #[test]
    fn checkpoint_roundtrip() {
        let model = small_model(22);
        let ck = model.to_checkpoint(&[("seed", "22".into())]);
        let back =
            FlowModel::from_checkpoint(&crate::checkpoint::decode(&crate::checkpoint::encode(&ck)).unwrap()).unwrap();
        assert_eq!(back.params, model.params);
        assert_eq!(back.arch, model.arch);
    }
}
