//! Predictor-guided sampling and the relaxation corrector.
//!
//! The guided field pushes the flow toward structures the structure
//! predictor scores as tighter binders:
//! `v_tilde = v_hat - gamma * (1 - t) / t * dF/dx1_hat`, with the gradient
//! taken at the denoised structure and restricted to CDR rows.

use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::{field_from_denoised, harmonic_prior_sample, integrate, FlowModel, Schedule, TimePoint};
use crate::predictors::StructPredictor;
use crate::rng::Rng;
use crate::structure::{dot, scale, sub, Structure, Vec3};
use crate::tables::format_f64;
use crate::world::ComplexLayout;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub gamma: f64,
    /// Guidance is applied only at knots with `t >= t_min_guidance`.
    pub t_min_guidance: f64,
    pub cdr_only: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            gamma: 5.0,
            t_min_guidance: 0.4,
            cdr_only: true,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidConfig(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.t_min_guidance) {
            return Err(Error::InvalidConfig(format!(
                "t_min_guidance must lie in [0,1], got {}",
                self.t_min_guidance
            )));
        }
        Ok(())
    }

    pub fn unguided() -> Self {
        GuidanceConfig {
            gamma: 0.0,
            ..GuidanceConfig::default()
        }
    }

    pub fn is_active(&self, t: f64) -> bool {
        self.gamma != 0.0 && t >= self.t_min_guidance
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelaxConfig {
    pub max_iters: usize,
    pub step_size: f64,
    pub bond_weight: f64,
    pub clash_weight: f64,
    pub clash_radius: f64,
}

impl Default for RelaxConfig {
    fn default() -> Self {
        RelaxConfig {
            max_iters: 200,
            step_size: 0.1,
            bond_weight: 1.0,
            clash_weight: 1.0,
            clash_radius: 0.05,
        }
    }
}

impl RelaxConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        if self.max_iters == 0
            || !ok(self.step_size)
            || !ok(self.bond_weight)
            || !ok(self.clash_weight)
            || !ok(self.clash_radius)
        {
            return Err(Error::InvalidConfig(format!(
                "relax parameters must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Bond-length and clash energy of a chain.
pub fn physical_energy(x: &Structure, cfg: &RelaxConfig) -> f64 {
    physical_energy_impl(x, cfg, None)
}

/// Energy and its gradient.
pub fn physical_energy_grad(x: &Structure, cfg: &RelaxConfig) -> (f64, Structure) {
    let mut g = Structure::zeros(x.len());
    let e = physical_energy_impl(x, cfg, Some(&mut g));
    (e, g)
}

fn physical_energy_impl(x: &Structure, cfg: &RelaxConfig, mut grad: Option<&mut Structure>) -> f64 {
    let n = x.len();
    let mut e = 0.0;
    for i in 0..n.saturating_sub(1) {
        let d = sub(x[i + 1], x[i]);
        let r = dot(d, d).sqrt();
        let dev = r - 1.0;
        e += cfg.bond_weight * dev * dev;
        if let Some(g) = grad.as_deref_mut() {
            if r > 0.0 {
                let c = scale(d, 2.0 * cfg.bond_weight * dev / r);
                add_to(g, i + 1, c);
                add_to(g, i, scale(c, -1.0));
            }
        }
    }
    let rc = cfg.clash_radius;
    for i in 0..n {
        for j in i + 2..n {
            let d = sub(x[j], x[i]);
            let r2 = dot(d, d);
            if r2 >= rc * rc {
                continue;
            }
            let r = r2.sqrt();
            let gap = rc - r;
            e += cfg.clash_weight * gap * gap;
            if let Some(g) = grad.as_deref_mut() {
                // Coincident points: separate along x, lower index first.
                let u = if r > 1e-12 { scale(d, 1.0 / r) } else { [1.0, 0.0, 0.0] };
                let c = scale(u, -2.0 * cfg.clash_weight * gap);
                add_to(g, j, c);
                add_to(g, i, scale(c, -1.0));
            }
        }
    }
    e
}

fn add_to(g: &mut Structure, i: usize, v: Vec3) {
    for a in 0..3 {
        g[i][a] += v[a];
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelaxResult {
    pub structure: Structure,
    /// Energy before the first step and after every accepted step.
    pub energies: Vec<f64>,
}

/// Gradient descent with backtracking on the physical energy. Never
/// increases the energy.
pub fn corrector_relax(x: &Structure, cfg: &RelaxConfig) -> Result<RelaxResult> {
    cfg.validate()?;
    let mut cur = x.clone();
    let (mut e, mut g) = physical_energy_grad(&cur, cfg);
    let mut energies = vec![e];
    for _ in 0..cfg.max_iters {
        if e == 0.0 || g.flat().iter().all(|v| *v == 0.0) {
            break;
        }
        let mut step = cfg.step_size;
        let mut accepted = None;
        for _ in 0..40 {
            let trial = cur.axpy(-step, &g);
            let et = physical_energy(&trial, cfg);
            if et < e {
                accepted = Some((trial, et));
                break;
            }
            step *= 0.5;
        }
        let Some((next, en)) = accepted else { break };
        let decrease = e - en;
        cur = next;
        e = en;
        energies.push(e);
        if decrease < 1e-9 {
            break;
        }
        g = physical_energy_grad(&cur, cfg).1;
    }
    Ok(RelaxResult {
        structure: cur,
        energies,
    })
}

/// Gradient of the structure predictor, zeroed outside CDR rows when
/// `cdr_only`.
pub fn masked_gradient(
    fb: &StructPredictor,
    x: &Structure,
    layout: &ComplexLayout,
    cdr_only: bool,
) -> Result<Structure> {
    let (_, mut g) = fb.grad_struct(x, layout)?;
    if cdr_only {
        for i in 0..g.len() {
            if !layout.is_cdr(i) {
                g[i] = [0.0; 3];
            }
        }
    }
    Ok(g)
}

/// `(1 - t) / t`, the weight linking the x1-gradient to the field.
pub fn guidance_coefficient(t: f64) -> f64 {
    (1.0 - t) / t
}

/// The guided field at `(x, t)`. Below the threshold, or with zero gamma,
/// this is exactly the model field.
pub fn guided_vector_field(
    model: &FlowModel,
    fb: &StructPredictor,
    x: &Structure,
    t: TimePoint,
    layout: &ComplexLayout,
    cfg: &GuidanceConfig,
) -> Result<Structure> {
    let tv = t.value();
    if tv <= 0.0 {
        return Err(Error::InvalidTime {
            t: tv,
            what: "guided field",
        });
    }
    let seq = layout.sequence();
    if !cfg.is_active(tv) {
        return model.vector_field(x, t, &seq);
    }
    if tv >= 1.0 {
        return Err(Error::InvalidTime {
            t: tv,
            what: "guided field",
        });
    }
    let x1 = model.denoise(x, t, &seq)?;
    let v = field_from_denoised(x, &x1, tv);
    let g = masked_gradient(fb, &x1, layout, cfg.cdr_only)?;
    if !g.is_finite() {
        return Err(Error::NonFiniteGradient { t: tv });
    }
    Ok(v.axpy(-cfg.gamma * guidance_coefficient(tv), &g))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub t: f64,
    pub predicted: f64,
    pub physical: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidedSample {
    pub structure: Structure,
    /// Per knot, including the prior draw; the relaxed endpoint is last when
    /// relaxation ran.
    pub trajectory: Vec<TrajectoryPoint>,
}

/// Guided ODE sample of the complex, relaxed at the end when `relax` is given.
pub fn guided_sample(
    model: &FlowModel,
    fb: &StructPredictor,
    layout: &ComplexLayout,
    schedule: &Schedule,
    g_cfg: &GuidanceConfig,
    relax: Option<&RelaxConfig>,
    rng: &mut Rng,
) -> Result<GuidedSample> {
    g_cfg.validate()?;
    let seq = layout.sequence();
    let x0 = harmonic_prior_sample(&model.prior(seq.len())?, rng);
    let ode = integrate(x0, schedule, |x, t| {
        if t.value() == 0.0 {
            model.vector_field(x, t, &seq)
        } else {
            guided_vector_field(model, fb, x, t, layout, g_cfg)
        }
    })?;
    let phys_cfg = relax.cloned().unwrap_or_default();
    let mut trajectory = Vec::with_capacity(ode.trajectory.len() + 1);
    for (step, (t, x)) in ode.trajectory.iter().enumerate() {
        trajectory.push(TrajectoryPoint {
            step,
            t: *t,
            predicted: fb.predict(x, layout)?,
            physical: physical_energy(x, &phys_cfg),
        });
    }
    let mut structure = ode.structure;
    if let Some(r) = relax {
        let res = corrector_relax(&structure, r)?;
        structure = res.structure;
        trajectory.push(TrajectoryPoint {
            step: trajectory.len(),
            t: 1.0,
            predicted: fb.predict(&structure, layout)?,
            physical: *res.energies.last().expect("non-empty"),
        });
    }
    Ok(GuidedSample { structure, trajectory })
}

/// Plain gradient descent of the structure predictor on fixed coordinates.
pub fn descend_predictor(
    fb: &StructPredictor,
    x: &Structure,
    layout: &ComplexLayout,
    step: f64,
    iters: usize,
    cdr_only: bool,
) -> Result<Structure> {
    let mut cur = x.clone();
    for _ in 0..iters {
        let g = masked_gradient(fb, &cur, layout, cdr_only)?;
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient { t: 1.0 });
        }
        cur = cur.axpy(-step, &g);
    }
    Ok(cur)
}

/// Writes `step,t,mean_predicted,mean_physical`, averaging over samples that
/// share a knot index.
pub fn write_trajectory(path: &Path, samples: &[GuidedSample]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "t", "mean_predicted", "mean_physical"])?;
    let steps = samples.iter().map(|s| s.trajectory.len()).max().unwrap_or(0);
    for k in 0..steps {
        let pts: Vec<&TrajectoryPoint> = samples.iter().filter_map(|s| s.trajectory.get(k)).collect();
        let n = pts.len() as f64;
        w.write_record([
            k.to_string(),
            format_f64(pts[0].t),
            format_f64(pts.iter().map(|p| p.predicted).sum::<f64>() / n),
            format_f64(pts.iter().map(|p| p.physical).sum::<f64>() / n),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{random_structure, sample_ode, FlowArch};
    use crate::nn::testing::{central_diff, rel_err};
    use crate::predictors::{Predictor, PredictorArch};
    use crate::residue::Sequence;
    use crate::rng::seeded;
    use crate::world::make_complex;

    fn small_complex() -> ComplexLayout {
        let ab: Sequence = "ACDEFGHIKL".parse().unwrap();
        let ag: Sequence = "MNPQRSTV".parse().unwrap();
        make_complex(&ab, &ag, 1, &[6, 7, 8]).unwrap().0
    }

    fn models() -> (FlowModel, StructPredictor) {
        let m = FlowModel::new(FlowArch::default(), &mut seeded(1));
        let mut fb = StructPredictor::new(PredictorArch::default(), &mut seeded(2));
        let last = fb.output_layer().0;
        fb.params_mut().fill_normal(last, 0.3, &mut seeded(3));
        (m, fb)
    }

    #[test]
    fn decomposition_and_mask() {
        let layout = small_complex();
        let (m, fb) = models();
        let cfg = GuidanceConfig::default();
        let seq = layout.sequence();
        let x = random_structure(layout.global_len(), 3.0, &mut seeded(4));
        for t in [0.5, 0.9] {
            let tp = TimePoint::new(t).unwrap();
            let g = guided_vector_field(&m, &fb, &x, tp, &layout, &cfg).unwrap();
            let v = m.vector_field(&x, tp, &seq).unwrap();
            let x1 = m.denoise(&x, tp, &seq).unwrap();
            let (_, full) = fb.grad_struct(&x1, &layout).unwrap();
            let c = cfg.gamma * (1.0 - t) / t;
            for i in 0..x.len() {
                for a in 0..3 {
                    let d = g[i][a] - v[i][a];
                    if layout.is_cdr(i) {
                        assert!((d + c * full[i][a]).abs() < 1e-10);
                    } else {
                        assert_eq!(d, 0.0);
                    }
                }
            }
        }
        // t = 0.5, gamma 5: the term is -5 G.
        assert_eq!(5.0 * guidance_coefficient(0.5), 5.0);
        assert_eq!(guidance_coefficient(0.25), 3.0);
    }

    #[test]
    fn inactive_guidance_is_the_model_field() {
        let layout = small_complex();
        let (m, fb) = models();
        let seq = layout.sequence();
        let x = random_structure(layout.global_len(), 3.0, &mut seeded(5));
        let tp = TimePoint::new(0.7).unwrap();
        let v = m.vector_field(&x, tp, &seq).unwrap();
        let zero = guided_vector_field(&m, &fb, &x, tp, &layout, &GuidanceConfig::unguided()).unwrap();
        assert_eq!(zero, v);
        let late = GuidanceConfig {
            t_min_guidance: 0.8,
            ..GuidanceConfig::default()
        };
        assert_eq!(guided_vector_field(&m, &fb, &x, tp, &layout, &late).unwrap(), v);
        assert!(guided_vector_field(
            &m,
            &fb,
            &x,
            TimePoint::new(0.0).unwrap(),
            &layout,
            &GuidanceConfig::default()
        )
        .is_err());
    }

    #[test]
    fn zero_gamma_sample_matches_unguided_bitwise() {
        let layout = small_complex();
        let (m, fb) = models();
        let sched = Schedule::default_three_step();
        let a = guided_sample(
            &m,
            &fb,
            &layout,
            &sched,
            &GuidanceConfig::unguided(),
            None,
            &mut seeded(9),
        )
        .unwrap();
        let b = sample_ode(&m, &layout.sequence(), &sched, &mut seeded(9), None).unwrap();
        assert_eq!(a.structure, b.structure);
        assert_eq!(a.trajectory.len(), 4);
    }

    #[test]
    fn default_schedule_guides_last_two_steps() {
        let cfg = GuidanceConfig::default();
        let active: Vec<bool> = Schedule::default_three_step().times()[..3]
            .iter()
            .map(|&t| cfg.is_active(t))
            .collect();
        assert_eq!(active, vec![false, true, true]);
    }

    #[test]
    fn energy_gradient_matches_finite_differences() {
        let cfg = RelaxConfig {
            clash_radius: 1.5,
            ..RelaxConfig::default()
        };
        let x = random_structure(12, 1.5, &mut seeded(11));
        let (_, g) = physical_energy_grad(&x, &cfg);
        let flat = x.flat();
        for idx in [0, 5, 13, 20, 35] {
            let mut f = |v: f64| {
                let mut p = flat.clone();
                p[idx] = v;
                physical_energy(&Structure::from_flat(&p), &cfg)
            };
            let num = central_diff(&mut f, flat[idx], 1e-6);
            assert!(rel_err(g.flat()[idx], num) < 1e-6, "{idx}");
        }
    }

    #[test]
    fn relaxed_chain_is_fixed_point() {
        let x = Structure::new((0..6).map(|i| [i as f64, 0.0, 0.0]).collect());
        let cfg = RelaxConfig::default();
        assert_eq!(physical_energy(&x, &cfg), 0.0);
        let r = corrector_relax(&x, &cfg).unwrap();
        assert!(r.structure.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn overlapping_residues_are_pushed_apart() {
        // Residues 0 and 2 coincide; the bond to 1 is already unit length.
        let x = Structure::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0; 3]]);
        let cfg = RelaxConfig::default();
        let r = corrector_relax(&x, &cfg).unwrap();
        assert!(r.structure.distance(0, 2) >= 0.5 * cfg.clash_radius);
        assert!(r.energies.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn relax_energy_never_increases() {
        let cfg = RelaxConfig::default();
        for s in 0..5 {
            let x = random_structure(20, 2.0, &mut seeded(20 + s));
            let r = corrector_relax(&x, &cfg).unwrap();
            assert!(r.energies.windows(2).all(|w| w[1] <= w[0]));
            assert!(r.energies.last().unwrap() < &r.energies[0]);
        }
    }

    #[test]
    fn descent_lowers_prediction() {
        let layout = small_complex();
        let (_, fb) = models();
        let x = random_structure(layout.global_len(), 3.0, &mut seeded(6));
        let y = descend_predictor(&fb, &x, &layout, 0.01, 20, true).unwrap();
        assert!(fb.predict(&y, &layout).unwrap() < fb.predict(&x, &layout).unwrap());
    }
}
