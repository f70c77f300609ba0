//! The synthetic ground truth: sequence-determined chain geometry, a
//! fluctuating conformational ensemble, an exact contact-energy oracle and a
//! noisy energy generator that stands in for docking plus scoring.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::residue::{ResidueType, Sequence, NUM_RESIDUE_TYPES};
use crate::rng::Rng;
use crate::structure::{add, cross, dot, norm, scale, sub, Structure, Vec3};
use crate::tables::Tables;

pub const LINKER_UNIT: &str = "GGGGS";
pub const DEFAULT_CONTACT_RANGE: f64 = 2.0;
/// Sliding window of residue identities that sets each turning angle.
pub const ANGLE_WINDOW: usize = 3;
const ENSEMBLE_FILTER_WIDTH: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Antibody,
    Linker,
    Antigen,
}

/// Antibody, linker and antigen laid out as one chain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComplexLayout {
    antibody: Sequence,
    antigen: Sequence,
    linker_repeats: usize,
    cdr_positions: Vec<usize>,
}

impl ComplexLayout {
    pub fn antibody(&self) -> &Sequence {
        &self.antibody
    }

    pub fn antigen(&self) -> &Sequence {
        &self.antigen
    }

    pub fn linker_repeats(&self) -> usize {
        self.linker_repeats
    }

    pub fn linker_len(&self) -> usize {
        LINKER_UNIT.len() * self.linker_repeats
    }

    /// Sorted CDR indices into the antibody (equal to their global indices).
    pub fn cdr_positions(&self) -> &[usize] {
        &self.cdr_positions
    }

    pub fn global_len(&self) -> usize {
        self.antibody.len() + self.linker_len() + self.antigen.len()
    }

    pub fn antigen_offset(&self) -> usize {
        self.antibody.len() + self.linker_len()
    }

    pub fn antigen_range(&self) -> std::ops::Range<usize> {
        self.antigen_offset()..self.global_len()
    }

    pub fn global_index(&self, segment: Segment, local: usize) -> Option<usize> {
        let (len, offset) = match segment {
            Segment::Antibody => (self.antibody.len(), 0),
            Segment::Linker => (self.linker_len(), self.antibody.len()),
            Segment::Antigen => (self.antigen.len(), self.antigen_offset()),
        };
        (local < len).then_some(offset + local)
    }

    pub fn locate(&self, global: usize) -> Option<(Segment, usize)> {
        let ab = self.antibody.len();
        let ln = self.linker_len();
        if global < ab {
            Some((Segment::Antibody, global))
        } else if global < ab + ln {
            Some((Segment::Linker, global - ab))
        } else if global < self.global_len() {
            Some((Segment::Antigen, global - ab - ln))
        } else {
            None
        }
    }

    pub fn is_cdr(&self, global: usize) -> bool {
        self.cdr_positions.binary_search(&global).is_ok()
    }

    pub fn sequence(&self) -> Sequence {
        let linker = linker(self.linker_repeats);
        match linker {
            Some(l) => Sequence::concat(&[&self.antibody, &l, &self.antigen]),
            None => Sequence::concat(&[&self.antibody, &self.antigen]),
        }
    }

    /// Same complex with a different antibody of equal length.
    pub fn with_antibody(&self, antibody: Sequence) -> ComplexLayout {
        assert_eq!(antibody.len(), self.antibody.len());
        ComplexLayout {
            antibody,
            ..self.clone()
        }
    }
}

fn linker(repeats: usize) -> Option<Sequence> {
    (repeats > 0).then(|| LINKER_UNIT.repeat(repeats).parse().expect("valid linker"))
}

/// Join antibody and antigen through `linker_repeats` GGGGS units.
pub fn make_complex(
    antibody: &Sequence,
    antigen: &Sequence,
    linker_repeats: usize,
    cdr_positions: &[usize],
) -> Result<(ComplexLayout, Sequence)> {
    let mut cdr = cdr_positions.to_vec();
    cdr.sort_unstable();
    cdr.dedup();
    if let Some(&bad) = cdr.iter().find(|&&p| p >= antibody.len()) {
        return Err(Error::CdrOutOfRange {
            index: bad,
            len: antibody.len(),
        });
    }
    let layout = ComplexLayout {
        antibody: antibody.clone(),
        antigen: antigen.clone(),
        linker_repeats,
        cdr_positions: cdr,
    };
    let seq = layout.sequence();
    Ok((layout, seq))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseConfig {
    pub gaussian_sigma: f64,
    pub outlier_rate: f64,
    /// Outlier half-width as a multiple of `gaussian_sigma`.
    pub outlier_factor: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            gaussian_sigma: 0.5,
            outlier_rate: 0.4,
            outlier_factor: 10.0,
        }
    }
}

impl NoiseConfig {
    pub fn noiseless() -> Self {
        NoiseConfig {
            gaussian_sigma: 0.0,
            outlier_rate: 0.0,
            outlier_factor: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gaussian_sigma >= 0.0) || !(0.0..=1.0).contains(&self.outlier_rate) {
            return Err(Error::InvalidConfig(format!(
                "noise needs gaussian_sigma >= 0 and outlier_rate in [0,1], got {:?}",
                self
            )));
        }
        Ok(())
    }

    pub fn outlier_magnitude(&self) -> f64 {
        self.outlier_factor * self.gaussian_sigma
    }
}

/// Error model for docked complex structures: smooth chain fluctuation plus
/// a rigid-body misplacement of the antigen.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DockingNoise {
    pub fluctuation: f64,
    /// Standard deviation of the antigen rotation angle, in degrees.
    pub rotation_deg: f64,
    /// Standard deviation of the antigen translation, per axis.
    pub translation: f64,
}

impl Default for DockingNoise {
    fn default() -> Self {
        DockingNoise {
            fluctuation: 0.5,
            rotation_deg: 40.0,
            translation: 1.0,
        }
    }
}

impl DockingNoise {
    pub fn exact() -> Self {
        DockingNoise {
            fluctuation: 0.0,
            rotation_deg: 0.0,
            translation: 0.0,
        }
    }

    pub fn is_exact(&self) -> bool {
        self.fluctuation == 0.0 && self.rotation_deg == 0.0 && self.translation == 0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyRecord {
    pub antigen_id: usize,
    pub antibody_id: usize,
    pub delta_g: f64,
    pub delta_g_noisy: f64,
    pub is_outlier: bool,
}

#[derive(Clone, Debug)]
pub struct ToyWorld {
    tables: Tables,
    contact_range: f64,
}

impl Default for ToyWorld {
    fn default() -> Self {
        ToyWorld::new(Tables::standard())
    }
}

impl ToyWorld {
    pub fn new(tables: Tables) -> Self {
        ToyWorld {
            tables,
            contact_range: DEFAULT_CONTACT_RANGE,
        }
    }

    pub fn with_contact_range(mut self, contact_range: f64) -> Self {
        self.contact_range = contact_range;
        self
    }

    pub fn tables(&self) -> &Tables {
        &self.tables
    }

    pub fn contact_range(&self) -> f64 {
        self.contact_range
    }

    /// Turning and torsion angle at interior vertex `i`: means over the
    /// residue window centred on `i`, truncated at the chain ends.
    pub fn vertex_angles(&self, seq: &Sequence, i: usize) -> (f64, f64) {
        let half = ANGLE_WINDOW / 2;
        let lo = i.saturating_sub(half);
        let hi = (i + half + 1).min(seq.len());
        let n = (hi - lo) as f64;
        let (mut b, mut t) = (0.0, 0.0);
        for r in &seq.residues()[lo..hi] {
            b += self.tables.bend[r.index()];
            t += self.tables.torsion[r.index()];
        }
        (b / n, t / n)
    }

    /// Deterministic unit-step chain for `seq`.
    ///
    /// Starts at the origin heading along +x with a moving frame (T, N, B).
    /// At every interior vertex the frame is first twisted about T by the
    /// torsion, then T is turned towards N by the bend angle. The first
    /// vertex bends within the xy plane.
    pub fn mean_structure(&self, seq: &Sequence) -> Structure {
        let n = seq.len();
        let mut coords = Vec::with_capacity(n);
        coords.push([0.0; 3]);
        let mut t: Vec3 = [1.0, 0.0, 0.0];
        let mut nv: Vec3 = [0.0, 1.0, 0.0];
        let mut b: Vec3 = [0.0, 0.0, 1.0];
        for i in 1..n {
            if i >= 2 {
                let (bend, torsion) = self.vertex_angles(seq, i - 1);
                // The first vertex only fixes the bend plane (xy).
                let torsion = if i == 2 { 0.0 } else { torsion };
                let (c, s) = (torsion.cos(), torsion.sin());
                let n2 = add(scale(nv, c), scale(b, s));
                let b2 = add(scale(nv, -s), scale(b, c));
                let (c, s) = (bend.cos(), bend.sin());
                let t2 = add(scale(t, c), scale(n2, s));
                let n3 = add(scale(t, -s), scale(n2, c));
                // Renormalise against drift on long chains.
                t = scale(t2, 1.0 / norm(t2));
                nv = scale(n3, 1.0 / norm(n3));
                b = scale(b2, 1.0 / norm(b2));
            }
            coords.push(add(coords[i - 1], t));
        }
        Structure::new(coords)
    }

    /// Mean structure plus `fluctuation_scale` times a 5-point moving average
    /// of i.i.d. standard normals along the chain, per coordinate.
    pub fn ensemble_sample(&self, seq: &Sequence, fluctuation_scale: f64, rng: &mut Rng) -> Structure {
        assert!(fluctuation_scale >= 0.0, "fluctuation scale must be non-negative");
        let mut s = self.mean_structure(seq);
        if fluctuation_scale == 0.0 {
            return s;
        }
        let n = s.len();
        let w = ENSEMBLE_FILTER_WIDTH;
        let raw: Vec<Vec3> = (0..n + w - 1)
            .map(|_| {
                [
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                ]
            })
            .collect();
        for i in 0..n {
            let mut acc = [0.0; 3];
            for z in &raw[i..i + w] {
                acc = add(acc, *z);
            }
            s[i] = add(s[i], scale(acc, fluctuation_scale / w as f64));
        }
        s
    }

    /// A docked-structure stand-in: an ensemble sample whose antigen segment
    /// is then rotated about its centroid and shifted.
    pub fn docked_structure(&self, layout: &ComplexLayout, noise: &DockingNoise, rng: &mut Rng) -> Structure {
        let mut s = self.ensemble_sample(&layout.sequence(), noise.fluctuation, rng);
        if noise.rotation_deg == 0.0 && noise.translation == 0.0 {
            return s;
        }
        let range = layout.antigen_range();
        let mut c = [0.0; 3];
        for i in range.clone() {
            c = add(c, s[i]);
        }
        c = scale(c, 1.0 / range.len() as f64);
        let axis: Vec3 = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let axis = scale(axis, 1.0 / norm(axis).max(1e-300));
        let z: f64 = StandardNormal.sample(rng);
        let angle = noise.rotation_deg.to_radians() * z;
        let shift: Vec3 = [
            noise.translation * Distribution::<f64>::sample(&StandardNormal, rng),
            noise.translation * Distribution::<f64>::sample(&StandardNormal, rng),
            noise.translation * Distribution::<f64>::sample(&StandardNormal, rng),
        ];
        let (cos, sin) = (angle.cos(), angle.sin());
        for i in range {
            // Rodrigues rotation of the offset from the centroid.
            let v = sub(s[i], c);
            let r = add(
                add(scale(v, cos), scale(cross(axis, v), sin)),
                scale(axis, dot(axis, v) * (1.0 - cos)),
            );
            s[i] = add(add(c, r), shift);
        }
        s
    }

    pub fn contact_kernel(&self, d: f64) -> f64 {
        (-d * d / (2.0 * self.contact_range * self.contact_range)).exp()
    }

    /// Contact energy of the CDR x antigen pairs evaluated on `structure`.
    pub fn binding_energy_on(&self, layout: &ComplexLayout, structure: &Structure) -> f64 {
        let ab = layout.antibody();
        let ag = layout.antigen();
        let off = layout.antigen_offset();
        let mut e = 0.0;
        for &p in layout.cdr_positions() {
            for q in 0..ag.len() {
                let d = structure.distance(p, off + q);
                e += self.tables.interaction(ab.get(p), ag.get(q)) * self.contact_kernel(d);
            }
        }
        e
    }

    /// Exact binding energy on the complex mean structure; lower is stronger.
    pub fn binding_energy(&self, layout: &ComplexLayout) -> f64 {
        let s = self.mean_structure(&layout.sequence());
        self.binding_energy_on(layout, &s)
    }

    pub fn noisy_binding_energy(
        &self,
        layout: &ComplexLayout,
        antigen_id: usize,
        antibody_id: usize,
        noise: &NoiseConfig,
        rng: &mut Rng,
    ) -> EnergyRecord {
        let delta_g = self.binding_energy(layout);
        let outlier = noise.outlier_rate > 0.0 && rng.random::<f64>() < noise.outlier_rate;
        let delta_g_noisy = if outlier {
            let m = noise.outlier_magnitude();
            if m > 0.0 {
                delta_g + rng.random_range(-m..=m)
            } else {
                delta_g
            }
        } else {
            let z: f64 = StandardNormal.sample(rng);
            delta_g + noise.gaussian_sigma * z
        };
        EnergyRecord {
            antigen_id,
            antibody_id,
            delta_g,
            delta_g_noisy,
            is_outlier: outlier,
        }
    }

    /// Draw from the natural-antibody Markov chain.
    pub fn sample_natural(&self, len: usize, rng: &mut Rng) -> Sequence {
        let mut out = Vec::with_capacity(len);
        let mut prev = sample_categorical(&self.tables.markov_initial, rng);
        out.push(prev);
        for _ in 1..len {
            prev = sample_categorical(&self.tables.markov_transition[prev.index()], rng);
            out.push(prev);
        }
        Sequence::new(out).expect("len >= 1")
    }

    /// Re-sample the residues at `positions` (ascending) from the chain's
    /// transition given the preceding residue.
    pub fn resample_natural(&self, base: &Sequence, positions: &[usize], rng: &mut Rng) -> Sequence {
        let mut r = base.residues().to_vec();
        for &p in positions {
            r[p] = if p == 0 {
                sample_categorical(&self.tables.markov_initial, rng)
            } else {
                sample_categorical(&self.tables.markov_transition[r[p - 1].index()], rng)
            };
        }
        Sequence::new(r).expect("non-empty")
    }

    /// Log-probability of each transition under the chain (first residue
    /// uses the start distribution). Probabilities are floored at `floor`;
    /// the flag reports whether the floor was hit.
    pub fn natural_log_probs(&self, seq: &Sequence, floor: f64) -> (Vec<f64>, bool) {
        let mut floored = false;
        let mut out = Vec::with_capacity(seq.len());
        let mut lp = |p: f64| {
            if p < floor {
                floored = true;
                floor.ln()
            } else {
                p.ln()
            }
        };
        let r = seq.residues();
        out.push(lp(self.tables.markov_initial[r[0].index()]));
        for w in r.windows(2) {
            out.push(lp(self.tables.markov_transition[w[0].index()][w[1].index()]));
        }
        (out, floored)
    }
}

pub fn sample_categorical(probs: &[f64; NUM_RESIDUE_TYPES], rng: &mut Rng) -> ResidueType {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return ResidueType::from_index(i);
        }
    }
    // Rounding: fall back to the last type with non-zero mass.
    let last = probs.iter().rposition(|&p| p > 0.0).unwrap_or(NUM_RESIDUE_TYPES - 1);
    ResidueType::from_index(last)
}

pub fn uniform_sequence(len: usize, rng: &mut Rng) -> Sequence {
    Sequence::new(
        (0..len)
            .map(|_| ResidueType::from_index(rng.random_range(0..NUM_RESIDUE_TYPES)))
            .collect(),
    )
    .expect("len >= 1")
}

/// Offset between residue i and i+1; handy for geometry checks.
pub fn bond(s: &Structure, i: usize) -> Vec3 {
    sub(s[i + 1], s[i])
}
