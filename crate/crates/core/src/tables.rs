//! Fixed lookup tables of the synthetic world.
//!
//! The committed files under `data/` are produced by [`Tables::generate`]
//! with [`TABLE_SEED`]; a unit test keeps the two in sync. Every table is a
//! plain-text numeric matrix with a one-line `# shape <rows> <cols>` header.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::residue::{ResidueType, NUM_RESIDUE_TYPES as K};
use crate::rng;

pub const TABLE_SEED: u64 = 0x5EED_7AB1E5;

pub const ANGLES_FILE: &str = "angles.txt";
pub const INTERACTION_FILE: &str = "interaction.txt";
pub const MARKOV_FILE: &str = "markov.txt";

/// Constants that shape the generated tables.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TableParams {
    pub bend_range_deg: (f64, f64),
    pub torsion_range_deg: (f64, f64),
    /// `w(a, b) = scale * (offset + main * (s_a + s_b) + pair * e_ab)` with
    /// standard-normal `s` and `e`.
    pub w_scale: f64,
    pub w_offset: f64,
    pub w_main: f64,
    pub w_pair: f64,
}

impl Default for TableParams {
    fn default() -> Self {
        TableParams {
            bend_range_deg: (60.0, 120.0),
            torsion_range_deg: (-180.0, 180.0),
            w_scale: 0.3,
            w_offset: -1.0,
            w_main: 0.2,
            w_pair: 0.5,
        }
    }
}

const MARKOV_CONCENTRATION: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tables {
    /// Per-type turning angle (radians) between consecutive bonds.
    pub bend: [f64; K],
    /// Per-type torsion (radians) about the incoming bond.
    pub torsion: [f64; K],
    /// Symmetric contact interaction energies.
    pub interaction: [[f64; K]; K],
    /// Markov chain of natural antibodies: start distribution.
    pub markov_initial: [f64; K],
    /// Markov chain of natural antibodies: `transition[prev][next]`.
    pub markov_transition: [[f64; K]; K],
}

const ANGLES_DATA: &str = include_str!("../data/angles.txt");
const INTERACTION_DATA: &str = include_str!("../data/interaction.txt");
const MARKOV_DATA: &str = include_str!("../data/markov.txt");

impl Tables {
    /// The committed tables.
    pub fn standard() -> Tables {
        Tables::parse(ANGLES_DATA, INTERACTION_DATA, MARKOV_DATA).expect("committed tables are well formed")
    }

    pub fn generate(seed: u64) -> Tables {
        Tables::generate_with(seed, &TableParams::default())
    }

    pub fn generate_with(seed: u64, tp: &TableParams) -> Tables {
        let mut r = rng::seeded(seed);
        let deg = PI / 180.0;
        let mut bend = [0.0; K];
        let mut torsion = [0.0; K];
        for a in 0..K {
            bend[a] = r.random_range(tp.bend_range_deg.0..tp.bend_range_deg.1) * deg;
            torsion[a] = r.random_range(tp.torsion_range_deg.0..tp.torsion_range_deg.1) * deg;
        }

        let main: Vec<f64> = (0..K).map(|_| StandardNormal.sample(&mut r)).collect();
        let mut interaction = [[0.0; K]; K];
        for a in 0..K {
            for b in a..K {
                let e: f64 = StandardNormal.sample(&mut r);
                let v = tp.w_scale * (tp.w_offset + tp.w_main * (main[a] + main[b]) + tp.w_pair * e);
                interaction[a][b] = v;
                interaction[b][a] = v;
            }
        }

        let mut dirichlet = |alpha: f64| -> [f64; K] {
            let g = Gamma::new(alpha, 1.0).expect("positive shape");
            let mut row = [0.0; K];
            for v in row.iter_mut() {
                *v = g.sample(&mut r).max(1e-300);
            }
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
            row
        };
        let markov_initial = dirichlet(1.0);
        let mut markov_transition = [[0.0; K]; K];
        for row in markov_transition.iter_mut() {
            *row = dirichlet(MARKOV_CONCENTRATION);
        }

        Tables {
            bend,
            torsion,
            interaction,
            markov_initial,
            markov_transition,
        }
    }

    pub fn parse(angles: &str, interaction: &str, markov: &str) -> Result<Tables> {
        let a = parse_matrix(angles, ANGLES_FILE)?;
        expect_shape(&a, K, 2, ANGLES_FILE)?;
        let w = parse_matrix(interaction, INTERACTION_FILE)?;
        expect_shape(&w, K, K, INTERACTION_FILE)?;
        let m = parse_matrix(markov, MARKOV_FILE)?;
        expect_shape(&m, K + 1, K, MARKOV_FILE)?;

        let mut t = Tables {
            bend: [0.0; K],
            torsion: [0.0; K],
            interaction: [[0.0; K]; K],
            markov_initial: [0.0; K],
            markov_transition: [[0.0; K]; K],
        };
        for i in 0..K {
            t.bend[i] = a.get(i, 0);
            t.torsion[i] = a.get(i, 1);
            t.markov_initial[i] = m.get(0, i);
            for j in 0..K {
                t.interaction[i][j] = w.get(i, j);
                t.markov_transition[i][j] = m.get(i + 1, j);
            }
        }
        Ok(t)
    }

    pub fn angles_text(&self) -> String {
        let rows: Vec<Vec<f64>> = (0..K).map(|i| vec![self.bend[i], self.torsion[i]]).collect();
        format_matrix(&rows)
    }

    pub fn interaction_text(&self) -> String {
        let rows: Vec<Vec<f64>> = self.interaction.iter().map(|r| r.to_vec()).collect();
        format_matrix(&rows)
    }

    pub fn markov_text(&self) -> String {
        let mut rows = vec![self.markov_initial.to_vec()];
        rows.extend(self.markov_transition.iter().map(|r| r.to_vec()));
        format_matrix(&rows)
    }

    pub fn write_dir(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, text) in [
            (ANGLES_FILE, self.angles_text()),
            (INTERACTION_FILE, self.interaction_text()),
            (MARKOV_FILE, self.markov_text()),
        ] {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    pub fn read_dir(dir: &std::path::Path) -> Result<Tables> {
        let read = |name: &str| {
            let p = dir.join(name);
            std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
        };
        Tables::parse(&read(ANGLES_FILE)?, &read(INTERACTION_FILE)?, &read(MARKOV_FILE)?)
    }

    pub fn interaction(&self, a: ResidueType, b: ResidueType) -> f64 {
        self.interaction[a.index()][b.index()]
    }
}

/// Dense row-major matrix as read from a table file.
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Format with a shape header and 17 significant digits per value.
pub fn format_matrix(rows: &[Vec<f64>]) -> String {
    let cols = rows.first().map_or(0, |r| r.len());
    let mut out = format!("# shape {} {}\n", rows.len(), cols);
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| format_f64(*v)).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

/// 17 significant digits, round-trips every finite f64.
pub fn format_f64(v: f64) -> String {
    format!("{:.16e}", v)
}

pub fn parse_matrix(text: &str, what: &str) -> Result<Matrix> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::format(what, "empty table"))?;
    let dims: Vec<usize> = header
        .strip_prefix("# shape")
        .ok_or_else(|| Error::format(what, "missing '# shape' header"))?
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::format(what, format!("bad shape header: {e}")))?;
    if dims.len() != 2 {
        return Err(Error::format(what, "shape header needs two dimensions"));
    }
    let (rows, cols) = (dims[0], dims[1]);
    let mut data = Vec::with_capacity(rows * cols);
    for (r, line) in lines.enumerate() {
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(what, format!("row {r}: {e}")))?;
        if vals.len() != cols {
            return Err(Error::format(
                what,
                format!("row {r} has {} values, expected {cols}", vals.len()),
            ));
        }
        data.extend(vals);
    }
    if data.len() != rows * cols {
        return Err(Error::format(
            what,
            format!("expected {rows} rows, found {}", data.len() / cols.max(1)),
        ));
    }
    Ok(Matrix { rows, cols, data })
}

fn expect_shape(m: &Matrix, rows: usize, cols: usize, what: &str) -> Result<()> {
    if m.rows != rows || m.cols != cols {
        return Err(Error::format(
            what,
            format!("shape {}x{}, expected {rows}x{cols}", m.rows, m.cols),
        ));
    }
    Ok(())
}
