//! Generated datasets and their on-disk layout.
//!
//! A dataset directory holds `registry.csv`, `energies.csv`, `dataset.toml`
//! (generation settings) and `tables/`.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::residue::Sequence;
use crate::rng::{self, Rng};
use crate::tables::{format_f64, Tables};
use crate::world::{make_complex, uniform_sequence, ComplexLayout, EnergyRecord, NoiseConfig, ToyWorld};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_antibodies: usize,
    pub num_antigens: usize,
    pub antibody_len: usize,
    pub antigen_len: usize,
    pub cdr_positions: Vec<usize>,
    pub linker_repeats: usize,
    /// The last `test_antigens` antigen ids are held out from all training.
    pub test_antigens: usize,
    pub gaussian_sigma: f64,
    pub outlier_rate: f64,
    pub outlier_factor: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        let noise = NoiseConfig::default();
        DatasetSpec {
            num_antibodies: 77,
            num_antigens: 54,
            antibody_len: 24,
            antigen_len: 16,
            cdr_positions: (17..23).collect(),
            linker_repeats: 4,
            test_antigens: 10,
            gaussian_sigma: noise.gaussian_sigma,
            outlier_rate: noise.outlier_rate,
            outlier_factor: noise.outlier_factor,
        }
    }
}

impl DatasetSpec {
    pub fn noise(&self) -> NoiseConfig {
        NoiseConfig {
            gaussian_sigma: self.gaussian_sigma,
            outlier_rate: self.outlier_rate,
            outlier_factor: self.outlier_factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_antibodies == 0 || self.num_antigens == 0 {
            return Err(Error::InvalidConfig(
                "dataset needs at least one antibody and one antigen".into(),
            ));
        }
        if self.antibody_len == 0 || self.antigen_len == 0 {
            return Err(Error::InvalidConfig("sequence lengths must be positive".into()));
        }
        if self.test_antigens >= self.num_antigens && self.num_antigens > 1 {
            return Err(Error::InvalidConfig(
                "test_antigens must leave training antigens".into(),
            ));
        }
        if let Some(&p) = self.cdr_positions.iter().find(|&&p| p >= self.antibody_len) {
            return Err(Error::CdrOutOfRange {
                index: p,
                len: self.antibody_len,
            });
        }
        self.noise().validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    /// Shared framework; antibodies differ from it only at CDR positions.
    pub germline: Sequence,
    pub antibodies: Vec<Sequence>,
    pub antigens: Vec<Sequence>,
    /// One record per (antigen, antibody), antigen-major.
    pub records: Vec<EnergyRecord>,
}

/// Natural antibodies share a germline framework drawn from the Markov
/// chain; their CDRs are re-drawn from the chain's transitions. Antigens are
/// uniform i.i.d. residues.
pub fn generate_dataset(world: &ToyWorld, spec: &DatasetSpec, rng: &mut Rng) -> Result<Dataset> {
    spec.validate()?;
    let germline = world.sample_natural(spec.antibody_len, rng);
    let mut cdr = spec.cdr_positions.clone();
    cdr.sort_unstable();
    let antibodies: Vec<Sequence> = (0..spec.num_antibodies)
        .map(|_| world.resample_natural(&germline, &cdr, rng))
        .collect();
    let antigens: Vec<Sequence> = (0..spec.num_antigens)
        .map(|_| uniform_sequence(spec.antigen_len, rng))
        .collect();
    let noise = spec.noise();
    let mut records = Vec::with_capacity(antibodies.len() * antigens.len());
    for (i, ag) in antigens.iter().enumerate() {
        for (j, ab) in antibodies.iter().enumerate() {
            let (layout, _) = make_complex(ab, ag, spec.linker_repeats, &cdr)?;
            records.push(world.noisy_binding_energy(&layout, i, j, &noise, rng));
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        germline,
        antibodies,
        antigens,
        records,
    })
}

impl Dataset {
    pub fn record(&self, antigen_id: usize, antibody_id: usize) -> &EnergyRecord {
        &self.records[antigen_id * self.antibodies.len() + antibody_id]
    }

    pub fn layout(&self, antigen_id: usize, antibody_id: usize) -> ComplexLayout {
        self.layout_for(&self.antibodies[antibody_id], antigen_id)
    }

    pub fn layout_for(&self, antibody: &Sequence, antigen_id: usize) -> ComplexLayout {
        make_complex(
            antibody,
            &self.antigens[antigen_id],
            self.spec.linker_repeats,
            &self.spec.cdr_positions,
        )
        .expect("dataset layout validated at generation")
        .0
    }

    pub fn train_antigens(&self) -> Vec<usize> {
        (0..self.antigens.len() - self.spec.test_antigens.min(self.antigens.len())).collect()
    }

    pub fn test_antigens(&self) -> Vec<usize> {
        let n = self.antigens.len();
        (n - self.spec.test_antigens.min(n)..n).collect()
    }

    pub fn records_for(&self, antigen_id: usize) -> &[EnergyRecord] {
        let a = self.antibodies.len();
        &self.records[antigen_id * a..(antigen_id + 1) * a]
    }

    pub fn save(&self, dir: &Path, tables: &Tables) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let spec_path = dir.join("dataset.toml");
        let spec = toml::to_string(&self.spec).map_err(|e| Error::format("dataset.toml", e.to_string()))?;
        fs::write(&spec_path, spec).map_err(|e| Error::io(&spec_path, e))?;

        let mut w = csv::Writer::from_path(dir.join("registry.csv"))?;
        w.write_record(["id", "role", "sequence"])?;
        w.write_record(["0", "germline", &self.germline.to_string()])?;
        for (i, s) in self.antibodies.iter().enumerate() {
            w.write_record([i.to_string(), "antibody".into(), s.to_string()])?;
        }
        for (i, s) in self.antigens.iter().enumerate() {
            w.write_record([i.to_string(), "antigen".into(), s.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(dir.join("registry.csv"), e))?;

        let mut w = csv::Writer::from_path(dir.join("energies.csv"))?;
        w.write_record(["antigen_id", "antibody_id", "delta_g", "delta_g_noisy", "is_outlier"])?;
        for r in &self.records {
            w.write_record([
                r.antigen_id.to_string(),
                r.antibody_id.to_string(),
                format_f64(r.delta_g),
                format_f64(r.delta_g_noisy),
                (r.is_outlier as u8).to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(dir.join("energies.csv"), e))?;
        tables.write_dir(&dir.join("tables"))
    }

    /// Load a dataset directory, returning it with the tables it was built on.
    pub fn load(dir: &Path) -> Result<(Dataset, Tables)> {
        let spec_path = dir.join("dataset.toml");
        if !spec_path.exists() {
            return Err(Error::MissingArtifact(spec_path));
        }
        let text = fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
        let spec: DatasetSpec = toml::from_str(&text).map_err(|e| Error::format("dataset.toml", e.to_string()))?;
        let tables = Tables::read_dir(&dir.join("tables"))?;

        let mut germline = None;
        let mut antibodies = Vec::new();
        let mut antigens = Vec::new();
        let mut rd = csv::Reader::from_path(dir.join("registry.csv"))?;
        for row in rd.records() {
            let row = row?;
            let id: usize = row[0]
                .parse()
                .map_err(|_| Error::format("registry.csv", format!("bad id {:?}", &row[0])))?;
            let seq: Sequence = row[2].parse()?;
            let target = match &row[1] {
                "germline" => {
                    germline = Some(seq);
                    continue;
                }
                "antibody" => &mut antibodies,
                "antigen" => &mut antigens,
                other => return Err(Error::format("registry.csv", format!("unknown role {other:?}"))),
            };
            if id != target.len() {
                return Err(Error::format("registry.csv", format!("ids must be dense, got {id}")));
            }
            target.push(seq);
        }
        let germline = germline.ok_or_else(|| Error::format("registry.csv", "missing germline row"))?;

        let mut records = Vec::new();
        let mut rd = csv::Reader::from_path(dir.join("energies.csv"))?;
        for row in rd.records() {
            let row = row?;
            let num = |i: usize| -> Result<f64> {
                row[i]
                    .parse::<f64>()
                    .map_err(|_| Error::format("energies.csv", format!("bad number {:?}", &row[i])))
            };
            let id = |i: usize| -> Result<usize> {
                row[i]
                    .parse::<usize>()
                    .map_err(|_| Error::format("energies.csv", format!("bad id {:?}", &row[i])))
            };
            records.push(EnergyRecord {
                antigen_id: id(0)?,
                antibody_id: id(1)?,
                delta_g: num(2)?,
                delta_g_noisy: num(3)?,
                is_outlier: &row[4] == "1",
            });
        }
        let ds = Dataset {
            spec,
            germline,
            antibodies,
            antigens,
            records,
        };
        if ds.records.len() != ds.antibodies.len() * ds.antigens.len() {
            return Err(Error::format("energies.csv", "record count does not match registry"));
        }
        Ok((ds, tables))
    }
}

/// Supervised label: exact binding energy of one complex.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledPair {
    pub antigen_id: usize,
    pub antibody_id: usize,
    pub delta_g: f64,
}

/// Draw `n` distinct training complexes with their exact energies.
pub fn sample_labeled(dataset: &Dataset, n: usize, rng: &mut Rng) -> Vec<LabeledPair> {
    let train = dataset.train_antigens();
    let a = dataset.antibodies.len();
    let total = train.len() * a;
    let mut idx = sample(rng, total, n.min(total)).into_vec();
    idx.sort_unstable();
    idx.into_iter()
        .map(|k| {
            let antigen_id = train[k / a];
            let antibody_id = k % a;
            LabeledPair {
                antigen_id,
                antibody_id,
                delta_g: dataset.record(antigen_id, antibody_id).delta_g,
            }
        })
        .collect()
}

pub fn write_labels(path: &Path, labels: &[LabeledPair]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["antigen_id", "antibody_id", "delta_g"])?;
    for l in labels {
        w.write_record([
            l.antigen_id.to_string(),
            l.antibody_id.to_string(),
            format_f64(l.delta_g),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<Vec<LabeledPair>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut rd = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row?;
        let bad = |i: usize| Error::format("labels.csv", format!("bad field {:?}", &row[i]));
        out.push(LabeledPair {
            antigen_id: row[0].parse().map_err(|_| bad(0))?,
            antibody_id: row[1].parse().map_err(|_| bad(1))?,
            delta_g: row[2].parse().map_err(|_| bad(2))?,
        });
    }
    Ok(out)
}

/// Convenience: dataset generated from a master seed with the standard world.
pub fn standard_dataset(spec: &DatasetSpec, seed: u64) -> Result<(ToyWorld, Dataset)> {
    let world = ToyWorld::default();
    let ds = generate_dataset(&world, spec, &mut rng::seeded(rng::derive(seed, "dataset")))?;
    Ok((world, ds))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetSpec {
        DatasetSpec {
            num_antibodies: 5,
            num_antigens: 4,
            test_antigens: 1,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn record_counts() {
        let (_, ds) = standard_dataset(&DatasetSpec::default(), 1).unwrap();
        assert_eq!(ds.records.len(), 4158);
        let spec = DatasetSpec {
            num_antibodies: 1,
            num_antigens: 1,
            test_antigens: 0,
            ..DatasetSpec::default()
        };
        let (_, ds) = standard_dataset(&spec, 1).unwrap();
        assert_eq!(ds.records.len(), 1);
    }

    #[test]
    fn same_seed_same_dataset() {
        let (_, a) = standard_dataset(&small(), 11).unwrap();
        let (_, b) = standard_dataset(&small(), 11).unwrap();
        assert_eq!(a, b);
        let (_, c) = standard_dataset(&small(), 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn antibodies_differ_from_germline_only_at_cdrs() {
        let (_, ds) = standard_dataset(&small(), 5).unwrap();
        for ab in &ds.antibodies {
            for p in ab.diff_positions(&ds.germline) {
                assert!(ds.spec.cdr_positions.contains(&p));
            }
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let (world, ds) = standard_dataset(&small(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path(), world.tables()).unwrap();
        let (back, tables) = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(&tables, world.tables());

        let labels = sample_labeled(&ds, 6, &mut rng::seeded(3));
        let p = dir.path().join("labels.csv");
        write_labels(&p, &labels).unwrap();
        assert_eq!(read_labels(&p).unwrap(), labels);
    }

    #[test]
    fn labels_come_from_training_antigens() {
        let (_, ds) = standard_dataset(&DatasetSpec::default(), 2).unwrap();
        let labels = sample_labeled(&ds, 120, &mut rng::seeded(4));
        assert_eq!(labels.len(), 120);
        let test = ds.test_antigens();
        assert!(labels.iter().all(|l| !test.contains(&l.antigen_id)));
        assert!(labels
            .iter()
            .all(|l| l.delta_g == ds.record(l.antigen_id, l.antibody_id).delta_g));
    }
}
