//! The design loop, its evaluation metrics, ablations and sweeps.
//!
//! Per antigen the loop alternates structure generation (guided flow
//! sampling, or direct predictor descent for the `no_flow` variant),
//! inverse-folding proposals and sequence-predictor selection. Designs are
//! always scored with the exact oracle, never with the predictors that
//! produced them.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

use crate::checkpoint::{self, Checkpoint};
use crate::coteach::{build_pairs, coteach, CoteachConfig, CoteachOutcome};
use crate::dataset::{sample_labeled, Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::flow::{train_flow, FlowArch, FlowModel, FlowTrainConfig, Schedule, ScheduleSemantics};
use crate::guidance::{corrector_relax, descend_predictor, guided_sample, GuidanceConfig, RelaxConfig};
use crate::inverse_folding::{
    post_select, propose_mutations, sort_by_score, IfArch, IfReport, IfTrainConfig, InverseFoldModel, MutationConfig,
    MutationProposal, ProposalRow,
};
use crate::predictors::{
    supervised_train, ComplexBank, Predictor, PredictorArch, SeqPredictor, StructPredictor, SupervisedConfig,
    SupervisedReport,
};
use crate::residue::Sequence;
use crate::rng::{self, child_seed, seeded, Rng};
use crate::stats;
use crate::structure::Structure;
use crate::tables::format_f64;
use crate::world::{DockingNoise, ToyWorld};

/// Floor applied to Markov transition probabilities in the naturalness
/// metric.
pub const NAT_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub levels: Vec<f64>,
    pub semantics: ScheduleSemantics,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        let s = Schedule::default_three_step();
        ScheduleConfig {
            levels: s.levels().to_vec(),
            semantics: s.semantics(),
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<Schedule> {
        Schedule::new(self.levels.clone(), self.semantics)
    }

    /// `steps` equal decrements, except that three steps give the default
    /// schedule.
    pub fn with_steps(steps: usize) -> Result<Self> {
        let s = if steps == 3 {
            Schedule::default_three_step()
        } else {
            Schedule::uniform(steps)?
        };
        Ok(ScheduleConfig {
            levels: s.levels().to_vec(),
            semantics: s.semantics(),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub one_iteration: bool,
    pub no_pc: bool,
    pub no_flow: bool,
    pub no_energy: bool,
    pub no_selection: bool,
}

/// Which candidates seed the next iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Carryover {
    /// Only the best selected sequence.
    #[default]
    Best,
    /// Every selected sequence.
    AllSelected,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub iterations: usize,
    pub final_designs: usize,
    pub seeds: Vec<u64>,
    /// Antigen ids to design for; empty means the held-out test antigens.
    pub antigens: Vec<usize>,
    pub samples_per_iteration: usize,
    pub carryover: Carryover,
    pub no_flow_step: f64,
    pub no_flow_iters: usize,
    pub schedule: ScheduleConfig,
    pub guidance: GuidanceConfig,
    pub relax: RelaxConfig,
    pub mutation: MutationConfig,
    pub ablation: AblationFlags,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            iterations: 3,
            final_designs: 3,
            seeds: vec![0, 1, 2, 3, 4],
            antigens: Vec::new(),
            samples_per_iteration: 1,
            carryover: Carryover::Best,
            no_flow_step: 0.01,
            no_flow_iters: 50,
            schedule: ScheduleConfig::default(),
            guidance: GuidanceConfig::default(),
            relax: RelaxConfig::default(),
            mutation: MutationConfig::default(),
            ablation: AblationFlags::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be at least 1".into()));
        }
        if self.final_designs == 0 || self.samples_per_iteration == 0 {
            return Err(Error::InvalidConfig(
                "final_designs and samples_per_iteration must be at least 1".into(),
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed is required".into()));
        }
        if self.ablation.no_energy && self.ablation.no_selection {
            return Err(Error::InvalidConfig(
                "no_energy and no_selection select different predictors; set at most one".into(),
            ));
        }
        self.schedule.build()?;
        self.guidance.validate()?;
        self.relax.validate()?;
        self.mutation.validate()
    }

    /// Iterations actually run; `one_iteration` forces one.
    pub fn effective_iterations(&self) -> usize {
        if self.ablation.one_iteration {
            1
        } else {
            self.iterations
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Exact-label complexes for supervised training.
    pub labeled_pairs: usize,
    /// Ensemble samples used to train the flow model.
    pub flow_complexes: usize,
    /// Ensemble samples used to train the inverse-folding model.
    pub if_complexes: usize,
    pub fluctuation: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            labeled_pairs: 120,
            flow_complexes: 400,
            if_complexes: 600,
            fluctuation: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub gamma: Vec<f64>,
    pub steps: Vec<usize>,
    pub default_gamma: f64,
    pub default_steps: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            gamma: vec![0.0, 2.5, 5.0, 7.5, 10.0],
            steps: vec![1, 2, 3, 4],
            default_gamma: 5.0,
            default_steps: 3,
        }
    }
}

/// Everything a run needs, as read from the config file.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub data: DatasetSpec,
    pub docking: DockingNoise,
    pub corpus: CorpusConfig,
    pub flow: FlowTrainConfig,
    pub supervised: SupervisedConfig,
    pub inverse_folding: IfTrainConfig,
    pub coteach: CoteachConfig,
    pub run: RunConfig,
    pub sweep: SweepConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config =
            toml::from_str(text).map_err(|e| Error::format("config", e.to_string().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.run.validate()
    }

    /// Antigens the design loop runs on.
    pub fn run_antigens(&self, ds: &Dataset) -> Result<Vec<usize>> {
        let ids = if self.run.antigens.is_empty() {
            ds.test_antigens()
        } else {
            self.run.antigens.clone()
        };
        if let Some(&bad) = ids.iter().find(|&&i| i >= ds.antigens.len()) {
            return Err(Error::UnknownId {
                kind: "antigen",
                id: bad,
            });
        }
        Ok(ids)
    }
}

/// Trained models shared by every design run.
#[derive(Clone, Debug)]
pub struct Artifacts {
    pub world: ToyWorld,
    pub dataset: Dataset,
    pub flow: FlowModel,
    pub inverse_fold: InverseFoldModel,
    pub supervised: (SeqPredictor, StructPredictor),
    pub unfiltered: (SeqPredictor, StructPredictor),
    pub coteach: (SeqPredictor, StructPredictor),
}

pub const FLOW_CKPT: &str = "flow.ckpt";
pub const IF_CKPT: &str = "inverse_fold.ckpt";
pub const DATA_DIR: &str = "data";

/// Checkpoint file names of a predictor pair in one training stage.
pub fn predictor_ckpts(stage: &str) -> (String, String) {
    (format!("seq_{stage}.ckpt"), format!("struct_{stage}.ckpt"))
}

/// Saves `ck` with `seed` and the dataset hash added to its manifest.
pub fn save_checkpoint(path: &Path, ck: Checkpoint, seed: u64, ds: &Dataset) -> Result<()> {
    let mut ck = ck;
    ck.meta.insert("seed".into(), seed.to_string());
    ck.meta.insert("data_hash".into(), dataset_hash(ds));
    checkpoint::save(path, &ck)
}

pub fn save_predictors(
    dir: &Path,
    stage: &str,
    p: &(SeqPredictor, StructPredictor),
    seed: u64,
    ds: &Dataset,
) -> Result<()> {
    let (a, b) = predictor_ckpts(stage);
    save_checkpoint(&dir.join(a), p.0.to_checkpoint(), seed, ds)?;
    save_checkpoint(&dir.join(b), p.1.to_checkpoint(), seed, ds)
}

pub fn load_predictors(dir: &Path, stage: &str) -> Result<(SeqPredictor, StructPredictor)> {
    let (a, b) = predictor_ckpts(stage);
    Ok((
        SeqPredictor::from_checkpoint(&checkpoint::load(&dir.join(a))?)?,
        StructPredictor::from_checkpoint(&checkpoint::load(&dir.join(b))?)?,
    ))
}

pub fn load_dataset(dir: &Path) -> Result<(ToyWorld, Dataset)> {
    let (ds, tables) = Dataset::load(&dir.join(DATA_DIR))?;
    Ok((ToyWorld::new(tables), ds))
}

impl Artifacts {
    /// Predictors used by a run with these flags.
    pub fn predictors(&self, flags: &AblationFlags) -> (&SeqPredictor, &StructPredictor) {
        let p = if flags.no_energy {
            &self.supervised
        } else if flags.no_selection {
            &self.unfiltered
        } else {
            &self.coteach
        };
        (&p.0, &p.1)
    }

    /// Writes the dataset under `dir/data` and every model checkpoint; each
    /// manifest records `seed` and the dataset hash.
    pub fn save(&self, dir: &Path, seed: u64) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.dataset.save(&dir.join(DATA_DIR), self.world.tables())?;
        let ds = &self.dataset;
        save_checkpoint(&dir.join(FLOW_CKPT), self.flow.to_checkpoint(&[]), seed, ds)?;
        save_checkpoint(&dir.join(IF_CKPT), self.inverse_fold.to_checkpoint(), seed, ds)?;
        save_predictors(dir, "supervised", &self.supervised, seed, ds)?;
        save_predictors(dir, "unfiltered", &self.unfiltered, seed, ds)?;
        save_predictors(dir, "coteach", &self.coteach, seed, ds)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (world, dataset) = load_dataset(dir)?;
        Ok(Artifacts {
            world,
            dataset,
            flow: FlowModel::from_checkpoint(&checkpoint::load(&dir.join(FLOW_CKPT))?)?,
            inverse_fold: InverseFoldModel::from_checkpoint(&checkpoint::load(&dir.join(IF_CKPT))?)?,
            supervised: load_predictors(dir, "supervised")?,
            unfiltered: load_predictors(dir, "unfiltered")?,
            coteach: load_predictors(dir, "coteach")?,
        })
    }
}

/// FNV-1a over every antibody and antigen residue string, in id order.
pub fn dataset_hash(ds: &Dataset) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for s in ds.antibodies.iter().chain(&ds.antigens) {
        for b in s.to_string().bytes().chain(std::iter::once(b'/')) {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
    }
    format!("{h:016x}")
}

/// Training diagnostics gathered by [`train_artifacts`].
#[derive(Clone, Debug)]
pub struct TrainingLog {
    pub flow_curve: Vec<f64>,
    pub inverse_fold: IfReport,
    pub supervised: (SupervisedReport, SupervisedReport),
    pub unfiltered: CoteachOutcome,
    pub coteach: CoteachOutcome,
}

pub fn build_dataset(cfg: &Config) -> Result<(ToyWorld, Dataset)> {
    crate::dataset::standard_dataset(&cfg.data, cfg.seed)
}

/// Bank of docked complexes the structure predictor is trained on.
pub fn docking_bank<'a>(cfg: &Config, world: &'a ToyWorld, ds: &'a Dataset) -> ComplexBank<'a> {
    ComplexBank::docked(world, ds, cfg.docking, rng::derive(cfg.seed, "docking"))
}

/// Ensemble samples of random (training antigen, antibody) complexes.
pub fn ensemble_corpus(
    world: &ToyWorld,
    ds: &Dataset,
    n: usize,
    fluctuation: f64,
    rng: &mut Rng,
) -> Vec<(crate::world::ComplexLayout, Structure)> {
    use rand::Rng as _;
    let train = ds.train_antigens();
    (0..n)
        .map(|_| {
            let i = train[rng.random_range(0..train.len())];
            let j = rng.random_range(0..ds.antibodies.len());
            let layout = ds.layout(i, j);
            let x = world.ensemble_sample(&layout.sequence(), fluctuation, rng);
            (layout, x)
        })
        .collect()
}

pub fn train_flow_model(cfg: &Config, world: &ToyWorld, ds: &Dataset) -> Result<(FlowModel, Vec<f64>)> {
    let mut r = seeded(rng::derive(cfg.seed, "flow-corpus"));
    let corpus: Vec<(Sequence, Structure)> =
        ensemble_corpus(world, ds, cfg.corpus.flow_complexes, cfg.corpus.fluctuation, &mut r)
            .into_iter()
            .map(|(l, x)| (l.sequence(), x))
            .collect();
    let mut model = FlowModel::new(FlowArch::default(), &mut seeded(rng::derive(cfg.seed, "flow-init")));
    let curve = train_flow(
        &mut model,
        &corpus,
        &cfg.flow,
        &mut seeded(rng::derive(cfg.seed, "flow-train")),
    )?;
    Ok((model, curve))
}

pub fn train_inverse_fold_model(cfg: &Config, world: &ToyWorld, ds: &Dataset) -> Result<(InverseFoldModel, IfReport)> {
    let mut r = seeded(rng::derive(cfg.seed, "if-corpus"));
    let corpus = ensemble_corpus(world, ds, cfg.corpus.if_complexes, cfg.corpus.fluctuation, &mut r);
    let mut model = InverseFoldModel::new(IfArch::default(), &mut seeded(rng::derive(cfg.seed, "if-init")));
    let rep = crate::inverse_folding::train_if(
        &mut model,
        &corpus,
        &cfg.inverse_folding,
        &mut seeded(rng::derive(cfg.seed, "if-train")),
    )?;
    Ok((model, rep))
}

/// Both predictors trained on the exact-label set.
pub fn train_supervised_predictors(
    cfg: &Config,
    ds: &Dataset,
    bank: &ComplexBank<'_>,
) -> Result<((SeqPredictor, StructPredictor), (SupervisedReport, SupervisedReport))> {
    let labels = sample_labeled(
        ds,
        cfg.corpus.labeled_pairs,
        &mut seeded(rng::derive(cfg.seed, "labels")),
    );
    let mut fa = SeqPredictor::new(PredictorArch::default(), &mut seeded(rng::derive(cfg.seed, "seq-init")));
    let ra = supervised_train(
        &mut fa,
        &labels,
        bank,
        &cfg.supervised,
        &mut seeded(rng::derive(cfg.seed, "seq-train")),
    )?;
    let mut fb = StructPredictor::new(
        PredictorArch::default(),
        &mut seeded(rng::derive(cfg.seed, "struct-init")),
    );
    let rb = supervised_train(
        &mut fb,
        &labels,
        bank,
        &cfg.supervised,
        &mut seeded(rng::derive(cfg.seed, "struct-train")),
    )?;
    Ok(((fa, fb), (ra, rb)))
}

/// Co-teaching from the supervised models; `selection` switches the
/// consensus filter. Both variants see the same labels and schedule.
pub fn run_coteaching(
    cfg: &Config,
    ds: &Dataset,
    bank: &ComplexBank<'_>,
    start: &(SeqPredictor, StructPredictor),
    selection: bool,
    eval_antigens: Option<&[usize]>,
) -> Result<CoteachOutcome> {
    let pairs = build_pairs(
        ds,
        &ds.train_antigens(),
        cfg.coteach.pairs_per_antigen,
        cfg.coteach.tie_epsilon,
        &mut seeded(rng::derive(cfg.seed, "pairs")),
    )?;
    let ct = CoteachConfig {
        selection,
        ..cfg.coteach.clone()
    };
    coteach(
        &start.0,
        &start.1,
        &pairs.labels,
        bank,
        &ct,
        eval_antigens,
        &mut seeded(rng::derive(cfg.seed, "coteach")),
    )
}

/// Dataset plus every trained model, from the master seed.
pub fn train_artifacts(cfg: &Config) -> Result<(Artifacts, TrainingLog)> {
    cfg.validate()?;
    let (world, dataset) = build_dataset(cfg)?;
    let (flow, flow_curve) = train_flow_model(cfg, &world, &dataset)?;
    log::info!("flow model trained, final loss {:?}", flow_curve.last());
    let (inverse_fold, if_rep) = train_inverse_fold_model(cfg, &world, &dataset)?;
    log::info!(
        "inverse-folding model trained, holdout accuracy {:?}",
        if_rep.holdout_accuracy
    );
    let bank = docking_bank(cfg, &world, &dataset);
    let (supervised, sup_reps) = train_supervised_predictors(cfg, &dataset, &bank)?;
    let unf = run_coteaching(cfg, &dataset, &bank, &supervised, false, None)?;
    let ct = run_coteaching(cfg, &dataset, &bank, &supervised, true, None)?;
    drop(bank);
    let art = Artifacts {
        world,
        dataset,
        flow,
        inverse_fold,
        supervised,
        unfiltered: (unf.seq.clone(), unf.structure.clone()),
        coteach: (ct.seq.clone(), ct.structure.clone()),
    };
    let log = TrainingLog {
        flow_curve,
        inverse_fold: if_rep,
        supervised: sup_reps,
        unfiltered: unf,
        coteach: ct,
    };
    Ok((art, log))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DesignRecord {
    pub seed: u64,
    pub antigen_id: usize,
    /// 0 is the best-scored design.
    pub rank: usize,
    pub sequence: Sequence,
    pub oracle_dg: f64,
    pub wildtype_dg: f64,
    pub seq_score: f64,
    /// Iteration (1-based) in which the design was first proposed; 0 for a
    /// wildtype fallback.
    pub iteration: usize,
    /// Mutations from wildtype, `pos:from>to` joined by `;`.
    pub mutations: String,
    /// Set when no candidate survived and the wildtype was emitted.
    pub fallback: bool,
}

/// Everything one antigen's run produced.
#[derive(Clone, Debug, PartialEq)]
pub struct AntigenRun {
    pub designs: Vec<DesignRecord>,
    pub proposals: Vec<ProposalRow>,
    /// Structure-generation phases executed.
    pub generation_phases: usize,
}

/// Wildtype antibody assigned to an antigen.
pub fn wildtype_id(ds: &Dataset, antigen_id: usize) -> usize {
    antigen_id % ds.antibodies.len()
}

fn mutation_string(wt: &Sequence, s: &Sequence) -> String {
    wt.diff_positions(s)
        .iter()
        .map(|&p| format!("{p}:{}>{}", wt.get(p).code(), s.get(p).code()))
        .collect::<Vec<_>>()
        .join(";")
}

/// Iterative design for one antigen.
pub fn design_antigen(art: &Artifacts, cfg: &Config, antigen_id: usize, seed: u64) -> Result<AntigenRun> {
    let run = &cfg.run;
    let flags = &run.ablation;
    let ds = &art.dataset;
    let world = &art.world;
    let (fa, fb) = art.predictors(flags);
    let schedule = run.schedule.build()?;
    let relax = (!flags.no_pc).then_some(&run.relax);
    let mut rng = seeded(child_seed(child_seed(cfg.seed, seed), antigen_id as u64));

    let wt = ds.antibodies[wildtype_id(ds, antigen_id)].clone();
    let antigen = &ds.antigens[antigen_id];
    let wt_layout = ds.layout_for(&wt, antigen_id);
    let wildtype_dg = world.binding_energy(&wt_layout);
    let mut reference = world.docked_structure(&wt_layout, &cfg.docking, &mut rng);

    let mut parents = vec![wt.clone()];
    // Selected candidates by sequence string: (proposal, iteration).
    let mut pool: BTreeMap<String, (MutationProposal, usize)> = BTreeMap::new();
    let mut proposals_log = Vec::new();
    let mut phases = 0;
    for it in 1..=run.effective_iterations() {
        let mut fresh: Vec<MutationProposal> = Vec::new();
        let mut next_reference = None;
        for parent in &parents {
            let layout = ds.layout_for(parent, antigen_id);
            if let Some(r) = relax {
                reference = corrector_relax(&reference, r)?.structure;
            }
            for _ in 0..run.samples_per_iteration {
                phases += 1;
                let x = if flags.no_flow {
                    let y = descend_predictor(
                        fb,
                        &reference,
                        &layout,
                        run.no_flow_step,
                        run.no_flow_iters,
                        run.guidance.cdr_only,
                    )?;
                    match relax {
                        Some(r) => corrector_relax(&y, r)?.structure,
                        None => y,
                    }
                } else {
                    guided_sample(&art.flow, fb, &layout, &schedule, &run.guidance, relax, &mut rng)?.structure
                };
                let props = propose_mutations(&art.inverse_fold, &x, &layout, &run.mutation, &mut rng)?;
                for p in props {
                    proposals_log.push(ProposalRow {
                        antigen_id,
                        iteration: it,
                        parent: parent.clone(),
                        proposal: p.clone(),
                    });
                    fresh.push(p);
                }
                next_reference.get_or_insert(x);
            }
        }
        // Deduplicate within the iteration and against the wildtype.
        let mut seen = std::collections::HashSet::new();
        fresh.retain(|p| p.sequence != wt && seen.insert(p.sequence.to_string()));
        if fresh.is_empty() {
            log::warn!("antigen {antigen_id}: no new proposals at iteration {it}");
            break;
        }
        let selected = post_select(fa, antigen, &fresh, run.mutation.top_m)?;
        for p in &selected {
            pool.entry(p.sequence.to_string()).or_insert_with(|| (p.clone(), it));
        }
        parents = match run.carryover {
            Carryover::Best => vec![selected[0].sequence.clone()],
            Carryover::AllSelected => selected.iter().map(|p| p.sequence.clone()).collect(),
        };
        if let Some(x) = next_reference {
            reference = x;
        }
    }

    let mut ranked: Vec<(MutationProposal, usize)> = pool.into_values().collect();
    let mut props: Vec<MutationProposal> = ranked.iter().map(|(p, _)| p.clone()).collect();
    sort_by_score(&mut props);
    let iter_of: BTreeMap<String, usize> = ranked.drain(..).map(|(p, it)| (p.sequence.to_string(), it)).collect();
    let mut designs: Vec<DesignRecord> = props
        .iter()
        .take(run.final_designs)
        .enumerate()
        .map(|(rank, p)| DesignRecord {
            seed,
            antigen_id,
            rank,
            sequence: p.sequence.clone(),
            oracle_dg: world.binding_energy(&ds.layout_for(&p.sequence, antigen_id)),
            wildtype_dg,
            seq_score: p.seq_score.unwrap_or(f64::NAN),
            iteration: iter_of[&p.sequence.to_string()],
            mutations: mutation_string(&wt, &p.sequence),
            fallback: false,
        })
        .collect();
    if designs.is_empty() {
        log::warn!("antigen {antigen_id}: empty candidate pool, emitting wildtype");
        designs.push(DesignRecord {
            seed,
            antigen_id,
            rank: 0,
            sequence: wt.clone(),
            oracle_dg: wildtype_dg,
            wildtype_dg,
            seq_score: fa.predict(&wt, antigen),
            iteration: 0,
            mutations: String::new(),
            fallback: true,
        });
    }
    Ok(AntigenRun {
        designs,
        proposals: proposals_log,
        generation_phases: phases,
    })
}

/// One seed over all run antigens, antigen order preserved.
pub fn run_seed(art: &Artifacts, cfg: &Config, seed: u64) -> Result<Vec<AntigenRun>> {
    let antigens = cfg.run_antigens(&art.dataset)?;
    antigens
        .par_iter()
        .map(|&i| design_antigen(art, cfg, i, seed))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AntigenMetrics {
    pub antigen_id: usize,
    pub imp: f64,
    pub nat: f64,
    pub designs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub imp: f64,
    pub sim: f64,
    pub nat: f64,
    pub per_antigen: Vec<AntigenMetrics>,
    /// Some transition probability hit the naturalness floor.
    pub nat_floored: bool,
}

/// Fraction of designs that bind more strongly than their wildtype.
pub fn metric_imp(designs: &[DesignRecord]) -> f64 {
    if designs.is_empty() {
        return 0.0;
    }
    designs.iter().filter(|d| d.oracle_dg < d.wildtype_dg).count() as f64 / designs.len() as f64
}

/// Mean CDR identity over design pairs from different antigens.
pub fn metric_sim(designs: &[DesignRecord], cdr_positions: &[usize]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (a, da) in designs.iter().enumerate() {
        for db in &designs[a + 1..] {
            if da.antigen_id == db.antigen_id {
                continue;
            }
            let same = cdr_positions
                .iter()
                .filter(|&&p| da.sequence.get(p) == db.sequence.get(p))
                .count();
            total += same as f64 / cdr_positions.len() as f64;
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

/// Inverse perplexity of a sequence under the natural-antibody chain.
pub fn inverse_perplexity(world: &ToyWorld, seq: &Sequence) -> (f64, bool) {
    let (lp, floored) = world.natural_log_probs(seq, NAT_FLOOR);
    (stats::mean(&lp).exp(), floored)
}

pub fn metric_nat(world: &ToyWorld, designs: &[DesignRecord]) -> (f64, bool) {
    if designs.is_empty() {
        return (0.0, false);
    }
    let mut floored = false;
    let v: Vec<f64> = designs
        .iter()
        .map(|d| {
            let (n, f) = inverse_perplexity(world, &d.sequence);
            floored |= f;
            n
        })
        .collect();
    (stats::mean(&v), floored)
}

pub fn metrics(world: &ToyWorld, ds: &Dataset, designs: &[DesignRecord]) -> MetricsReport {
    let mut by_antigen: BTreeMap<usize, Vec<DesignRecord>> = BTreeMap::new();
    for d in designs {
        by_antigen.entry(d.antigen_id).or_default().push(d.clone());
    }
    let per_antigen = by_antigen
        .iter()
        .map(|(&antigen_id, ds)| AntigenMetrics {
            antigen_id,
            imp: metric_imp(ds),
            nat: metric_nat(world, ds).0,
            designs: ds.len(),
        })
        .collect();
    let (nat, nat_floored) = metric_nat(world, designs);
    MetricsReport {
        imp: metric_imp(designs),
        sim: metric_sim(designs, &ds.spec.cdr_positions),
        nat,
        per_antigen,
        nat_floored,
    }
}

/// Re-scores designs with the oracle and computes per-seed metrics. Fails on
/// unknown antigens and on designs that change framework positions.
pub fn evaluate_designs(world: &ToyWorld, ds: &Dataset, designs: &[DesignRecord]) -> Result<Vec<(u64, MetricsReport)>> {
    if designs.is_empty() {
        return Err(Error::Empty("designs"));
    }
    let mut by_seed: BTreeMap<u64, Vec<DesignRecord>> = BTreeMap::new();
    for d in designs {
        if d.antigen_id >= ds.antigens.len() {
            return Err(Error::UnknownId {
                kind: "antigen",
                id: d.antigen_id,
            });
        }
        let wt = &ds.antibodies[wildtype_id(ds, d.antigen_id)];
        if d.sequence.len() != wt.len() {
            return Err(Error::ShapeMismatch {
                expected: wt.len(),
                actual: d.sequence.len(),
            });
        }
        if let Some(&p) = wt
            .diff_positions(&d.sequence)
            .iter()
            .find(|p| !ds.spec.cdr_positions.contains(p))
        {
            return Err(Error::format(
                "designs",
                format!("design for antigen {} mutates framework position {p}", d.antigen_id),
            ));
        }
        let mut d = d.clone();
        d.oracle_dg = world.binding_energy(&ds.layout_for(&d.sequence, d.antigen_id));
        d.wildtype_dg = world.binding_energy(&ds.layout_for(wt, d.antigen_id));
        by_seed.entry(d.seed).or_default().push(d);
    }
    Ok(by_seed.into_iter().map(|(s, v)| (s, metrics(world, ds, &v))).collect())
}

/// Result of [`run_designs`]: every seed's designs and per-seed metrics.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub designs: Vec<DesignRecord>,
    pub proposals: Vec<(u64, ProposalRow)>,
    pub metrics: Vec<(u64, MetricsReport)>,
}

impl RunOutcome {
    pub fn median(&self, f: impl Fn(&MetricsReport) -> f64) -> f64 {
        let v: Vec<f64> = self.metrics.iter().map(|(_, m)| f(m)).collect();
        stats::median(&v)
    }
}

pub fn run_designs(art: &Artifacts, cfg: &Config) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut designs = Vec::new();
    let mut proposals = Vec::new();
    let mut metrics_rows = Vec::new();
    for &seed in &cfg.run.seeds {
        let runs = run_seed(art, cfg, seed)?;
        let seed_designs: Vec<DesignRecord> = runs.iter().flat_map(|r| r.designs.iter().cloned()).collect();
        metrics_rows.push((seed, metrics(&art.world, &art.dataset, &seed_designs)));
        designs.extend(seed_designs);
        proposals.extend(runs.into_iter().flat_map(|r| r.proposals).map(|p| (seed, p)));
    }
    Ok(RunOutcome {
        designs,
        proposals,
        metrics: metrics_rows,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    OneIteration,
    NoPc,
    NoFlow,
    NoEnergy,
    NoSelection,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::OneIteration,
        Variant::NoPc,
        Variant::NoFlow,
        Variant::NoEnergy,
        Variant::NoSelection,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::OneIteration => "one_iteration",
            Variant::NoPc => "no_pc",
            Variant::NoFlow => "no_flow",
            Variant::NoEnergy => "no_energy",
            Variant::NoSelection => "no_selection",
        }
    }

    pub fn flags(self) -> AblationFlags {
        let mut f = AblationFlags::default();
        match self {
            Variant::Full => {}
            Variant::OneIteration => f.one_iteration = true,
            Variant::NoPc => f.no_pc = true,
            Variant::NoFlow => f.no_flow = true,
            Variant::NoEnergy => f.no_energy = true,
            Variant::NoSelection => f.no_selection = true,
        }
        f
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub metrics: MetricsReport,
}

/// Every variant over the configured seeds; flags already set in `cfg` are
/// replaced by each variant's own.
pub fn run_ablations(art: &Artifacts, cfg: &Config) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for v in Variant::ALL {
        let mut c = cfg.clone();
        c.run.ablation = v.flags();
        let out = run_designs(art, &c)?;
        rows.extend(out.metrics.into_iter().map(|(seed, metrics)| AblationRow {
            variant: v,
            seed,
            metrics,
        }));
    }
    Ok(rows)
}

/// Median metric of one variant.
pub fn ablation_median(rows: &[AblationRow], v: Variant, f: impl Fn(&MetricsReport) -> f64) -> f64 {
    let xs: Vec<f64> = rows.iter().filter(|r| r.variant == v).map(|r| f(&r.metrics)).collect();
    stats::median(&xs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParameter {
    Gamma,
    Steps,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    /// Medians over seeds.
    pub imp: f64,
    pub sim: f64,
    pub nat: f64,
    pub imp_norm: f64,
    pub sim_norm: f64,
    pub nat_norm: f64,
}

/// `x / at_default`; a zero default gives 1 for a zero value and infinity
/// otherwise.
pub fn normalize(x: f64, at_default: f64) -> f64 {
    if at_default != 0.0 {
        x / at_default
    } else if x == 0.0 {
        1.0
    } else {
        f64::INFINITY
    }
}

pub fn run_sweep(art: &Artifacts, cfg: &Config, parameter: SweepParameter) -> Result<Vec<SweepRow>> {
    let values: Vec<f64> = match parameter {
        SweepParameter::Gamma => cfg.sweep.gamma.clone(),
        SweepParameter::Steps => cfg.sweep.steps.iter().map(|&s| s as f64).collect(),
    };
    let default = match parameter {
        SweepParameter::Gamma => cfg.sweep.default_gamma,
        SweepParameter::Steps => cfg.sweep.default_steps as f64,
    };
    if !values.contains(&default) {
        return Err(Error::InvalidConfig(format!(
            "sweep grid {values:?} must contain the default {default}"
        )));
    }
    let mut raw = Vec::with_capacity(values.len());
    for &v in &values {
        let mut c = cfg.clone();
        match parameter {
            SweepParameter::Gamma => {
                c.run.guidance.gamma = v;
                c.run.schedule = ScheduleConfig::with_steps(cfg.sweep.default_steps)?;
            }
            SweepParameter::Steps => {
                c.run.guidance.gamma = cfg.sweep.default_gamma;
                c.run.schedule = ScheduleConfig::with_steps(v as usize)?;
            }
        }
        let out = run_designs(art, &c)?;
        raw.push((v, out.median(|m| m.imp), out.median(|m| m.sim), out.median(|m| m.nat)));
    }
    let d = *raw.iter().find(|r| r.0 == default).expect("default in grid");
    Ok(raw
        .into_iter()
        .map(|(value, imp, sim, nat)| SweepRow {
            value,
            imp,
            sim,
            nat,
            imp_norm: normalize(imp, d.1),
            sim_norm: normalize(sim, d.2),
            nat_norm: normalize(nat, d.3),
        })
        .collect())
}

pub fn write_designs(path: &Path, designs: &[DesignRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "seed",
        "antigen_id",
        "rank",
        "sequence",
        "oracle_dg",
        "wildtype_dg",
        "seq_score",
        "iteration",
        "mutations",
        "fallback",
    ])?;
    for d in designs {
        w.write_record([
            d.seed.to_string(),
            d.antigen_id.to_string(),
            d.rank.to_string(),
            d.sequence.to_string(),
            format_f64(d.oracle_dg),
            format_f64(d.wildtype_dg),
            format_f64(d.seq_score),
            d.iteration.to_string(),
            d.mutations.clone(),
            (d.fallback as u8).to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `epoch, mean_loss` rows, epochs counted from 1.
pub fn write_loss_curve(path: &Path, curve: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "mean_loss"])?;
    for (i, l) in curve.iter().enumerate() {
        w.write_record([(i + 1).to_string(), format_f64(*l)])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_designs(path: &Path) -> Result<Vec<DesignRecord>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    let bad = |what: &str| Error::format("designs", format!("bad {what}"));
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        if row.len() != 10 {
            return Err(Error::format(
                "designs",
                format!("expected 10 columns, found {}", row.len()),
            ));
        }
        let num = |i: usize| {
            row[i]
                .parse::<f64>()
                .map_err(|_| bad(&format!("number in column {}", i + 1)))
        };
        let int = |i: usize| {
            row[i]
                .parse::<u64>()
                .map_err(|_| bad(&format!("integer in column {}", i + 1)))
        };
        out.push(DesignRecord {
            seed: int(0)?,
            antigen_id: int(1)? as usize,
            rank: int(2)? as usize,
            sequence: row[3].parse()?,
            oracle_dg: num(4)?,
            wildtype_dg: num(5)?,
            seq_score: num(6)?,
            iteration: int(7)? as usize,
            mutations: row[8].to_string(),
            fallback: int(9)? != 0,
        });
    }
    Ok(out)
}

pub fn write_metrics(path: &Path, rows: &[(String, u64, MetricsReport)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["variant", "seed", "imp", "sim", "nat", "nat_floored"])?;
    for (variant, seed, m) in rows {
        w.write_record([
            variant.clone(),
            seed.to_string(),
            format_f64(m.imp),
            format_f64(m.sim),
            format_f64(m.nat),
            (m.nat_floored as u8).to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-seed rows followed by one `median` row per variant.
pub fn write_ablation(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["variant", "seed", "imp", "sim", "nat"])?;
    for r in rows {
        w.write_record([
            r.variant.name().to_string(),
            r.seed.to_string(),
            format_f64(r.metrics.imp),
            format_f64(r.metrics.sim),
            format_f64(r.metrics.nat),
        ])?;
    }
    for v in Variant::ALL {
        if rows.iter().any(|r| r.variant == v) {
            w.write_record([
                v.name().to_string(),
                "median".into(),
                format_f64(ablation_median(rows, v, |m| m.imp)),
                format_f64(ablation_median(rows, v, |m| m.sim)),
                format_f64(ablation_median(rows, v, |m| m.nat)),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_sweep(path: &Path, parameter: SweepParameter, rows: &[SweepRow]) -> Result<()> {
    let name = match parameter {
        SweepParameter::Gamma => "gamma",
        SweepParameter::Steps => "steps",
    };
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([name, "imp", "sim", "nat", "imp_norm", "sim_norm", "nat_norm"])?;
    for r in rows {
        w.write_record([
            r.value.to_string(),
            format_f64(r.imp),
            format_f64(r.sim),
            format_f64(r.nat),
            format_f64(r.imp_norm),
            format_f64(r.sim_norm),
            format_f64(r.nat_norm),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
