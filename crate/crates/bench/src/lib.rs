//! Fixtures for the benchmarks: untrained models of the default shapes and a
//! default-sized complex. Timings depend only on shapes, not on training.

use matura_core::flow::{FlowArch, FlowModel};
use matura_core::inverse_folding::{IfArch, InverseFoldModel};
use matura_core::predictors::{PredictorArch, SeqPredictor, StructPredictor};
use matura_core::rng::seeded;
use matura_core::world::{make_complex, uniform_sequence, ComplexLayout};
use matura_core::{Structure, ToyWorld};

pub struct Fixture {
    pub world: ToyWorld,
    pub layout: ComplexLayout,
    pub structure: Structure,
    pub flow: FlowModel,
    pub inverse_fold: InverseFoldModel,
    pub seq_predictor: SeqPredictor,
    pub struct_predictor: StructPredictor,
}

impl Fixture {
    pub fn new(seed: u64) -> Self {
        let mut rng = seeded(seed);
        let world = ToyWorld::default();
        let ab = uniform_sequence(24, &mut rng);
        let ag = uniform_sequence(16, &mut rng);
        let cdr: Vec<usize> = (17..23).collect();
        let (layout, seq) = make_complex(&ab, &ag, 4, &cdr).expect("valid complex");
        let structure = world.ensemble_sample(&seq, 0.1, &mut rng);
        Fixture {
            flow: FlowModel::new(FlowArch::default(), &mut rng),
            inverse_fold: InverseFoldModel::new(IfArch::default(), &mut rng),
            seq_predictor: SeqPredictor::new(PredictorArch::default(), &mut rng),
            struct_predictor: StructPredictor::new(PredictorArch::default(), &mut rng),
            world,
            layout,
            structure,
        }
    }
}
