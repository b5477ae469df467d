//! Shared workloads for the benchmarks in `benches/`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pdsplat::decoder::{DecoderConfig, DecoderInput, KernelDecoder};
use pdsplat::nn::Params;
use pdsplat::ode::{DynamicsField, OdeConfig};
use pdsplat::scene::{generate_scene, Dataset, SceneSpec};
use pdsplat::trainer::{TrainConfig, Trainer};
use pdsplat::{Result, Tensor};

pub const GLOBAL_DIM: usize = 256;
pub const LOCAL_DIM: usize = 32;

/// Default-size decoder with its parameters, a global row and `rows` local rows.
pub fn decoder_workload(rows: usize) -> (KernelDecoder, Params, Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let dec = KernelDecoder {
        cfg: DecoderConfig::default(),
        global_dim: GLOBAL_DIM,
        local_dim: LOCAL_DIM,
        input: DecoderInput::Global,
        affine: true,
    };
    let params = dec.init_params(&mut rng);
    (dec, params, Tensor::full(&[1, GLOBAL_DIM], 0.1), Tensor::full(&[rows, LOCAL_DIM], 0.01))
}

/// Default-size dynamics field with its parameters and a start state.
pub fn ode_workload() -> (DynamicsField, Params, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let field = DynamicsField::new(GLOBAL_DIM, OdeConfig::default());
    let params = field.init_params(&mut rng);
    (field, params, Tensor::full(&[1, GLOBAL_DIM], 0.1))
}

/// Default scene and a trainer already in its joint phase, with the training frames.
pub fn joint_trainer(cfg: TrainConfig) -> Result<(Dataset, Trainer, Vec<usize>)> {
    let ds = generate_scene(&SceneSpec::default(), 0)?;
    let (train, _) = ds.split()?;
    let mut t = Trainer::new(cfg, &ds)?;
    t.begin_joint()?;
    Ok((ds, t, train))
}
