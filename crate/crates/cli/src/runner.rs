//! Data loading, single training runs and parameter checkpoints.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use clarity_core::autodiff::ParamStore;
use clarity_core::conditioning::ConditionOracle;
use clarity_core::dataset::{read_dataset, synth_dataset, Dataset, Sample};
use clarity_core::io::{read_tensor, write_tensor};
use clarity_core::network::ClarityNet;
use clarity_core::train::{evaluate, train, Captioner, EpochLog, Evaluation};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

/// Loads the dataset directory, or synthesises one when no path is set.
pub fn load_data(cfg: &RunConfig) -> CliResult<Dataset> {
    match &cfg.dataset {
        Some(path) => {
            if !path.is_dir() {
                return Err(CliError::Usage(format!("dataset directory {} does not exist", path.display())));
            }
            read_dataset(path).map_err(|e| CliError::Usage(e.to_string()))
        }
        None if cfg.synth_count > 0 => Ok(synth_dataset(cfg.synth_count, cfg.synth_size, cfg.synth_seed, cfg.test_fraction)?),
        None => Err(CliError::Usage("no dataset path and synth_count = 0".into())),
    }
}

pub fn captioner(cfg: &RunConfig) -> Captioner {
    Captioner {
        granularity: cfg.prompts,
        oracle: ConditionOracle {
            corruption: cfg.oracle_corruption,
            seed: cfg.seed,
        },
    }
}

/// Evaluation of the held-out split, or of the training split when there is
/// no held-out data.
pub fn evaluate_split(cfg: &RunConfig, model: &ClarityNet, store: &ParamStore<f32>, samples: &[Sample]) -> CliResult<Evaluation> {
    let captions = captioner(cfg).captions(samples)?;
    Ok(evaluate(model, store, samples, &captions, cfg.exclude_background, cfg.seed)?)
}

#[derive(Debug)]
pub struct RunOutcome {
    pub config: RunConfig,
    pub model: ClarityNet,
    pub params: ParamStore<f32>,
    pub logs: Vec<EpochLog>,
    pub evaluation: Evaluation,
    pub elapsed: Duration,
}

/// Builds the model from `cfg.seed`, trains on `data.train` and evaluates on
/// `data.test` (falling back to the training split if the test split is
/// empty).
pub fn run(cfg: &RunConfig, data: &Dataset, on_epoch: impl FnMut(&EpochLog)) -> CliResult<RunOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let mut params = ParamStore::<f32>::new();
    let model = ClarityNet::new(cfg.model_config(), &mut params, cfg.seed)?;
    let captions = captioner(cfg).captions(&data.train)?;
    let logs = train(&model, &mut params, &data.train, &captions, &cfg.train_config(), on_epoch)?;
    let held_out = if data.test.is_empty() { &data.train } else { &data.test };
    let evaluation = evaluate_split(cfg, &model, &params, held_out)?;
    Ok(RunOutcome {
        config: cfg.clone(),
        model,
        params,
        logs,
        evaluation,
        elapsed: start.elapsed(),
    })
}

/// Writes one `.cltf` per parameter into `dir`.
pub fn save_params(dir: &Path, params: &ParamStore<f32>) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))?;
    for (_, p) in params.iter() {
        write_tensor(dir.join(format!("{}.cltf", p.name)), &p.tensor)?;
    }
    Ok(())
}

/// Rebuilds the model for `cfg` and overwrites its parameters from `dir`.
pub fn load_model(cfg: &RunConfig, dir: &Path) -> CliResult<(ClarityNet, ParamStore<f32>)> {
    let mut params = ParamStore::<f32>::new();
    let model = ClarityNet::new(cfg.model_config(), &mut params, cfg.seed)?;
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let name = params.get(id).name.clone();
        let path = dir.join(format!("{name}.cltf"));
        let t = read_tensor(&path)
            .map_err(|e| CliError::Usage(format!("cannot read parameter {}: {e}", path.display())))?
            .into_real::<f32>();
        let slot = &mut params.get_mut(id).tensor;
        if t.shape() != slot.shape() {
            return Err(CliError::Usage(format!(
                "parameter {name} has shape {:?}, model expects {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    Ok((model, params))
}
