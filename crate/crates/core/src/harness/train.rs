//! The shared epoch loop: seeded shuffling, Adam, validation and early stopping.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::{Bound, ParamSet};
use crate::rng::Rng;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopSettings {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

/// One line of the history file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub steps: u64,
    pub train_loss: f64,
    pub val_metric: f64,
    pub metric: String,
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_params: ParamSet,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Appends one JSON object per line and flushes, so every prefix is valid.
pub struct HistoryWriter {
    out: Option<(BufWriter<File>, std::path::PathBuf)>,
}

impl HistoryWriter {
    pub fn create(path: Option<&Path>) -> Result<Self> {
        let out = match path {
            Some(p) => {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                let f = File::create(p).map_err(|e| Error::io(p, e))?;
                Some((BufWriter::new(f), p.to_path_buf()))
            }
            None => None,
        };
        Ok(Self { out })
    }

    pub fn append(&mut self, rec: &EpochRecord) -> Result<()> {
        if let Some((w, path)) = self.out.as_mut() {
            let line = serde_json::to_string(rec).expect("record serializes");
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io(path.clone(), e))?;
        }
        Ok(())
    }
}

/// Train `params` over `n_items` examples.
///
/// `loss` builds the mean minibatch loss for the given item indices on a
/// fresh tape with the parameters bound as trainable; `validate` scores a
/// parameter set (higher is better). The best-scoring parameters are returned.
pub fn train_loop<L, V>(
    mut params: ParamSet,
    n_items: usize,
    settings: LoopSettings,
    metric: &str,
    history_path: Option<&Path>,
    mut loss: L,
    mut validate: V,
) -> Result<TrainOutcome>
where
    L: FnMut(&mut Tape<f32>, &Bound, &[usize], &mut Rng) -> Result<Var>,
    V: FnMut(&ParamSet) -> Result<f64>,
{
    if n_items == 0 {
        return Err(Error::InvalidArgument("no training examples".into()));
    }
    if settings.batch_size == 0 || settings.max_epochs == 0 || settings.patience == 0 {
        return Err(Error::Config("batch_size, max_epochs and patience must be positive".into()));
    }
    let mut root = Rng::new(settings.seed);
    let mut shuffle_rng = root.fork(1);
    let mut step_rng = root.fork(2);
    let mut adam = AdamState::new(settings.adam);
    let mut writer = HistoryWriter::create(history_path)?;
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamSet)> = None;
    let mut stale = 0;
    let mut order: Vec<usize> = (0..n_items).collect();
    let mut stopped_early = false;

    for epoch in 1..=settings.max_epochs {
        shuffle_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for batch in order.chunks(settings.batch_size) {
            let mut tape = Tape::<f32>::new();
            let bound = params.bind(&mut tape, true);
            let l = loss(&mut tape, &bound, batch, &mut step_rng)?;
            let value = tape.value(l).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::InvalidArgument(format!("loss became {value} in epoch {epoch}")));
            }
            loss_sum += value * batch.len() as f64;
            tape.backward(l)?;
            let grads = params.grads_from(&tape, &bound);
            adam_step(&mut params, &grads, &mut adam)?;
        }
        let val = validate(&params)?;
        let improved = best.as_ref().is_none_or(|(b, _, _)| val > *b);
        if improved {
            best = Some((val, epoch, params.clone()));
            stale = 0;
        } else {
            stale += 1;
        }
        let rec = EpochRecord {
            epoch,
            steps: adam.step,
            train_loss: loss_sum / n_items as f64,
            val_metric: val,
            metric: metric.to_string(),
            improved,
        };
        writer.append(&rec)?;
        history.push(rec);
        if stale >= settings.patience {
            stopped_early = epoch < settings.max_epochs;
            break;
        }
    }
    let (best_metric, best_epoch, best_params) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best_params,
        best_epoch,
        best_metric,
        history,
        stopped_early,
    })
}
