//! Mini-batch training loop.

use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{BatchSampler, TripletRecord};
use crate::error::{Error, Result};
use crate::model::{CirModel, LossBreakdown, LossOptions};
use crate::optim::Adam;

/// Mean loss terms over one epoch. Epoch 0 is measured before any update.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: u64,
    pub batches: usize,
    pub loss: LossBreakdown,
}

impl EpochLog {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("epoch log serializes")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub epochs: Vec<EpochLog>,
    pub steps: u64,
}

impl TrainSummary {
    pub fn initial_loss(&self) -> f64 {
        self.epochs[0].loss.total
    }

    pub fn final_loss(&self) -> f64 {
        self.epochs
            .last()
            .expect("epoch 0 always logged")
            .loss
            .total
    }
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len() as f64;
    let opt_mean = |f: fn(&LossBreakdown) -> Option<f64>| {
        parts.iter().map(f).sum::<Option<f64>>().map(|s| s / n)
    };
    LossBreakdown {
        qtm: parts.iter().map(|p| p.qtm).sum::<f64>() / n,
        tbia: opt_mean(|p| p.tbia),
        ctr: opt_mean(|p| p.ctr),
        total: parts.iter().map(|p| p.total).sum::<f64>() / n,
    }
}

fn with_context(e: Error, epoch: usize, batch: usize) -> Error {
    if let Error::NonFinite { op, node } = &e {
        log::error!(
            "training aborted: non-finite {op} output at node {node}, epoch {epoch}, batch {batch}"
        );
    }
    e
}

/// Trains `model` on `records` with Adam. `on_epoch` sees every epoch log as
/// soon as it is complete, starting with the pre-training epoch 0.
pub fn train<F>(
    model: &mut CirModel,
    records: &[TripletRecord],
    cfg: &RunConfig,
    mut on_epoch: F,
) -> Result<TrainSummary>
where
    F: FnMut(&EpochLog) -> Result<()>,
{
    let t = &cfg.training;
    let opts: LossOptions = cfg.loss_options();
    let sampler = BatchSampler::new(records, t.batch_size, t.seed)?;
    if sampler.batches_per_epoch() == 0 {
        return Err(Error::Config(format!(
            "batch size {} exceeds the {} training records",
            t.batch_size,
            records.len()
        )));
    }
    let mut adam = Adam::new(t.learning_rate);
    let mut epochs = Vec::with_capacity(t.epochs + 1);

    let mut parts = Vec::new();
    for (b, batch) in sampler.epoch(0).enumerate() {
        let mut g = crate::autodiff::Graph::new();
        let l = model
            .batch_loss(&mut g, &batch.records, &opts)
            .map_err(|e| with_context(e, 0, b))?;
        parts.push(l.breakdown(&g));
    }
    let log0 = EpochLog {
        epoch: 0,
        steps: 0,
        batches: parts.len(),
        loss: mean_breakdown(&parts),
    };
    on_epoch(&log0)?;
    epochs.push(log0);

    for epoch in 1..=t.epochs {
        parts.clear();
        for (b, batch) in sampler.epoch(epoch as u64).enumerate() {
            model.store.zero_grads();
            let l = model
                .accumulate_gradients(&batch.records, &opts)
                .map_err(|e| with_context(e, epoch, b))?;
            adam.step(&mut model.store);
            parts.push(l);
        }
        let log = EpochLog {
            epoch,
            steps: adam.steps_taken(),
            batches: parts.len(),
            loss: mean_breakdown(&parts),
        };
        log::info!("epoch {epoch}: loss {:.5}", log.loss.total);
        on_epoch(&log)?;
        epochs.push(log);
    }
    model.store.zero_grads();
    Ok(TrainSummary {
        epochs,
        steps: adam.steps_taken(),
    })
}
