//! Training objective and loop.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Var};
use crate::corpus::CorpusSample;
use crate::error::{Error, Result};
use crate::model::{MoEModel, Routing};
use crate::params::Adam;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossComponents {
    pub task: f64,
    /// Load-balancing loss summed over MoE layers.
    pub lb: f64,
    pub total: f64,
}

/// `N * Σ_e f_e * P_e` with `f_e` the fraction of tokens whose top-1 expert
/// is `e` and `P_e` the mean gate probability of `e`.
pub fn load_balancing_loss(top1_fraction: &[f64], mean_prob: &[f64]) -> f64 {
    let n = top1_fraction.len() as f64;
    n * top1_fraction.iter().zip(mean_prob).map(|(f, p)| f * p).sum::<f64>()
}

fn layer_lb(g: &mut Graph, routing: &Routing, num_experts: usize) -> Var {
    let rows = routing.decisions.len() as f64;
    let mut frac = Array2::zeros((1, num_experts));
    for d in &routing.decisions {
        frac[[0, d.top1]] += 1.0 / rows;
    }
    let mean = g.mean_rows(routing.probs);
    let prod = g.mul_const(mean, frac);
    let s = g.sum_all(prod);
    g.scale(s, num_experts as f64)
}

/// Graph nodes of one loss evaluation.
pub struct LossGraph {
    pub task: Var,
    pub lb: Option<Var>,
    pub total: Var,
    pub logits: Var,
    pub targets: Vec<usize>,
}

pub fn build_loss(model: &MoEModel, g: &mut Graph, batch: &[CorpusSample]) -> Result<LossGraph> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let srcs: Vec<&[usize]> = batch.iter().map(|s| s.src_tokens.as_slice()).collect();
    let tgts: Vec<&[usize]> = batch.iter().map(|s| s.decoder_input()).collect();
    let targets: Vec<usize> = batch.iter().flat_map(|s| s.decoder_output()).collect();
    let src_lengths: Vec<usize> = srcs.iter().map(|s| s.len()).collect();
    let identity: Vec<usize> = (0..batch.len()).collect();
    let (enc, mut routing) = model.encode(g, &srcs, None)?;
    let (logits, dec_routing) = model.decode(g, enc, &src_lengths, &tgts, &identity, None)?;
    routing.extend(dec_routing);
    let task = g.cross_entropy(logits, targets.clone(), model.config.label_smoothing);
    let mut lb = None;
    for r in &routing {
        let l = layer_lb(g, r, model.config.num_experts);
        lb = Some(match lb {
            None => l,
            Some(acc) => g.add(acc, l),
        });
    }
    let total = match lb {
        Some(l) => {
            let weighted = g.scale(l, model.config.lb_loss_coeff);
            g.add(task, weighted)
        }
        None => task,
    };
    Ok(LossGraph {
        task,
        lb,
        total,
        logits,
        targets,
    })
}

/// Loss components and parameter gradients of the total loss.
pub fn training_step(model: &MoEModel, batch: &[CorpusSample]) -> Result<(LossComponents, Gradients)> {
    let mut g = Graph::new();
    let lg = build_loss(model, &mut g, batch)?;
    let comps = LossComponents {
        task: g.value(lg.task)[[0, 0]],
        lb: lg.lb.map_or(0.0, |v| g.value(v)[[0, 0]]),
        total: g.value(lg.total)[[0, 0]],
    };
    Ok((comps, g.backward(lg.total)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop once teacher-forced validation token accuracy reaches this.
    pub target_accuracy: f64,
    /// Cap on wall-clock training time in seconds.
    #[serde(default)]
    pub max_seconds: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 8,
            max_epochs: 40,
            target_accuracy: 0.97,
            max_seconds: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_task_loss: f64,
    pub mean_lb_loss: f64,
    pub valid_accuracy: f64,
}

/// Teacher-forced next-token accuracy over target words and end-of-sequence.
pub fn token_accuracy(model: &MoEModel, samples: &[CorpusSample], batch_size: usize) -> Result<f64> {
    let (mut correct, mut total) = (0usize, 0usize);
    for chunk in samples.chunks(batch_size.max(1)) {
        let mut g = Graph::new();
        let lg = build_loss(model, &mut g, chunk)?;
        let logits = g.value(lg.logits);
        for (row, &t) in logits.rows().into_iter().zip(&lg.targets) {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            correct += usize::from(best == t);
            total += 1;
        }
    }
    Ok(correct as f64 / total.max(1) as f64)
}

/// Trains until the validation accuracy target, the epoch cap or the time
/// cap is reached. Deterministic for a fixed seed.
pub fn train(
    model: &mut MoEModel,
    train: &[CorpusSample],
    valid: &[CorpusSample],
    config: &TrainConfig,
    seed: u64,
) -> Result<Vec<EpochLog>> {
    if train.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let start = std::time::Instant::now();
    let mut opt = Adam::new(&model.params, config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut logs = Vec::new();
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let (mut task, mut lb, mut steps) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<CorpusSample> = chunk.iter().map(|&i| train[i].clone()).collect();
            let (loss, grads) = training_step(model, &batch)?;
            opt.update(&mut model.params, &grads.by_param);
            task += loss.task;
            lb += loss.lb;
            steps += 1;
        }
        let valid_accuracy = token_accuracy(model, valid, 64)?;
        let log = EpochLog {
            epoch,
            mean_task_loss: task / steps as f64,
            mean_lb_loss: lb / steps as f64,
            valid_accuracy,
        };
        log::info!(
            "epoch {epoch}: task {:.4} lb {:.4} valid acc {:.4} ({:.1}s)",
            log.mean_task_loss,
            log.mean_lb_loss,
            valid_accuracy,
            start.elapsed().as_secs_f64()
        );
        logs.push(log);
        if valid_accuracy >= config.target_accuracy {
            break;
        }
        if config.max_seconds.is_some_and(|m| start.elapsed().as_secs_f64() > m) {
            break;
        }
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_routing_gives_unit_lb() {
        for n in [2usize, 4, 8, 128] {
            let u = vec![1.0 / n as f64; n];
            assert!((load_balancing_loss(&u, &u) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn collapsed_routing_gives_n() {
        let n = 8;
        let mut f = vec![0.0; n];
        f[3] = 1.0;
        assert!((load_balancing_loss(&f, &f) - n as f64).abs() < 1e-12);
    }
}
