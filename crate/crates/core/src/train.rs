//! Cross-entropy loss, Adam and the mini-batch training loop.
//!
//! Each sample gets its own tape. Per-sample gradients are computed in
//! parallel and then summed in batch order, so results do not depend on the
//! number of worker threads.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::{forward_graph, init_params, ModelConfig};
use crate::params::ModelParams;
use crate::tensor::Tensor;

/// Added inside the log so a zero probability gives a finite loss.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive and finite"));
        }
        for b in [self.adam_beta1, self.adam_beta2] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid("adam betas must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::invalid("adam eps must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        Ok(())
    }
}

/// `-ln(probs[label] + 1e-12)` as a scalar node.
pub fn cross_entropy(graph: &mut Graph, probs: NodeId, label: usize) -> Result<NodeId> {
    let classes = graph.value(probs).numel();
    if label >= classes {
        return Err(Error::ClassOutOfRange { index: label, classes });
    }
    let p = graph.select(probs, label)?;
    let p = graph.add_scalar(p, LOG_EPS)?;
    let l = graph.ln(p)?;
    graph.scale(l, -1.0)
}

/// Adam moments for every named parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: ModelParams,
    pub v: ModelParams,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: ModelParams = params
            .iter()
            .map(|(k, t)| (k.to_string(), Tensor::zeros(t.shape()).expect("params have valid shapes")))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut ModelParams, grads: &ModelParams, state: &mut AdamState, config: &TrainConfig) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads.get(name)?;
        if g.shape() != p.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let lr = config.learning_rate;
    for (name, p) in params.iter_mut() {
        let g = grads.get(name)?.data();
        let m = state.m.get_mut(name)?.data_mut();
        let v = state.v.get_mut(name)?.data_mut();
        for (((w, &gk), mk), vk) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mk = b1 * *mk + (1.0 - b1) * gk;
            *vk = b2 * *vk + (1.0 - b2) * gk * gk;
            *w -= lr * (*mk / c1) / ((*vk / c2).sqrt() + config.adam_eps);
        }
    }
    Ok(())
}

/// Loss and parameter gradients for one labelled image.
pub fn sample_gradient(params: &ModelParams, config: &ModelConfig, image: &Tensor, label: usize) -> Result<(f64, ModelParams)> {
    let mut graph = Graph::new();
    let bound = params.bind(&mut graph, true);
    let x = graph.constant(image.clone());
    let out = forward_graph(&mut graph, &bound, config, x)?;
    let loss = cross_entropy(&mut graph, out.probs, label)?;
    let value = graph.value(loss).data()[0];
    graph.backward(loss)?;
    Ok((value, bound.gradients(&graph)))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Mean training loss of each epoch.
    pub loss_history: Vec<f64>,
}

pub fn train(dataset: &Dataset, model_config: &ModelConfig, train_config: &TrainConfig) -> Result<TrainOutcome> {
    let all: Vec<usize> = (0..dataset.len()).collect();
    train_subset(dataset, &all, model_config, train_config)
}

/// Trains a fresh model on `dataset[indices]`.
pub fn train_subset(
    dataset: &Dataset,
    indices: &[usize],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_config.validate()?;
    if indices.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= dataset.len()) {
        return Err(Error::invalid(format!("sample index {bad} is out of range")));
    }
    for &i in indices {
        model_config.check_image(&dataset.images[i])?;
        if dataset.labels[i] >= model_config.num_classes() {
            return Err(Error::ClassOutOfRange {
                index: dataset.labels[i],
                classes: model_config.num_classes(),
            });
        }
    }
    let mut params = init_params(model_config, train_config.seed)?;
    let mut state = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);
    rng.set_stream(1);
    let mut order = indices.to_vec();
    let mut loss_history = Vec::with_capacity(train_config.epochs);
    for _ in 0..train_config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(train_config.batch_size) {
            let results: Vec<(f64, ModelParams)> = batch
                .par_iter()
                .map(|&i| sample_gradient(&params, model_config, &dataset.images[i], dataset.labels[i]))
                .collect::<Result<_>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut iter = results.into_iter();
            let (first_loss, mut grads) = iter.next().expect("chunks are nonempty");
            epoch_loss += first_loss;
            for (loss, g) in iter {
                epoch_loss += loss;
                for ((_, acc), (_, gk)) in grads.iter_mut().zip(g.iter()) {
                    acc.data_mut().iter_mut().zip(gk.data()).for_each(|(a, b)| *a += b);
                }
            }
            grads.iter_mut().for_each(|(_, t)| t.data_mut().iter_mut().for_each(|v| *v *= scale));
            adam_step(&mut params, &grads, &mut state, train_config)?;
        }
        loss_history.push(epoch_loss / order.len() as f64);
    }
    Ok(TrainOutcome { params, loss_history })
}
