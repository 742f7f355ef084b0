//! Adam training of a [`ToyModel`].

use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, ToyModel};
use crate::autograd::Tape;
use crate::error::{domain_err, Error, Result};
use crate::matcore::{Matrix, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: Real,
    pub batch_size: usize,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    /// Seed of the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            lr: 1e-3,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss of each epoch, taken before each step's update.
    pub epoch_loss: Vec<Real>,
    /// Held-out accuracy after the last epoch.
    pub final_accuracy: Real,
    pub train_accuracy: Real,
    pub wall_time_s: Real,
    pub seed: u64,
    /// Largest `‖layer output‖_F / ‖layer input‖_F` seen during training.
    pub max_layer_norm_ratio: Real,
}

struct Adam {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
}

impl Adam {
    fn new(params: &[&mut Matrix]) -> Self {
        Adam {
            m: params
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect(),
            v: params
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: Vec<&mut Matrix>, grads: &[Matrix], cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (i, p) in params.into_iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let it = p
                .as_mut_slice()
                .iter_mut()
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
                .zip(grads[i].as_slice());
            for (((w, mi), vi), &g) in it {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *w -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
    }
}

/// Fraction of `data` classified correctly.
pub fn accuracy(model: &ToyModel, data: &Dataset) -> Result<Real> {
    if data.is_empty() {
        return Err(domain_err!("accuracy of an empty dataset"));
    }
    let mut correct = 0;
    for (xs, ys) in data.inputs.chunks(64).zip(data.labels.chunks(64)) {
        let refs: Vec<&Matrix> = xs.iter().collect();
        let pred = model.predict(&refs)?;
        correct += pred.iter().zip(ys).filter(|(p, y)| p == y).count();
    }
    Ok(correct as Real / data.len() as Real)
}

/// Train with Adam on shuffled minibatches, then score on `test`.
pub fn train(
    model: &mut ToyModel,
    train_set: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if train_set.is_empty() || cfg.batch_size == 0 {
        return Err(domain_err!("need a non-empty training set and batch size"));
    }
    if !(cfg.lr >= 0.0) {
        return Err(domain_err!("learning rate must be ≥ 0"));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&model.params_mut());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut max_ratio: Real = 0.0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let xs: Vec<&Matrix> = batch.iter().map(|&i| &train_set.inputs[i]).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| train_set.labels[i]).collect();
            let mut t = Tape::new();
            let x = t.constant(model.stack(&xs)?);
            let vars = model.register(&mut t, true);
            let mut ratios = Vec::new();
            let z = model.forward(&mut t, &vars, x, batch.len(), Some(&mut ratios))?;
            let loss = t.cross_entropy_with_logits(z, &ys)?;
            let lv = t.value(loss).get(0, 0);
            if !lv.is_finite() {
                return Err(Error::Numeric {
                    step: epoch,
                    msg: format!("training loss diverged in epoch {epoch}"),
                });
            }
            max_ratio = ratios.into_iter().fold(max_ratio, Real::max);
            total += lv * batch.len() as Real;
            let grads = t.backward(loss)?;
            let gs = vars
                .all()
                .into_iter()
                .map(|v| grads.wrt(v))
                .collect::<Result<Vec<_>>>()?;
            adam.step(model.params_mut(), &gs, cfg);
        }
        epoch_loss.push(total / train_set.len() as Real);
    }

    Ok(TrainReport {
        epoch_loss,
        final_accuracy: accuracy(model, test)?,
        train_accuracy: accuracy(model, train_set)?,
        wall_time_s: start.elapsed().as_secs_f64(),
        seed: cfg.seed,
        max_layer_norm_ratio: max_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_synthetic_task, TaskConfig, ToyModelConfig};

    fn tiny() -> ToyModelConfig {
        ToyModelConfig {
            grid_h: 4,
            grid_w: 4,
            d_e: 8,
            heads: 2,
            layers: 1,
            m: 4,
            ..ToyModelConfig::default()
        }
    }

    #[test]
    fn zero_lr_keeps_loss_constant() {
        let cfg = tiny();
        let data = make_synthetic_task(&cfg, &TaskConfig::default(), 8, 1).unwrap();
        let mut model = ToyModel::new(cfg).unwrap();
        let before = model.clone();
        let tc = TrainConfig {
            epochs: 3,
            lr: 0.0,
            batch_size: 5,
            ..TrainConfig::default()
        };
        let rep = train(&mut model, &data, &data, &tc).unwrap();
        assert_eq!(model, before);
        for l in &rep.epoch_loss {
            assert!((l - rep.epoch_loss[0]).abs() <= 1e-12);
        }
    }

    #[test]
    fn same_seed_same_curve() {
        let cfg = tiny();
        let data = make_synthetic_task(&cfg, &TaskConfig::default(), 8, 2).unwrap();
        let tc = TrainConfig {
            epochs: 3,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = ToyModel::new(cfg.clone()).unwrap();
            train(&mut m, &data, &data, &tc).unwrap().epoch_loss
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn noiseless_task_is_learned() {
        let cfg = tiny();
        let task = TaskConfig {
            sigma: 0.0,
            ..TaskConfig::default()
        };
        let data = make_synthetic_task(&cfg, &task, 16, 3).unwrap();
        let test = make_synthetic_task(&cfg, &task, 8, 4).unwrap();
        let mut model = ToyModel::new(cfg).unwrap();
        let tc = TrainConfig {
            epochs: 30,
            lr: 1e-2,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let rep = train(&mut model, &data, &test, &tc).unwrap();
        assert_eq!(rep.final_accuracy, 1.0, "{rep:?}");
    }

    #[test]
    fn diverging_loss_is_reported() {
        let cfg = tiny();
        let mut data = make_synthetic_task(&cfg, &TaskConfig::default(), 2, 5).unwrap();
        data.inputs[0][(0, 0)] = Real::NAN;
        let mut model = ToyModel::new(cfg).unwrap();
        let tc = TrainConfig {
            epochs: 1,
            batch_size: 64,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&mut model, &data, &data, &tc),
            Err(Error::Numeric { step: 1, .. })
        ));
    }
}
