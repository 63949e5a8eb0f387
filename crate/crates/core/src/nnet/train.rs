use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::network::{argmax, batch_from_rasters, forward, loss_and_grad, NetworkParams, NetworkSpec};
use super::tensor::{Scalar, Tensor};
use super::NnetError;
use crate::imagecore::RasterImage;
use crate::pretext::PretextExample;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = NnetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(Self::Adam),
            "sgd" => Ok(Self::Sgd),
            _ => Err(NnetError::InvalidConfig(format!("unknown optimizer {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 1e-4,
            epochs: 60,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnetError> {
        if self.batch_size == 0 {
            return Err(NnetError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(NnetError::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.epochs == 0 {
            return Err(NnetError::InvalidConfig("epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Adam (β1 = 0.9, β2 = 0.999, ε = 1e-8) or plain SGD over a parameter set.
pub struct Optimizer<T: Scalar> {
    kind: OptimizerKind,
    lr: T,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, learning_rate: f64, params: &NetworkParams<T>) -> Self {
        let shapes: Vec<usize> = params.named_tensors().iter().map(|(_, t)| t.len()).collect();
        let zeros = || shapes.iter().map(|&n| vec![T::zero(); n]).collect::<Vec<_>>();
        Self {
            kind,
            lr: T::lit(learning_rate),
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut NetworkParams<T>, grads: &NetworkParams<T>) {
        self.step += 1;
        let grads = grads.named_tensors();
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, (_, g)) in params.tensors_mut().into_iter().zip(grads) {
                    for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= self.lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (T::lit(0.9), T::lit(0.999), T::lit(1e-8));
                let c1 = T::one() - b1.powi(self.step);
                let c2 = T::one() - b2.powi(self.step);
                for (k, (p, (_, g))) in params.tensors_mut().into_iter().zip(grads).enumerate() {
                    let (m, v) = (&mut self.m[k], &mut self.v[k]);
                    for (i, (w, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[i] = b1 * m[i] + (T::one() - b1) * d;
                        v[i] = b2 * v[i] + (T::one() - b2) * d * d;
                        let m_hat = m[i] / c1;
                        let v_hat = v[i] / c2;
                        *w -= self.lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: NetworkParams<f32>,
    pub log: Vec<EpochLog>,
}

/// Trains a fresh network on `(image, label)` pairs.
///
/// Runs `epochs × ⌈N / batch_size⌉` optimizer steps; minibatches come from a
/// seeded shuffle, and the initial weights from the same seed.
pub fn train_classifier<'a>(
    spec: &NetworkSpec,
    config: &TrainConfig,
    n: usize,
    example: impl Fn(usize) -> (&'a RasterImage, usize) + Sync,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, NnetError> {
    spec.validate()?;
    config.validate()?;
    if n == 0 {
        return Err(NnetError::EmptyDataset);
    }
    let mut params = NetworkParams::<f32>::he_uniform(spec, config.seed);
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5348_5546_464c_4521);
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for chunk in order.chunks(config.batch_size) {
            let pairs: Vec<(&RasterImage, usize)> = chunk.iter().map(|&i| example(i)).collect();
            let batch: Tensor<f32> = batch_from_rasters(pairs.iter().map(|p| p.0));
            let labels: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let res = loss_and_grad(&params, &batch, &labels)?;
            if !res.loss.is_finite() || !res.grads.named_tensors().iter().all(|(_, t)| t.is_finite()) {
                return Err(NnetError::DivergenceDetected { epoch });
            }
            loss_sum += f64::from(res.loss) * chunk.len() as f64;
            correct += res.correct;
            opt.step(&mut params, &res.grads);
        }
        let entry = EpochLog {
            epoch,
            loss: loss_sum / n as f64,
            accuracy: correct as f64 / n as f64,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { params, log })
}

pub fn train_pretext(
    spec: &NetworkSpec,
    config: &TrainConfig,
    examples: &[PretextExample],
) -> Result<TrainOutcome, NnetError> {
    train_pretext_with(spec, config, examples, |_| {})
}

/// [`train_pretext`] with a per-epoch callback.
pub fn train_pretext_with(
    spec: &NetworkSpec,
    config: &TrainConfig,
    examples: &[PretextExample],
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, NnetError> {
    if let Some(ex) = examples.iter().find(|e| e.patch.side() != spec.input_side) {
        return Err(NnetError::ShapeMismatch(format!(
            "example {} has side {}, network expects {}",
            ex.example_id(),
            ex.patch.side(),
            spec.input_side
        )));
    }
    train_classifier(
        spec,
        config,
        examples.len(),
        |i| (examples[i].patch.image(), examples[i].label.index()),
        on_epoch,
    )
}

/// Fraction of examples whose argmax prediction equals their label.
pub fn pretext_accuracy(params: &NetworkParams<f32>, examples: &[PretextExample]) -> Result<f64, NnetError> {
    if examples.is_empty() {
        return Err(NnetError::EmptyDataset);
    }
    let correct: usize = examples
        .par_chunks(32)
        .map(|chunk| -> Result<usize, NnetError> {
            let batch: Tensor<f32> = batch_from_rasters(chunk.iter().map(|e| e.patch.image()));
            let (logits, _) = forward(params, &batch)?;
            Ok(chunk
                .iter()
                .enumerate()
                .filter(|(i, e)| argmax(logits.row(*i)) == e.label.index())
                .count())
        })
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .sum();
    Ok(correct as f64 / examples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::network::batch_loss;
    use rand::Rng;

    #[test]
    fn config_invariants() {
        assert!(TrainConfig::default().validate().is_ok());
        let zero_epochs = TrainConfig { epochs: 0, ..Default::default() };
        assert!(matches!(zero_epochs.validate(), Err(NnetError::InvalidConfig(_))));
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert_eq!("ADAM".parse::<OptimizerKind>().unwrap(), OptimizerKind::Adam);
    }

    #[test]
    fn small_step_decreases_batch_loss() {
        let spec = NetworkSpec::new(8, vec![4, 6], 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let data: Vec<f32> = (0..4 * 3 * 64).map(|_| rng.gen()).collect();
        let batch = Tensor::from_vec(&[4, 3, 8, 8], data).unwrap();
        let labels = [0, 2, 4, 6];
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut params = NetworkParams::<f32>::he_uniform(&spec, 5);
            let before = loss_and_grad(&params, &batch, &labels).unwrap();
            let mut opt = Optimizer::new(kind, 1e-5, &params);
            opt.step(&mut params, &before.grads);
            let after = batch_loss(&params, &batch, &labels).unwrap();
            assert!(after < before.loss, "{kind:?}: {after} !< {}", before.loss);
        }
    }

    #[test]
    fn empty_dataset_rejected() {
        let spec = NetworkSpec::new(8, vec![4], 7).unwrap();
        let r = train_pretext(&spec, &TrainConfig::default(), &[]);
        assert!(matches!(r, Err(NnetError::EmptyDataset)));
    }
}
