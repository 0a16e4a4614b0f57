use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointMeta};
use super::layers::Real;
use super::network::{Gradients, Network, CONV_PARAM_TENSORS};
use super::{weighted_bce, weighted_bce_grad, ModelConfig, ModelError};
use crate::rng::{derive_seed, rng_from_seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping; 0 disables early stopping.
    pub patience: usize,
    /// `(w0, w1)`; inverse class frequency (mean 1) when absent.
    #[serde(default)]
    pub class_weights: Option<[f64; 2]>,
    pub folds: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 6,
            max_epochs: 50,
            patience: 10,
            class_weights: None,
            folds: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_owned()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 || self.folds == 0 {
            return bad("batch size and fold count must be positive");
        }
        if let Some(w) = self.class_weights {
            if w.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return bad("class weights must be positive and finite");
            }
        }
        Ok(())
    }
}

/// A prepared network input with its binary label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Vec<f32>,
    pub label: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Every parameter is trained; batch-norm uses batch statistics.
    Full,
    /// Conv blocks frozen in evaluation mode; only the fully connected layers train.
    FrozenConv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Absent for epoch 0 (the initial weights).
    pub train_loss: Option<f64>,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub network: Network<f32>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub class_weights: [f64; 2],
    pub log: Vec<EpochLog>,
}

/// Inverse class frequency weights `(w0, w1)` renormalized to mean 1.
pub fn class_weights_for(labels: &[bool]) -> Result<[f64; 2], ModelError> {
    let n1 = labels.iter().filter(|&&l| l).count();
    let n0 = labels.len() - n1;
    if n0 == 0 || n1 == 0 {
        return Err(ModelError::SingleClass);
    }
    let n = labels.len() as f64;
    Ok([2.0 * n1 as f64 / n, 2.0 * n0 as f64 / n])
}

/// Mean weighted BCE over a batch (training-mode forward) and its gradients.
pub fn loss_and_gradients<T: Real>(
    net: &mut Network<T>,
    x: &[T],
    labels: &[bool],
    weights: [f64; 2],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Gradients<T>), ModelError> {
    let batch = labels.len();
    let (logits, cache) = net.forward_train(x, batch, rng)?;
    let (loss, dlogits) = batch_loss(&logits, labels, weights);
    Ok((loss, net.backward(&cache, &dlogits, batch)))
}

fn batch_loss<T: Real>(logits: &[T], labels: &[bool], weights: [f64; 2]) -> (f64, Vec<T>) {
    let w = (weights[0], weights[1]);
    let b = labels.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(labels.len());
    for (&l, &y) in logits.iter().zip(labels) {
        loss += weighted_bce(l.as_f64(), y, w);
        grad.push(T::from_f64(weighted_bce_grad(l.as_f64(), y, w) / b));
    }
    (loss / b, grad)
}

struct Adam {
    lr: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(lr: f64, shapes: &[usize]) -> Self {
        Self {
            lr,
            t: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    fn step(&mut self, params: Vec<&mut Vec<f32>>, grads: &[Vec<f32>]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                let gi = g[i] as f64;
                m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * gi;
                v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * gi * gi;
                let update = self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
                p[i] = (p[i] as f64 - update) as f32;
            }
        }
    }
}

fn gather(samples: &[&[f32]], idx: &[usize]) -> Vec<f32> {
    idx.iter()
        .flat_map(|&i| samples[i].iter().copied())
        .collect()
}

const EVAL_CHUNK: usize = 16;

fn eval_loss_full(
    net: &Network<f32>,
    inputs: &[&[f32]],
    labels: &[bool],
    weights: [f64; 2],
) -> Result<f64, ModelError> {
    let mut total = 0.0;
    for (xs, ys) in inputs.chunks(EVAL_CHUNK).zip(labels.chunks(EVAL_CHUNK)) {
        let x: Vec<f32> = xs.iter().flat_map(|s| s.iter().copied()).collect();
        let logits = net.forward_eval(&x, xs.len())?;
        total += batch_loss(&logits, ys, weights).0 * xs.len() as f64;
    }
    Ok(total / labels.len() as f64)
}

fn eval_loss_fc(
    net: &Network<f32>,
    features: &[f32],
    width: usize,
    labels: &[bool],
    weights: [f64; 2],
) -> f64 {
    let (logits, _) = net.fc_forward(features, features.len() / width, None);
    batch_loss(&logits, labels, weights).0
}

fn features(net: &Network<f32>, inputs: &[&[f32]]) -> Result<Vec<f32>, ModelError> {
    let mut out = Vec::new();
    for chunk in inputs.chunks(EVAL_CHUNK) {
        let x: Vec<f32> = chunk.iter().flat_map(|s| s.iter().copied()).collect();
        out.extend(net.features_eval(&x, chunk.len())?);
    }
    Ok(out)
}

/// Adam training from `init`, keeping the epoch (0 = `init`) with the lowest validation loss.
pub fn fit(
    init: Network<f32>,
    train: &[&Sample],
    val: &[&Sample],
    cfg: &TrainConfig,
    mode: TrainMode,
) -> Result<FitOutcome, ModelError> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(ModelError::Empty);
    }
    let expected = init.config.input_dims.iter().product::<usize>();
    if let Some(s) = train.iter().chain(val).find(|s| s.input.len() != expected) {
        return Err(ModelError::ArchitectureMismatch(format!(
            "sample has {} voxels, model expects {:?}",
            s.input.len(),
            init.config.input_dims
        )));
    }
    let train_y: Vec<bool> = train.iter().map(|s| s.label).collect();
    let val_y: Vec<bool> = val.iter().map(|s| s.label).collect();
    let computed = class_weights_for(&train_y)?;
    let weights = cfg.class_weights.unwrap_or(computed);
    let train_x: Vec<&[f32]> = train.iter().map(|s| &s.input[..]).collect();
    let val_x: Vec<&[f32]> = val.iter().map(|s| &s.input[..]).collect();

    let mut net = init;
    let width = net.config.flatten_width();
    let (train_f, val_f) = match mode {
        TrainMode::FrozenConv => (features(&net, &train_x)?, features(&net, &val_x)?),
        TrainMode::Full => (Vec::new(), Vec::new()),
    };
    let val_loss = |net: &Network<f32>| -> Result<f64, ModelError> {
        match mode {
            TrainMode::Full => eval_loss_full(net, &val_x, &val_y, weights),
            TrainMode::FrozenConv => Ok(eval_loss_fc(net, &val_f, width, &val_y, weights)),
        }
    };

    let first = match mode {
        TrainMode::Full => 0,
        TrainMode::FrozenConv => CONV_PARAM_TENSORS,
    };
    let shapes: Vec<usize> = net.params()[first..].iter().map(|p| p.len()).collect();
    let mut adam = Adam::new(cfg.learning_rate, &shapes);

    let initial = val_loss(&net)?;
    if !initial.is_finite() {
        return Err(ModelError::NonFiniteLoss { epoch: 0 });
    }
    let mut log = vec![EpochLog {
        epoch: 0,
        train_loss: None,
        val_loss: initial,
    }];
    let (mut best, mut best_epoch, mut best_loss) = (net.clone(), 0, initial);
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        let mut rng = rng_from_seed(derive_seed(cfg.seed, &[epoch as u64]));
        order.shuffle(&mut rng);
        let (mut sum, mut seen) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            // a lone sample gives degenerate batch statistics
            if mode == TrainMode::Full && idx.len() < 2 && train.len() > 1 {
                continue;
            }
            let ys: Vec<bool> = idx.iter().map(|&i| train_y[i]).collect();
            let (loss, grads) = match mode {
                TrainMode::Full => {
                    let x = gather(&train_x, idx);
                    loss_and_gradients(&mut net, &x, &ys, weights, Some(&mut rng))?
                }
                TrainMode::FrozenConv => {
                    let f: Vec<f32> = idx
                        .iter()
                        .flat_map(|&i| train_f[i * width..(i + 1) * width].iter().copied())
                        .collect();
                    let (logits, cache) = net.fc_forward(&f, idx.len(), Some(&mut rng));
                    let (loss, dlogits) = batch_loss(&logits, &ys, weights);
                    (loss, net.fc_backward(&cache, &dlogits, idx.len()).0)
                }
            };
            if !loss.is_finite() {
                return Err(ModelError::NonFiniteLoss { epoch });
            }
            let grads = if mode == TrainMode::Full {
                &grads[first..]
            } else {
                &grads[..]
            };
            adam.step(net.params_mut().into_iter().skip(first).collect(), grads);
            sum += loss * idx.len() as f64;
            seen += idx.len();
        }
        let vl = val_loss(&net)?;
        if !vl.is_finite() {
            return Err(ModelError::NonFiniteLoss { epoch });
        }
        log.push(EpochLog {
            epoch,
            train_loss: Some(sum / seen.max(1) as f64),
            val_loss: vl,
        });
        if vl < best_loss {
            best = net.clone();
            best_epoch = epoch;
            best_loss = vl;
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience > 0 && since_best >= cfg.patience {
                break;
            }
        }
    }
    Ok(FitOutcome {
        network: best,
        best_epoch,
        best_val_loss: best_loss,
        class_weights: weights,
        log,
    })
}

const INIT_STREAM: u64 = 0x1A17;

/// Trains a fresh network and packages the selected epoch as a checkpoint.
pub fn train(
    model: &ModelConfig,
    train: &[&Sample],
    val: &[&Sample],
    cfg: &TrainConfig,
    task: Option<&str>,
    fold: Option<usize>,
) -> Result<(Checkpoint, Vec<EpochLog>), ModelError> {
    let init = Network::new(model.clone(), derive_seed(cfg.seed, &[INIT_STREAM]))?;
    let out = fit(init, train, val, cfg, TrainMode::Full)?;
    let meta = CheckpointMeta {
        task: task.map(str::to_owned),
        fold,
        best_val_loss: out.best_val_loss,
        epoch: out.best_epoch,
        seed: cfg.seed,
        class_weights: out.class_weights,
        finetuned: false,
    };
    Ok((Checkpoint::from_network(&out.network, meta), out.log))
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    /// Fold with the lowest validation loss (ties to the lowest index).
    pub final_fold: usize,
    pub checkpoints: Vec<Checkpoint>,
    pub logs: Vec<Vec<EpochLog>>,
}

impl CvOutcome {
    pub fn final_checkpoint(&self) -> &Checkpoint {
        &self.checkpoints[self.final_fold]
    }
}

/// One model per fold (validating on that fold), all from the same seed.
pub fn cross_validate(
    samples: &[Sample],
    folds: &[usize],
    model: &ModelConfig,
    cfg: &TrainConfig,
    task: Option<&str>,
) -> Result<CvOutcome, ModelError> {
    if samples.len() != folds.len() {
        return Err(ModelError::ShapeMismatch {
            expected: format!("{} fold indices", samples.len()),
            got: format!("{}", folds.len()),
        });
    }
    let mut checkpoints = Vec::with_capacity(cfg.folds);
    let mut logs = Vec::with_capacity(cfg.folds);
    for k in 0..cfg.folds {
        let (val, train): (Vec<_>, Vec<_>) = samples.iter().zip(folds).partition(|(_, &f)| f == k);
        if val.is_empty() {
            return Err(ModelError::MissingFold(k));
        }
        let val: Vec<&Sample> = val.into_iter().map(|(s, _)| s).collect();
        let train: Vec<&Sample> = train.into_iter().map(|(s, _)| s).collect();
        let (ckpt, log) = self::train(model, &train, &val, cfg, task, Some(k))?;
        checkpoints.push(ckpt);
        logs.push(log);
    }
    let final_fold = (0..checkpoints.len())
        .min_by(|&a, &b| {
            checkpoints[a]
                .meta
                .best_val_loss
                .total_cmp(&checkpoints[b].meta.best_val_loss)
                .then(a.cmp(&b))
        })
        .expect("at least one fold");
    Ok(CvOutcome {
        final_fold,
        checkpoints,
        logs,
    })
}

/// Retrains only the fully connected layers of a pretrained checkpoint.
pub fn finetune(
    pretrained: &Checkpoint,
    train: &[&Sample],
    val: &[&Sample],
    cfg: &TrainConfig,
) -> Result<(Checkpoint, Vec<EpochLog>), ModelError> {
    let init = pretrained.network()?;
    let out = fit(init, train, val, cfg, TrainMode::FrozenConv)?;
    let meta = CheckpointMeta {
        task: pretrained.meta.task.clone(),
        fold: None,
        best_val_loss: out.best_val_loss,
        epoch: out.best_epoch,
        seed: cfg.seed,
        class_weights: out.class_weights,
        finetuned: true,
    };
    Ok((Checkpoint::from_network(&out.network, meta), out.log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{predict_inputs, InputPolicy};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            input_dims: [8; 3],
            conv_channels: [2, 2, 2, 2, 2],
            fc_widths: [8, 4],
            dropout_rate: 0.0,
            input_policy: InputPolicy::Strict,
            kernel: 3,
            pool: 2,
        }
    }

    /// Bright cube vs dark cube: trivially separable.
    fn toy_samples(n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let label = i % 2 == 0;
                let level = if label { 0.9 } else { 0.1 };
                let input = (0..512)
                    .map(|v| level + 0.05 * (((v * 7 + i * 13) % 11) as f32 / 11.0))
                    .collect();
                Sample { input, label }
            })
            .collect()
    }

    #[test]
    fn inverse_frequency_weights() {
        let w = class_weights_for(&[false, false, true]).unwrap();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-12 && (w[1] - 4.0 / 3.0).abs() < 1e-12);
        assert!(matches!(
            class_weights_for(&[true, true]),
            Err(ModelError::SingleClass)
        ));
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let samples = toy_samples(6);
        let refs: Vec<&Sample> = samples.iter().collect();
        let cfg = TrainConfig {
            max_epochs: 0,
            ..Default::default()
        };
        let init =
            Network::<f32>::new(tiny_config(), derive_seed(cfg.seed, &[INIT_STREAM])).unwrap();
        let (ckpt, log) = train(&tiny_config(), &refs, &refs, &cfg, None, None).unwrap();
        assert_eq!(ckpt.network().unwrap(), init);
        assert_eq!(log.len(), 1);
        assert_eq!(ckpt.meta.epoch, 0);
        assert_eq!(log[0].val_loss, ckpt.meta.best_val_loss);
    }

    #[test]
    fn overfits_separable_toy_task() {
        let samples = toy_samples(10);
        let refs: Vec<&Sample> = samples.iter().collect();
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            max_epochs: 40,
            patience: 0,
            ..Default::default()
        };
        let (ckpt, _) = train(&tiny_config(), &refs, &refs, &cfg, None, None).unwrap();
        let net = ckpt.network().unwrap();
        let inputs: Vec<&[f32]> = samples.iter().map(|s| &s.input[..]).collect();
        let preds = predict_inputs(&net, &inputs).unwrap();
        for (p, s) in preds.iter().zip(&samples) {
            assert_eq!(p.label, s.label);
        }
    }

    #[test]
    fn single_class_training_fails() {
        let samples: Vec<Sample> = toy_samples(6).into_iter().filter(|s| s.label).collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        let r = train(
            &tiny_config(),
            &refs,
            &refs,
            &TrainConfig::default(),
            None,
            None,
        );
        assert!(matches!(r, Err(ModelError::SingleClass)));
    }

    #[test]
    fn identical_folds_tie_to_fold_zero() {
        let base = toy_samples(4);
        let samples: Vec<Sample> = (0..5).flat_map(|_| base.clone()).collect();
        let folds: Vec<usize> = (0..5).flat_map(|k| std::iter::repeat(k).take(4)).collect();
        let cfg = TrainConfig {
            max_epochs: 2,
            ..Default::default()
        };
        let cv = cross_validate(&samples, &folds, &tiny_config(), &cfg, Some("toy")).unwrap();
        let losses: Vec<f64> = cv
            .checkpoints
            .iter()
            .map(|c| c.meta.best_val_loss)
            .collect();
        assert!(losses.windows(2).all(|w| w[0] == w[1]), "{losses:?}");
        assert_eq!(cv.final_fold, 0);
    }

    #[test]
    fn missing_fold_is_reported() {
        let samples = toy_samples(8);
        let folds = vec![0, 1, 2, 3, 0, 1, 2, 3];
        let r = cross_validate(
            &samples,
            &folds,
            &tiny_config(),
            &TrainConfig::default(),
            None,
        );
        assert!(matches!(r, Err(ModelError::MissingFold(4))));
    }

    fn random_inputs(n: usize, voxels: usize, seed: u64) -> Vec<f64> {
        use rand::Rng;
        let mut rng = rng_from_seed(seed);
        (0..n * voxels).map(|_| rng.gen::<f64>()).collect()
    }

    #[test]
    fn analytic_gradients_match_central_differences() {
        use rand::Rng;
        let cfg = ModelConfig {
            input_dims: [8; 3],
            conv_channels: [1; 5],
            ..Default::default()
        };
        let mut net = Network::<f64>::new(cfg, 21).unwrap();
        let x = random_inputs(4, 512, 3);
        let labels = [true, false, false, true];
        let w = [0.8, 1.2];
        let (_, grads) = loss_and_gradients(&mut net, &x, &labels, w, None).unwrap();
        let sizes: Vec<usize> = net.params().iter().map(|p| p.len()).collect();
        let mut rng = rng_from_seed(99);
        let h = 1e-5;
        for _ in 0..100 {
            let k = rng.gen_range(0..sizes.len());
            let i = rng.gen_range(0..sizes[k]);
            let orig = net.params()[k][i];
            net.params_mut()[k][i] = orig + h;
            let up = loss_and_gradients(&mut net, &x, &labels, w, None)
                .unwrap()
                .0;
            net.params_mut()[k][i] = orig - h;
            let down = loss_and_gradients(&mut net, &x, &labels, w, None)
                .unwrap()
                .0;
            net.params_mut()[k][i] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = grads[k][i];
            let tol = 1e-3 * fd.abs().max(an.abs()) + 1e-7;
            assert!(
                (fd - an).abs() <= tol,
                "{} [{i}]: analytic {an}, numeric {fd}",
                net.param_names()[k]
            );
        }
    }

    #[test]
    fn inverse_frequency_weights_balance_class_gradients() {
        let mut net = Network::<f64>::new(tiny_config(), 4).unwrap();
        let last = net.params().len() - 2;
        net.params_mut()[last].iter_mut().for_each(|v| *v = 0.0);
        net.params_mut()[last + 1].iter_mut().for_each(|v| *v = 0.0);
        let labels = [true, false, false, false, false, false];
        let w = class_weights_for(&labels).unwrap();
        let x = random_inputs(labels.len(), 512, 8);
        let (logits, _) = net.forward_train(&x, labels.len(), None).unwrap();
        let (_, dlogits) = batch_loss(&logits, &labels, w);
        let per_class = |c: bool| -> f64 {
            dlogits
                .iter()
                .zip(&labels)
                .filter(|(_, &y)| y == c)
                .map(|(g, _)| g.abs())
                .sum()
        };
        let (pos, neg) = (per_class(true), per_class(false));
        assert!((pos / neg - 1.0).abs() < 0.1, "{pos} vs {neg}");
        let (_, plain) = batch_loss(&logits, &labels, [1.0, 1.0]);
        let skew: f64 = plain[1..].iter().map(|g| g.abs()).sum::<f64>() / plain[0].abs();
        assert!(skew > 4.0);
    }

    #[test]
    fn finetuning_leaves_conv_blocks_bit_identical() {
        let samples = toy_samples(10);
        let refs: Vec<&Sample> = samples.iter().collect();
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            max_epochs: 3,
            patience: 0,
            ..Default::default()
        };
        let (base, _) = train(&tiny_config(), &refs, &refs, &cfg, Some("toy"), None).unwrap();
        let flipped: Vec<Sample> = samples
            .iter()
            .map(|s| Sample {
                input: s.input.clone(),
                label: !s.label,
            })
            .collect();
        let frefs: Vec<&Sample> = flipped.iter().collect();
        let (tuned, _) = finetune(&base, &frefs, &frefs, &cfg).unwrap();
        assert!(tuned.meta.finetuned);
        assert!(tuned.meta.epoch > 0);
        let n_params = base.network().unwrap().param_names().len();
        for (i, (a, b)) in base.sections.iter().zip(&tuned.sections).enumerate() {
            let frozen = i < CONV_PARAM_TENSORS || i >= n_params;
            let same = a
                .data
                .iter()
                .zip(&b.data)
                .all(|(x, y)| x.to_bits() == y.to_bits());
            if frozen {
                assert!(same, "{} changed", a.name);
            }
        }
        let fc_changed = base.sections[CONV_PARAM_TENSORS..n_params]
            .iter()
            .zip(&tuned.sections[CONV_PARAM_TENSORS..n_params])
            .any(|(a, b)| a.data != b.data);
        assert!(fc_changed);
    }

    #[test]
    fn finetuning_on_the_same_data_does_not_regress() {
        let samples = toy_samples(10);
        let refs: Vec<&Sample> = samples.iter().collect();
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            max_epochs: 3,
            patience: 0,
            ..Default::default()
        };
        let (base, _) = train(&tiny_config(), &refs, &refs, &cfg, Some("toy"), None).unwrap();
        let (tuned, log) = finetune(&base, &refs, &refs, &cfg).unwrap();
        assert!((log[0].val_loss - base.meta.best_val_loss).abs() < 1e-6);
        assert!(tuned.meta.best_val_loss <= base.meta.best_val_loss + 1e-6);
    }
}
