use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::layers::{
    pooled_dims, relu_pool, relu_pool_backward, voxels, BatchNorm, BnCache, Conv3d, Linear, Real,
};
use super::{ModelConfig, ModelError};
use crate::rng::rng_from_seed;

/// Conv5FC3: five conv/batch-norm/ReLU/max-pool blocks, then three fully connected layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub config: ModelConfig,
    pub convs: Vec<Conv3d<T>>,
    pub bns: Vec<BatchNorm<T>>,
    pub fcs: Vec<Linear<T>>,
}

struct BlockCache<T> {
    input: Vec<T>,
    pre: Vec<T>,
    bn: BnCache<T>,
    arg: Vec<u32>,
}

/// Activations kept for the fully connected backward pass.
pub struct FcCache<T> {
    x0: Vec<T>,
    mask: Option<Vec<T>>,
    h1: Vec<T>,
    a1: Vec<T>,
    h2: Vec<T>,
    a2: Vec<T>,
}

pub struct TrainCache<T> {
    blocks: Vec<BlockCache<T>>,
    fc: FcCache<T>,
}

/// Gradients in [`Network::param_names`] order.
pub type Gradients<T> = Vec<Vec<T>>;

/// Number of trainable tensors in the conv blocks (weight, bias, gamma, beta per block).
pub const CONV_PARAM_TENSORS: usize = 20;

fn uniform<T: Real>(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<T> {
    (0..n)
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect()
}

impl<T: Real> Network<T> {
    /// Seeded initialization: weights and biases uniform in ±1/√fan_in.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let mut convs = Vec::with_capacity(5);
        let mut bns = Vec::with_capacity(5);
        let mut cin = 1;
        for &cout in &config.conv_channels {
            let mut conv = Conv3d::zeros(cin, cout);
            let bound = 1.0 / (conv.fan_in() as f64).sqrt();
            conv.weight = uniform(&mut rng, conv.weight.len(), bound);
            conv.bias = uniform(&mut rng, cout, bound);
            convs.push(conv);
            bns.push(BatchNorm::new(cout));
            cin = cout;
        }
        let widths = [
            config.flatten_width(),
            config.fc_widths[0],
            config.fc_widths[1],
            1,
        ];
        let fcs = widths
            .windows(2)
            .map(|w| {
                let mut l = Linear::zeros(w[0], w[1]);
                let bound = 1.0 / (w[0] as f64).sqrt();
                l.weight = uniform(&mut rng, l.weight.len(), bound);
                l.bias = uniform(&mut rng, w[1], bound);
                l
            })
            .collect();
        Ok(Self {
            config,
            convs,
            bns,
            fcs,
        })
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..5 {
            for p in ["conv.weight", "conv.bias", "bn.weight", "bn.bias"] {
                names.push(format!("block{}.{p}", i + 1));
            }
        }
        for j in 0..3 {
            names.push(format!("fc{}.weight", j + 1));
            names.push(format!("fc{}.bias", j + 1));
        }
        names
    }

    pub fn buffer_names(&self) -> Vec<String> {
        (0..5)
            .flat_map(|i| {
                [
                    format!("block{}.bn.running_mean", i + 1),
                    format!("block{}.bn.running_var", i + 1),
                ]
            })
            .collect()
    }

    pub fn params(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for (c, b) in self.convs.iter().zip(&self.bns) {
            out.extend([&c.weight[..], &c.bias[..], &b.gamma[..], &b.beta[..]]);
        }
        for l in &self.fcs {
            out.extend([&l.weight[..], &l.bias[..]]);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out: Vec<&mut Vec<T>> = Vec::new();
        for (c, b) in self.convs.iter_mut().zip(self.bns.iter_mut()) {
            out.extend([&mut c.weight, &mut c.bias, &mut b.gamma, &mut b.beta]);
        }
        for l in &mut self.fcs {
            out.extend([&mut l.weight, &mut l.bias]);
        }
        out
    }

    pub fn buffers(&self) -> Vec<&[T]> {
        self.bns
            .iter()
            .flat_map(|b| [&b.running_mean[..], &b.running_var[..]])
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<T>> {
        self.bns
            .iter_mut()
            .flat_map(|b| [&mut b.running_mean, &mut b.running_var])
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn check_input(&self, x: &[T], batch: usize) -> Result<(), ModelError> {
        let expected = batch * voxels(self.config.input_dims);
        if x.len() != expected || batch == 0 {
            return Err(ModelError::ShapeMismatch {
                expected: format!("{batch} × {:?}", self.config.input_dims),
                got: format!("{} values", x.len()),
            });
        }
        Ok(())
    }

    /// Flattened conv features with batch-norm in evaluation mode.
    pub fn features_eval(&self, x: &[T], batch: usize) -> Result<Vec<T>, ModelError> {
        self.check_input(x, batch)?;
        let mut dims = self.config.input_dims;
        let mut act = x.to_vec();
        for (conv, bn) in self.convs.iter().zip(&self.bns) {
            let mut pre = conv.forward(&act, batch, dims);
            bn.forward_eval(&mut pre, batch, voxels(dims));
            act = relu_pool(&pre, batch * conv.out_channels, dims).0;
            dims = pooled_dims(dims);
        }
        Ok(act)
    }

    /// Fully connected head; dropout is applied to the flattened features when `rng` is given.
    pub fn fc_forward(
        &self,
        features: &[T],
        batch: usize,
        rng: Option<&mut ChaCha8Rng>,
    ) -> (Vec<T>, FcCache<T>) {
        let rate = self.config.dropout_rate;
        let (x0, mask) = match rng {
            Some(rng) if rate > 0.0 => {
                let keep = T::from_f64(1.0 / (1.0 - rate));
                let mask: Vec<T> = (0..features.len())
                    .map(|_| {
                        if rng.gen_bool(1.0 - rate) {
                            keep
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                (
                    features.iter().zip(&mask).map(|(a, m)| *a * *m).collect(),
                    Some(mask),
                )
            }
            _ => (features.to_vec(), None),
        };
        let relu = |v: &[T]| v.iter().map(|x| x.max(T::zero())).collect::<Vec<T>>();
        let h1 = self.fcs[0].forward(&x0, batch);
        let a1 = relu(&h1);
        let h2 = self.fcs[1].forward(&a1, batch);
        let a2 = relu(&h2);
        let logits = self.fcs[2].forward(&a2, batch);
        (
            logits,
            FcCache {
                x0,
                mask,
                h1,
                a1,
                h2,
                a2,
            },
        )
    }

    /// Gradients of the six FC tensors and of the flattened features.
    pub fn fc_backward(
        &self,
        cache: &FcCache<T>,
        dlogits: &[T],
        batch: usize,
    ) -> (Gradients<T>, Vec<T>) {
        let relu_back = |g: Vec<T>, h: &[T]| -> Vec<T> {
            g.into_iter()
                .zip(h)
                .map(|(g, &h)| if h > T::zero() { g } else { T::zero() })
                .collect()
        };
        let (dw3, db3, da2) = self.fcs[2].backward(&cache.a2, dlogits, batch);
        let dh2 = relu_back(da2, &cache.h2);
        let (dw2, db2, da1) = self.fcs[1].backward(&cache.a1, &dh2, batch);
        let dh1 = relu_back(da1, &cache.h1);
        let (dw1, db1, mut dx0) = self.fcs[0].backward(&cache.x0, &dh1, batch);
        if let Some(mask) = &cache.mask {
            for (d, m) in dx0.iter_mut().zip(mask) {
                *d = *d * *m;
            }
        }
        (vec![dw1, db1, dw2, db2, dw3, db3], dx0)
    }

    /// Batch logits with batch-norm in evaluation mode.
    pub fn forward_eval(&self, x: &[T], batch: usize) -> Result<Vec<T>, ModelError> {
        let f = self.features_eval(x, batch)?;
        Ok(self.fc_forward(&f, batch, None).0)
    }

    /// Training-mode forward: batch statistics (running ones updated) and dropout.
    pub fn forward_train(
        &mut self,
        x: &[T],
        batch: usize,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Vec<T>, TrainCache<T>), ModelError> {
        self.check_input(x, batch)?;
        let mut dims = self.config.input_dims;
        let mut act = x.to_vec();
        let mut blocks = Vec::with_capacity(5);
        for (conv, bn) in self.convs.iter().zip(self.bns.iter_mut()) {
            let mut pre = conv.forward(&act, batch, dims);
            let cache = bn.forward_train(&mut pre, batch, voxels(dims));
            let (pooled, arg) = relu_pool(&pre, batch * conv.out_channels, dims);
            blocks.push(BlockCache {
                input: std::mem::replace(&mut act, pooled),
                pre,
                bn: cache,
                arg,
            });
            dims = pooled_dims(dims);
        }
        let (logits, fc) = self.fc_forward(&act, batch, rng);
        Ok((logits, TrainCache { blocks, fc }))
    }

    /// Gradients of every parameter for the upstream logit gradient.
    pub fn backward(&self, cache: &TrainCache<T>, dlogits: &[T], batch: usize) -> Gradients<T> {
        let (fc_grads, mut grad) = self.fc_backward(&cache.fc, dlogits, batch);
        let mut dims_in = vec![self.config.input_dims];
        for _ in 0..4 {
            dims_in.push(pooled_dims(*dims_in.last().unwrap()));
        }
        let mut conv_grads: Vec<Vec<T>> = vec![Vec::new(); CONV_PARAM_TENSORS];
        for i in (0..5).rev() {
            let (conv, bn, bc, dims) = (&self.convs[i], &self.bns[i], &cache.blocks[i], dims_in[i]);
            let mut g =
                relu_pool_backward(&bc.pre, &bc.arg, &grad, batch * conv.out_channels, dims);
            let (dgamma, dbeta) = bn.backward(&bc.bn, &mut g, batch, voxels(dims));
            let (dw, db, dx) = conv.backward(&bc.input, &g, batch, dims, i > 0);
            conv_grads[4 * i] = dw;
            conv_grads[4 * i + 1] = db;
            conv_grads[4 * i + 2] = dgamma;
            conv_grads[4 * i + 3] = dbeta;
            if let Some(dx) = dx {
                grad = dx;
            }
        }
        conv_grads.extend(fc_grads);
        conv_grads
    }

    /// Converts every tensor to another precision.
    pub fn cast<U: Real>(&self) -> Network<U> {
        let c = |v: &Vec<T>| {
            v.iter()
                .map(|x| U::from_f64(x.as_f64()))
                .collect::<Vec<U>>()
        };
        Network {
            config: self.config.clone(),
            convs: self
                .convs
                .iter()
                .map(|k| Conv3d {
                    in_channels: k.in_channels,
                    out_channels: k.out_channels,
                    weight: c(&k.weight),
                    bias: c(&k.bias),
                })
                .collect(),
            bns: self
                .bns
                .iter()
                .map(|b| BatchNorm {
                    gamma: c(&b.gamma),
                    beta: c(&b.beta),
                    running_mean: c(&b.running_mean),
                    running_var: c(&b.running_var),
                })
                .collect(),
            fcs: self
                .fcs
                .iter()
                .map(|l| Linear {
                    in_features: l.in_features,
                    out_features: l.out_features,
                    weight: c(&l.weight),
                    bias: c(&l.bias),
                })
                .collect(),
        }
    }
}

/// Closed-form trainable parameter count of a configuration.
pub fn parameter_count(cfg: &ModelConfig) -> usize {
    let mut total = 0;
    let mut cin = 1;
    for &c in &cfg.conv_channels {
        total += c * (cin * 27 + 1) + 2 * c;
        cin = c;
    }
    let widths = [cfg.flatten_width(), cfg.fc_widths[0], cfg.fc_widths[1], 1];
    for w in widths.windows(2) {
        total += w[1] * (w[0] + 1);
    }
    total
}
