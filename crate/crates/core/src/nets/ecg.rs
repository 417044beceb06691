use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnMode, Graph, ParamId, ParamStore, Scalar, Tensor, TensorError, Var};
use crate::rng::Rng;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Shortest signal the stem plus four stride-2 stages can reduce without
/// running out of samples.
pub const MIN_SIGNAL_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EcgEncoderConfig {
    pub in_leads: usize,
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: usize,
    pub stem_kernel: usize,
    pub block_kernel: usize,
}

impl EcgEncoderConfig {
    /// ResNet18-1D widths.
    pub fn full() -> Self {
        Self {
            in_leads: 12,
            stage_channels: [64, 128, 256, 512],
            blocks_per_stage: 2,
            stem_kernel: 7,
            block_kernel: 3,
        }
    }

    /// Same topology at 1/8 width.
    pub fn tiny() -> Self {
        Self {
            stage_channels: [8, 16, 32, 64],
            ..Self::full()
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.stage_channels[3]
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.in_leads == 0 || self.blocks_per_stage == 0 {
            return Err("in_leads and blocks_per_stage must be positive".into());
        }
        if self.stage_channels[0] == 0 || self.stage_channels.windows(2).any(|w| w[1] < w[0]) {
            return Err(format!(
                "stage_channels must be positive and non-decreasing, got {:?}",
                self.stage_channels
            ));
        }
        if self.stem_kernel % 2 == 0 || self.block_kernel % 2 == 0 {
            return Err("kernel sizes must be odd".into());
        }
        Ok(())
    }
}

/// He-uniform conv weight `[c_out, c_in, k]`.
pub(crate) fn he_uniform<T: Scalar>(rng: &mut Rng, c_out: usize, c_in: usize, k: usize) -> Tensor<T> {
    let bound = (6.0 / (c_in * k) as f64).sqrt();
    let data: Vec<f64> = (0..c_out * c_in * k)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::from_f64(vec![c_out, c_in, k], &data).expect("shape")
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, gamma_init: f64) -> Self {
        Self {
            gamma: store.add_weight(format!("{name}.gamma"), Tensor::full(&[channels], T::from_f64(gamma_init))),
            beta: store.add_weight(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&[channels], T::one())),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, store: &mut ParamStore<T>, x: Var, mode: BnMode) -> Result<Var, TensorError> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let (y, stats) = g.batchnorm1d(
            x,
            gamma,
            beta,
            store.value(self.running_mean).data(),
            store.value(self.running_var).data(),
            mode,
            T::from_f64(BN_EPS),
        )?;
        if let Some(stats) = stats {
            let m = T::from_f64(BN_MOMENTUM);
            let keep = T::one() - m;
            let update = |buf: &mut Tensor<T>, batch: &[T]| {
                for (r, &b) in buf.data_mut().iter_mut().zip(batch) {
                    *r = keep * *r + m * b;
                }
            };
            update(&mut store.get_mut(self.running_mean).value, &stats.mean);
            update(&mut store.get_mut(self.running_var).value, &stats.var);
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
struct ConvBn {
    weight: ParamId,
    bn: BatchNorm,
    stride: usize,
    pad: usize,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        gamma_init: f64,
    ) -> Self {
        let weight = store.add_weight(format!("{name}.conv.weight"), he_uniform(rng, c_out, c_in, kernel));
        let bn = BatchNorm::new(store, &format!("{name}.bn"), c_out, gamma_init);
        Self {
            weight,
            bn,
            stride,
            pad: kernel / 2,
        }
    }

    fn forward<T: Scalar>(&self, g: &Graph<T>, store: &mut ParamStore<T>, x: Var, mode: BnMode) -> Result<Var, TensorError> {
        let w = g.param(store, self.weight);
        let y = g.conv1d(x, w, None, self.stride, self.pad)?;
        self.bn.forward(g, store, y, mode)
    }
}

#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: ConvBn,
    conv2: ConvBn,
    downsample: Option<ConvBn>,
}

impl BasicBlock {
    fn forward<T: Scalar>(&self, g: &Graph<T>, store: &mut ParamStore<T>, x: Var, mode: BnMode) -> Result<Var, TensorError> {
        let h = self.conv1.forward(g, store, x, mode)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, store, h, mode)?;
        let shortcut = match &self.downsample {
            Some(ds) => ds.forward(g, store, x, mode)?,
            None => x,
        };
        Ok(g.relu(g.add(h, shortcut)?))
    }
}

/// ResNet18-style 1-D encoder: stem conv/BN/relu/max-pool, four stages of
/// basic residual blocks, global average pooling.
#[derive(Clone, Debug)]
pub struct EcgEncoder {
    pub config: EcgEncoderConfig,
    stem: ConvBn,
    stages: Vec<Vec<BasicBlock>>,
}

impl EcgEncoder {
    pub fn new<T: Scalar>(config: EcgEncoderConfig, store: &mut ParamStore<T>, rng: &mut Rng) -> Self {
        let stem = ConvBn::new(
            store,
            rng,
            "ecg.stem",
            config.in_leads,
            config.stage_channels[0],
            config.stem_kernel,
            2,
            1.0,
        );
        let mut stages = Vec::with_capacity(4);
        let mut c_in = config.stage_channels[0];
        for (s, &c_out) in config.stage_channels.iter().enumerate() {
            let mut blocks = Vec::with_capacity(config.blocks_per_stage);
            for b in 0..config.blocks_per_stage {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let name = format!("ecg.layer{}.{b}", s + 1);
                let conv1 = ConvBn::new(store, rng, &format!("{name}.conv1"), c_in, c_out, config.block_kernel, stride, 1.0);
                let conv2 = ConvBn::new(store, rng, &format!("{name}.conv2"), c_out, c_out, config.block_kernel, 1, 0.0);
                let downsample = (stride != 1 || c_in != c_out)
                    .then(|| ConvBn::new(store, rng, &format!("{name}.downsample"), c_in, c_out, 1, stride, 1.0));
                blocks.push(BasicBlock {
                    conv1,
                    conv2,
                    downsample,
                });
                c_in = c_out;
            }
            stages.push(blocks);
        }
        Self { config, stem, stages }
    }

    /// `[B, leads, L] -> [B, feature_dim]`
    pub fn forward<T: Scalar>(&self, g: &Graph<T>, store: &mut ParamStore<T>, signal: Var, mode: BnMode) -> Result<Var, TensorError> {
        let shape = g.shape(signal);
        if shape.len() != 3 || shape[1] != self.config.in_leads {
            return Err(TensorError::Dimension(format!(
                "ECG encoder expects [B, {}, L], got {shape:?}",
                self.config.in_leads
            )));
        }
        if shape[2] < MIN_SIGNAL_LEN {
            return Err(TensorError::Dimension(format!(
                "signal length {} is shorter than {MIN_SIGNAL_LEN} samples",
                shape[2]
            )));
        }
        let h = self.stem.forward(g, store, signal, mode)?;
        let mut h = g.max_pool1d(g.relu(h), 3, 2, 1)?;
        for stage in &self.stages {
            for block in stage {
                h = block.forward(g, store, h, mode)?;
            }
        }
        g.global_avg_pool(h)
    }
}
