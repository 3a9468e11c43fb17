//! DepAudioNet: conv1d → batchnorm → ReLU → maxpool → dropout → LSTM×2,
//! with either an L2-normalized embedding head or a sigmoid classifier head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Scalar, Tape, Tensor, Var};
use crate::rng::seeded;
use crate::{Error, Result};

/// Layer sizes. The defaults are the production network; gradient checks
/// shrink them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub n_mels: usize,
    pub frames: usize,
    pub channels: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub pool: usize,
    pub dropout: f64,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            n_mels: crate::N_MELS,
            frames: crate::SEGMENT_FRAMES,
            channels: 128,
            hidden: 128,
            kernel: 3,
            pool: 3,
            dropout: 0.05,
        }
    }
}

impl ModelDims {
    pub fn pooled_frames(&self) -> usize {
        self.frames / self.pool
    }

    pub fn segment_len(&self) -> usize {
        self.n_mels * self.frames
    }
}

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputMode {
    Embed,
    Classify,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepAudioNetParams<T = f32> {
    pub dims: ModelDims,
    pub conv_weight: Tensor<T>,
    pub conv_bias: Tensor<T>,
    pub bn_gamma: Tensor<T>,
    pub bn_beta: Tensor<T>,
    pub bn_running_mean: Tensor<T>,
    pub bn_running_var: Tensor<T>,
    pub lstm1_w_ih: Tensor<T>,
    pub lstm1_w_hh: Tensor<T>,
    pub lstm1_bias: Tensor<T>,
    pub lstm2_w_ih: Tensor<T>,
    pub lstm2_w_hh: Tensor<T>,
    pub lstm2_bias: Tensor<T>,
    pub fc_weight: Tensor<T>,
    pub fc_bias: Tensor<T>,
}

pub const PARAM_NAMES: [&str; 14] = [
    "conv.weight",
    "conv.bias",
    "bn.gamma",
    "bn.beta",
    "bn.running_mean",
    "bn.running_var",
    "lstm1.w_ih",
    "lstm1.w_hh",
    "lstm1.bias",
    "lstm2.w_ih",
    "lstm2.w_hh",
    "lstm2.bias",
    "fc.weight",
    "fc.bias",
];

impl<T: Scalar> DepAudioNetParams<T> {
    pub fn expected_shapes(dims: &ModelDims) -> [Vec<usize>; 14] {
        let (c, h, m, k) = (dims.channels, dims.hidden, dims.n_mels, dims.kernel);
        [
            vec![c, m, k],
            vec![c],
            vec![c],
            vec![c],
            vec![c],
            vec![c],
            vec![4 * h, c],
            vec![4 * h, h],
            vec![4 * h],
            vec![4 * h, h],
            vec![4 * h, h],
            vec![4 * h],
            vec![1, h],
            vec![1],
        ]
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor<T>); 14] {
        let t = [
            &self.conv_weight,
            &self.conv_bias,
            &self.bn_gamma,
            &self.bn_beta,
            &self.bn_running_mean,
            &self.bn_running_var,
            &self.lstm1_w_ih,
            &self.lstm1_w_hh,
            &self.lstm1_bias,
            &self.lstm2_w_ih,
            &self.lstm2_w_hh,
            &self.lstm2_bias,
            &self.fc_weight,
            &self.fc_bias,
        ];
        std::array::from_fn(|i| (PARAM_NAMES[i], t[i]))
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 14] {
        let mut t = [
            Some(&mut self.conv_weight),
            Some(&mut self.conv_bias),
            Some(&mut self.bn_gamma),
            Some(&mut self.bn_beta),
            Some(&mut self.bn_running_mean),
            Some(&mut self.bn_running_var),
            Some(&mut self.lstm1_w_ih),
            Some(&mut self.lstm1_w_hh),
            Some(&mut self.lstm1_bias),
            Some(&mut self.lstm2_w_ih),
            Some(&mut self.lstm2_w_hh),
            Some(&mut self.lstm2_bias),
            Some(&mut self.fc_weight),
            Some(&mut self.fc_bias),
        ];
        std::array::from_fn(|i| (PARAM_NAMES[i], t[i].take().unwrap()))
    }

    /// Rebuilds parameters from named tensors, as read from a checkpoint.
    pub fn from_named(dims: ModelDims, mut named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut take = |name: &str| -> Result<Tensor<T>> {
            let pos = named
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            Ok(named.swap_remove(pos).1)
        };
        let mut p = Self {
            dims,
            conv_weight: take("conv.weight")?,
            conv_bias: take("conv.bias")?,
            bn_gamma: take("bn.gamma")?,
            bn_beta: take("bn.beta")?,
            bn_running_mean: take("bn.running_mean")?,
            bn_running_var: take("bn.running_var")?,
            lstm1_w_ih: take("lstm1.w_ih")?,
            lstm1_w_hh: take("lstm1.w_hh")?,
            lstm1_bias: take("lstm1.bias")?,
            lstm2_w_ih: take("lstm2.w_ih")?,
            lstm2_w_hh: take("lstm2.w_hh")?,
            lstm2_bias: take("lstm2.bias")?,
            fc_weight: take("fc.weight")?,
            fc_bias: take("fc.bias")?,
        };
        if let Some((extra, _)) = named.first() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        for (name, t) in p.tensors_mut() {
            t.requires_grad = !name.starts_with("bn.running");
        }
        p.validate()?;
        Ok(p)
    }

    /// Checks every tensor against the shapes implied by `dims`.
    pub fn validate(&self) -> Result<()> {
        let expected = Self::expected_shapes(&self.dims);
        for ((name, t), want) in self.tensors().iter().zip(expected.iter()) {
            if &t.shape != want || t.data.len() != want.iter().product::<usize>() {
                return Err(Error::shape(format!(
                    "parameter {name} has shape {:?} ({} values), expected {want:?}",
                    t.shape,
                    t.data.len()
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> DepAudioNetParams<U> {
        let t = self.tensors();
        let named = t
            .iter()
            .map(|(n, t)| (n.to_string(), t.cast::<U>()))
            .collect();
        DepAudioNetParams::from_named(self.dims, named).expect("cast preserves shapes")
    }

    pub fn num_trainable(&self) -> usize {
        self.tensors()
            .iter()
            .filter(|(_, t)| t.requires_grad)
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Folds one batch's statistics into the running estimates. `var` is the
    /// biased batch variance over `count` values per channel; the running
    /// variance tracks the unbiased estimate.
    pub fn update_running_stats(&mut self, mean: &[T], var: &[T], count: usize) {
        let m = T::lit(BN_MOMENTUM);
        let keep = T::one() - m;
        let unbias = if count > 1 {
            T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap()
        } else {
            T::one()
        };
        for (r, &b) in self.bn_running_mean.data.iter_mut().zip(mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.bn_running_var.data.iter_mut().zip(var) {
            *r = keep * *r + m * b * unbias;
        }
    }
}

/// Default-size parameters for `seed`.
pub fn init_params(seed: u64) -> DepAudioNetParams<f32> {
    init_params_with(&ModelDims::default(), seed)
}

/// Uniform `±1/√fan_in` weights, zero biases except a unit LSTM forget gate,
/// identity batchnorm.
pub fn init_params_with<T: Scalar>(dims: &ModelDims, seed: u64) -> DepAudioNetParams<T> {
    let mut rng = seeded(seed);
    let shapes = DepAudioNetParams::<T>::expected_shapes(dims);
    let mut uniform = |shape: &Vec<usize>, fan_in: usize| -> Tensor<T> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..shape.iter().product::<usize>())
            .map(|_| T::lit(rng.random_range(-bound..=bound)))
            .collect();
        Tensor::new(shape.clone(), data, true).unwrap()
    };
    let (c, h) = (dims.channels, dims.hidden);
    let conv_weight = uniform(&shapes[0], dims.n_mels * dims.kernel);
    let lstm1_w_ih = uniform(&shapes[6], c);
    let lstm1_w_hh = uniform(&shapes[7], h);
    let lstm2_w_ih = uniform(&shapes[9], h);
    let lstm2_w_hh = uniform(&shapes[10], h);
    let fc_weight = uniform(&shapes[12], h);
    let lstm_bias = || {
        let mut b = Tensor::zeros(vec![4 * h], true);
        b.data[h..2 * h].fill(T::one());
        b
    };
    DepAudioNetParams {
        dims: *dims,
        conv_weight,
        conv_bias: Tensor::zeros(vec![c], true),
        bn_gamma: Tensor::filled(vec![c], T::one(), true),
        bn_beta: Tensor::zeros(vec![c], true),
        bn_running_mean: Tensor::zeros(vec![c], false),
        bn_running_var: Tensor::filled(vec![c], T::one(), false),
        lstm1_w_ih,
        lstm1_w_hh,
        lstm1_bias: lstm_bias(),
        lstm2_w_ih,
        lstm2_w_hh,
        lstm2_bias: lstm_bias(),
        fc_weight,
        fc_bias: Tensor::zeros(vec![1], true),
    }
}

/// Parameters recorded on a tape for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct BoundParams {
    pub conv_weight: Var,
    pub conv_bias: Var,
    pub bn_gamma: Var,
    pub bn_beta: Var,
    pub lstm1_w_ih: Var,
    pub lstm1_w_hh: Var,
    pub lstm1_bias: Var,
    pub lstm2_w_ih: Var,
    pub lstm2_w_hh: Var,
    pub lstm2_bias: Var,
    pub fc_weight: Var,
    pub fc_bias: Var,
}

impl BoundParams {
    pub fn bind<T: Scalar>(tape: &mut Tape<T>, p: &DepAudioNetParams<T>) -> Self {
        Self {
            conv_weight: tape.param(&p.conv_weight),
            conv_bias: tape.param(&p.conv_bias),
            bn_gamma: tape.param(&p.bn_gamma),
            bn_beta: tape.param(&p.bn_beta),
            lstm1_w_ih: tape.param(&p.lstm1_w_ih),
            lstm1_w_hh: tape.param(&p.lstm1_w_hh),
            lstm1_bias: tape.param(&p.lstm1_bias),
            lstm2_w_ih: tape.param(&p.lstm2_w_ih),
            lstm2_w_hh: tape.param(&p.lstm2_w_hh),
            lstm2_bias: tape.param(&p.lstm2_bias),
            fc_weight: tape.param(&p.fc_weight),
            fc_bias: tape.param(&p.fc_bias),
        }
    }

    /// Trainable tensors and their tape handles, named as in checkpoints.
    pub fn named(&self) -> [(&'static str, Var); 12] {
        [
            ("conv.weight", self.conv_weight),
            ("conv.bias", self.conv_bias),
            ("bn.gamma", self.bn_gamma),
            ("bn.beta", self.bn_beta),
            ("lstm1.w_ih", self.lstm1_w_ih),
            ("lstm1.w_hh", self.lstm1_w_hh),
            ("lstm1.bias", self.lstm1_bias),
            ("lstm2.w_ih", self.lstm2_w_ih),
            ("lstm2.w_hh", self.lstm2_w_hh),
            ("lstm2.bias", self.lstm2_bias),
            ("fc.weight", self.fc_weight),
            ("fc.bias", self.fc_bias),
        ]
    }
}

/// Handles into a recorded forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    /// `[B, H]` unit embeddings or `[B, 1]` probabilities.
    pub output: Var,
    pub params: BoundParams,
    pub input: Var,
    /// Convolution output before batchnorm, `[B, C, T]`.
    pub conv_out: Var,
    /// Batchnorm output feeding the ReLU, `[B, C, T]`.
    pub pre_relu: Var,
    /// Final LSTM hidden state, `[B, H]`.
    pub last_hidden: Var,
    /// Per-channel batch mean and biased variance (train mode only).
    pub batch_stats: Option<(Vec<T>, Vec<T>)>,
}

/// Records a forward pass over `batch` segments laid out `[B, n_mels, frames]`.
/// In train mode batchnorm uses batch statistics and dropout draws its mask
/// from `seed`; in inference mode both are deterministic and `seed` is unused.
pub fn forward_batch<T: Scalar>(
    tape: &mut Tape<T>,
    params: &DepAudioNetParams<T>,
    input: Vec<T>,
    batch: usize,
    mode: OutputMode,
    train: bool,
    seed: u64,
) -> Result<ForwardPass<T>> {
    params.validate()?;
    let d = params.dims;
    if batch == 0 || input.len() != batch * d.segment_len() {
        return Err(Error::shape(format!(
            "input of {} values for {batch} segments of {}x{}",
            input.len(),
            d.n_mels,
            d.frames
        )));
    }
    let x = tape.constant(vec![batch, d.n_mels, d.frames], input);
    let bp = BoundParams::bind(tape, params);
    let conv_out = tape.conv1d(x, bp.conv_weight, bp.conv_bias, d.kernel / 2);
    let (pre_relu, batch_stats) = if train {
        let (y, mean, var) = tape.batch_norm_train(conv_out, bp.bn_gamma, bp.bn_beta);
        (y, Some((mean, var)))
    } else {
        let y = tape.batch_norm_eval(
            conv_out,
            bp.bn_gamma,
            bp.bn_beta,
            &params.bn_running_mean.data,
            &params.bn_running_var.data,
        );
        (y, None)
    };
    let act = tape.relu(pre_relu);
    let mut pooled = tape.max_pool1d(act, d.pool);
    if train && d.dropout > 0.0 {
        let keep = 1.0 - d.dropout;
        let scale = T::lit(1.0 / keep);
        let mut rng = seeded(seed);
        let mask = (0..tape.value(pooled).len())
            .map(|_| {
                if rng.random::<f64>() < keep {
                    scale
                } else {
                    T::zero()
                }
            })
            .collect();
        pooled = tape.mask(pooled, mask);
    }
    let seq = tape.transpose12(pooled);
    let h1 = tape.lstm(seq, bp.lstm1_w_ih, bp.lstm1_w_hh, bp.lstm1_bias);
    let h2 = tape.lstm(h1, bp.lstm2_w_ih, bp.lstm2_w_hh, bp.lstm2_bias);
    let last_hidden = tape.last_step(h2);
    let output = match mode {
        OutputMode::Embed => tape.l2_normalize(last_hidden),
        OutputMode::Classify => {
            let logit = tape.linear(last_hidden, bp.fc_weight, bp.fc_bias);
            tape.sigmoid(logit)
        }
    };
    Ok(ForwardPass {
        output,
        params: bp,
        input: x,
        conv_out,
        pre_relu,
        last_hidden,
        batch_stats,
    })
}

/// Unit-norm embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelOutput {
    Embedding(Embedding),
    Probability(f32),
}

/// Runs one `n_mels × frames` segment (mel-major) through the network.
pub fn forward_depaudionet(
    segment: &[f32],
    params: &DepAudioNetParams<f32>,
    mode: OutputMode,
    train: bool,
    seed: u64,
) -> Result<ModelOutput> {
    let mut tape = Tape::new();
    let pass = forward_batch(&mut tape, params, segment.to_vec(), 1, mode, train, seed)?;
    let out = tape.value(pass.output);
    Ok(match mode {
        OutputMode::Embed => ModelOutput::Embedding(Embedding {
            vector: out.to_vec(),
        }),
        OutputMode::Classify => ModelOutput::Probability(out[0]),
    })
}

const INFERENCE_CHUNK: usize = 64;

fn infer(
    params: &DepAudioNetParams<f32>,
    segments: &[&[f32]],
    mode: OutputMode,
) -> Result<Vec<f32>> {
    let mut out = Vec::new();
    for chunk in segments.chunks(INFERENCE_CHUNK) {
        let input: Vec<f32> = chunk.iter().flat_map(|s| s.iter().copied()).collect();
        let mut tape = Tape::new();
        let pass = forward_batch(&mut tape, params, input, chunk.len(), mode, false, 0)?;
        out.extend_from_slice(tape.value(pass.output));
    }
    Ok(out)
}

/// Inference-mode embeddings, one row per segment.
pub fn embed_segments(
    params: &DepAudioNetParams<f32>,
    segments: &[&[f32]],
) -> Result<Vec<Vec<f32>>> {
    let h = params.dims.hidden;
    Ok(infer(params, segments, OutputMode::Embed)?
        .chunks(h)
        .map(<[f32]>::to_vec)
        .collect())
}

/// Inference-mode probabilities, one per segment.
pub fn classify_segments(params: &DepAudioNetParams<f32>, segments: &[&[f32]]) -> Result<Vec<f32>> {
    infer(params, segments, OutputMode::Classify)
}
