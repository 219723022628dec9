use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    tanh, tanh_backward, tanh_forward, AvgPool2d, BatchNorm, BatchNormCache, BatchNormConfig, BatchStats,
    Conv2d, Conv2dCache, Gru, GruCache, LayerSpec, Mode,
};
use super::tensor::{Param, Tensor};
use crate::error::{Error, Result};

/// Audio branch input: one 39-frame × 128-band log-mel segment, one channel.
pub const AUDIO_INPUT: [usize; 3] = [39, 128, 1];
/// Movement branch input: 30 frames × 119 movement features.
pub const MOVEMENT_INPUT: [usize; 2] = [30, 119];

pub fn audio_specs() -> Vec<LayerSpec> {
    use LayerSpec::*;
    vec![
        BatchNorm,
        Conv2d { filters: 8, kernel: [6, 4] },
        Tanh,
        AvgPool2d { pool: [3, 8] },
        BatchNorm,
        Conv2d { filters: 16, kernel: [4, 4] },
        Tanh,
        AvgPool2d { pool: [4, 4] },
        BatchNorm,
        Conv2d { filters: 32, kernel: [3, 4] },
        Tanh,
        AvgPool2d { pool: [3, 4] },
        BatchNorm,
        Conv2d { filters: 128, kernel: [1, 1] },
        Tanh,
    ]
}

pub fn movement_specs() -> Vec<LayerSpec> {
    vec![LayerSpec::BatchNorm, LayerSpec::Gru { units: 32 }]
}

#[derive(Debug, Clone, PartialEq)]
enum Layer {
    BatchNorm(BatchNorm),
    Conv2d(Conv2d),
    AvgPool2d(AvgPool2d),
    Tanh,
    Gru(Gru),
}

enum Cache {
    BatchNorm(BatchNormCache),
    Conv2d(Conv2dCache),
    AvgPool2d(Vec<usize>),
    Tanh(Tensor),
    Gru(GruCache),
    /// Input of a fused conv → tanh → pool block. The full-resolution
    /// activations are recomputed one sample at a time in the backward pass.
    Block(Tensor),
}

/// Execution unit: one layer, or a conv → tanh → pool run starting at the index.
#[derive(Clone, Copy)]
enum Step {
    Single(usize),
    Block(usize),
}

fn block_forward(conv: &Conv2d, pool: &AvgPool2d, x: &Tensor) -> Tensor {
    let (n, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let c = conv.bias.len();
    let (oh, ow) = pool.output_dims(h, w);
    let mut act = vec![0.0; h * w * c];
    let mut out = vec![0.0; n * oh * ow * c];
    for (s, o) in out.chunks_exact_mut(oh * ow * c).enumerate() {
        conv.forward_sample(x.sample(s), h, w, &mut act);
        act.iter_mut().for_each(|v| *v = tanh(*v));
        pool.forward_sample(&act, h, w, c, o);
    }
    Tensor::new(vec![n, oh, ow, c], out)
}

fn block_backward(conv: &Conv2d, pool: &AvgPool2d, x: &Tensor, grad: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
    let (n, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let c = conv.bias.len();
    let mut act = vec![0.0; h * w * c];
    let mut d_act = vec![0.0; h * w * c];
    let mut dk = vec![0.0; conv.kernel.len()];
    let mut db = vec![0.0; c];
    let mut dx = vec![0.0; x.data.len()];
    let per = x.sample_len();
    for s in 0..n {
        conv.forward_sample(x.sample(s), h, w, &mut act);
        pool.backward_sample(grad.sample(s), h, w, c, &mut d_act);
        for (d, a) in d_act.iter_mut().zip(&act) {
            let y = tanh(*a);
            *d *= 1.0 - y * y;
        }
        conv.backward_sample(x.sample(s), &d_act, h, w, &mut dk, &mut db, &mut dx[s * per..(s + 1) * per]);
    }
    (Tensor::new(x.shape.clone(), dx), dk, db)
}

/// Activations cached by [`Branch::forward`] plus any batch statistics
/// gathered in training mode.
pub struct ForwardPass {
    /// `[batch, output_dim]`
    pub output: Tensor,
    caches: Vec<Cache>,
    bn_stats: Vec<Option<BatchStats>>,
    last_shape: Vec<usize>,
}

pub struct BranchGrads {
    /// Aligned with [`Branch::trainable`].
    pub params: Vec<Vec<f64>>,
    pub input: Tensor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCount {
    pub kind: String,
    /// Per-sample output shape.
    pub shape: Vec<usize>,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub layers: Vec<LayerCount>,
    pub total: usize,
}

/// A feed-forward chain of layers with a fixed per-sample input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub specs: Vec<LayerSpec>,
    layers: Vec<Layer>,
    shapes: Vec<Vec<usize>>,
}

fn config_err(name: &str, i: usize, spec: &LayerSpec, shape: &[usize], why: &str) -> Error {
    Error::Config(format!(
        "{name} layer {i} ({}) on input {shape:?}: {why}",
        spec.kind_name()
    ))
}

impl Branch {
    /// Builds and shape-checks a branch. Kernels use seeded Glorot-uniform
    /// initialization, biases start at zero, batch norm at γ = 1, β = 0.
    pub fn build(name: &str, input_shape: &[usize], specs: &[LayerSpec], bn: BatchNormConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = input_shape.to_vec();
        let mut shapes = vec![shape.clone()];
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let prefix = format!("{name}.{i}.{}", spec.kind_name());
            let err = |why: &str| config_err(name, i, spec, &shape, why);
            let layer = match spec {
                LayerSpec::BatchNorm => {
                    let c = *shape.last().ok_or_else(|| err("empty shape"))?;
                    Layer::BatchNorm(BatchNorm::new(&prefix, c, bn))
                }
                LayerSpec::Conv2d { filters, kernel } => {
                    if shape.len() != 3 {
                        return Err(err("needs [H, W, C] input"));
                    }
                    if *filters == 0 || kernel[0] == 0 || kernel[1] == 0 {
                        return Err(err("zero-sized kernel"));
                    }
                    let layer = Conv2d::new(&prefix, *kernel, shape[2], *filters, &mut rng);
                    shape[2] = *filters;
                    Layer::Conv2d(layer)
                }
                LayerSpec::AvgPool2d { pool } => {
                    if shape.len() != 3 {
                        return Err(err("needs [H, W, C] input"));
                    }
                    if pool[0] == 0 || pool[1] == 0 || shape[0] < pool[0] || shape[1] < pool[1] {
                        return Err(err("pool window larger than input"));
                    }
                    shape = vec![shape[0] / pool[0], shape[1] / pool[1], shape[2]];
                    Layer::AvgPool2d(AvgPool2d { pool: *pool })
                }
                LayerSpec::Tanh => Layer::Tanh,
                LayerSpec::Gru { units } => {
                    if shape.len() != 2 {
                        return Err(err("needs [T, F] input"));
                    }
                    if *units == 0 {
                        return Err(err("zero units"));
                    }
                    let layer = Gru::new(&prefix, shape[1], *units, &mut rng);
                    shape = vec![*units];
                    Layer::Gru(layer)
                }
            };
            layers.push(layer);
            shapes.push(shape.clone());
        }
        Ok(Branch {
            name: name.to_string(),
            input_shape: input_shape.to_vec(),
            specs: specs.to_vec(),
            layers,
            shapes,
        })
    }

    pub fn audio(bn: BatchNormConfig, seed: u64) -> Self {
        let b = Branch::build("audio", &AUDIO_INPUT, &audio_specs(), bn, seed)
            .expect("audio branch layout is valid");
        let trace: Vec<Vec<usize>> = b
            .shapes
            .iter()
            .zip(std::iter::once(&LayerSpec::BatchNorm).chain(&b.specs))
            .skip(1)
            .filter(|(_, s)| matches!(s, LayerSpec::AvgPool2d { .. }))
            .map(|(sh, _)| sh.clone())
            .collect();
        assert_eq!(
            trace,
            vec![vec![13, 16, 8], vec![3, 4, 16], vec![1, 1, 32]],
            "audio branch pooling geometry"
        );
        assert_eq!(b.output_dim(), 128);
        b
    }

    pub fn movement(bn: BatchNormConfig, seed: u64) -> Self {
        let b = Branch::build("movement", &MOVEMENT_INPUT, &movement_specs(), bn, seed)
            .expect("movement branch layout is valid");
        assert_eq!(b.shapes, vec![vec![30, 119], vec![30, 119], vec![32]]);
        b
    }

    /// Input shape followed by each layer's per-sample output shape.
    pub fn shape_trace(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn output_dim(&self) -> usize {
        self.shapes.last().unwrap().iter().product()
    }

    pub fn count_parameters(&self) -> ParamCounts {
        let layers: Vec<LayerCount> = self
            .layers
            .iter()
            .zip(&self.specs)
            .zip(&self.shapes[1..])
            .map(|((layer, spec), shape)| {
                let params = match layer {
                    // γ, β and the two running statistics.
                    Layer::BatchNorm(bn) => 4 * bn.channels(),
                    Layer::Conv2d(c) => c.kernel.len() + c.bias.len(),
                    Layer::Gru(g) => g.kernel.len() + g.recurrent.len() + g.bias.len(),
                    Layer::AvgPool2d(_) | Layer::Tanh => 0,
                };
                LayerCount {
                    kind: spec.kind_name().to_string(),
                    shape: shape.clone(),
                    params,
                }
            })
            .collect();
        let total = layers.iter().map(|l| l.params).sum();
        ParamCounts { layers, total }
    }

    pub fn trainable(&self) -> Vec<&Param> {
        self.layers
            .iter()
            .flat_map(|l| -> Vec<&Param> {
                match l {
                    Layer::BatchNorm(bn) => vec![&bn.gamma, &bn.beta],
                    Layer::Conv2d(c) => vec![&c.kernel, &c.bias],
                    Layer::Gru(g) => vec![&g.kernel, &g.recurrent, &g.bias],
                    Layer::AvgPool2d(_) | Layer::Tanh => vec![],
                }
            })
            .collect()
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Param> {
        self.layers
            .iter_mut()
            .flat_map(|l| -> Vec<&mut Param> {
                match l {
                    Layer::BatchNorm(bn) => vec![&mut bn.gamma, &mut bn.beta],
                    Layer::Conv2d(c) => vec![&mut c.kernel, &mut c.bias],
                    Layer::Gru(g) => vec![&mut g.kernel, &mut g.recurrent, &mut g.bias],
                    Layer::AvgPool2d(_) | Layer::Tanh => vec![],
                }
            })
            .collect()
    }

    /// Every stored tensor: trainable parameters and batch-norm running statistics.
    pub fn state(&self) -> Vec<&Param> {
        self.layers
            .iter()
            .flat_map(|l| -> Vec<&Param> {
                match l {
                    Layer::BatchNorm(bn) => vec![&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var],
                    Layer::Conv2d(c) => vec![&c.kernel, &c.bias],
                    Layer::Gru(g) => vec![&g.kernel, &g.recurrent, &g.bias],
                    Layer::AvgPool2d(_) | Layer::Tanh => vec![],
                }
            })
            .collect()
    }

    pub fn state_mut(&mut self) -> Vec<&mut Param> {
        self.layers
            .iter_mut()
            .flat_map(|l| -> Vec<&mut Param> {
                match l {
                    Layer::BatchNorm(bn) => vec![
                        &mut bn.gamma,
                        &mut bn.beta,
                        &mut bn.running_mean,
                        &mut bn.running_var,
                    ],
                    Layer::Conv2d(c) => vec![&mut c.kernel, &mut c.bias],
                    Layer::Gru(g) => vec![&mut g.kernel, &mut g.recurrent, &mut g.bias],
                    Layer::AvgPool2d(_) | Layer::Tanh => vec![],
                }
            })
            .collect()
    }

    fn plan(&self) -> Vec<Step> {
        let mut steps = Vec::new();
        let mut i = 0;
        while i < self.layers.len() {
            let fused = matches!(
                self.layers[i..],
                [Layer::Conv2d(_), Layer::Tanh, Layer::AvgPool2d(_), ..]
            );
            if fused {
                steps.push(Step::Block(i));
                i += 3;
            } else {
                steps.push(Step::Single(i));
                i += 1;
            }
        }
        steps
    }

    /// Runs the chain on `[batch, ..input_shape]` and flattens the result to
    /// `[batch, output_dim]`.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<ForwardPass> {
        if x.sample_shape() != self.input_shape.as_slice() {
            return Err(Error::Shape(format!(
                "{} branch expects samples of {:?}, got {:?}",
                self.name,
                self.input_shape,
                x.sample_shape()
            )));
        }
        if x.batch() == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut bn_stats = Vec::new();
        let mut cur = x.clone();
        for step in self.plan() {
            let i = match step {
                Step::Block(i) => {
                    let (Layer::Conv2d(conv), Layer::AvgPool2d(pool)) = (&self.layers[i], &self.layers[i + 2]) else {
                        unreachable!("plan only fuses conv, tanh, pool")
                    };
                    let y = block_forward(conv, pool, &cur);
                    caches.push(Cache::Block(std::mem::replace(&mut cur, y)));
                    continue;
                }
                Step::Single(i) => i,
            };
            cur = match &self.layers[i] {
                Layer::BatchNorm(bn) => {
                    let (y, c, stats) = bn.forward(&cur, mode);
                    caches.push(Cache::BatchNorm(c));
                    bn_stats.push(stats);
                    y
                }
                Layer::Conv2d(conv) => {
                    let (y, c) = conv.forward(&cur);
                    caches.push(Cache::Conv2d(c));
                    y
                }
                Layer::AvgPool2d(pool) => {
                    let y = pool.forward(&cur);
                    caches.push(Cache::AvgPool2d(cur.shape.clone()));
                    y
                }
                Layer::Tanh => {
                    let y = tanh_forward(&cur);
                    caches.push(Cache::Tanh(y.clone()));
                    y
                }
                Layer::Gru(gru) => {
                    let (y, c) = gru.forward(&cur)?;
                    caches.push(Cache::Gru(c));
                    y
                }
            };
        }
        let last_shape = cur.shape.clone();
        let batch = cur.batch();
        let dim = cur.sample_len();
        Ok(ForwardPass {
            output: cur.reshape(vec![batch, dim]),
            caches,
            bn_stats,
            last_shape,
        })
    }

    /// Gradients of every trainable parameter and of the input, given the
    /// gradient of some scalar with respect to `pass.output`.
    pub fn backward(&self, pass: &ForwardPass, grad_out: &Tensor) -> BranchGrads {
        assert_eq!(grad_out.shape, pass.output.shape, "upstream gradient shape");
        let mut grad = grad_out.clone().reshape(pass.last_shape.clone());
        let mut per_layer: Vec<Vec<Vec<f64>>> = Vec::with_capacity(self.layers.len());
        for (step, cache) in self.plan().into_iter().zip(&pass.caches).rev() {
            let i = match (step, cache) {
                (Step::Block(i), Cache::Block(x)) => {
                    let (Layer::Conv2d(conv), Layer::AvgPool2d(pool)) = (&self.layers[i], &self.layers[i + 2]) else {
                        unreachable!("plan only fuses conv, tanh, pool")
                    };
                    let (g, dk, db) = block_backward(conv, pool, x, &grad);
                    per_layer.extend([vec![], vec![], vec![dk, db]]);
                    grad = g;
                    continue;
                }
                (Step::Single(i), _) => i,
                _ => unreachable!("cache kind follows plan"),
            };
            let (g, params) = match (&self.layers[i], cache) {
                (Layer::BatchNorm(bn), Cache::BatchNorm(c)) => bn.backward(c, &grad),
                (Layer::Conv2d(conv), Cache::Conv2d(c)) => conv.backward(c, &grad),
                (Layer::AvgPool2d(pool), Cache::AvgPool2d(shape)) => (pool.backward(shape, &grad), vec![]),
                (Layer::Tanh, Cache::Tanh(y)) => (tanh_backward(y, &grad), vec![]),
                (Layer::Gru(gru), Cache::Gru(c)) => gru.backward(c, &grad),
                _ => unreachable!("cache kind follows layer kind"),
            };
            per_layer.push(params);
            grad = g;
        }
        per_layer.reverse();
        BranchGrads {
            params: per_layer.into_iter().flatten().collect(),
            input: grad,
        }
    }

    /// Folds the batch statistics of a training-mode pass into the running
    /// averages.
    pub fn update_running_stats(&mut self, pass: &ForwardPass) {
        let mut stats = pass.bn_stats.iter();
        for layer in &mut self.layers {
            if let Layer::BatchNorm(bn) = layer {
                if let Some(Some(s)) = stats.next() {
                    bn.update_running(s);
                }
            }
        }
    }

    /// Sets every running average to the statistics of a training-mode pass,
    /// so evaluation-mode outputs match that batch without any training.
    pub fn calibrate_running_stats(&mut self, pass: &ForwardPass) {
        let mut stats = pass.bn_stats.iter();
        for layer in &mut self.layers {
            if let Layer::BatchNorm(bn) = layer {
                if let Some(Some(s)) = stats.next() {
                    bn.set_running(s);
                }
            }
        }
    }
}
