//! Small convolutional mask predictor.
//!
//! A two-scale convolutional stem turns the image (plus two coordinate
//! channels) into per-pixel embeddings `F_E`. A bank of learned queries
//! attends once over `F_E`; each query's bank vector and pooled context go
//! through a two-layer MLP whose output splits into the `α` embedding, the
//! `β` embedding and the class logits.

mod checkpoint;
mod optim;
mod train;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_model, save_model};
pub use optim::{AdamW, OptimConfig};
pub use train::{
    forward_losses, prepare_targets, train_step, Trainer, TrainConfig, StepLog,
};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::evidence::{compute_evidence, EvidenceMaps, MaskQueries, PixelEmbeddings};
use crate::rng::SplitMix64;

/// RNG stream for parameter initialization.
const INIT_STREAM: u64 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    /// `E`
    pub embed_dim: usize,
    pub stem_channels: usize,
    /// `N_M`
    pub num_queries: usize,
    /// `Q`
    pub query_dim: usize,
    pub mlp_hidden: usize,
    /// Known classes `C`; logits carry one extra no-object column.
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            embed_dim: 16,
            stem_channels: 16,
            num_queries: 8,
            query_dim: 32,
            mlp_hidden: 64,
            num_classes: 4,
        }
    }
}

/// Image channels fed to the stem: RGB plus x and y in `[-1, 1]`.
pub const INPUT_CHANNELS: usize = 5;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.height,
            self.width,
            self.embed_dim,
            self.stem_channels,
            self.num_queries,
            self.query_dim,
            self.mlp_hidden,
            self.num_classes,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        if self.height % 2 != 0 || self.width % 2 != 0 {
            return Err(Error::Config(format!(
                "image size {}x{} must be even",
                self.height, self.width
            )));
        }
        Ok(())
    }

    fn head_width(&self) -> usize {
        2 * self.embed_dim + self.num_classes + 1
    }

    /// Parameter names and shapes in storage order.
    pub fn layout(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (c, e, q, h) = (self.stem_channels, self.embed_dim, self.query_dim, self.mlp_hidden);
        vec![
            ("stem.conv1.weight", vec![c, INPUT_CHANNELS, 3, 3]),
            ("stem.conv1.bias", vec![c]),
            ("stem.conv2.weight", vec![c, c, 3, 3]),
            ("stem.conv2.bias", vec![c]),
            ("stem.proj.weight", vec![e, c]),
            ("stem.proj.bias", vec![e]),
            ("query_bank", vec![self.num_queries, q]),
            ("attn.key.weight", vec![q, e]),
            ("query_mlp.fc1.weight", vec![q, h]),
            ("query_mlp.fc1_ctx.weight", vec![e, h]),
            ("query_mlp.fc1.bias", vec![h]),
            ("query_mlp.fc2.weight", vec![h, self.head_width()]),
            ("query_mlp.fc2.bias", vec![self.head_width()]),
        ]
    }
}

// Positions in `ModelConfig::layout`.
const CONV1_W: usize = 0;
const CONV1_B: usize = 1;
const CONV2_W: usize = 2;
const CONV2_B: usize = 3;
const PROJ_W: usize = 4;
const PROJ_B: usize = 5;
const BANK: usize = 6;
const KEY_W: usize = 7;
const FC1_W: usize = 8;
const FC1_CTX_W: usize = 9;
const FC1_B: usize = 10;
const FC2_W: usize = 11;
const FC2_B: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Weights uniform in `±1/√fan_in`, biases zero, query bank
    /// `N(0, 1)/√Q`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::keyed(seed, INIT_STREAM, 0);
        let fc1_fan_in = config.query_dim + config.embed_dim;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (idx, (name, shape)) in config.layout().into_iter().enumerate() {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match idx {
                CONV1_B | CONV2_B | PROJ_B | FC1_B | FC2_B => vec![0.0; n],
                BANK => {
                    let s = 1.0 / (config.query_dim as f64).sqrt();
                    (0..n).map(|_| rng.gaussian() * s).collect()
                }
                _ => {
                    let fan_in = match idx {
                        CONV1_W | CONV2_W => shape[1] * 9,
                        PROJ_W => shape[1],
                        FC1_W | FC1_CTX_W => fc1_fan_in,
                        _ => shape[0],
                    };
                    let b = 1.0 / (fan_in as f64).sqrt();
                    (0..n).map(|_| rng.uniform(-b, b)).collect()
                }
            };
            names.push(name.to_string());
            tensors.push(Tensor::new(shape, data)?);
        }
        Ok(Self { config, names, tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Whether weight decay applies: weight matrices and kernels only.
    pub fn decays(&self, idx: usize) -> bool {
        self.names[idx].ends_with(".weight")
    }

    /// Places every tensor on the graph, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }
}

/// Appends the coordinate channels to a `[3, H, W]` image.
pub fn with_coordinates(image: &Tensor) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Dimension {
            op: "with_coordinates",
            left: s.to_vec(),
            right: vec![3],
        });
    }
    let (h, w) = (s[1], s[2]);
    let mut data = image.data().to_vec();
    data.reserve(2 * h * w);
    for _y in 0..h {
        for x in 0..w {
            data.push((2 * x + 1) as f64 / w as f64 - 1.0);
        }
    }
    for y in 0..h {
        let v = (2 * y + 1) as f64 / h as f64 - 1.0;
        data.extend(std::iter::repeat_n(v, w));
    }
    Tensor::new(vec![INPUT_CHANNELS, h, w], data)
}

/// Graph outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub pixels: PixelEmbeddings,
    pub queries: MaskQueries,
    pub evidence: EvidenceMaps,
}

/// Runs the network on a `[3, H, W]` image with parameters already bound
/// to `g` (in layout order).
pub fn forward(g: &mut Graph, config: &ModelConfig, p: &[Var], image: &Tensor) -> Result<ForwardOutput> {
    let s = image.shape();
    if s != [3, config.height, config.width] {
        return Err(Error::Dimension {
            op: "forward",
            left: s.to_vec(),
            right: vec![3, config.height, config.width],
        });
    }
    if p.len() != config.layout().len() {
        return Err(Error::InvalidArgument(format!(
            "expected {} parameter tensors, got {}",
            config.layout().len(),
            p.len()
        )));
    }
    let (c, e, hw) = (config.stem_channels, config.embed_dim, config.height * config.width);

    let x = g.constant(with_coordinates(image)?);
    let h1 = g.conv3x3(x, p[CONV1_W])?;
    let h1 = g.add_row_bias(h1, p[CONV1_B])?;
    let h1 = g.silu(h1);
    let low = g.avg_pool2(h1)?;
    let low = g.conv3x3(low, p[CONV2_W])?;
    let low = g.add_row_bias(low, p[CONV2_B])?;
    let low = g.silu(low);
    let up = g.upsample2(low)?;
    let fused = g.add(h1, up)?;
    let fused = g.reshape(fused, &[c, hw])?;
    let fe = g.matmul(p[PROJ_W], fused)?;
    let fe = g.add_row_bias(fe, p[PROJ_B])?;

    let keys = g.matmul(p[BANK], p[KEY_W])?;
    let scores = g.matmul(keys, fe)?;
    let scores = g.mul_scalar(scores, 1.0 / (e as f64).sqrt());
    let attn = g.softmax(scores);
    let fe_t = g.transpose(fe)?;
    let ctx = g.matmul(attn, fe_t)?;

    let h = g.matmul(p[BANK], p[FC1_W])?;
    let hc = g.matmul(ctx, p[FC1_CTX_W])?;
    let h = g.add(h, hc)?;
    let h = g.add_col_bias(h, p[FC1_B])?;
    let h = g.silu(h);
    let out = g.matmul(h, p[FC2_W])?;
    let out = g.add_col_bias(out, p[FC2_B])?;

    let queries = MaskQueries {
        alpha_embed: g.slice_cols(out, 0, e)?,
        beta_embed: g.slice_cols(out, e, 2 * e)?,
        class_logits: g.slice_cols(out, 2 * e, 2 * e + config.num_classes + 1)?,
    };
    let pixels = PixelEmbeddings { features: fe };
    let evidence = compute_evidence(g, &queries, &pixels)?;
    Ok(ForwardOutput { pixels, queries, evidence })
}

/// Detached model outputs for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Outputs {
    pub embeddings: Tensor,
    pub class_logits: Tensor,
    pub evidence: crate::evidence::EvidenceValues,
}

/// Inference-only forward pass.
pub fn predict(params: &ModelParams, image: &Tensor) -> Result<Outputs> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let out = forward(&mut g, &params.config, &vars, image)?;
    Ok(Outputs {
        embeddings: g.value(out.pixels.features).clone(),
        class_logits: g.value(out.queries.class_logits).clone(),
        evidence: out.evidence.values(&g),
    })
}
