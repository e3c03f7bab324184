//! The assembled segmentation network.
//!
//! Data flow for an `H×W` input with global stride `S` and width `E`:
//!
//! ```text
//! image ──provider (frozen)──────────────► global  E×(H/S)×(W/S)
//! image ──backbone──► local_1..4 (strides 4, 8, 16, 32)
//! (global, local_i) ──fusion block i──► fused_i  E×(H/S)×(W/S)
//! concat(fused_1..4) ──► 4E ──dec1──► E ──dec2──► E/2 ──dec3──► E/4 ──head──► C
//! bilinear resize of the C-channel map to H×W ──► logits
//! ```

use std::fmt;
use std::path::PathBuf;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::ScaleFusionBlock;
use crate::nn::{DeformConv, GroupNorm, Init, ParamGroup, ParamStore};
use crate::tensor::{Scalar, Tensor};

mod backbone;
pub mod checkpoint;
mod provider;

pub use backbone::LocalBackbone;
pub use checkpoint::{Checkpoint, NamedTensor};
pub use provider::{FileFeatureProvider, GlobalFeatureProvider, RandomPatchEmbedder};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Random,
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub embed_dim: usize,
    pub global_stride: usize,
    /// Multiplier on the 256/512/1024/2048 backbone channel counts.
    pub backbone_width: f64,
    pub decoder_groups: [usize; 3],
    pub dropout: f64,
    pub input_height: usize,
    pub input_width: usize,
    pub reduction: usize,
    pub provider: ProviderKind,
    pub feature_dir: Option<PathBuf>,
    pub model_seed: u64,
    pub provider_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 19,
            embed_dim: 256,
            global_stride: 16,
            backbone_width: 1.0,
            decoder_groups: [32, 16, 8],
            dropout: 0.1,
            input_height: 1024,
            input_width: 1024,
            reduction: 16,
            provider: ProviderKind::Random,
            feature_dir: None,
            model_seed: 0,
            provider_seed: 1,
        }
    }
}

impl ModelConfig {
    /// Full-size configuration: 1024×1024 input, `E = 256`, 19 classes.
    pub fn paper() -> Self {
        Self::default()
    }

    /// 128×128 input, `E = 32`, 6 classes, backbone at 1/8 width.
    pub fn desk() -> Self {
        ModelConfig {
            num_classes: 6,
            embed_dim: 32,
            backbone_width: 0.125,
            input_height: 128,
            input_width: 128,
            reduction: 16,
            ..Self::default()
        }
    }

    pub fn backbone_channels(&self) -> [usize; 4] {
        [256, 512, 1024, 2048].map(|c| ((c as f64 * self.backbone_width).round() as usize).max(4))
    }

    pub fn stem_channels(&self) -> usize {
        ((64.0 * self.backbone_width).round() as usize).max(8)
    }

    /// Input and output widths of the three decoder stages and the head:
    /// `[4E, E, E/2, E/4]`.
    pub fn decoder_widths(&self) -> [usize; 4] {
        let e = self.embed_dim;
        [4 * e, e, e / 2, e / 4]
    }

    pub fn global_grid(&self) -> (usize, usize) {
        (self.input_height / self.global_stride, self.input_width / self.global_stride)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if !(2..=255).contains(&self.num_classes) {
            return bad(format!("num_classes must be in 2..=255, got {}", self.num_classes));
        }
        if self.embed_dim < 4 || self.embed_dim % 4 != 0 {
            return bad(format!("embed_dim must be a positive multiple of 4, got {}", self.embed_dim));
        }
        if self.reduction == 0 || self.embed_dim % self.reduction != 0 {
            return bad(format!("reduction {} must divide embed_dim {}", self.reduction, self.embed_dim));
        }
        for (h, name) in [(self.input_height, "input_height"), (self.input_width, "input_width")] {
            if h == 0 || h % 32 != 0 {
                return bad(format!("{name} must be a positive multiple of 32, got {h}"));
            }
            if self.global_stride == 0 || h % self.global_stride != 0 {
                return bad(format!("global_stride {} must divide {name} {h}", self.global_stride));
            }
        }
        let widths = self.decoder_widths();
        for (i, &g) in self.decoder_groups.iter().enumerate() {
            if g == 0 || widths[i + 1] % g != 0 {
                return bad(format!("decoder stage {} width {} not divisible by {g} groups", i + 1, widths[i + 1]));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(self.backbone_width > 0.0) {
            return bad(format!("backbone_width must be positive, got {}", self.backbone_width));
        }
        if self.provider == ProviderKind::File && self.feature_dir.is_none() {
            return bad("provider = \"file\" requires feature_dir".into());
        }
        Ok(())
    }
}

/// Deformable convolution, group norm, GELU and dropout.
#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub conv: DeformConv,
    pub norm: GroupNorm,
}

impl DecoderStage {
    pub fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        dropout: f64,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Tensor<T>> {
        let h = self.norm.forward(store, &self.conv.forward(store, x)?)?.gelu();
        match rng {
            Some(rng) => h.dropout(dropout, true, rng),
            None => Ok(h),
        }
    }
}

/// Intermediate activations of one forward pass.
#[derive(Clone, Debug)]
pub struct Trace<T: Scalar> {
    pub global: Tensor<T>,
    pub local: Vec<Tensor<T>>,
    pub fused: Vec<Tensor<T>>,
    pub concat: Tensor<T>,
    pub decoder: Vec<Tensor<T>>,
    pub head: Tensor<T>,
    pub logits: Tensor<T>,
}

impl<T: Scalar> Trace<T> {
    pub fn shapes(&self) -> ShapeTrace {
        let s = |t: &Tensor<T>| t.shape().to_vec();
        ShapeTrace {
            global: s(&self.global),
            local: self.local.iter().map(s).collect(),
            fused: self.fused.iter().map(s).collect(),
            concat: s(&self.concat),
            decoder: self.decoder.iter().map(s).collect(),
            head: s(&self.head),
            logits: s(&self.logits),
        }
    }
}

/// Tensor shapes along the forward pass, batch extent included.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeTrace {
    pub global: Vec<usize>,
    pub local: Vec<Vec<usize>>,
    pub fused: Vec<Vec<usize>>,
    pub concat: Vec<usize>,
    pub decoder: Vec<Vec<usize>>,
    pub head: Vec<usize>,
    pub logits: Vec<usize>,
}

impl ShapeTrace {
    /// Shapes implied by `cfg` for a batch of `batch`, derived without
    /// running the network.
    pub fn predict(cfg: &ModelConfig, batch: usize) -> Result<Self> {
        cfg.validate()?;
        let (hg, wg) = cfg.global_grid();
        let (h, w) = (cfg.input_height, cfg.input_width);
        let e = cfg.embed_dim;
        let dw = cfg.decoder_widths();
        Ok(ShapeTrace {
            global: vec![batch, e, hg, wg],
            local: cfg
                .backbone_channels()
                .iter()
                .enumerate()
                .map(|(i, &c)| vec![batch, c, h >> (i + 2), w >> (i + 2)])
                .collect(),
            fused: vec![vec![batch, e, hg, wg]; 4],
            concat: vec![batch, dw[0], hg, wg],
            decoder: dw[1..].iter().map(|&c| vec![batch, c, hg, wg]).collect(),
            head: vec![batch, cfg.num_classes, hg, wg],
            logits: vec![batch, cfg.num_classes, h, w],
        })
    }
}

impl fmt::Display for ShapeTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dims = |s: &[usize]| s[1..].iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
        writeln!(f, "global    {}", dims(&self.global))?;
        for (i, s) in self.local.iter().enumerate() {
            writeln!(f, "local{}    {}", i + 1, dims(s))?;
        }
        for (i, s) in self.fused.iter().enumerate() {
            writeln!(f, "fused{}    {}", i + 1, dims(s))?;
        }
        writeln!(f, "concat    {}", dims(&self.concat))?;
        for (i, s) in self.decoder.iter().enumerate() {
            writeln!(f, "decoder{}  {}", i + 1, dims(s))?;
        }
        writeln!(f, "head      {}", dims(&self.head))?;
        write!(f, "logits    {}", dims(&self.logits))
    }
}

pub struct AdSamModel<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    provider: Box<dyn GlobalFeatureProvider<T>>,
    pub backbone: LocalBackbone,
    pub fusion: Vec<ScaleFusionBlock>,
    pub decoder: Vec<DecoderStage>,
    pub head: DeformConv,
}

impl<T: Scalar> AdSamModel<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let e = config.embed_dim;
        let provider: Box<dyn GlobalFeatureProvider<T>> = match config.provider {
            ProviderKind::Random => Box::new(RandomPatchEmbedder::new(&mut store, config.global_stride, e, config.provider_seed)?),
            ProviderKind::File => Box::new(FileFeatureProvider {
                dir: config.feature_dir.clone().expect("validated"),
                stride: config.global_stride,
                embed: e,
            }),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.model_seed);
        let channels = config.backbone_channels();
        let backbone = LocalBackbone::new(&mut store, config.stem_channels(), channels, &mut rng)?;
        let fusion = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| ScaleFusionBlock::new(&mut store, &format!("fusion{}", i + 1), c, e, config.reduction, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let dw = config.decoder_widths();
        let decoder = (0..3)
            .map(|i| {
                let name = format!("decoder{}", i + 1);
                Ok(DecoderStage {
                    conv: DeformConv::new(&mut store, &name, ParamGroup::Head, (dw[i], dw[i + 1]), Init::Kaiming, &mut rng)?,
                    norm: GroupNorm::new(&mut store, &format!("{name}.gn"), ParamGroup::Head, dw[i + 1], config.decoder_groups[i])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let head = DeformConv::new(&mut store, "head", ParamGroup::Head, (dw[3], config.num_classes), Init::Kaiming, &mut rng)?;
        Ok(AdSamModel {
            config,
            store,
            provider,
            backbone,
            fusion,
            decoder,
            head,
        })
    }

    pub fn provider_name(&self) -> &'static str {
        self.provider.name()
    }

    pub fn global_features(&self, images: &Tensor<T>, ids: &[String]) -> Result<Tensor<T>> {
        let (_, _, h, w) = images.dims4()?;
        let s = self.config.global_stride;
        if h % s != 0 || w % s != 0 {
            return Err(Error::shape(format!("input {h}x{w} not divisible by global stride {s}")));
        }
        let g = self.provider.features(&self.store, images, ids)?;
        Ok(if self.provider.frozen() { g.detach() } else { g })
    }

    pub fn local_features(&self, images: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::shape(format!(
                "backbone needs 3 channels and extents divisible by 32, got {:?}",
                images.shape()
            )));
        }
        self.backbone.forward(&self.store, images)
    }

    /// Runs the network and keeps every intermediate activation.
    /// `train_rng` enables dropout; `None` is evaluation mode.
    pub fn forward_with_trace(
        &self,
        images: &Tensor<T>,
        ids: &[String],
        mut train_rng: Option<&mut dyn RngCore>,
    ) -> Result<Trace<T>> {
        let (_, _, h, w) = images.dims4()?;
        let global = self.global_features(images, ids)?;
        let local = self.local_features(images)?;
        let fused = self
            .fusion
            .iter()
            .zip(&local)
            .map(|(block, l)| block.forward(&self.store, &global, l))
            .collect::<Result<Vec<_>>>()?;
        let concat = Tensor::concat(&fused, 1)?;
        let mut decoder = Vec::with_capacity(3);
        let mut x = concat.clone();
        for stage in &self.decoder {
            let rng: Option<&mut dyn RngCore> = match train_rng {
                Some(ref mut r) => Some(&mut **r),
                None => None,
            };
            x = stage.forward(&self.store, &x, self.config.dropout, rng)?;
            decoder.push(x.clone());
        }
        let head = self.head.forward(&self.store, &x)?;
        let logits = head.bilinear_resize(h, w)?;
        Ok(Trace {
            global,
            local,
            fused,
            concat,
            decoder,
            head,
            logits,
        })
    }

    pub fn forward(&self, images: &Tensor<T>, ids: &[String], train_rng: Option<&mut dyn RngCore>) -> Result<Tensor<T>> {
        Ok(self.forward_with_trace(images, ids, train_rng)?.logits)
    }

    pub fn checkpoint(&self, config_echo: String) -> Checkpoint {
        Checkpoint::from_store(&self.store, config_echo)
    }

    pub fn load_weights(&self, ckpt: &Checkpoint) -> Result<()> {
        ckpt.apply(&self.store)
    }
}
