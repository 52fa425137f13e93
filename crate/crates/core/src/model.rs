//! Encoder `f`, projector `g` and predictor `q`, plus the `HVPCKPT1`
//! checkpoint container.
//!
//! The encoder is three 3×3 conv blocks (stride 1, 2, 2; bias + ReLU each)
//! followed by global average pooling. Projector and predictor are two-layer
//! MLPs with a ReLU between the layers.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{ensure, HvpError, Result};
use crate::rng::{self, tag};
use crate::tensor::{Graph, OptimizerState, SgdConfig, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelWidths {
    /// Output channels of the three conv blocks; the last is the feature width.
    pub conv: [usize; 3],
    pub proj_hidden: usize,
    /// Embedding width D_z shared by projector output and predictor in/out.
    pub embed_dim: usize,
    /// Predictor bottleneck D_pred.
    pub pred_hidden: usize,
}

impl Default for ModelWidths {
    fn default() -> Self {
        Self {
            conv: [32, 64, 128],
            proj_hidden: 256,
            embed_dim: 64,
            pred_hidden: 16,
        }
    }
}

impl ModelWidths {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.conv.iter().all(|&c| c > 0)
                && self.proj_hidden > 0
                && self.embed_dim > 0
                && self.pred_hidden > 0,
            "model widths must be positive: {self:?}"
        );
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.conv[2]
    }

    /// Names and shapes of all parameters, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let [c1, c2, c3] = self.conv;
        let (ph, dz, dp) = (self.proj_hidden, self.embed_dim, self.pred_hidden);
        vec![
            ("encoder.conv1.weight".into(), vec![c1, 3, 3, 3]),
            ("encoder.conv1.bias".into(), vec![c1]),
            ("encoder.conv2.weight".into(), vec![c2, c1, 3, 3]),
            ("encoder.conv2.bias".into(), vec![c2]),
            ("encoder.conv3.weight".into(), vec![c3, c2, 3, 3]),
            ("encoder.conv3.bias".into(), vec![c3]),
            ("projector.fc1.weight".into(), vec![c3, ph]),
            ("projector.fc1.bias".into(), vec![ph]),
            ("projector.fc2.weight".into(), vec![ph, dz]),
            ("projector.fc2.bias".into(), vec![dz]),
            ("predictor.fc1.weight".into(), vec![dz, dp]),
            ("predictor.fc1.bias".into(), vec![dp]),
            ("predictor.fc2.weight".into(), vec![dp, dz]),
            ("predictor.fc2.bias".into(), vec![dz]),
        ]
    }
}

const STRIDES: [usize; 3] = [1, 2, 2];
const PREDICTOR_START: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Projector,
    Predictor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    widths: ModelWidths,
    names: Vec<String>,
    params: Vec<Tensor>,
}

/// Parameters placed on a tape.
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

/// Kaiming-uniform fan-in initialisation with zero biases.
pub fn init_model(seed: u64, widths: &ModelWidths) -> Result<ModelState> {
    widths.validate()?;
    let mut rng = rng::stream(seed, &[tag::INIT]);
    let mut names = Vec::new();
    let mut params = Vec::new();
    for (name, shape) in widths.layout() {
        let n: usize = shape.iter().product();
        let data = if name.ends_with(".bias") {
            vec![0.0; n]
        } else {
            let fan_in = if shape.len() == 4 {
                shape[1] * 9
            } else {
                shape[0]
            };
            let bound = (6.0 / fan_in as f32).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        params.push(Tensor::new(shape, data)?.requiring_grad());
        names.push(name);
    }
    Ok(ModelState {
        widths: widths.clone(),
        names,
        params,
    })
}

impl ModelState {
    /// Assemble from stored tensors; shapes must match `widths`.
    pub fn from_params(widths: ModelWidths, params: Vec<Tensor>) -> Result<Self> {
        widths.validate()?;
        let layout = widths.layout();
        ensure!(
            layout.len() == params.len(),
            "expected {} parameter tensors, got {}",
            layout.len(),
            params.len()
        );
        let mut names = Vec::new();
        let mut out = Vec::new();
        for ((name, shape), p) in layout.into_iter().zip(params) {
            ensure!(
                p.shape() == shape.as_slice(),
                "{name} has shape {:?}, expected {shape:?}",
                p.shape()
            );
            let mut p = p;
            p.set_requires_grad(true);
            out.push(p);
            names.push(name);
        }
        Ok(Self {
            widths,
            names,
            params: out,
        })
    }

    pub fn widths(&self) -> &ModelWidths {
        &self.widths
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn group(&self, index: usize) -> ParamGroup {
        match index {
            0..=5 => ParamGroup::Encoder,
            6..PREDICTOR_START => ParamGroup::Projector,
            _ => ParamGroup::Predictor,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Register every parameter on `g`.
    pub fn bind(&self, g: &mut Graph) -> Result<Bound> {
        ensure!(self.is_finite(), "model parameters contain non-finite values");
        Ok(Bound(
            self.params
                .iter()
                .enumerate()
                .map(|(i, p)| g.param(i, p))
                .collect(),
        ))
    }

    /// `x[M,3,S,S]` → features `[M, conv[2]]`.
    pub fn encode(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        ensure!(
            shape.len() == 4 && shape[1] == 3,
            "encoder expects [M,3,S,S] images, got {shape:?}"
        );
        let mut y = x;
        for (blk, stride) in STRIDES.iter().enumerate() {
            y = g.conv2d(y, b.0[2 * blk], *stride, 1)?;
            y = g.channel_bias(y, b.0[2 * blk + 1])?;
            y = g.relu(y);
        }
        g.global_avg_pool(y)
    }

    pub fn project(&self, g: &mut Graph, b: &Bound, h: Var) -> Result<Var> {
        let y = g.affine(h, b.0[6], b.0[7])?;
        let y = g.relu(y);
        g.affine(y, b.0[8], b.0[9])
    }

    pub fn predict(&self, g: &mut Graph, b: &Bound, z: Var) -> Result<Var> {
        let y = g.affine(z, b.0[10], b.0[11])?;
        let y = g.relu(y);
        g.affine(y, b.0[12], b.0[13])
    }

    /// Gradient-free encoder features for an image batch.
    pub fn features(&self, images: Tensor) -> Result<Tensor> {
        let mut g = Graph::no_grad();
        let b = self.bind(&mut g)?;
        let x = g.input(images);
        let h = self.encode(&mut g, &b, x)?;
        Ok(g.tensor(h))
    }

    /// Gradient-free projector outputs for an image batch.
    pub fn embeddings(&self, images: Tensor) -> Result<Tensor> {
        let mut g = Graph::no_grad();
        let b = self.bind(&mut g)?;
        let x = g.input(images);
        let h = self.encode(&mut g, &b, x)?;
        let z = self.project(&mut g, &b, h)?;
        Ok(g.tensor(z))
    }
}

/// Pixel normalisation applied to every network input: `(v - 0.5) / 0.25`.
pub const INPUT_CENTER: f32 = 0.5;
pub const INPUT_SCALE: f32 = 0.25;

/// Stack equally sized images into a normalised `[M,3,H,W]` batch.
pub fn image_batch(images: &[Image]) -> Result<Tensor> {
    ensure!(!images.is_empty(), "empty image batch");
    let (h, w) = (images[0].height(), images[0].width());
    ensure!(
        images.iter().all(|im| im.height() == h && im.width() == w),
        "images in a batch must share dimensions"
    );
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for im in images {
        im.write_chw(&mut data);
    }
    data.iter_mut().for_each(|v| *v = (*v - INPUT_CENTER) / INPUT_SCALE);
    Tensor::new(vec![images.len(), 3, h, w], data)
}

// ------------------------------------------------------------------ checkpoints

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HVPCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the blob section.
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub widths: ModelWidths,
    pub seed: u64,
    pub step: u64,
    pub epoch: u64,
    pub config_hash: String,
    pub optimizer: SgdConfig,
    /// Caller-owned metadata (the trainer stores its counters here).
    #[serde(default)]
    pub extra: serde_json::Value,
    pub tensors: Vec<BlobEntry>,
}

/// Metadata a caller supplies when saving.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub step: u64,
    pub epoch: u64,
    pub config_hash: String,
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelState,
    pub optimizer: OptimizerState,
    pub meta: CheckpointMeta,
}

/// Magic, one line of JSON header, then little-endian f32 blobs: parameters
/// in layout order followed by their momentum buffers.
pub fn encode_checkpoint(model: &ModelState, opt: &OptimizerState, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    ensure!(
        opt.buffers().len() == model.params().len(),
        "optimizer state does not match the model"
    );
    let mut tensors = Vec::new();
    let mut offset = 0u64;
    let mut blobs: Vec<&[f32]> = Vec::new();
    for (name, p) in model.names().iter().zip(model.params()) {
        tensors.push(BlobEntry {
            name: name.clone(),
            shape: p.shape().to_vec(),
            offset,
            len: p.numel() as u64 * 4,
        });
        offset += p.numel() as u64 * 4;
        blobs.push(p.data());
    }
    for ((name, p), buf) in model.names().iter().zip(model.params()).zip(opt.buffers()) {
        tensors.push(BlobEntry {
            name: format!("momentum/{name}"),
            shape: p.shape().to_vec(),
            offset,
            len: buf.len() as u64 * 4,
        });
        offset += buf.len() as u64 * 4;
        blobs.push(buf);
    }
    let header = CheckpointHeader {
        widths: model.widths().clone(),
        seed: meta.seed,
        step: meta.step,
        epoch: meta.epoch,
        config_hash: meta.config_hash.clone(),
        optimizer: opt.config,
        extra: meta.extra.clone(),
        tensors,
    };
    let mut out = Vec::with_capacity(offset as usize + 4096);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    serde_json::to_writer(&mut out, &header)?;
    out.push(b'\n');
    for blob in blobs {
        for v in blob {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(HvpError::format("missing HVPCKPT1 magic"));
    }
    let rest = &bytes[8..];
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| HvpError::format("checkpoint header is not terminated"))?;
    let header: CheckpointHeader = serde_json::from_slice(&rest[..nl])
        .map_err(|e| HvpError::format(format!("checkpoint header: {e}")))?;
    let blob = &rest[nl + 1..];
    let read = |e: &BlobEntry| -> Result<Tensor> {
        let end = e.offset.checked_add(e.len).filter(|&end| end <= blob.len() as u64);
        let Some(end) = end else {
            return Err(HvpError::format(format!("blob {} is truncated", e.name)));
        };
        let raw = &blob[e.offset as usize..end as usize];
        if !raw.len().is_multiple_of(4) {
            return Err(HvpError::format(format!("blob {} has a partial value", e.name)));
        }
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(e.shape.clone(), data).map_err(|e| HvpError::format(e.to_string()))
    };
    let n = header.widths.layout().len();
    if header.tensors.len() != 2 * n {
        return Err(HvpError::format(format!(
            "checkpoint lists {} tensors, expected {}",
            header.tensors.len(),
            2 * n
        )));
    }
    let params = header.tensors[..n].iter().map(read).collect::<Result<Vec<_>>>()?;
    let buffers = header.tensors[n..]
        .iter()
        .map(|e| read(e).map(Tensor::into_data))
        .collect::<Result<Vec<_>>>()?;
    let model = ModelState::from_params(header.widths.clone(), params)
        .map_err(|e| HvpError::format(e.to_string()))?;
    for (p, b) in model.params().iter().zip(&buffers) {
        if p.numel() != b.len() {
            return Err(HvpError::format("momentum buffer does not match its parameter"));
        }
    }
    let optimizer = OptimizerState::from_buffers(header.optimizer, buffers)
        .map_err(|e| HvpError::format(e.to_string()))?;
    Ok(Checkpoint {
        model,
        optimizer,
        meta: CheckpointMeta {
            seed: header.seed,
            step: header.step,
            epoch: header.epoch,
            config_hash: header.config_hash,
            extra: header.extra,
        },
    })
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &ModelState,
    opt: &OptimizerState,
    meta: &CheckpointMeta,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(model, opt, meta)?;
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| HvpError::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| HvpError::io(&tmp, e))?;
    f.sync_all().map_err(|e| HvpError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| HvpError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| HvpError::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Fresh optimizer state for a model.
pub fn optimizer_for(model: &ModelState, config: SgdConfig) -> Result<OptimizerState> {
    OptimizerState::new(config, model.params())
}
