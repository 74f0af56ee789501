//! Model checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "PANCKPT1"
//! u32 config_len   config_len bytes of key=value text   u32 CRC32 of that text
//! u32 tensors
//! tensors x { u8 kind (0 param, 1 buffer)  u16 name_len  name  u32 rank  rank x u32 dim  f64 values }
//! u32 CRC32 of every preceding byte
//! ```
//!
//! The config text is enough to rebuild the network; tensors must then
//! match it name for name and shape for shape.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use painattn_core::autograd::Layer;
use painattn_core::model::{BranchConfig, ConvStage, ModelConfig, PainAttnNet, PoolStage};
use painattn_core::Tensor;

use crate::bytes::{check_crc, check_magic, push_crc, Reader};
use crate::config::parse_kv;
use crate::error::{AppError, AppResult, FormatError};

pub const MAGIC: &[u8; 8] = b"PANCKPT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Param,
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub kind: TensorKind,
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub task: String,
    pub config: ModelConfig,
    pub tensors: Vec<NamedTensor>,
}

fn collect(model: &mut PainAttnNet) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    model.visit_params(&mut |name, p| {
        out.push(NamedTensor {
            kind: TensorKind::Param,
            name: name.to_string(),
            value: p.value.clone(),
        })
    });
    model.visit_buffers(&mut |name, t| {
        out.push(NamedTensor {
            kind: TensorKind::Buffer,
            name: name.to_string(),
            value: t.clone(),
        })
    });
    out
}

impl Checkpoint {
    pub fn capture(model: &mut PainAttnNet, task: &str) -> Self {
        Self {
            task: task.to_string(),
            config: model.config().clone(),
            tensors: collect(model),
        }
    }

    /// Rebuilds the network and loads every tensor into it.
    pub fn restore(&self) -> painattn_core::Result<PainAttnNet> {
        let mut model = PainAttnNet::new(self.config.clone(), 0)?;
        let mut values = self.tensors.iter().map(|t| &t.value);
        model.visit_params(&mut |_, p| p.value = values.next().expect("checked on decode").clone());
        model.visit_buffers(&mut |_, t| *t = values.next().expect("checked on decode").clone());
        model.set_mode(painattn_core::autograd::Mode::Eval);
        Ok(model)
    }

    /// Key=value text describing the task and model geometry.
    pub fn config_text(&self) -> String {
        let mut s = format!("task={}\n", self.task);
        for (k, v) in model_config_kv(&self.config) {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }

    pub fn encode(&self) -> Vec<u8> {
        let text = self.config_text();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&crc32fast::hash(text.as_bytes()).to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.push(match t.kind {
                TensorKind::Param => 0,
                TensorKind::Buffer => 1,
            });
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.value.rank() as u32).to_le_bytes());
            for &d in t.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        push_crc(&mut out);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        check_magic(bytes, MAGIC)?;
        check_crc(bytes, 8 + 4)?;
        let body = &bytes[..bytes.len() - 4];
        let mut rd = Reader::new(body);
        rd.take(8, "magic")?;
        let text_len = rd.u32("config length")? as usize;
        let text_at = rd.pos as u64;
        let text = rd.take(text_len, "config text")?;
        let digest = rd.u32("config digest")?;
        if digest != crc32fast::hash(text) {
            return Err(FormatError::new(
                text_at + text_len as u64,
                "config digest does not match config text",
            ));
        }
        let text = std::str::from_utf8(text).map_err(|e| {
            FormatError::new(text_at + e.valid_up_to() as u64, "config text is not UTF-8")
        })?;
        let mut map = parse_kv(text).map_err(|(line, msg)| {
            FormatError::new(text_at, format!("config line {line}: {msg}"))
        })?;
        let task = map
            .remove("task")
            .ok_or_else(|| FormatError::new(text_at, "config has no task"))?;
        let config =
            model_config_from_kv(&mut map).map_err(|msg| FormatError::new(text_at, msg))?;
        if let Some(k) = map.keys().next() {
            return Err(FormatError::new(
                text_at,
                format!("unknown config key {k:?}"),
            ));
        }
        let announced = min_weight_count(&config).saturating_mul(8);
        if announced > rd.remaining() as u128 {
            return Err(FormatError::new(
                text_at,
                format!(
                    "config needs at least {announced} bytes of weights, file has {}",
                    rd.remaining()
                ),
            ));
        }
        let mut skeleton = PainAttnNet::new(config.clone(), 0)
            .map_err(|e| FormatError::new(text_at, format!("config does not build: {e}")))?;
        let expected = collect(&mut skeleton);

        let count_at = rd.pos as u64;
        let count = rd.u32("tensor count")? as usize;
        if count != expected.len() {
            return Err(FormatError::new(
                count_at,
                format!("{count} tensors, model has {}", expected.len()),
            ));
        }
        let mut tensors = Vec::with_capacity(count);
        for want in &expected {
            let at = rd.pos as u64;
            let kind = match rd.u8("tensor kind")? {
                0 => TensorKind::Param,
                1 => TensorKind::Buffer,
                k => return Err(FormatError::new(at, format!("unknown tensor kind {k}"))),
            };
            let name_len = rd.u16("name length")? as usize;
            let name = String::from_utf8(rd.take(name_len, "tensor name")?.to_vec())
                .map_err(|_| FormatError::new(at, "tensor name is not UTF-8"))?;
            let rank = rd.u32("rank")? as usize;
            if rank > 8 {
                return Err(FormatError::new(at, format!("tensor {name}: rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(rd.u32("dimension")? as usize);
            }
            if kind != want.kind || name != want.name || shape != want.value.shape() {
                return Err(FormatError::new(
                    at,
                    format!(
                        "tensor {name:?} {kind:?} {shape:?} where the model has {:?} {:?} {:?}",
                        want.name,
                        want.kind,
                        want.value.shape()
                    ),
                ));
            }
            let n = want.value.len();
            let raw = rd.take(8 * n, "tensor values")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let value =
                Tensor::new(shape, data).map_err(|e| FormatError::new(at, e.to_string()))?;
            tensors.push(NamedTensor { kind, name, value });
        }
        if rd.remaining() > 0 {
            return Err(FormatError::new(
                rd.pos as u64,
                format!("{} unexpected trailing bytes", rd.remaining()),
            ));
        }
        Ok(Self {
            task,
            config,
            tensors,
        })
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> AppResult<()> {
    fs::write(path, ckpt.encode()).map_err(|e| AppError::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> AppResult<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
    Checkpoint::decode(&bytes).map_err(|e| AppError::format(path, e))
}

// ---------------------------------------------------------------------------
// ModelConfig <-> key=value

fn branch_kv(prefix: &str, b: &BranchConfig, out: &mut Vec<(String, String)>) {
    let conv = |c: &ConvStage| format!("{},{},{},{}", c.kernel, c.stride, c.pad, c.out_channels);
    let pool = |p: &PoolStage| format!("{},{}", p.kernel, p.stride);
    out.push((format!("{prefix}.conv1"), conv(&b.conv1)));
    out.push((format!("{prefix}.pool1"), pool(&b.pool1)));
    out.push((format!("{prefix}.dropout"), b.dropout.to_string()));
    out.push((format!("{prefix}.conv2"), conv(&b.conv2)));
    out.push((format!("{prefix}.conv3"), conv(&b.conv3)));
    out.push((format!("{prefix}.pool2"), pool(&b.pool2)));
}

/// Every field of a model config, in a fixed order.
pub fn model_config_kv(c: &ModelConfig) -> Vec<(String, String)> {
    let mut out = vec![
        ("input_len".to_string(), c.input_len.to_string()),
        ("num_classes".to_string(), c.num_classes.to_string()),
    ];
    branch_kv("mscn.large", &c.mscn.large, &mut out);
    branch_kv("mscn.small", &c.mscn.small, &mut out);
    let e = &c.encoder;
    for (k, v) in [
        ("se.in_channels", c.se.in_channels.to_string()),
        ("se.mid_channels", c.se.mid_channels.to_string()),
        ("se.reduction", c.se.reduction.to_string()),
        ("encoder.heads", e.heads.to_string()),
        ("encoder.width", e.width.to_string()),
        ("encoder.tcn_kernel", e.tcn_kernel.to_string()),
        ("encoder.ffn_hidden", e.ffn_hidden.to_string()),
        ("encoder.dropout", e.dropout.to_string()),
        ("encoder.blocks", e.blocks.to_string()),
        ("classifier_hidden", c.classifier_hidden.to_string()),
    ] {
        out.push((k.to_string(), v));
    }
    out
}

/// Lower bound on the stored values a config implies, checked before anything is allocated.
fn min_weight_count(c: &ModelConfig) -> u128 {
    let u = |v: usize| v as u128;
    let branch = |b: &BranchConfig| {
        u(b.conv1.kernel) * u(b.conv1.out_channels)
            + u(b.conv1.out_channels) * u(b.conv2.kernel) * u(b.conv2.out_channels)
            + u(b.conv2.out_channels) * u(b.conv3.kernel) * u(b.conv3.out_channels)
    };
    let e = &c.encoder;
    let tokens = u(c.se.mid_channels);
    let block = 3 * tokens * u(e.heads) * tokens * u(e.tcn_kernel)
        + u(e.heads) * u(e.width) * u(e.width)
        + 2 * u(e.width) * u(e.ffn_hidden);
    branch(&c.mscn.large)
        + branch(&c.mscn.small)
        + u(c.se.in_channels) * tokens
        + u(e.blocks) * block
        + tokens * u(e.width) * u(c.classifier_hidden)
        + u(c.classifier_hidden) * u(c.num_classes)
}

fn take<T: std::str::FromStr>(map: &mut BTreeMap<String, String>, key: &str) -> Result<T, String> {
    let v = map
        .remove(key)
        .ok_or_else(|| format!("missing key {key}"))?;
    v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
}

fn take_list<const N: usize>(
    map: &mut BTreeMap<String, String>,
    key: &str,
) -> Result<[usize; N], String> {
    let v: String = take(map, key)?;
    let parts: Vec<usize> = v
        .split(',')
        .map(|p| p.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| format!("{key}: cannot parse {v:?}"))?;
    parts
        .try_into()
        .map_err(|_| format!("{key}: expected {N} comma-separated integers, got {v:?}"))
}

fn take_branch(map: &mut BTreeMap<String, String>, prefix: &str) -> Result<BranchConfig, String> {
    let conv = |m: &mut BTreeMap<String, String>, k: &str| -> Result<ConvStage, String> {
        let [kernel, stride, pad, out_channels] = take_list(m, &format!("{prefix}.{k}"))?;
        Ok(ConvStage {
            kernel,
            stride,
            pad,
            out_channels,
        })
    };
    let pool = |m: &mut BTreeMap<String, String>, k: &str| -> Result<PoolStage, String> {
        let [kernel, stride] = take_list(m, &format!("{prefix}.{k}"))?;
        Ok(PoolStage { kernel, stride })
    };
    Ok(BranchConfig {
        conv1: conv(map, "conv1")?,
        pool1: pool(map, "pool1")?,
        dropout: take(map, &format!("{prefix}.dropout"))?,
        conv2: conv(map, "conv2")?,
        conv3: conv(map, "conv3")?,
        pool2: pool(map, "pool2")?,
    })
}

/// Inverse of [`model_config_kv`]; consumed keys are removed from `map`.
pub fn model_config_from_kv(map: &mut BTreeMap<String, String>) -> Result<ModelConfig, String> {
    let mut c = ModelConfig::reference(2);
    c.input_len = take(map, "input_len")?;
    c.num_classes = take(map, "num_classes")?;
    c.mscn.large = take_branch(map, "mscn.large")?;
    c.mscn.small = take_branch(map, "mscn.small")?;
    c.se.in_channels = take(map, "se.in_channels")?;
    c.se.mid_channels = take(map, "se.mid_channels")?;
    c.se.reduction = take(map, "se.reduction")?;
    c.encoder.heads = take(map, "encoder.heads")?;
    c.encoder.width = take(map, "encoder.width")?;
    c.encoder.tcn_kernel = take(map, "encoder.tcn_kernel")?;
    c.encoder.ffn_hidden = take(map, "encoder.ffn_hidden")?;
    c.encoder.dropout = take(map, "encoder.dropout")?;
    c.encoder.blocks = take(map, "encoder.blocks")?;
    c.classifier_hidden = take(map, "classifier_hidden")?;
    Ok(c)
}
