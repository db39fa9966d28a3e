//! Checkpoint file format.
//!
//! ```text
//! b"TSCK"                 4 bytes
//! u32 format version      little-endian
//! u64 manifest length     little-endian, bytes
//! manifest                UTF-8 text, one `key=value` or `tensor` line each
//! payload                 little-endian f32, row-major, in manifest order
//! ```
//!
//! Tensor lines read `tensor <name> offset=<bytes> shape=<d0>x<d1>`, with
//! offsets relative to the payload start. Tensors are laid out back to back in
//! a canonical order, so saving a loaded checkpoint reproduces its bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{
    AttentionWeights, BlockWeights, FfnWeights, HiddenDims, ModelConfig, ModelWeights,
};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TSCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const PREFIX_LEN: usize = 16;

fn join(values: &[usize]) -> String {
    values
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

/// Canonical tensor order: embedding, then per block the attention norm and
/// projections (if present) followed by the FFN norm and projections, then the
/// final norm and LM head.
fn tensors_in_order(model: &ModelWeights) -> Vec<(String, Vec<usize>, &[f32])> {
    let d = model.config.d_model;
    let mut out = vec![(
        "token_embedding".to_string(),
        model.token_embedding.shape().to_vec(),
        model.token_embedding.data(),
    )];
    for (i, b) in model.blocks.iter().enumerate() {
        if let Some(a) = &b.attention {
            out.push((format!("block.{i}.attn_norm"), vec![d], &a.norm[..]));
            for (name, t) in [("wq", &a.wq), ("wk", &a.wk), ("wv", &a.wv), ("wo", &a.wo)] {
                out.push((format!("block.{i}.{name}"), t.shape().to_vec(), t.data()));
            }
        }
        let f = &b.ffn;
        out.push((format!("block.{i}.ffn_norm"), vec![d], &f.norm[..]));
        for (name, t) in [
            ("w_gate", &f.w_gate),
            ("w_up", &f.w_up),
            ("w_down", &f.w_down),
        ] {
            out.push((format!("block.{i}.{name}"), t.shape().to_vec(), t.data()));
        }
    }
    out.push(("final_norm".into(), vec![d], &model.final_norm[..]));
    out.push((
        "lm_head".into(),
        model.lm_head.shape().to_vec(),
        model.lm_head.data(),
    ));
    out
}

pub fn encode_checkpoint(model: &ModelWeights) -> Result<Vec<u8>> {
    model.validate()?;
    let c = &model.config;
    let mut manifest = String::new();
    let mut line = |k: &str, v: String| {
        let _ = writeln!(manifest, "{k}={v}");
    };
    line("format_version", CHECKPOINT_VERSION.to_string());
    line("num_blocks", c.num_blocks.to_string());
    line("d_model", c.d_model.to_string());
    line("d_int_per_block", join(&c.d_int_per_block));
    line("n_heads", c.n_heads.to_string());
    line("n_kv_heads", c.n_kv_heads.to_string());
    line("head_dim", c.head_dim.to_string());
    line("vocab_size", c.vocab_size.to_string());
    line("max_seq_len", c.max_seq_len.to_string());
    line("rope_theta", c.rope_theta.to_string());
    line("norm_eps", c.norm_eps.to_string());
    for (i, b) in model.blocks.iter().enumerate() {
        line(
            &format!("block.{i}.attention_present"),
            b.attention_present().to_string(),
        );
        line(
            &format!("block.{i}.original_d_int"),
            b.ffn.original_width.to_string(),
        );
        if let Some(kept) = &b.ffn.kept_neurons {
            line(&format!("block.{i}.kept_neurons"), join(kept));
        }
        if let Some(h) = &b.ffn.hidden_dims {
            line(&format!("block.{i}.ffn_input_dims"), join(&h.input));
            line(&format!("block.{i}.ffn_output_dims"), join(&h.output));
        }
    }
    let tensors = tensors_in_order(model);
    let mut offset = 0usize;
    for (name, shape, data) in &tensors {
        let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
        let _ = writeln!(
            manifest,
            "tensor {name} offset={offset} shape={}",
            dims.join("x")
        );
        offset += 4 * data.len();
    }

    let mut out = Vec::with_capacity(PREFIX_LEN + manifest.len() + offset);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    for (_, _, data) in &tensors {
        for v in data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(model: &ModelWeights, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelWeights> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

struct Manifest<'a> {
    entries: Vec<(&'a str, &'a str)>,
    tensors: Vec<TensorEntry<'a>>,
}

struct TensorEntry<'a> {
    name: &'a str,
    offset: usize,
    shape: Vec<usize>,
}

struct Parser<'a> {
    path: &'a Path,
}

impl<'a> Parser<'a> {
    fn err(&self, detail: impl Into<String>) -> Error {
        Error::format(self.path, detail)
    }

    fn parse_manifest<'m>(&self, text: &'m str) -> Result<Manifest<'m>> {
        let mut entries = Vec::new();
        let mut tensors = Vec::new();
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("tensor ") {
                let mut parts = rest.split(' ');
                let (Some(name), Some(off), Some(shape), None) =
                    (parts.next(), parts.next(), parts.next(), parts.next())
                else {
                    return Err(self.err(format!("malformed tensor line `{line}`")));
                };
                let offset = off
                    .strip_prefix("offset=")
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| self.err(format!("bad offset in `{line}`")))?;
                let shape = shape
                    .strip_prefix("shape=")
                    .map(|v| {
                        v.split('x')
                            .map(str::parse)
                            .collect::<std::result::Result<Vec<usize>, _>>()
                    })
                    .and_then(|r| r.ok())
                    .ok_or_else(|| self.err(format!("bad shape in `{line}`")))?;
                tensors.push(TensorEntry {
                    name,
                    offset,
                    shape,
                });
            } else {
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| self.err(format!("malformed manifest line `{line}`")))?;
                entries.push((k, v));
            }
        }
        Ok(Manifest { entries, tensors })
    }

    fn value<'m>(&self, m: &Manifest<'m>, key: &str) -> Result<&'m str> {
        m.entries
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| self.err(format!("missing manifest key `{key}`")))
    }

    fn optional<'m>(&self, m: &Manifest<'m>, key: &str) -> Option<&'m str> {
        m.entries.iter().find(|(k, _)| *k == key).map(|(_, v)| *v)
    }

    fn num<T: std::str::FromStr>(&self, m: &Manifest, key: &str) -> Result<T> {
        self.value(m, key)?
            .parse()
            .map_err(|_| self.err(format!("bad value for `{key}`")))
    }

    fn list(&self, v: &str, key: &str) -> Result<Vec<usize>> {
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|x| {
                x.parse()
                    .map_err(|_| self.err(format!("bad list for `{key}`")))
            })
            .collect()
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<ModelWeights> {
    let p = Parser { path };
    if bytes.len() < PREFIX_LEN {
        return Err(p.err("truncated header"));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(p.err("bad magic, expected TSCK"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let payload_start = PREFIX_LEN
        .checked_add(manifest_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| p.err("truncated manifest"))?;
    let text = std::str::from_utf8(&bytes[PREFIX_LEN..payload_start])
        .map_err(|_| p.err("manifest is not UTF-8"))?;
    let payload = &bytes[payload_start..];
    let m = p.parse_manifest(text)?;

    let manifest_version: u32 = p.num(&m, "format_version")?;
    if manifest_version != version {
        return Err(p.err(format!(
            "manifest version {manifest_version} disagrees with header version {version}"
        )));
    }
    let num_blocks: usize = p.num(&m, "num_blocks")?;
    let config = ModelConfig {
        num_blocks,
        d_model: p.num(&m, "d_model")?,
        d_int_per_block: p.list(p.value(&m, "d_int_per_block")?, "d_int_per_block")?,
        n_heads: p.num(&m, "n_heads")?,
        n_kv_heads: p.num(&m, "n_kv_heads")?,
        head_dim: p.num(&m, "head_dim")?,
        vocab_size: p.num(&m, "vocab_size")?,
        max_seq_len: p.num(&m, "max_seq_len")?,
        rope_theta: p.num(&m, "rope_theta")?,
        norm_eps: p.num(&m, "norm_eps")?,
    };
    config.validate()?;

    // Offsets must be contiguous and in order, and cover the payload exactly.
    let mut expected_offset = 0usize;
    for t in &m.tensors {
        if t.offset != expected_offset {
            return Err(p.err(format!(
                "tensor {} at offset {} but previous tensor ends at {expected_offset}",
                t.name, t.offset
            )));
        }
        let n: usize = t.shape.iter().product();
        expected_offset += 4 * n;
    }
    if expected_offset != payload.len() {
        return Err(p.err(format!(
            "manifest describes {expected_offset} payload bytes, file holds {}",
            payload.len()
        )));
    }

    let mut cursor = m.tensors.iter();
    let mut take = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
        let t = cursor
            .next()
            .ok_or_else(|| p.err(format!("missing tensor {name}")))?;
        if t.name != name {
            return Err(p.err(format!("expected tensor {name}, found {}", t.name)));
        }
        if t.shape != shape {
            return Err(p.err(format!(
                "tensor {name} has shape {:?}, config implies {shape:?}",
                t.shape
            )));
        }
        let n: usize = shape.iter().product();
        let raw = &payload[t.offset..t.offset + 4 * n];
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    };
    let d = config.d_model;
    let kv = config.kv_dim();
    let tensor = |shape: [usize; 2], data: Vec<f32>| Tensor::new(shape.to_vec(), data);

    let token_embedding = tensor(
        [config.vocab_size, d],
        take("token_embedding", &[config.vocab_size, d])?,
    )?;
    let mut blocks = Vec::with_capacity(num_blocks);
    for i in 0..num_blocks {
        let key = |s: &str| format!("block.{i}.{s}");
        let present = match p.value(&m, &key("attention_present"))? {
            "true" => true,
            "false" => false,
            other => return Err(p.err(format!("bad attention flag `{other}` for block {i}"))),
        };
        let attention = if present {
            Some(AttentionWeights {
                norm: take(&key("attn_norm"), &[d])?,
                wq: tensor([d, d], take(&key("wq"), &[d, d])?)?,
                wk: tensor([d, kv], take(&key("wk"), &[d, kv])?)?,
                wv: tensor([d, kv], take(&key("wv"), &[d, kv])?)?,
                wo: tensor([d, d], take(&key("wo"), &[d, d])?)?,
            })
        } else {
            None
        };
        let width = config.d_int_per_block.get(i).copied().unwrap_or(0);
        let kept_neurons = p
            .optional(&m, &key("kept_neurons"))
            .map(|v| p.list(v, "kept_neurons"))
            .transpose()?;
        let hidden_dims = match (
            p.optional(&m, &key("ffn_input_dims")),
            p.optional(&m, &key("ffn_output_dims")),
        ) {
            (None, None) => None,
            (Some(a), Some(b)) => Some(HiddenDims {
                input: p.list(a, "ffn_input_dims")?,
                output: p.list(b, "ffn_output_dims")?,
            }),
            _ => return Err(p.err(format!("block {i} lists only one of the FFN dim masks"))),
        };
        let (d_in, d_out) = hidden_dims
            .as_ref()
            .map_or((d, d), |h| (h.input.len(), h.output.len()));
        let norm = take(&key("ffn_norm"), &[d])?;
        let w_gate = tensor([width, d_in], take(&key("w_gate"), &[width, d_in])?)?;
        let w_up = tensor([width, d_in], take(&key("w_up"), &[width, d_in])?)?;
        let w_down = tensor([d_out, width], take(&key("w_down"), &[d_out, width])?)?;
        blocks.push(BlockWeights {
            attention,
            ffn: FfnWeights {
                norm,
                w_gate,
                w_up,
                w_down,
                original_width: p.num(&m, &key("original_d_int"))?,
                kept_neurons,
                hidden_dims,
            },
        });
    }
    let final_norm = take("final_norm", &[d])?;
    let lm_head = tensor(
        [config.vocab_size, d],
        take("lm_head", &[config.vocab_size, d])?,
    )?;
    if let Some(extra) = cursor.next() {
        return Err(p.err(format!("unexpected tensor {}", extra.name)));
    }

    let model = ModelWeights {
        config,
        token_embedding,
        final_norm,
        lm_head,
        blocks,
    };
    model.validate()?;
    Ok(model)
}
