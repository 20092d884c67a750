//! Model checkpoints: a text manifest followed by raw little-endian f64 data.
//!
//! ```text
//! docnmt-checkpoint 1
//! config kind=doc-model
//! config integration=context
//! ...
//! tensor <name> <trainable 0|1> <shape, comma-separated> <offset> <count>
//! ...
//! end
//! <f64 values, little-endian, in tensor order>
//! ```
//! Offsets count values from the start of the data block.

use std::path::Path;

use crate::config::KeyValues;
use crate::docnmt::{integration_name, parse_integration, DocModel, DocModelConfig, MemorySelection, QuerySource};
use crate::error::{Error, Result};
use crate::layers::DropoutPlan;
use crate::nmt::NmtDims;
use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::train::SentenceLm;

pub const MAGIC: &str = "docnmt-checkpoint";
pub const VERSION: u32 = 1;
const DOC_MODEL: &str = "doc-model";
const SENTENCE_LM: &str = "sentence-lm";

/// Model configuration as ordered `key=value` pairs.
pub fn config_pairs(cfg: &DocModelConfig) -> Vec<(&'static str, String)> {
    let d = &cfg.nmt;
    vec![
        ("integration", integration_name(cfg.integration).to_string()),
        ("memories", cfg.memories.name().to_string()),
        ("prev_trg", cfg.prev_trg.to_string()),
        ("src_vocab", d.src_vocab.to_string()),
        ("tgt_vocab", d.tgt_vocab.to_string()),
        ("embed", d.embed.to_string()),
        ("hidden", d.hidden.to_string()),
        ("align", d.align.to_string()),
        ("decoder_layers", d.decoder_layers.to_string()),
        ("lm_embed", cfg.lm_embed.to_string()),
        ("lm_hidden", cfg.lm_hidden.to_string()),
        ("doc_hidden", cfg.doc_hidden.to_string()),
        ("dropout_encoder", cfg.dropout.encoder.to_string()),
        ("dropout_decoder", cfg.dropout.decoder.to_string()),
        ("dropout_doc_rnn", cfg.dropout.doc_rnn.to_string()),
        ("query", cfg.query.name().to_string()),
    ]
}

pub fn config_from_pairs(kv: &KeyValues) -> Result<DocModelConfig> {
    let need = |k: &str| kv.get_str(k).ok_or_else(|| Error::invalid(format!("checkpoint config lacks {k}")));
    let num =
        |k: &str| -> Result<usize> { kv.get(k)?.ok_or_else(|| Error::invalid(format!("checkpoint config lacks {k}"))) };
    let rate =
        |k: &str| -> Result<f64> { kv.get(k)?.ok_or_else(|| Error::invalid(format!("checkpoint config lacks {k}"))) };
    let cfg = DocModelConfig {
        integration: parse_integration(need("integration")?)?,
        memories: MemorySelection::parse(need("memories")?)?,
        prev_trg: kv.get("prev_trg")?.ok_or_else(|| Error::invalid("checkpoint config lacks prev_trg"))?,
        nmt: NmtDims {
            src_vocab: num("src_vocab")?,
            tgt_vocab: num("tgt_vocab")?,
            embed: num("embed")?,
            hidden: num("hidden")?,
            align: num("align")?,
            decoder_layers: num("decoder_layers")?,
        },
        lm_embed: num("lm_embed")?,
        lm_hidden: num("lm_hidden")?,
        doc_hidden: num("doc_hidden")?,
        dropout: DropoutPlan {
            encoder: rate("dropout_encoder")?,
            decoder: rate("dropout_decoder")?,
            doc_rnn: rate("dropout_doc_rnn")?,
        },
        query: QuerySource::parse(need("query")?)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Serialises `params` with the given `config` pairs.
pub fn params_to_bytes(config: &[(&str, String)], params: &ParamSet) -> Vec<u8> {
    let mut head = format!("{MAGIC} {VERSION}\n");
    for (k, v) in config {
        head.push_str(&format!("config {k}={v}\n"));
    }
    let mut offset = 0;
    for (id, name, t) in params.iter() {
        let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        let shape = if shape.is_empty() { "-".to_string() } else { shape.join(",") };
        let trainable = params.is_trainable(id) as u8;
        head.push_str(&format!("tensor {name} {trainable} {shape} {offset} {}\n", t.len()));
        offset += t.len();
    }
    head.push_str("end\n");
    let mut bytes = head.into_bytes();
    bytes.reserve(8 * offset);
    for (_, _, t) in params.iter() {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes
}

/// Inverse of [`params_to_bytes`].
pub fn params_from_bytes(bytes: &[u8], path: &Path) -> Result<(KeyValues, ParamSet)> {
    let fail = |line: usize, msg: String| Error::Format { path: path.to_path_buf(), line, msg };
    let mut pos = 0;
    let mut lines = Vec::new();
    loop {
        let nl = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| fail(lines.len() + 1, "manifest is not terminated by end".into()))?;
        let line = std::str::from_utf8(&bytes[pos..pos + nl])
            .map_err(|_| fail(lines.len() + 1, "manifest is not UTF-8".into()))?;
        pos += nl + 1;
        if line == "end" {
            break;
        }
        lines.push(line.to_string());
    }
    let data = &bytes[pos..];
    if !data.len().is_multiple_of(8) {
        return Err(fail(
            lines.len() + 1,
            format!("data block of {} bytes is not a whole number of f64 values", data.len()),
        ));
    }
    let values: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();

    let header = lines.first().ok_or_else(|| fail(1, "empty manifest".into()))?;
    match header.split_once(' ') {
        Some((MAGIC, v)) if v == VERSION.to_string() => {}
        Some((MAGIC, v)) => return Err(fail(1, format!("unsupported checkpoint version {v}"))),
        _ => return Err(fail(1, "not a docnmt checkpoint".into())),
    }
    let mut config = String::new();
    let mut params = ParamSet::new();
    let mut next = 0;
    for (i, line) in lines.iter().enumerate().skip(1) {
        let n = i + 1;
        if let Some(kv) = line.strip_prefix("config ") {
            config.push_str(kv);
            config.push('\n');
        } else if let Some(rest) = line.strip_prefix("tensor ") {
            let f: Vec<&str> = rest.split(' ').collect();
            if f.len() != 5 {
                return Err(fail(n, format!("tensor entry needs 5 fields, got {}", f.len())));
            }
            let parse = |s: &str| s.parse::<usize>().map_err(|_| fail(n, format!("bad number {s:?}")));
            let shape: Vec<usize> =
                if f[2] == "-" { Vec::new() } else { f[2].split(',').map(parse).collect::<Result<_>>()? };
            let (offset, count) = (parse(f[3])?, parse(f[4])?);
            if offset != next || shape.iter().product::<usize>() != count {
                return Err(fail(n, format!("tensor {} has inconsistent offset or size", f[0])));
            }
            let slice = values
                .get(offset..offset + count)
                .ok_or_else(|| fail(n, format!("tensor {} runs past the data block", f[0])))?;
            next += count;
            let id = params.insert(f[0], Tensor::new(shape, slice.to_vec())?).map_err(|e| fail(n, e.to_string()))?;
            match f[1] {
                "1" => {}
                "0" => params.set_trainable(id, false),
                other => return Err(fail(n, format!("bad trainable flag {other:?}"))),
            }
        } else {
            return Err(fail(n, format!("unexpected manifest line {line:?}")));
        }
    }
    if next != values.len() {
        return Err(fail(lines.len() + 1, format!("{} trailing values after the last tensor", values.len() - next)));
    }
    Ok((KeyValues::parse(&config, path)?, params))
}

fn expect_kind(kv: &KeyValues, kind: &str, path: &Path) -> Result<()> {
    match kv.get_str("kind") {
        Some(k) if k == kind => Ok(()),
        other => Err(Error::Format {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("expected a {kind} checkpoint, found {}", other.unwrap_or("no kind")),
        }),
    }
}

pub fn to_bytes(model: &DocModel) -> Vec<u8> {
    let mut pairs = vec![("kind", DOC_MODEL.to_string())];
    pairs.extend(config_pairs(&model.cfg));
    params_to_bytes(&pairs, &model.params)
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<DocModel> {
    let (kv, params) = params_from_bytes(bytes, path)?;
    expect_kind(&kv, DOC_MODEL, path)?;
    DocModel::from_params(config_from_pairs(&kv)?, params)
}

pub fn lm_to_bytes(lm: &SentenceLm) -> Vec<u8> {
    let ppl: Vec<String> = lm.ppl.iter().map(|p| p.to_string()).collect();
    let pairs = vec![("kind", SENTENCE_LM.to_string()), ("train_ppl", ppl.join(","))];
    params_to_bytes(&pairs, &lm.params)
}

pub fn lm_from_bytes(bytes: &[u8], path: &Path) -> Result<SentenceLm> {
    let (kv, params) = params_from_bytes(bytes, path)?;
    expect_kind(&kv, SENTENCE_LM, path)?;
    let mut lm = SentenceLm::from_params(params)?;
    lm.ppl = match kv.get_str("train_ppl") {
        Some("") | None => Vec::new(),
        Some(s) => s
            .split(',')
            .map(|p| {
                p.parse().map_err(|_| Error::Format {
                    path: path.to_path_buf(),
                    line: 1,
                    msg: format!("bad perplexity {p:?}"),
                })
            })
            .collect::<Result<_>>()?,
    };
    Ok(lm)
}

fn write(path: &Path, bytes: Vec<u8>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn save(model: &DocModel, path: &Path) -> Result<()> {
    write(path, to_bytes(model))
}

pub fn load(path: &Path) -> Result<DocModel> {
    from_bytes(&read(path)?, path)
}

pub fn save_lm(lm: &SentenceLm, path: &Path) -> Result<()> {
    write(path, lm_to_bytes(lm))
}

pub fn load_lm(path: &Path) -> Result<SentenceLm> {
    lm_from_bytes(&read(path)?, path)
}
