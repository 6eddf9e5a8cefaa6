//! Checkpoint container: a text manifest followed by little-endian f32 data.
//!
//! ```text
//! EWE1
//! meta <key> <value>
//! label <prefixed code>
//! tensor <name> <d0>x<d1>... <byte offset>
//! end
//! <raw f32 data>
//! ```
//!
//! Offsets count from the first byte after the `end` line.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;

use crate::codec::CodecConfig;
use crate::embedding::EmbedderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::float::Float;
use crate::labels::LabelVocab;
use crate::model::{Classifier, ModelConfig, VgramConfig};
use crate::nn::{Parameters, Rng};

pub const MAGIC: &str = "EWE1";

/// A trained model together with what is needed to feed it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: Classifier<T>,
    pub codec: CodecConfig,
    pub vocab: LabelVocab,
}

fn meta_lines(model: &ModelConfig, codec: &CodecConfig) -> Vec<(&'static str, String)> {
    let mut meta = vec![
        ("u", model.u.to_string()),
        ("v", model.v.to_string()),
        ("c", model.c.to_string()),
        ("layers", model.encoder.layers.to_string()),
        ("heads", model.encoder.heads.to_string()),
        ("ffn_dim", model.encoder.ffn_dim.to_string()),
        ("encoder_dropout", model.encoder.dropout_rate.to_string()),
        ("encoder_ln_epsilon", model.encoder.ln_epsilon.to_string()),
        ("encoder_init_std", model.encoder.init_std.to_string()),
        ("embed_dropout", model.embedder.dropout_rate.to_string()),
        ("embed_ln_epsilon", model.embedder.ln_epsilon.to_string()),
        ("embed_init_std", model.embedder.init_std.to_string()),
        ("focus", model.focus.to_string()),
        ("focus_zero_init", model.focus_zero_init.to_string()),
        ("n_labels", model.n_labels.to_string()),
        ("codec_u", codec.u.to_string()),
        ("codec_v", codec.v.to_string()),
        ("codec_mode", codec.mode.as_str().to_string()),
        ("prepend_cls", codec.prepend_cls.to_string()),
        ("append_sep", codec.append_sep.to_string()),
    ];
    if let Some(vg) = model.vgram {
        meta.push(("vgram_scope", vg.scope.as_str().to_string()));
        meta.push(("vgram_window", vg.window.to_string()));
    }
    meta
}

/// Writes `model` as f32 regardless of its working precision.
pub fn save<T: Float>(path: impl AsRef<Path>, model: &Classifier<T>, codec: &CodecConfig, vocab: &LabelVocab) -> Result<()> {
    let mut header = format!("{MAGIC}\n");
    for (key, value) in meta_lines(&model.config, codec) {
        header.push_str(&format!("meta {key} {value}\n"));
    }
    for label in vocab.labels() {
        header.push_str(&format!("label {label}\n"));
    }
    let mut data: Vec<u8> = Vec::with_capacity(4 * model.param_count());
    model.visit("", &mut |name, _, t| {
        let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        header.push_str(&format!("tensor {name} {} {}\n", shape.join("x"), data.len()));
        for &x in t.iter() {
            data.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    });
    header.push_str("end\n");
    let mut file = fs::File::create(path)?;
    file.write_all(header.as_bytes())?;
    file.write_all(&data)?;
    Ok(())
}

struct Manifest {
    meta: BTreeMap<String, String>,
    labels: Vec<String>,
    tensors: Vec<(String, Vec<usize>, usize)>,
    data_start: usize,
}

fn parse_manifest(bytes: &[u8]) -> Result<Manifest> {
    let bad = |msg: String| Error::Checkpoint(msg);
    let mut pos = 0;
    let mut next_line = || -> Result<&str> {
        let rest = &bytes[pos..];
        let len = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated manifest".into()))?;
        pos += len + 1;
        std::str::from_utf8(&rest[..len]).map_err(|_| bad("manifest is not UTF-8".into()))
    };
    let magic = next_line()?;
    if magic != MAGIC {
        return Err(bad(format!("bad magic {magic:?}, expected {MAGIC}")));
    }
    let mut meta = BTreeMap::new();
    let mut labels = Vec::new();
    let mut tensors = Vec::new();
    loop {
        let line = next_line()?;
        if line == "end" {
            break;
        }
        let (kind, rest) = line.split_once(' ').ok_or_else(|| bad(format!("malformed line {line:?}")))?;
        match kind {
            "meta" => {
                let (k, v) = rest.split_once(' ').ok_or_else(|| bad(format!("malformed meta {rest:?}")))?;
                meta.insert(k.to_string(), v.to_string());
            }
            "label" => labels.push(rest.to_string()),
            "tensor" => {
                let parts: Vec<&str> = rest.split(' ').collect();
                let [name, shape, offset] = parts[..] else {
                    return Err(bad(format!("malformed tensor line {rest:?}")));
                };
                let shape = shape
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad(format!("bad shape for {name}")))?;
                let offset = offset.parse().map_err(|_| bad(format!("bad offset for {name}")))?;
                tensors.push((name.to_string(), shape, offset));
            }
            other => return Err(bad(format!("unknown manifest entry {other:?}"))),
        }
    }
    Ok(Manifest {
        meta,
        labels,
        tensors,
        data_start: pos,
    })
}

fn get<V: FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<V> {
    let raw = meta.get(key).ok_or_else(|| Error::Checkpoint(format!("missing meta {key}")))?;
    raw.parse().map_err(|_| Error::Checkpoint(format!("bad value {raw:?} for meta {key}")))
}

fn configs_from_meta(meta: &BTreeMap<String, String>) -> Result<(ModelConfig, CodecConfig)> {
    let (u, v, c) = (get(meta, "u")?, get(meta, "v")?, get(meta, "c")?);
    let encoder = EncoderConfig {
        layers: get(meta, "layers")?,
        hidden: v * c,
        heads: get(meta, "heads")?,
        ffn_dim: get(meta, "ffn_dim")?,
        dropout_rate: get(meta, "encoder_dropout")?,
        ln_epsilon: get(meta, "encoder_ln_epsilon")?,
        init_std: get(meta, "encoder_init_std")?,
    };
    let embedder = EmbedderConfig {
        dropout_rate: get(meta, "embed_dropout")?,
        ln_epsilon: get(meta, "embed_ln_epsilon")?,
        init_std: get(meta, "embed_init_std")?,
    };
    let vgram = match meta.get("vgram_scope") {
        Some(_) => Some(VgramConfig {
            scope: get(meta, "vgram_scope")?,
            window: get(meta, "vgram_window")?,
        }),
        None => None,
    };
    let model = ModelConfig {
        u,
        v,
        c,
        embedder,
        encoder,
        focus: get(meta, "focus")?,
        focus_zero_init: get(meta, "focus_zero_init")?,
        vgram,
        n_labels: get(meta, "n_labels")?,
    };
    let codec = CodecConfig {
        u: get(meta, "codec_u")?,
        v: get(meta, "codec_v")?,
        mode: get(meta, "codec_mode")?,
        prepend_cls: get(meta, "prepend_cls")?,
        append_sep: get(meta, "append_sep")?,
    };
    Ok((model, codec))
}

pub fn load<T: Float>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path)?;
    let manifest = parse_manifest(&bytes)?;
    let (config, codec) = configs_from_meta(&manifest.meta)?;
    let mut model = Classifier::<T>::new(&config, &mut Rng::seed_from_u64(0))?;
    let vocab = LabelVocab::new(manifest.labels)?;
    if vocab.len() != config.n_labels {
        return Err(Error::Checkpoint(format!(
            "{} labels stored for a {}-label model",
            vocab.len(),
            config.n_labels
        )));
    }
    let data = &bytes[manifest.data_start..];

    let mut expected = 0;
    model.visit("", &mut |_, _, _| expected += 1);
    if manifest.tensors.len() != expected {
        return Err(Error::Checkpoint(format!(
            "{} tensors stored, model has {expected}",
            manifest.tensors.len()
        )));
    }
    let mut index = 0;
    let mut failure = None;
    model.visit_mut("", &mut |name, _, mut t| {
        let (stored, shape, offset) = &manifest.tensors[index];
        index += 1;
        if failure.is_some() {
            return;
        }
        if *stored != name || shape.as_slice() != t.shape() {
            failure = Some(format!("tensor {stored} {shape:?} does not match {name} {:?}", t.shape()));
            return;
        }
        let end = offset + 4 * t.len();
        let Some(chunk) = data.get(*offset..end) else {
            failure = Some(format!("data for {name} is truncated"));
            return;
        };
        for (x, raw) in t.iter_mut().zip(chunk.chunks_exact(4)) {
            *x = T::of(f32::from_le_bytes(raw.try_into().expect("4 bytes")) as f64);
        }
    });
    if let Some(msg) = failure {
        return Err(Error::Checkpoint(msg));
    }
    Ok(Checkpoint { model, codec, vocab })
}
