//! Text to element-id grids.
//!
//! A sample is a `u x v` grid: `u` materials (tokens, or fixed-size byte
//! chunks in byte-stream mode) of `v` element ids each. Ids 0..4 are the
//! special tokens; every UTF-8 byte `b` maps to id `b + 4`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u16 = 0;
pub const CLS: u16 = 1;
pub const SEP: u16 = 2;
pub const MASK: u16 = 3;
pub const BYTE_OFFSET: u16 = 4;
/// Rows of the element table: four specials plus 256 byte values.
pub const ELEMENT_VOCAB: usize = 256 + BYTE_OFFSET as usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CodecMode {
    #[default]
    Whitespace,
    ByteStream,
}

impl CodecMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CodecMode::Whitespace => "whitespace",
            CodecMode::ByteStream => "byte_stream",
        }
    }
}

impl std::str::FromStr for CodecMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "whitespace" => Ok(CodecMode::Whitespace),
            "byte_stream" => Ok(CodecMode::ByteStream),
            other => Err(format!("unknown codec mode {other:?}, expected whitespace or byte_stream")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodecConfig {
    /// Materials per sequence.
    pub u: usize,
    /// Elements per material.
    pub v: usize,
    pub mode: CodecMode,
    pub prepend_cls: bool,
    /// Reserved for two-segment inputs; classification leaves it off.
    pub append_sep: bool,
}

impl CodecConfig {
    pub fn new(u: usize, v: usize) -> Self {
        Self {
            u,
            v,
            mode: CodecMode::Whitespace,
            prepend_cls: true,
            append_sep: false,
        }
    }

    pub fn with_mode(mut self, mode: CodecMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_cls(mut self, prepend_cls: bool) -> Self {
        self.prepend_cls = prepend_cls;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.u == 0 {
            return Err(Error::config("u", "must be at least 1"));
        }
        if self.v == 0 {
            return Err(Error::config("v", "must be at least 1"));
        }
        Ok(())
    }

    fn special_material(&self, id: u16) -> Vec<u16> {
        let mut m = vec![PAD; self.v];
        m[0] = id;
        m
    }
}

/// Encoder output: a `u x v` grid of element ids plus a per-material mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSample {
    u: usize,
    v: usize,
    mode: CodecMode,
    ids: Vec<u16>,
    mask: Vec<bool>,
}

impl EncodedSample {
    /// Builds a sample from row-major ids; the mask is derived.
    pub fn from_ids(u: usize, v: usize, mode: CodecMode, ids: Vec<u16>) -> Result<Self> {
        if ids.len() != u * v {
            return Err(Error::DimensionMismatch {
                context: "encoded sample",
                expected: u * v,
                actual: ids.len(),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= ELEMENT_VOCAB) {
            return Err(Error::config("ids", format!("id {bad} outside [0, {ELEMENT_VOCAB})")));
        }
        let mask = ids.chunks(v).map(|m| m.iter().any(|&id| id != PAD)).collect();
        Ok(Self { u, v, mode, ids, mask })
    }

    fn from_materials(cfg: &CodecConfig, materials: Vec<Vec<u16>>) -> Self {
        let mut ids = Vec::with_capacity(cfg.u * cfg.v);
        for m in materials.into_iter().take(cfg.u) {
            debug_assert_eq!(m.len(), cfg.v);
            ids.extend(m);
        }
        ids.resize(cfg.u * cfg.v, PAD);
        let mask = ids.chunks(cfg.v).map(|m| m.iter().any(|&id| id != PAD)).collect();
        Self {
            u: cfg.u,
            v: cfg.v,
            mode: cfg.mode,
            ids,
            mask,
        }
    }

    pub fn u(&self) -> usize {
        self.u
    }

    pub fn v(&self) -> usize {
        self.v
    }

    pub fn mode(&self) -> CodecMode {
        self.mode
    }

    /// Row-major ids, length `u * v`.
    pub fn ids(&self) -> &[u16] {
        &self.ids
    }

    pub fn material(&self, i: usize) -> &[u16] {
        &self.ids[i * self.v..(i + 1) * self.v]
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn to_rows(&self) -> Vec<Vec<u16>> {
        self.ids.chunks(self.v).map(<[u16]>::to_vec).collect()
    }
}

/// Splits on runs of Unicode whitespace.
pub fn tokenize_whitespace(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// UTF-8 bytes of `token` shifted by the byte offset, padded or truncated to `v`.
pub fn encode_token(token: &str, v: usize) -> Vec<u16> {
    let mut ids: Vec<u16> = token
        .as_bytes()
        .iter()
        .take(v)
        .map(|&b| b as u16 + BYTE_OFFSET)
        .collect();
    ids.resize(v, PAD);
    ids
}

/// Whitespace-tokenized encoding: one material per token.
pub fn encode_sequence(text: &str, cfg: &CodecConfig) -> EncodedSample {
    let mut materials = Vec::with_capacity(cfg.u);
    if cfg.prepend_cls {
        materials.push(cfg.special_material(CLS));
    }
    let budget = cfg.u.saturating_sub(materials.len() + usize::from(cfg.append_sep));
    materials.extend(
        tokenize_whitespace(text)
            .into_iter()
            .take(budget)
            .map(|t| encode_token(t, cfg.v)),
    );
    if cfg.append_sep {
        materials.push(cfg.special_material(SEP));
    }
    EncodedSample::from_materials(cfg, materials)
}

/// Tokenization-free encoding: the raw byte stream cut into chunks of `v`.
pub fn encode_byte_stream(text: &str, cfg: &CodecConfig) -> EncodedSample {
    let mut materials = Vec::with_capacity(cfg.u);
    if cfg.prepend_cls {
        materials.push(cfg.special_material(CLS));
    }
    let budget = cfg.u.saturating_sub(materials.len());
    materials.extend(text.as_bytes().chunks(cfg.v).take(budget).map(|chunk| {
        let mut m: Vec<u16> = chunk.iter().map(|&b| b as u16 + BYTE_OFFSET).collect();
        m.resize(cfg.v, PAD);
        m
    }));
    EncodedSample::from_materials(cfg, materials)
}

/// Encodes `text` according to `cfg.mode`.
pub fn encode(text: &str, cfg: &CodecConfig) -> EncodedSample {
    match cfg.mode {
        CodecMode::Whitespace => encode_sequence(text, cfg),
        CodecMode::ByteStream => encode_byte_stream(text, cfg),
    }
}

/// Same as [`encode`], for untrusted bytes.
pub fn encode_bytes(raw: &[u8], cfg: &CodecConfig) -> Result<EncodedSample> {
    Ok(encode(std::str::from_utf8(raw)?, cfg))
}

fn material_bytes(material: &[u16]) -> Vec<u8> {
    material
        .iter()
        .filter(|&&id| id >= BYTE_OFFSET)
        .map(|&id| (id - BYTE_OFFSET) as u8)
        .collect()
}

/// Inverse of the encoders, dropping specials and padding.
pub fn decode_sample(sample: &EncodedSample) -> Result<String> {
    let undecodable = |e: std::string::FromUtf8Error| Error::Undecodable(e.to_string());
    match sample.mode {
        CodecMode::Whitespace => {
            let mut tokens = Vec::new();
            for i in 0..sample.u {
                let bytes = material_bytes(sample.material(i));
                if !bytes.is_empty() {
                    tokens.push(String::from_utf8(bytes).map_err(undecodable)?);
                }
            }
            Ok(tokens.join(" "))
        }
        CodecMode::ByteStream => String::from_utf8(material_bytes(&sample.ids)).map_err(undecodable),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ws(u: usize, v: usize, cls: bool) -> CodecConfig {
        CodecConfig::new(u, v).with_cls(cls)
    }

    fn bs(u: usize, v: usize) -> CodecConfig {
        CodecConfig::new(u, v).with_cls(false).with_mode(CodecMode::ByteStream)
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(
            tokenize_whitespace("Focus on the elements"),
            vec!["Focus", "on", "the", "elements"]
        );
        assert!(tokenize_whitespace("").is_empty());
        assert_eq!(tokenize_whitespace("  a\t b "), vec!["a", "b"]);
        assert_eq!(tokenize_whitespace("x\u{2003}y"), vec!["x", "y"]);
    }

    #[test]
    fn encode_token_examples() {
        assert_eq!(encode_token("App", 4), vec![69, 116, 116, 0]);
        assert_eq!(encode_token("RESHAPE", 7), vec![86, 73, 87, 76, 69, 84, 73]);
        assert_eq!(encode_token("é", 3), vec![199, 173, 0]);
        assert_eq!(
            encode_token("internationalization", 8),
            vec![109, 114, 120, 105, 118, 114, 101, 120]
        );
    }

    #[test]
    fn encode_sequence_examples() {
        let s = encode_sequence("hi yo", &ws(4, 2, true));
        assert_eq!(s.to_rows(), vec![vec![1, 0], vec![108, 109], vec![125, 115], vec![0, 0]]);
        assert_eq!(s.mask(), &[true, true, true, false]);

        let s = encode_sequence("", &ws(2, 2, false));
        assert_eq!(s.to_rows(), vec![vec![0, 0], vec![0, 0]]);
        assert_eq!(s.mask(), &[false, false]);

        let s = encode_sequence("a b c", &ws(2, 1, false));
        assert_eq!(s.to_rows(), vec![vec![101], vec![102]]);
        assert_eq!(s.mask(), &[true, true]);
    }

    #[test]
    fn sep_material_is_reserved_at_the_end() {
        let mut cfg = ws(3, 2, true);
        cfg.append_sep = true;
        let s = encode_sequence("a b c", &cfg);
        assert_eq!(s.to_rows(), vec![vec![1, 0], vec![101, 0], vec![2, 0]]);
    }

    #[test]
    fn byte_stream_examples() {
        assert_eq!(
            encode_byte_stream("abcd", &bs(3, 2)).to_rows(),
            vec![vec![101, 102], vec![103, 104], vec![0, 0]]
        );
        assert_eq!(encode_byte_stream("abc", &bs(2, 2)).to_rows(), vec![vec![101, 102], vec![103, 0]]);
        assert_eq!(encode_byte_stream("", &bs(1, 4)).to_rows(), vec![vec![0, 0, 0, 0]]);
    }

    #[test]
    fn byte_stream_with_cls() {
        let cfg = bs(3, 2).with_cls(true);
        assert_eq!(
            encode_byte_stream("abc", &cfg).to_rows(),
            vec![vec![1, 0], vec![101, 102], vec![103, 0]]
        );
    }

    #[test]
    fn decode_examples() {
        let s = encode_sequence("hi yo", &ws(4, 2, true));
        assert_eq!(decode_sample(&s).unwrap(), "hi yo");
        let s = encode_sequence("", &ws(3, 3, false));
        assert_eq!(decode_sample(&s).unwrap(), "");
        let s = encode_byte_stream("abcd", &bs(3, 2));
        assert_eq!(decode_sample(&s).unwrap(), "abcd");
    }

    #[test]
    fn decode_rejects_split_multibyte_chars() {
        // "é" is two bytes; v = 1 keeps only the lead byte.
        let s = encode_sequence("é", &ws(1, 1, false));
        assert!(matches!(decode_sample(&s), Err(Error::Undecodable(_))));
    }

    #[test]
    fn encode_bytes_rejects_invalid_utf8() {
        let err = encode_bytes(&[0x61, 0xff, 0x62], &ws(2, 2, false)).unwrap_err();
        assert!(matches!(err, Error::InvalidUtf8(_)));
    }

    #[test]
    fn from_ids_checks_shape_and_range() {
        assert!(EncodedSample::from_ids(2, 2, CodecMode::Whitespace, vec![0; 3]).is_err());
        assert!(EncodedSample::from_ids(1, 1, CodecMode::Whitespace, vec![260]).is_err());
        let s = EncodedSample::from_ids(2, 1, CodecMode::Whitespace, vec![0, 9]).unwrap();
        assert_eq!(s.mask(), &[false, true]);
    }

    #[test]
    fn zero_dimensions_are_rejected() {
        assert!(CodecConfig::new(0, 1).validate().is_err());
        assert!(CodecConfig::new(1, 0).validate().is_err());
    }

    proptest! {
        #[test]
        fn ascii_roundtrip(
            words in prop::collection::vec("[!-~]{1,6}", 0..7),
            cls in any::<bool>(),
        ) {
            let cfg = ws(8, 6, cls);
            let text = words.join(" ");
            let s = encode_sequence(&text, &cfg);
            prop_assert_eq!(decode_sample(&s).unwrap(), text);
        }

        #[test]
        fn byte_stream_roundtrip(text in "[ -~]{0,40}") {
            let s = encode_byte_stream(&text, &bs(10, 4));
            prop_assert_eq!(decode_sample(&s).unwrap(), text);
        }

        #[test]
        fn ids_in_range_and_mask_sound(text in "\\PC{0,60}", u in 1usize..12, v in 1usize..9, stream in any::<bool>()) {
            let mode = if stream { CodecMode::ByteStream } else { CodecMode::Whitespace };
            let cfg = CodecConfig::new(u, v).with_mode(mode);
            let s = encode(&text, &cfg);
            prop_assert_eq!(s.ids().len(), u * v);
            prop_assert!(s.ids().iter().all(|&id| (id as usize) < ELEMENT_VOCAB));
            for i in 0..u {
                prop_assert_eq!(s.mask()[i], s.material(i).iter().any(|&id| id != PAD));
            }
            prop_assert_eq!(&encode(&text, &cfg), &s);
        }
    }
}
