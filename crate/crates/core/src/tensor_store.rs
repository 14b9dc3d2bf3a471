//! Checkpoint container: an 8-byte little-endian header length, a JSON
//! header, then a raw little-endian float32 payload.
//!
//! ```text
//! [u64 LE: N][N bytes JSON header, space padded to 8-byte alignment][payload]
//! header = { "<name>": {"dtype":"F32","shape":[..],"offsets":[begin,end]}, ...,
//!            "__metadata__": {"key":"value", ...} }
//! ```
//!
//! Tensors are laid out in bytewise-lexicographic name order with contiguous
//! offsets. The safetensors format uses the same framing with the offsets key
//! spelled `data_offsets`; [`import_safetensors`] and [`export_safetensors`]
//! translate between the two.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::{Deserializer, MapAccess, Visitor};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};

pub const DTYPE_F32: &str = "F32";
pub const METADATA_KEY: &str = "__metadata__";

/// Headers above this size are rejected before allocation.
const MAX_HEADER_LEN: u64 = 256 * 1024 * 1024;

/// One named dense float32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl TensorRecord {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::InvalidTensor {
                name,
                reason: "empty name".into(),
            });
        }
        if name.contains('\0') {
            return Err(Error::InvalidTensor {
                name: name.replace('\0', "\\0"),
                reason: "name contains a NUL byte".into(),
            });
        }
        if name == METADATA_KEY {
            return Err(Error::InvalidTensor {
                name,
                reason: "name is reserved for metadata".into(),
            });
        }
        let expected = numel(&shape);
        if data.len() != expected {
            return Err(Error::InvalidTensor {
                name,
                reason: format!(
                    "shape {shape:?} needs {expected} values, got {}",
                    data.len()
                ),
            });
        }
        Ok(TensorRecord { name, shape, data })
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Result<Self> {
        let n = numel(&shape);
        Self::new(name, shape, vec![0.0; n])
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable view of the values; the length is fixed by the shape.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Same name and shape, new values.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Self::new(self.name.clone(), self.shape.clone(), data)
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    fn bitwise_eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Element count of a shape; the empty shape is a scalar.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Ordered, uniquely named collection of tensors plus free-form metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    tensors: Vec<TensorRecord>,
    metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    /// Sorts tensors by name and rejects duplicates.
    pub fn new(mut tensors: Vec<TensorRecord>, metadata: BTreeMap<String, String>) -> Result<Self> {
        tensors.sort_by(|a, b| a.name.cmp(&b.name));
        if let Some(w) = tensors.windows(2).find(|w| w[0].name == w[1].name) {
            return Err(Error::DuplicateName(w[0].name.clone()));
        }
        Ok(Checkpoint { tensors, metadata })
    }

    pub fn from_tensors(tensors: Vec<TensorRecord>) -> Result<Self> {
        Self::new(tensors, BTreeMap::new())
    }

    pub fn tensors(&self) -> &[TensorRecord] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [TensorRecord] {
        &mut self.tensors
    }

    pub fn into_tensors(self) -> Vec<TensorRecord> {
        self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors
            .binary_search_by(|t| t.name.as_str().cmp(name))
            .ok()
            .map(|i| &self.tensors[i])
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn metadata_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.metadata
    }

    pub fn with_metadata(mut self, metadata: BTreeMap<String, String>) -> Self {
        self.metadata = metadata;
        self
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(TensorRecord::numel).sum()
    }

    /// Equality that distinguishes `-0.0` from `0.0` and treats identical NaN
    /// payloads as equal.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.metadata == other.metadata
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.bitwise_eq(b))
    }

    /// Same structure and metadata, values produced per tensor by `f`.
    pub fn map_tensors<F>(&self, mut f: F) -> Result<Self>
    where
        F: FnMut(&TensorRecord) -> Vec<f32>,
    {
        let tensors = self
            .tensors
            .iter()
            .map(|t| t.with_data(f(t)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Checkpoint {
            tensors,
            metadata: self.metadata.clone(),
        })
    }
}

/// Succeeds iff both checkpoints have identical name sets and shapes.
pub fn assert_compatible(a: &Checkpoint, b: &Checkpoint) -> Result<()> {
    let (mut i, mut j) = (0, 0);
    let (ta, tb) = (a.tensors(), b.tensors());
    while i < ta.len() || j < tb.len() {
        match (ta.get(i), tb.get(j)) {
            (Some(x), Some(y)) if x.name == y.name => {
                if x.shape != y.shape {
                    return Err(Error::ShapeMismatch {
                        name: x.name.clone(),
                        left: x.shape.clone(),
                        right: y.shape.clone(),
                    });
                }
                i += 1;
                j += 1;
            }
            (Some(x), Some(y)) if x.name < y.name => return Err(missing(&x.name, true)),
            (Some(_), Some(y)) => return Err(missing(&y.name, false)),
            (Some(x), None) => return Err(missing(&x.name, true)),
            (None, Some(y)) => return Err(missing(&y.name, false)),
            (None, None) => unreachable!(),
        }
    }
    Ok(())
}

fn missing(name: &str, in_first: bool) -> Error {
    let (present_in, missing_from) = if in_first {
        ("first", "second")
    } else {
        ("second", "first")
    };
    Error::MissingTensor {
        name: name.to_string(),
        present_in,
        missing_from,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Flavor {
    Mbc,
    SafeTensors,
}

impl Flavor {
    fn offsets_key(self) -> &'static str {
        match self {
            Flavor::Mbc => "offsets",
            Flavor::SafeTensors => "data_offsets",
        }
    }
}

/// Serializes a checkpoint to the container byte layout.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    encode(ckpt, Flavor::Mbc)
}

fn encode(ckpt: &Checkpoint, flavor: Flavor) -> Vec<u8> {
    let mut header = serde_json::Map::new();
    let mut offset = 0u64;
    for t in ckpt.tensors() {
        let end = offset + 4 * t.numel() as u64;
        header.insert(
            t.name.clone(),
            json!({
                "dtype": DTYPE_F32,
                "shape": t.shape,
                flavor.offsets_key(): [offset, end],
            }),
        );
        offset = end;
    }
    if !ckpt.metadata.is_empty() {
        header.insert(METADATA_KEY.to_string(), json!(ckpt.metadata));
    }
    let mut header_bytes =
        serde_json::to_vec(&Value::Object(header)).expect("string-keyed JSON always serializes");
    while header_bytes.len() % 8 != 0 {
        header_bytes.push(b' ');
    }

    let mut out = Vec::with_capacity(8 + header_bytes.len() + offset as usize);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for t in ckpt.tensors() {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses the container byte layout.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    decode(bytes, Flavor::Mbc)
}

/// Header entries in file order, keeping duplicates so they can be reported.
struct HeaderEntries(Vec<(String, Value)>);

impl<'de> Deserialize<'de> for HeaderEntries {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct EntriesVisitor;

        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = HeaderEntries;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
                let mut entries = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Value>()? {
                    entries.push((k, v));
                }
                Ok(HeaderEntries(entries))
            }
        }

        deserializer.deserialize_map(EntriesVisitor)
    }
}

struct Slot {
    name: String,
    shape: Vec<usize>,
    begin: u64,
    end: u64,
}

fn decode(bytes: &[u8], flavor: Flavor) -> Result<Checkpoint> {
    if bytes.len() < 8 {
        return Err(Error::MalformedHeader(format!(
            "file is {} bytes, shorter than the 8-byte length prefix",
            bytes.len()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    if header_len > MAX_HEADER_LEN || header_len > (bytes.len() - 8) as u64 {
        return Err(Error::MalformedHeader(format!(
            "declared header length {header_len} exceeds file size {}",
            bytes.len()
        )));
    }
    let header_end = 8 + header_len as usize;
    let header_text = std::str::from_utf8(&bytes[8..header_end])
        .map_err(|e| Error::MalformedHeader(format!("header is not UTF-8: {e}")))?;
    let HeaderEntries(entries) = serde_json::from_str(header_text)
        .map_err(|e| Error::MalformedHeader(format!("header is not a JSON object: {e}")))?;

    let mut metadata = BTreeMap::new();
    let mut seen_metadata = false;
    let mut slots = Vec::with_capacity(entries.len());
    let mut names = std::collections::BTreeSet::new();
    for (key, value) in entries {
        if key == METADATA_KEY {
            if seen_metadata {
                return Err(Error::DuplicateName(key));
            }
            seen_metadata = true;
            metadata = parse_metadata(value)?;
            continue;
        }
        if !names.insert(key.clone()) {
            return Err(Error::DuplicateName(key));
        }
        slots.push(parse_slot(key, value, flavor)?);
    }

    let payload = &bytes[header_end..];
    if flavor == Flavor::Mbc {
        // file order is the canonical name order
        if let Some(w) = slots.windows(2).find(|w| w[0].name >= w[1].name) {
            return Err(Error::MalformedHeader(format!(
                "tensors not in lexicographic order: `{}` precedes `{}`",
                w[0].name, w[1].name
            )));
        }
    }
    // .mbc payloads follow name order; safetensors may store them in any order
    let mut layout: Vec<&Slot> = slots.iter().collect();
    if flavor == Flavor::SafeTensors {
        layout.sort_by_key(|s| (s.begin, s.end));
    }
    let mut cursor = 0u64;
    for s in &layout {
        if s.begin != cursor {
            return Err(Error::MalformedHeader(format!(
                "tensor `{}` starts at byte {} but the payload cursor is at {cursor}",
                s.name, s.begin
            )));
        }
        cursor = s.end;
    }
    if cursor != payload.len() as u64 {
        return Err(Error::PayloadLengthMismatch {
            expected: cursor,
            actual: payload.len() as u64,
        });
    }

    let tensors = slots
        .into_iter()
        .map(|s| {
            let raw = &payload[s.begin as usize..s.end as usize];
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            TensorRecord::new(s.name, s.shape, data)
        })
        .collect::<Result<Vec<_>>>()?;
    Checkpoint::new(tensors, metadata)
}

fn parse_metadata(value: Value) -> Result<BTreeMap<String, String>> {
    let Value::Object(map) = value else {
        return Err(Error::MalformedHeader(
            "__metadata__ must be an object of strings".into(),
        ));
    };
    map.into_iter()
        .map(|(k, v)| match v {
            Value::String(s) => Ok((k, s)),
            other => Err(Error::MalformedHeader(format!(
                "metadata value for `{k}` is not a string: {other}"
            ))),
        })
        .collect()
}

fn parse_slot(name: String, value: Value, flavor: Flavor) -> Result<Slot> {
    let malformed = |what: &str| Error::MalformedHeader(format!("tensor `{name}`: {what}"));
    let Value::Object(fields) = value else {
        return Err(malformed("entry is not an object"));
    };
    let dtype = fields
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| malformed("missing string field `dtype`"))?;
    if dtype != DTYPE_F32 {
        return Err(Error::UnknownDtype {
            name,
            dtype: dtype.to_string(),
        });
    }
    let shape = fields
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed("missing array field `shape`"))?
        .iter()
        .map(|d| d.as_u64().map(|d| d as usize))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| malformed("shape entries must be non-negative integers"))?;
    let key = flavor.offsets_key();
    let offsets = fields
        .get(key)
        .and_then(Value::as_array)
        .ok_or_else(|| malformed(&format!("missing array field `{key}`")))?;
    let (begin, end) = match offsets.as_slice() {
        [b, e] => (
            b.as_u64().ok_or_else(|| malformed("offsets must be integers"))?,
            e.as_u64().ok_or_else(|| malformed("offsets must be integers"))?,
        ),
        _ => return Err(malformed("offsets must be a [begin, end] pair")),
    };
    if end < begin {
        return Err(malformed("offsets end before they begin"));
    }
    let expected = shape
        .iter()
        .try_fold(4u64, |acc, &d| acc.checked_mul(d as u64))
        .ok_or_else(|| malformed("shape overflows"))?;
    if expected != end - begin {
        return Err(Error::TensorLengthMismatch {
            name,
            shape,
            expected,
            actual: end - begin,
        });
    }
    Ok(Slot {
        name,
        shape,
        begin,
        end,
    })
}

/// Writes atomically: the bytes go to a temporary file in the destination
/// directory which is renamed over `path` only after a successful flush.
pub fn write_bytes_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_bytes_atomic(path.as_ref(), &encode(ckpt, Flavor::Mbc))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, Flavor::Mbc)
}

/// Reads a `.safetensors` file. Tensors may appear in any order; any dtype
/// other than F32 is rejected.
pub fn import_safetensors(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, Flavor::SafeTensors)
}

pub fn export_safetensors(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_bytes_atomic(path.as_ref(), &encode(ckpt, Flavor::SafeTensors))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(name: &str, shape: Vec<usize>, data: Vec<f32>) -> TensorRecord {
        TensorRecord::new(name, shape, data).unwrap()
    }

    fn with_header(header: &str, payload: &[u8]) -> Vec<u8> {
        let mut out = (header.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn encodes_single_tensor_layout() {
        let ckpt = Checkpoint::from_tensors(vec![t("w", vec![2, 2], vec![1., 2., 3., 4.])]).unwrap();
        let bytes = encode_checkpoint(&ckpt);
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        assert_eq!(n % 8, 0);
        let header: Value = serde_json::from_slice(&bytes[8..8 + n]).unwrap();
        assert_eq!(
            header,
            json!({"w": {"dtype": "F32", "shape": [2, 2], "offsets": [0, 16]}})
        );
        let payload = &bytes[8 + n..];
        assert_eq!(payload.len(), 16);
        assert_eq!(&payload[4..8], &2.0f32.to_le_bytes());
        assert!(decode_checkpoint(&bytes).unwrap().bitwise_eq(&ckpt));
    }

    #[test]
    fn empty_checkpoint_round_trips() {
        let ckpt = Checkpoint::default();
        let bytes = encode_checkpoint(&ckpt);
        assert_eq!(&bytes[8..10], b"{}");
        assert_eq!(decode_checkpoint(&bytes).unwrap(), ckpt);
    }

    #[test]
    fn scalar_and_empty_shapes() {
        let ckpt = Checkpoint::from_tensors(vec![
            t("s", vec![], vec![-0.0]),
            t("e", vec![0, 3], vec![]),
        ])
        .unwrap();
        let back = decode_checkpoint(&encode_checkpoint(&ckpt)).unwrap();
        assert!(back.bitwise_eq(&ckpt));
        assert!(back.get("s").unwrap().data()[0].is_sign_negative());
    }

    #[test]
    fn permuted_input_gives_identical_bytes() {
        let a = t("a", vec![1], vec![1.0]);
        let b = t("b", vec![2], vec![2.0, 3.0]);
        let mut meta = BTreeMap::new();
        meta.insert("source".to_string(), "test".to_string());
        let x = Checkpoint::new(vec![a.clone(), b.clone()], meta.clone()).unwrap();
        let y = Checkpoint::new(vec![b, a], meta).unwrap();
        assert_eq!(encode_checkpoint(&x), encode_checkpoint(&y));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let ckpt = Checkpoint::from_tensors(vec![t("w", vec![4], vec![1., 2., 3., 4.])]).unwrap();
        let bytes = encode_checkpoint(&ckpt);
        let err = decode_checkpoint(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::PayloadLengthMismatch { expected: 16, actual: 13 }), "{err}");
    }

    #[test]
    fn declared_shape_disagreeing_with_offsets_is_rejected() {
        let bytes = with_header(
            r#"{"x":{"dtype":"F32","shape":[3],"offsets":[0,8]}}"#,
            &[0u8; 8],
        );
        let err = decode_checkpoint(&bytes).unwrap_err();
        assert!(matches!(err, Error::TensorLengthMismatch { expected: 12, actual: 8, .. }), "{err}");
    }

    #[test]
    fn unknown_dtype_is_named() {
        let bytes = with_header(
            r#"{"x":{"dtype":"I64","shape":[1],"offsets":[0,8]}}"#,
            &[0u8; 8],
        );
        match decode_checkpoint(&bytes).unwrap_err() {
            Error::UnknownDtype { name, dtype } => {
                assert_eq!(name, "x");
                assert_eq!(dtype, "I64");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let bytes = with_header(
            r#"{"x":{"dtype":"F32","shape":[1],"offsets":[0,4]},"x":{"dtype":"F32","shape":[1],"offsets":[4,8]}}"#,
            &[0u8; 8],
        );
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::DuplicateName(n)) if n == "x"));
        assert!(matches!(
            Checkpoint::from_tensors(vec![t("x", vec![1], vec![0.]), t("x", vec![1], vec![1.])]),
            Err(Error::DuplicateName(_))
        ));
    }

    #[test]
    fn malformed_headers() {
        assert!(matches!(decode_checkpoint(&[1, 2, 3]), Err(Error::MalformedHeader(_))));
        let mut huge = u64::MAX.to_le_bytes().to_vec();
        huge.extend_from_slice(b"{}");
        assert!(matches!(decode_checkpoint(&huge), Err(Error::MalformedHeader(_))));
        assert!(matches!(decode_checkpoint(&with_header("[1,2]", &[])), Err(Error::MalformedHeader(_))));
        // gap between tensors
        let gap = with_header(
            r#"{"a":{"dtype":"F32","shape":[1],"offsets":[0,4]},"b":{"dtype":"F32","shape":[1],"offsets":[8,12]}}"#,
            &[0u8; 12],
        );
        assert!(matches!(decode_checkpoint(&gap), Err(Error::MalformedHeader(_))));
        // out of name order
        let swapped = with_header(
            r#"{"a":{"dtype":"F32","shape":[1],"offsets":[4,8]},"b":{"dtype":"F32","shape":[1],"offsets":[0,4]}}"#,
            &[0u8; 8],
        );
        assert!(matches!(decode_checkpoint(&swapped), Err(Error::MalformedHeader(_))));
        // the same file is acceptable safetensors once the key is renamed
        let st = with_header(
            r#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[4,8]},"b":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}}"#,
            &[0, 0, 128, 63, 0, 0, 0, 64],
        );
        let ckpt = decode(&st, Flavor::SafeTensors).unwrap();
        assert_eq!(ckpt.get("a").unwrap().data(), &[2.0]);
        assert_eq!(ckpt.get("b").unwrap().data(), &[1.0]);
    }

    #[test]
    fn invalid_records() {
        assert!(TensorRecord::new("", vec![1], vec![0.]).is_err());
        assert!(TensorRecord::new("a\0b", vec![1], vec![0.]).is_err());
        assert!(TensorRecord::new("w", vec![2, 2], vec![0.; 3]).is_err());
        assert!(TensorRecord::new(METADATA_KEY, vec![1], vec![0.]).is_err());
    }

    #[test]
    fn compatibility_reports_first_difference() {
        let a = Checkpoint::from_tensors(vec![
            t("head.w", vec![1], vec![0.]),
            t("w", vec![2, 3], vec![0.; 6]),
        ])
        .unwrap();
        assert!(assert_compatible(&a, &a).is_ok());
        let b = Checkpoint::from_tensors(vec![t("w", vec![2, 3], vec![0.; 6])]).unwrap();
        let err = assert_compatible(&a, &b).unwrap_err();
        assert!(err.to_string().contains("head.w"), "{err}");
        let err = assert_compatible(&b, &a).unwrap_err();
        assert!(matches!(err, Error::MissingTensor { ref name, missing_from: "first", .. } if name == "head.w"));
        let c = Checkpoint::from_tensors(vec![
            t("head.w", vec![1], vec![0.]),
            t("w", vec![3, 2], vec![0.; 6]),
        ])
        .unwrap();
        match assert_compatible(&a, &c).unwrap_err() {
            Error::ShapeMismatch { name, left, right } => {
                assert_eq!(name, "w");
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![3, 2]);
            }
            other => panic!("unexpected {other}"),
        }
    }
}
