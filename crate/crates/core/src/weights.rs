//! Weight files: a JSON manifest next to a flat payload of little-endian
//! `f64`s.
//!
//! `model.json` lists the tensors with their byte offsets into `model.bin`
//! and the blocks with the tensor playing each role. Blocks are stored in
//! stack order; the sequence length they were built for is kept in
//! `dims.s`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::blocks::{Activation, Block, Head, LayerNorm, Linear, Mlp2, MultiHeadAttention, PostLn, PreLn, SelfAttention};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const MANIFEST_VERSION: u32 = 1;
pub const DTYPE: &str = "f64le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset_bytes: u64,
    pub dtype: String,
}

impl TensorEntry {
    fn byte_len(&self) -> u64 {
        (self.shape[0] * self.shape[1] * 8) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockDims {
    pub s: usize,
    pub n: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockOptions {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<Activation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockEntry {
    pub kind: String,
    pub dims: BlockDims,
    pub params: BTreeMap<String, String>,
    #[serde(default)]
    pub options: BlockOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub tensors: Vec<TensorEntry>,
    pub blocks: Vec<BlockEntry>,
}

/// Payload path belonging to a manifest path: same stem, extension `bin`.
pub fn payload_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightFile {
    pub manifest: Manifest,
    pub payload: Vec<u8>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::WeightFile(msg.into())
}

impl WeightFile {
    /// Checks the manifest against the payload: version, dtype, alignment,
    /// bounds, overlap and total length.
    pub fn new(manifest: Manifest, payload: Vec<u8>) -> Result<Self> {
        if manifest.version != MANIFEST_VERSION {
            return Err(bad(format!("unsupported version {}", manifest.version)));
        }
        let mut spans: Vec<(u64, u64, &str)> = Vec::new();
        let mut total = 0u64;
        let mut names = std::collections::BTreeSet::new();
        for t in &manifest.tensors {
            if !names.insert(t.name.as_str()) {
                return Err(bad(format!("duplicate tensor name {}", t.name)));
            }
            if t.dtype != DTYPE {
                return Err(bad(format!("tensor {}: dtype {} is not {DTYPE}", t.name, t.dtype)));
            }
            if t.offset_bytes % 8 != 0 {
                return Err(bad(format!("tensor {}: offset {} not 8-byte aligned", t.name, t.offset_bytes)));
            }
            let end = t.offset_bytes + t.byte_len();
            if end > payload.len() as u64 {
                return Err(bad(format!(
                    "tensor {}: shape {:?} needs {} floats at offset {}, payload holds {} floats",
                    t.name,
                    t.shape,
                    t.shape[0] * t.shape[1],
                    t.offset_bytes,
                    payload.len() / 8
                )));
            }
            spans.push((t.offset_bytes, end, &t.name));
            total += t.byte_len();
        }
        spans.sort();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(bad(format!("tensors {} and {} overlap", w[0].2, w[1].2)));
            }
        }
        if total != payload.len() as u64 {
            return Err(bad(format!(
                "payload is {} bytes, tensors account for {total}",
                payload.len()
            )));
        }
        Ok(WeightFile { manifest, payload })
    }

    pub fn from_bytes(manifest: &[u8], payload: Vec<u8>) -> Result<Self> {
        let m: Manifest = serde_json::from_slice(manifest).map_err(|e| bad(format!("malformed manifest: {e}")))?;
        WeightFile::new(m, payload)
    }

    /// Manifest as written by [`WeightFile::save`].
    pub fn manifest_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes");
        out.push(b'\n');
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let manifest = std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let pp = payload_path(path);
        let payload = std::fs::read(&pp).map_err(|e| Error::Io(format!("{}: {e}", pp.display())))?;
        WeightFile::from_bytes(&manifest, payload)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |p: &Path, e: std::io::Error| Error::Io(format!("{}: {e}", p.display()));
        std::fs::write(path, self.manifest_bytes()).map_err(|e| io(path, e))?;
        let pp = payload_path(path);
        std::fs::write(&pp, &self.payload).map_err(|e| io(&pp, e))
    }

    pub fn tensor(&self, name: &str) -> Result<Matrix> {
        let t = self
            .manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| bad(format!("no tensor named {name}")))?;
        let start = t.offset_bytes as usize;
        let data = self.payload[start..start + t.byte_len() as usize]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Matrix::from_vec(t.shape[0], t.shape[1], data)
    }

    /// Encodes blocks in stack order, tensors named `blocks.<i>.<role>`.
    pub fn from_blocks(blocks: &[Block], seq_len: usize) -> Result<Self> {
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        let mut entries = Vec::new();
        for (i, b) in blocks.iter().enumerate() {
            let (options, roles) = encode(b)?;
            let mut params = BTreeMap::new();
            for (role, m) in roles {
                let name = format!("blocks.{i}.{role}");
                tensors.push(TensorEntry {
                    name: name.clone(),
                    shape: [m.rows(), m.cols()],
                    offset_bytes: payload.len() as u64,
                    dtype: DTYPE.into(),
                });
                for v in m.as_slice() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
                params.insert(role, name);
            }
            entries.push(BlockEntry {
                kind: b.kind_name().into(),
                dims: BlockDims { s: seq_len, n: b.width() },
                params,
                options,
            });
        }
        WeightFile::new(
            Manifest {
                version: MANIFEST_VERSION,
                tensors,
                blocks: entries,
            },
            payload,
        )
    }

    /// Decodes every block entry, checking each role's shape.
    pub fn blocks(&self) -> Result<Vec<Block>> {
        self.manifest
            .blocks
            .iter()
            .enumerate()
            .map(|(i, e)| self.decode(e).map_err(|err| bad(format!("block {i} ({}): {err}", e.kind))))
            .collect()
    }

    /// Sequence length recorded for the blocks; all entries must agree.
    pub fn seq_len(&self) -> Result<Option<usize>> {
        let mut it = self.manifest.blocks.iter().map(|b| b.dims.s);
        let Some(s) = it.next() else { return Ok(None) };
        if it.any(|t| t != s) {
            return Err(bad("blocks disagree on the sequence length"));
        }
        Ok(Some(s))
    }

    fn decode(&self, e: &BlockEntry) -> Result<Block> {
        let n = e.dims.n;
        let mut used: Vec<String> = Vec::new();
        let mut get = |role: &str, rows: Option<usize>, cols: Option<usize>| -> Result<Matrix> {
            let name = e
                .params
                .get(role)
                .ok_or_else(|| bad(format!("missing role {role}")))?;
            used.push(role.to_string());
            let m = self.tensor(name)?;
            if rows.is_some_and(|r| r != m.rows()) || cols.is_some_and(|c| c != m.cols()) {
                return Err(bad(format!(
                    "tensor {name} for role {role} has shape {:?}, expected {}x{}",
                    m.shape(),
                    rows.map_or("?".into(), |r| r.to_string()),
                    cols.map_or("?".into(), |c| c.to_string())
                )));
            }
            if !m.is_finite() {
                return Err(bad(format!("tensor {name} has non-finite entries")));
            }
            Ok(m)
        };
        let o = &e.options;
        let eps = o.epsilon.unwrap_or(crate::blocks::DEFAULT_LN_EPSILON);
        let act = o.activation.unwrap_or(Activation::Relu);
        let block = match e.kind.as_str() {
            "linear" => Block::Linear(Linear::new(get("w", Some(n), Some(n))?)?),
            "mlp2" => Block::Mlp2(Mlp2::new(get("w1", Some(n), None)?, get("w2", None, Some(n))?, act)?),
            "layernorm" => Block::LayerNorm(LayerNorm::new(
                get("gamma", Some(1), Some(n))?,
                get("beta", Some(1), Some(n))?,
                eps,
            )?),
            "self_attention" => Block::SelfAttention(SelfAttention::new(Head::new(
                get("w_q", Some(n), o.d_k)?,
                get("w_k", Some(n), o.d_k)?,
                get("w_v", Some(n), Some(n))?,
            )?)?),
            "multi_head_self_attention" => {
                Block::MultiHeadSelfAttention(decode_mha(&mut get, "", n, o)?)
            }
            "pre_ln_transformer" | "post_ln_transformer" => {
                let ln = LayerNorm::new(
                    get("ln.gamma", Some(1), Some(n))?,
                    get("ln.beta", Some(1), Some(n))?,
                    eps,
                )?;
                let mlp = Mlp2::new(get("mlp.w1", Some(n), None)?, get("mlp.w2", None, Some(n))?, act)?;
                let attn = decode_mha(&mut get, "attn.", n, o)?;
                if e.kind == "pre_ln_transformer" {
                    Block::PreLnTransformer(PreLn {
                        ln,
                        mlp,
                        attn,
                        alpha: o.alpha.unwrap_or(1.0),
                    })
                } else {
                    Block::PostLnTransformer(PostLn { ln, mlp, attn })
                }
            }
            other => return Err(bad(format!("unknown block kind {other}"))),
        };
        if let Some(extra) = e.params.keys().find(|k| !used.contains(k)) {
            return Err(bad(format!("unexpected role {extra}")));
        }
        if block.width() != n {
            return Err(bad(format!("block width {} does not match dims.n = {n}", block.width())));
        }
        Ok(block)
    }
}

fn decode_mha(
    get: &mut impl FnMut(&str, Option<usize>, Option<usize>) -> Result<Matrix>,
    prefix: &str,
    n: usize,
    o: &BlockOptions,
) -> Result<MultiHeadAttention> {
    let heads = o.heads.ok_or_else(|| bad("options.heads is required"))?;
    if heads == 0 {
        return Err(bad("options.heads must be positive"));
    }
    let hs = (0..heads)
        .map(|h| {
            Head::new(
                get(&format!("{prefix}w_q.{h}"), Some(n), o.d_k)?,
                get(&format!("{prefix}w_k.{h}"), Some(n), o.d_k)?,
                get(&format!("{prefix}w_v.{h}"), Some(n), None)?,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    MultiHeadAttention::new(hs, get(&format!("{prefix}w_o"), None, Some(n))?)
}

fn mha_roles(a: &MultiHeadAttention, prefix: &str, roles: &mut Vec<(String, Matrix)>) {
    for (h, head) in a.heads.iter().enumerate() {
        roles.push((format!("{prefix}w_q.{h}"), head.wq.clone()));
        roles.push((format!("{prefix}w_k.{h}"), head.wk.clone()));
        roles.push((format!("{prefix}w_v.{h}"), head.wv.clone()));
    }
    roles.push((format!("{prefix}w_o"), a.wo.clone()));
}

fn mha_options(a: &MultiHeadAttention, o: &mut BlockOptions) {
    o.heads = Some(a.heads.len());
    o.d_k = Some(a.heads[0].wq.cols());
}

fn encode(b: &Block) -> Result<(BlockOptions, Vec<(String, Matrix)>)> {
    let mut o = BlockOptions::default();
    let mut roles = Vec::new();
    match b {
        Block::Linear(l) => roles.push(("w".into(), l.weight.clone())),
        Block::Mlp2(m) => {
            o.activation = Some(m.activation);
            roles.push(("w1".into(), m.w1.clone()));
            roles.push(("w2".into(), m.w2.clone()));
        }
        Block::LayerNorm(ln) => {
            o.epsilon = Some(ln.epsilon);
            roles.push(("gamma".into(), ln.gamma.clone()));
            roles.push(("beta".into(), ln.beta.clone()));
        }
        Block::SelfAttention(a) => {
            o.d_k = Some(a.head.wq.cols());
            roles.push(("w_q".into(), a.head.wq.clone()));
            roles.push(("w_k".into(), a.head.wk.clone()));
            roles.push(("w_v".into(), a.head.wv.clone()));
        }
        Block::MultiHeadSelfAttention(a) => {
            mha_options(a, &mut o);
            mha_roles(a, "", &mut roles);
        }
        Block::PreLnTransformer(PreLn { ln, mlp, attn, .. }) | Block::PostLnTransformer(PostLn { ln, mlp, attn }) => {
            if let Block::PreLnTransformer(t) = b {
                o.alpha = Some(t.alpha);
            }
            o.epsilon = Some(ln.epsilon);
            o.activation = Some(mlp.activation);
            mha_options(attn, &mut o);
            roles.push(("ln.gamma".into(), ln.gamma.clone()));
            roles.push(("ln.beta".into(), ln.beta.clone()));
            roles.push(("mlp.w1".into(), mlp.w1.clone()));
            roles.push(("mlp.w2".into(), mlp.w2.clone()));
            mha_roles(attn, "attn.", &mut roles);
        }
        other => {
            return Err(bad(format!(
                "{} blocks cannot be stored; store their members instead",
                other.kind_name()
            )))
        }
    }
    Ok((o, roles))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub tensors: usize,
    pub blocks: usize,
    pub payload_bytes: usize,
    /// Saving the loaded file reproduces the manifest bytes exactly.
    pub manifest_round_trip: bool,
    /// Re-encoding the decoded blocks reproduces the payload bytes exactly.
    pub payload_round_trip: bool,
}

/// Loads and checks a weight file, decodes its blocks and round-trips both
/// halves.
pub fn validate_weights(path: &Path) -> Result<ValidationReport> {
    let manifest = std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let pp = payload_path(path);
    let payload = std::fs::read(&pp).map_err(|e| Error::Io(format!("{}: {e}", pp.display())))?;
    let wf = WeightFile::from_bytes(&manifest, payload)?;
    let blocks = wf.blocks()?;
    let payload_round_trip = match wf.seq_len()? {
        Some(s) => {
            let again = WeightFile::from_blocks(&blocks, s)?;
            // Foreign layouts may order tensors differently; compare values
            // tensor by tensor through the roles.
            wf.manifest.blocks.iter().zip(&again.manifest.blocks).all(|(a, b)| {
                a.params.iter().all(|(role, name)| {
                    let other = &b.params[role];
                    wf.tensor(name).ok().map(|m| m.into_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
                        == again.tensor(other).ok().map(|m| m.into_vec().iter().map(|v| v.to_bits()).collect())
                })
            })
        }
        None => true,
    };
    Ok(ValidationReport {
        tensors: wf.manifest.tensors.len(),
        blocks: blocks.len(),
        payload_bytes: wf.payload.len(),
        manifest_round_trip: wf.manifest_bytes() == manifest,
        payload_round_trip,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_valid() {
        let wf = WeightFile::from_bytes(br#"{"version":1,"tensors":[],"blocks":[]}"#, vec![]).unwrap();
        assert!(wf.blocks().unwrap().is_empty());
    }

    #[test]
    fn short_payload_names_the_tensor() {
        let m = br#"{"version":1,"tensors":[{"name":"w","shape":[2,2],"offset_bytes":0,"dtype":"f64le"}],"blocks":[]}"#;
        let err = WeightFile::from_bytes(m, vec![0; 24]).unwrap_err();
        assert!(err.to_string().contains("tensor w"), "{err}");
    }

    #[test]
    fn overlap_and_alignment_are_rejected() {
        let m = br#"{"version":1,"tensors":[
            {"name":"a","shape":[1,2],"offset_bytes":0,"dtype":"f64le"},
            {"name":"b","shape":[1,2],"offset_bytes":8,"dtype":"f64le"}],"blocks":[]}"#;
        assert!(WeightFile::from_bytes(m, vec![0; 32]).unwrap_err().to_string().contains("overlap"));
        let m = br#"{"version":1,"tensors":[{"name":"a","shape":[1,1],"offset_bytes":4,"dtype":"f64le"}],"blocks":[]}"#;
        assert!(WeightFile::from_bytes(m, vec![0; 12]).unwrap_err().to_string().contains("aligned"));
    }

    #[test]
    fn unknown_manifest_keys_are_rejected() {
        let m = br#"{"version":1,"tensors":[],"blocks":[],"extra":0}"#;
        assert!(WeightFile::from_bytes(m, vec![]).is_err());
    }
}
