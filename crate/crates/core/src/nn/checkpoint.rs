//! "NNCKPT01" checkpoint container: magic, format version, self-describing
//! section table (name, dtype, shape, offset), little-endian f32 payloads and
//! a trailing CRC32. Also used for SAT bundles and PCA projections by storing
//! extra named sections next to a network's tensors.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::{HeadSpec, LayerDesc, LayerParams, Network, NetworkSpec, NnError};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"NNCKPT01";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0} (expected {FORMAT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("checkpoint checksum mismatch (stored {stored:#x}, computed {computed:#x})")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("bad section {0}")]
    BadSection(String),
    #[error("network spec: {0}")]
    Spec(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum SectionData {
    /// Numeric tensor, stored as little-endian f32.
    F32 { dims: Vec<usize>, values: Vec<f64> },
    /// Raw bytes (used for the spec echo).
    Bytes(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub data: SectionData,
}

fn crc32(data: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, slot) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *slot = c;
    }
    let mut crc = 0xFFFF_FFFFu32;
    for &b in data {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    crc ^ 0xFFFF_FFFF
}

pub fn save_sections(path: &Path, sections: &[Section]) -> Result<(), CheckpointError> {
    let mut payload: Vec<u8> = Vec::new();
    let mut table: Vec<u8> = Vec::new();
    for s in sections {
        let name = s.name.as_bytes();
        table.extend_from_slice(&(name.len() as u32).to_le_bytes());
        table.extend_from_slice(name);
        let offset = payload.len() as u64;
        match &s.data {
            SectionData::F32 { dims, values } => {
                table.push(0u8);
                table.extend_from_slice(&(dims.len() as u32).to_le_bytes());
                for d in dims {
                    table.extend_from_slice(&(*d as u64).to_le_bytes());
                }
                for v in values {
                    payload.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
            SectionData::Bytes(bytes) => {
                table.push(1u8);
                table.extend_from_slice(&1u32.to_le_bytes());
                table.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
                payload.extend_from_slice(bytes);
            }
        }
        table.extend_from_slice(&offset.to_le_bytes());
        table.extend_from_slice(&(payload.len() as u64 - offset).to_le_bytes());
    }

    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    out.extend_from_slice(&table);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, out).map_err(|source| CheckpointError::Io { path: path.into(), source })
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Truncated(what.to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn load_sections(path: &Path) -> Result<Vec<Section>, CheckpointError> {
    let buf = fs::read(path).map_err(|source| CheckpointError::Io { path: path.into(), source })?;
    if buf.len() < MAGIC.len() + 8 {
        return Err(CheckpointError::Truncated("header".into()));
    }
    if &buf[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let stored = u32::from_le_bytes(buf[buf.len() - 4..].try_into().unwrap());
    let computed = crc32(&buf[..buf.len() - 4]);
    if stored != computed {
        return Err(CheckpointError::ChecksumMismatch { stored, computed });
    }

    let mut r = Reader { buf: &buf[..buf.len() - 4], pos: 8 };
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let n_sections = r.u32("section count")? as usize;
    struct Entry {
        name: String,
        dtype: u8,
        dims: Vec<usize>,
        offset: usize,
        len: usize,
    }
    let mut entries = Vec::with_capacity(n_sections);
    for _ in 0..n_sections {
        let name_len = r.u32("section name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "section name")?.to_vec())
            .map_err(|_| CheckpointError::BadSection("name not utf-8".into()))?;
        let dtype = r.take(1, "dtype")?[0];
        let ndim = r.u32("ndim")? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u64("dim")? as usize);
        }
        let offset = r.u64("offset")? as usize;
        let len = r.u64("len")? as usize;
        entries.push(Entry { name, dtype, dims, offset, len });
    }
    let payload_len = r.u64("payload length")? as usize;
    let payload = r.take(payload_len, "payload")?;

    let mut sections = Vec::with_capacity(n_sections);
    for e in entries {
        if e.offset + e.len > payload.len() {
            return Err(CheckpointError::Truncated(format!("section {}", e.name)));
        }
        let bytes = &payload[e.offset..e.offset + e.len];
        let data = match e.dtype {
            0 => {
                let expected: usize = e.dims.iter().product::<usize>() * 4;
                if bytes.len() != expected {
                    return Err(CheckpointError::BadSection(format!(
                        "{}: payload {} bytes, dims imply {}",
                        e.name,
                        bytes.len(),
                        expected
                    )));
                }
                let values = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect();
                SectionData::F32 { dims: e.dims, values }
            }
            1 => SectionData::Bytes(bytes.to_vec()),
            other => {
                return Err(CheckpointError::BadSection(format!(
                    "{}: unknown dtype {other}",
                    e.name
                )))
            }
        };
        sections.push(Section { name: e.name, data });
    }
    Ok(sections)
}

fn spec_to_text(spec: &NetworkSpec) -> String {
    let mut out = String::new();
    out.push_str(&format!("input {}\n", spec.input_dim));
    out.push_str(&format!("seed {}\n", spec.seed));
    for block in &spec.blocks {
        out.push_str("block\n");
        for l in block {
            match l {
                LayerDesc::Affine { out: o } => out.push_str(&format!("affine {o}\n")),
                LayerDesc::Relu => out.push_str("relu\n"),
                LayerDesc::Sigmoid => out.push_str("sigmoid\n"),
                LayerDesc::BatchNorm => out.push_str("bn\n"),
                LayerDesc::Dropout { p } => out.push_str(&format!("dropout {p}\n")),
                LayerDesc::LinearBottleneck { out: o } => out.push_str(&format!("lb {o}\n")),
                LayerDesc::ContextSplice { offsets } => {
                    let s: Vec<String> = offsets.iter().map(|o| o.to_string()).collect();
                    out.push_str(&format!("splice {}\n", s.join(",")));
                }
                LayerDesc::OnlineAverage => out.push_str("online_avg\n"),
            }
        }
    }
    for (a, b) in &spec.skips {
        out.push_str(&format!("skip {a} {b}\n"));
    }
    for h in &spec.heads {
        out.push_str(&format!("head {} {}\n", h.name, h.classes));
    }
    out
}

fn spec_from_text(text: &str) -> Result<NetworkSpec, CheckpointError> {
    let bad = |line: &str| CheckpointError::BadSection(format!("spec line '{line}'"));
    let mut spec = NetworkSpec {
        input_dim: 0,
        blocks: Vec::new(),
        skips: Vec::new(),
        heads: Vec::new(),
        seed: 0,
    };
    for line in text.lines() {
        let mut it = line.split_whitespace();
        let Some(tok) = it.next() else { continue };
        match tok {
            "input" => {
                spec.input_dim = it.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad(line))?
            }
            "seed" => {
                spec.seed = it.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad(line))?
            }
            "block" => spec.blocks.push(Vec::new()),
            "skip" => {
                let a = it.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad(line))?;
                let b = it.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad(line))?;
                spec.skips.push((a, b));
            }
            "head" => {
                let name = it.next().ok_or_else(|| bad(line))?.to_string();
                let classes = it.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad(line))?;
                spec.heads.push(HeadSpec { name, classes });
            }
            layer => {
                let block = spec.blocks.last_mut().ok_or_else(|| bad(line))?;
                let desc = match layer {
                    "affine" => LayerDesc::Affine {
                        out: it.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad(line))?,
                    },
                    "relu" => LayerDesc::Relu,
                    "sigmoid" => LayerDesc::Sigmoid,
                    "bn" => LayerDesc::BatchNorm,
                    "dropout" => LayerDesc::Dropout {
                        p: it.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad(line))?,
                    },
                    "lb" => LayerDesc::LinearBottleneck {
                        out: it.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad(line))?,
                    },
                    "splice" => {
                        let offs = it
                            .next()
                            .ok_or_else(|| bad(line))?
                            .split(',')
                            .map(|o| o.parse::<i64>().map_err(|_| bad(line)))
                            .collect::<Result<Vec<_>, _>>()?;
                        LayerDesc::ContextSplice { offsets: offs }
                    }
                    "online_avg" => LayerDesc::OnlineAverage,
                    _ => return Err(bad(line)),
                };
                block.push(desc);
            }
        }
    }
    if spec.input_dim == 0 || spec.blocks.is_empty() {
        return Err(CheckpointError::BadSection("incomplete spec".into()));
    }
    Ok(spec)
}

fn tensor2(name: &str, a: &Array2<f64>) -> Section {
    Section {
        name: name.to_string(),
        data: SectionData::F32 {
            dims: vec![a.nrows(), a.ncols()],
            values: a.iter().cloned().collect(),
        },
    }
}

fn tensor1(name: &str, a: &Array1<f64>) -> Section {
    Section {
        name: name.to_string(),
        data: SectionData::F32 { dims: vec![a.len()], values: a.to_vec() },
    }
}

/// All sections describing a network, names prefixed with `prefix`.
pub fn network_sections(net: &Network, prefix: &str) -> Vec<Section> {
    let mut sections = vec![Section {
        name: format!("{prefix}spec"),
        data: SectionData::Bytes(spec_to_text(&net.spec).into_bytes()),
    }];
    for (i, layer) in net.layers().iter().enumerate() {
        match &layer.params {
            LayerParams::Affine { w, b } => {
                sections.push(tensor2(&format!("{prefix}layer{i}/w"), w));
                sections.push(tensor1(&format!("{prefix}layer{i}/b"), b));
            }
            LayerParams::Linear { w } => {
                sections.push(tensor2(&format!("{prefix}layer{i}/w"), w));
            }
            LayerParams::BatchNorm { gamma, beta, run_mean, run_var } => {
                sections.push(tensor1(&format!("{prefix}layer{i}/gamma"), gamma));
                sections.push(tensor1(&format!("{prefix}layer{i}/beta"), beta));
                sections.push(tensor1(&format!("{prefix}layer{i}/run_mean"), run_mean));
                sections.push(tensor1(&format!("{prefix}layer{i}/run_var"), run_var));
            }
            LayerParams::None => {}
        }
    }
    for (i, h) in net.heads_raw().iter().enumerate() {
        sections.push(tensor2(&format!("{prefix}head{i}/w"), &h.w));
        sections.push(tensor1(&format!("{prefix}head{i}/b"), &h.b));
    }
    sections
}

fn find<'a>(
    sections: &'a [Section],
    name: &str,
) -> Result<&'a SectionData, CheckpointError> {
    sections
        .iter()
        .find(|s| s.name == name)
        .map(|s| &s.data)
        .ok_or_else(|| CheckpointError::BadSection(format!("missing {name}")))
}

fn get2(sections: &[Section], name: &str) -> Result<Array2<f64>, CheckpointError> {
    match find(sections, name)? {
        SectionData::F32 { dims, values } if dims.len() == 2 => {
            Array2::from_shape_vec((dims[0], dims[1]), values.clone())
                .map_err(|_| CheckpointError::BadSection(format!("{name}: shape")))
        }
        _ => Err(CheckpointError::BadSection(format!("{name}: expected 2-d f32"))),
    }
}

fn get1(sections: &[Section], name: &str) -> Result<Array1<f64>, CheckpointError> {
    match find(sections, name)? {
        SectionData::F32 { dims, values } if dims.len() == 1 => {
            Ok(Array1::from_vec(values.clone()))
        }
        _ => Err(CheckpointError::BadSection(format!("{name}: expected 1-d f32"))),
    }
}

/// Rebuild a network from prefixed sections.
pub fn network_from_sections(
    sections: &[Section],
    prefix: &str,
) -> Result<Network, CheckpointError> {
    let spec_text = match find(sections, &format!("{prefix}spec"))? {
        SectionData::Bytes(b) => String::from_utf8(b.clone())
            .map_err(|_| CheckpointError::BadSection("spec not utf-8".into()))?,
        _ => return Err(CheckpointError::BadSection("spec section dtype".into())),
    };
    let spec = spec_from_text(&spec_text)?;
    let mut net = Network::new(spec)?;
    let n_layers = net.layers().len();
    for i in 0..n_layers {
        let desc = net.layers()[i].desc.clone();
        match desc {
            LayerDesc::Affine { .. } => {
                let w = get2(sections, &format!("{prefix}layer{i}/w"))?;
                let b = get1(sections, &format!("{prefix}layer{i}/b"))?;
                net.layers_mut()[i].params = LayerParams::Affine { w, b };
            }
            LayerDesc::LinearBottleneck { .. } => {
                let w = get2(sections, &format!("{prefix}layer{i}/w"))?;
                net.layers_mut()[i].params = LayerParams::Linear { w };
            }
            LayerDesc::BatchNorm => {
                net.layers_mut()[i].params = LayerParams::BatchNorm {
                    gamma: get1(sections, &format!("{prefix}layer{i}/gamma"))?,
                    beta: get1(sections, &format!("{prefix}layer{i}/beta"))?,
                    run_mean: get1(sections, &format!("{prefix}layer{i}/run_mean"))?,
                    run_var: get1(sections, &format!("{prefix}layer{i}/run_var"))?,
                };
            }
            _ => {}
        }
    }
    let n_heads = net.heads_raw().len();
    for i in 0..n_heads {
        net.heads_raw_mut()[i].w = get2(sections, &format!("{prefix}head{i}/w"))?;
        net.heads_raw_mut()[i].b = get1(sections, &format!("{prefix}head{i}/b"))?;
    }
    // fresh deterministic dropout stream; inference never consumes it
    net.reseed_dropout();
    Ok(net)
}

pub fn save_network(net: &Network, path: &Path) -> Result<(), CheckpointError> {
    save_sections(path, &network_sections(net, ""))
}

pub fn load_network(path: &Path) -> Result<Network, CheckpointError> {
    let sections = load_sections(path)?;
    network_from_sections(&sections, "")
}

impl Network {
    pub(crate) fn reseed_dropout(&mut self) {
        self.set_dropout_rng(ChaCha8Rng::seed_from_u64(self.spec.seed ^ 0xD120_0D12));
    }
}
