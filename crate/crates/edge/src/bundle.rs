//! Binary model bundle.
//!
//! ```text
//! "WECB" | version u16 | kind u8
//! | d h G p_total task c_seen layers : u32 | widths[layers] : u32 | classes[c_seen] : u32
//! | tensor count u32 | (name_len u32, name, rows u32, cols u32, f32 * rows*cols)*
//! | crc32 of everything above
//! ```
//!
//! All integers and floats are little-endian. Parameters are stored as f32,
//! which is exact because the training code keeps them f32-representable.

use std::collections::HashMap;

use csicl_core::attention::{AttentionBase, ParallelAdapter, PrefixBlock, PrefixStack};
use csicl_core::encoding::GaussianRangeEncoding;
use csicl_core::mlp::MlpLayer;
use csicl_core::model::{Classifier, FullModel, LightModel, Network};
use csicl_core::numeric::{ParamId, ParamStore, Tensor2};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"WECB";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ModelKind {
    Full = 1,
    Light = 2,
}

impl ModelKind {
    fn from_byte(b: u8) -> Option<Self> {
        match b {
            1 => Some(ModelKind::Full),
            2 => Some(ModelKind::Light),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BundleError {
    #[error("not a model bundle (bad magic)")]
    BadMagic,
    #[error("unsupported bundle version {0}")]
    UnsupportedVersion(u16),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("bundle truncated at byte {offset}: need {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("malformed bundle: {0}")]
    Malformed(String),
}

impl BundleError {
    /// Wire error code reported when a pushed bundle is rejected.
    pub fn code(&self) -> u16 {
        match self {
            BundleError::BadMagic => 41,
            BundleError::UnsupportedVersion(_) => 42,
            BundleError::Checksum { .. } => 43,
            BundleError::Truncated { .. } => 44,
            BundleError::Malformed(_) => 45,
        }
    }
}

fn malformed(msg: impl Into<String>) -> BundleError {
    BundleError::Malformed(msg.into())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BundleMeta {
    pub kind: ModelKind,
    pub dim: u32,
    pub heads: u32,
    pub ranges: u32,
    pub prefix_rows: u32,
    pub task: u32,
    pub mlp_widths: Vec<u32>,
    /// Dataset label of every logit column.
    pub classes: Vec<u32>,
}

#[derive(Debug, Clone)]
pub enum BundleModel {
    Full(FullModel),
    Light(LightModel),
}

impl BundleModel {
    pub fn network(&self) -> &Network {
        match self {
            BundleModel::Full(m) => &m.net,
            BundleModel::Light(m) => &m.net,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Bundle {
    pub meta: BundleMeta,
    pub model: BundleModel,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("bundle field exceeds u32");
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn tensor(&mut self, name: &str, t: &Tensor2) {
        self.u32(name.len());
        self.buf.extend_from_slice(name.as_bytes());
        self.u32(t.rows());
        self.u32(t.cols());
        for &v in t.data() {
            self.buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
}

/// Names and values in canonical order.
fn tensor_table<'a>(net: &'a Network, adapters: &[(&str, &'a Tensor2)]) -> Vec<(String, &'a Tensor2)> {
    let s = &net.store;
    let mut out: Vec<(String, &Tensor2)> = Vec::new();
    let mut push = |id: ParamId| out.push((s.get(id).name.clone(), s.value(id)));
    for id in net.encoding.params() {
        push(id);
    }
    for id in net.attention.params() {
        push(id);
    }
    for block in net.prefixes.blocks() {
        for id in block.params() {
            push(id);
        }
    }
    for layer in &net.mlp {
        for id in layer.params() {
            push(id);
        }
    }
    for id in net.classifier.params() {
        push(id);
    }
    out.extend(adapters.iter().map(|(n, t)| (n.to_string(), *t)));
    out
}

fn encode(kind: ModelKind, net: &Network, task: usize, adapters: &[(&str, &Tensor2)]) -> Vec<u8> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.buf.extend_from_slice(&VERSION.to_le_bytes());
    w.buf.push(kind as u8);
    let widths = net.mlp_widths();
    w.u32(net.dim());
    w.u32(net.heads());
    w.u32(net.encoding.ranges(&net.store));
    w.u32(net.prefixes.total_rows(&net.store));
    w.u32(task);
    w.u32(net.num_classes());
    w.u32(widths.len());
    for width in widths {
        w.u32(width);
    }
    for &c in &net.classifier.classes {
        w.u32(c);
    }
    let table = tensor_table(net, adapters);
    w.u32(table.len());
    for (name, t) in table {
        w.tensor(&name, t);
    }
    let crc = crc32fast::hash(&w.buf);
    w.buf.extend_from_slice(&crc.to_le_bytes());
    w.buf
}

pub fn serialize_light(model: &LightModel) -> Vec<u8> {
    encode(ModelKind::Light, &model.net, model.tasks_learned, &[])
}

pub fn serialize_full(model: &FullModel) -> Vec<u8> {
    let adapters = [
        ("adapter.key.down", &model.key_adapter.down),
        ("adapter.key.up", &model.key_adapter.up),
        ("adapter.value.down", &model.value_adapter.down),
        ("adapter.value.up", &model.value_adapter.up),
    ];
    encode(ModelKind::Full, &model.net, model.tasks_learned, &adapters)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8], BundleError> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(BundleError::Truncated {
                offset: self.pos,
                needed: len - (self.bytes.len() - self.pos),
            }),
        }
    }

    fn u32(&mut self) -> Result<u32, BundleError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn len(&mut self) -> Result<usize, BundleError> {
        Ok(self.u32()? as usize)
    }
}

struct RawTensor<'a> {
    name: &'a str,
    rows: usize,
    cols: usize,
    data: &'a [u8],
}

impl RawTensor<'_> {
    fn to_tensor(&self) -> Tensor2 {
        let data = self
            .data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Tensor2::from_vec(self.rows, self.cols, data).expect("length checked while scanning")
    }
}

/// Parses and validates the layout without materializing any tensor.
fn scan(body: &[u8]) -> Result<(BundleMeta, Vec<RawTensor<'_>>), BundleError> {
    let mut r = Reader { bytes: body, pos: 7 };
    let kind = ModelKind::from_byte(body[6]).ok_or_else(|| malformed(format!("unknown model kind {}", body[6])))?;
    let dim = r.u32()?;
    let heads = r.u32()?;
    let ranges = r.u32()?;
    let prefix_rows = r.u32()?;
    let task = r.u32()?;
    let c_seen = r.len()?;
    let layers = r.len()?;
    // every count is bounded by the bytes that would have to follow it
    if layers > body.len() / 4 || c_seen > body.len() / 4 {
        return Err(BundleError::Truncated {
            offset: r.pos,
            needed: 4 * (layers + c_seen),
        });
    }
    let mlp_widths = (0..layers).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
    let classes = (0..c_seen).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
    let count = r.len()?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = r.len()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| malformed("tensor name is not UTF-8"))?;
        let rows = r.len()?;
        let cols = r.len()?;
        let bytes = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| malformed(format!("tensor `{name}` is {rows}x{cols}")))?;
        let data = r.take(bytes)?;
        tensors.push(RawTensor { name, rows, cols, data });
    }
    if r.pos != body.len() {
        return Err(malformed(format!(
            "{} trailing bytes after the tensor table",
            body.len() - r.pos
        )));
    }
    let meta = BundleMeta {
        kind,
        dim,
        heads,
        ranges,
        prefix_rows,
        task,
        mlp_widths,
        classes,
    };
    Ok((meta, tensors))
}

/// Checks magic, version, layout and checksum, then builds the model.
pub fn deserialize(bytes: &[u8]) -> Result<Bundle, BundleError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(if bytes.len() < 4 && MAGIC.starts_with(bytes) {
            BundleError::Truncated {
                offset: bytes.len(),
                needed: 4 - bytes.len(),
            }
        } else {
            BundleError::BadMagic
        });
    }
    let header = 4 + 2 + 1;
    if bytes.len() < header + 4 {
        return Err(BundleError::Truncated {
            offset: bytes.len(),
            needed: header + 4 - bytes.len(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(BundleError::UnsupportedVersion(version));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let scanned = scan(body);
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    let computed = crc32fast::hash(body);
    let (meta, tensors) = match scanned {
        // a short input also shifts the checksum into the body, so report
        // truncation first
        Err(e @ BundleError::Truncated { .. }) => return Err(e),
        Err(e) if stored == computed => return Err(e),
        Err(_) => return Err(BundleError::Checksum { stored, computed }),
        Ok(_) if stored != computed => return Err(BundleError::Checksum { stored, computed }),
        Ok(v) => v,
    };
    let model = build(&meta, &tensors)?;
    Ok(Bundle { meta, model })
}

struct Tensors<'a> {
    by_name: HashMap<&'a str, &'a RawTensor<'a>>,
}

impl Tensors<'_> {
    fn get(&self, name: &str, rows: usize, cols: usize) -> Result<Tensor2, BundleError> {
        let t = self
            .by_name
            .get(name)
            .ok_or_else(|| malformed(format!("missing tensor `{name}`")))?;
        if (t.rows, t.cols) != (rows, cols) {
            return Err(malformed(format!(
                "tensor `{name}` is {}x{}, expected {rows}x{cols}",
                t.rows, t.cols
            )));
        }
        Ok(t.to_tensor())
    }

    fn param(&self, store: &mut ParamStore, name: &str, rows: usize, cols: usize) -> Result<ParamId, BundleError> {
        let t = self.get(name, rows, cols)?;
        Ok(store.add(name, t))
    }
}

/// Prefix tasks in table order (newest first), from `prefix.<task>.k.0`.
fn prefix_tasks(tensors: &[RawTensor<'_>]) -> Result<Vec<usize>, BundleError> {
    let mut tasks = Vec::new();
    for t in tensors {
        if let Some(rest) = t.name.strip_prefix("prefix.") {
            if let Some(task) = rest.strip_suffix(".k.0") {
                let task = task
                    .parse()
                    .map_err(|_| malformed(format!("bad prefix tensor name `{}`", t.name)))?;
                tasks.push(task);
            }
        }
    }
    Ok(tasks)
}

fn build(meta: &BundleMeta, raw: &[RawTensor<'_>]) -> Result<BundleModel, BundleError> {
    let (d, h, g) = (meta.dim as usize, meta.heads as usize, meta.ranges as usize);
    if d == 0 || h == 0 || d % h != 0 || g == 0 {
        return Err(malformed(format!("dim {d}, heads {h}, ranges {g}")));
    }
    let hd = d / h;
    let mut by_name = HashMap::new();
    for t in raw {
        if by_name.insert(t.name, t).is_some() {
            return Err(malformed(format!("duplicate tensor `{}`", t.name)));
        }
    }
    let ts = Tensors { by_name };
    let mut store = ParamStore::new();

    let encoding = GaussianRangeEncoding {
        mu: ts.param(&mut store, "encoding.mu", 1, g)?,
        raw_sigma: ts.param(&mut store, "encoding.raw_sigma", 1, g)?,
        table: ts.param(&mut store, "encoding.table", g, d)?,
    };
    let family = |tag: &str, store: &mut ParamStore| -> Result<Vec<ParamId>, BundleError> {
        (0..h)
            .map(|i| ts.param(store, &format!("attn.{tag}.{i}"), d, hd))
            .collect()
    };
    let query = family("q", &mut store)?;
    let key = family("k", &mut store)?;
    let value = family("v", &mut store)?;
    let attention = AttentionBase {
        heads: h,
        dim: d,
        query,
        key,
        value,
        output: ts.param(&mut store, "attn.o", d, d)?,
        frozen: true,
    };

    let mut prefixes = PrefixStack::new();
    let mut rows_total = 0;
    for &task in prefix_tasks(raw)?.iter().rev() {
        let rows = ts
            .by_name
            .get(format!("prefix.{task}.k.0").as_str())
            .map_or(0, |t| t.rows);
        rows_total += rows;
        let part = |kv: &str| -> Result<Vec<Tensor2>, BundleError> {
            (0..h)
                .map(|i| ts.get(&format!("prefix.{task}.{kv}.{i}"), rows, hd))
                .collect()
        };
        let mut block = PrefixBlock::from_values(&mut store, task, part("k")?, part("v")?)
            .map_err(|e| malformed(e.to_string()))?;
        block.frozen = true;
        prefixes.push(block).map_err(|e| malformed(e.to_string()))?;
    }
    if rows_total != meta.prefix_rows as usize {
        return Err(malformed(format!(
            "prefix tensors hold {rows_total} rows, header says {}",
            meta.prefix_rows
        )));
    }

    let mut mlp = Vec::with_capacity(meta.mlp_widths.len());
    let mut d_in = d;
    for (l, &w) in meta.mlp_widths.iter().enumerate() {
        let w = w as usize;
        let weight = ts.param(&mut store, &format!("mlp.{l}.w"), d_in, w)?;
        let bias = ts.param(&mut store, &format!("mlp.{l}.b"), 1, w)?;
        mlp.push(MlpLayer::from_params(weight, bias));
        d_in = w;
    }
    let c = meta.classes.len();
    let classifier = Classifier {
        weight: ts.param(&mut store, "classifier.w", d_in, c)?,
        bias: ts.param(&mut store, "classifier.b", 1, c)?,
        classes: meta.classes.iter().map(|&k| k as usize).collect(),
    };
    let mut expected = store.len();
    if meta.kind == ModelKind::Full {
        expected += 4;
    }
    if raw.len() != expected {
        return Err(malformed(format!(
            "{} tensors present, {expected} expected",
            raw.len()
        )));
    }
    store.set_all_trainable(false);
    let net = Network {
        store,
        encoding,
        attention,
        prefixes,
        mlp,
        classifier,
        dropout: 0.0,
    };
    let tasks_learned = meta.task as usize;
    Ok(match meta.kind {
        ModelKind::Light => BundleModel::Light(LightModel { net, tasks_learned }),
        ModelKind::Full => {
            let rank = ts
                .by_name
                .get("adapter.key.down")
                .map_or(0, |t| t.cols);
            let adapter = |name: &str| -> Result<ParallelAdapter, BundleError> {
                Ok(ParallelAdapter {
                    down: ts.get(&format!("adapter.{name}.down"), d, rank)?,
                    up: ts.get(&format!("adapter.{name}.up"), rank, d)?,
                })
            };
            BundleModel::Full(FullModel {
                key_adapter: adapter("key")?,
                value_adapter: adapter("value")?,
                net,
                tasks_learned,
            })
        }
    })
}
