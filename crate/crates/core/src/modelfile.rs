//! `.fbm` model files. The byte layout is documented in `docs/format.md`.

use std::fmt;
use std::path::Path;

use thiserror::Error;

use crate::bitpack::{words_for, BitpackError, Dims, PackedBitPlane};
use crate::encoding::ThermometerConfig;
use crate::fixed::Fx;
use crate::kernels::{Affine, BpreluParams, ClassifierWeights, ConvWeights};
use crate::model::{
    build_fracbnn_resnet20, BlockSpec, ChannelParams, LayerKind, LayerParams, Model, ModelError,
    NetworkSpec, Topology,
};

pub const MAGIC: [u8; 4] = *b"FBNN";
pub const VERSION: u16 = 1;
pub const FILE_HEADER_LEN: usize = 18;
pub const LAYER_HEADER_LEN: usize = 14;
const CRC_LEN: usize = 4;
/// Words per block channel record: delta, bn, BPReLU and output bn.
const CHANNEL_RECORD: usize = 8;

const FLAG_SHORTCUT: u8 = 1;
const FLAG_DOWNSAMPLE: u8 = 2;

/// Where in a file an error was found.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Location {
    pub offset: usize,
    /// `None` for the file header and trailer.
    pub layer: Option<usize>,
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            Some(l) => write!(f, "byte {} (layer {l})", self.offset),
            None => write!(f, "byte {} (file header)", self.offset),
        }
    }
}

#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error("cannot access model file: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {found:02x?} at {at}")]
    BadMagic { found: Vec<u8>, at: Location },
    #[error("unsupported version {version} at {at}")]
    UnsupportedVersion { version: u16, at: Location },
    #[error("file truncated at {at}: {what} needs {needed} bytes, {available} left")]
    Truncated {
        what: &'static str,
        needed: usize,
        available: usize,
        at: Location,
    },
    #[error("unknown layer kind {code} at {at}")]
    UnknownLayerKind { code: u8, at: Location },
    #[error("{extra} unexpected bytes after the last layer at {at}")]
    TrailingBytes { extra: usize, at: Location },
    #[error("CRC mismatch at {at}: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch {
        stored: u32,
        computed: u32,
        at: Location,
    },
    #[error("unknown topology tag {tag} at {at}")]
    UnknownTopology { tag: u16, at: Location },
    #[error("reserved bits set at {at}")]
    ReservedBits { at: Location },
    #[error("nonzero padding lanes in kernel {out_channel} at {at}")]
    PaddingLanes { out_channel: usize, at: Location },
    #[error("invalid parameter at {at}: {reason}")]
    InvalidParam { reason: String, at: Location },
    #[error("shapes do not compose at {at}: {reason}")]
    Shape { reason: String, at: Location },
    #[error("layers differ from the declared topology at {at}: {reason}")]
    TopologyMismatch { reason: String, at: Location },
    #[error("model cannot be stored: {0}")]
    Unrepresentable(String),
}

impl ModelFileError {
    /// Location of a format error; `None` for I/O and save-side errors.
    pub fn location(&self) -> Option<Location> {
        use ModelFileError::*;
        match self {
            BadMagic { at, .. }
            | UnsupportedVersion { at, .. }
            | Truncated { at, .. }
            | UnknownLayerKind { at, .. }
            | TrailingBytes { at, .. }
            | CrcMismatch { at, .. }
            | UnknownTopology { at, .. }
            | ReservedBits { at }
            | PaddingLanes { at, .. }
            | InvalidParam { at, .. }
            | Shape { at, .. }
            | TopologyMismatch { at, .. } => Some(*at),
            Io(_) | Unrepresentable(_) => None,
        }
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn fx(&mut self, v: Fx) {
        self.i32(v.raw());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn weights(&mut self, w: &ConvWeights) {
        for plane in w.planes() {
            plane.words().iter().for_each(|&x| self.u64(x));
        }
    }
}

fn narrow<T: TryFrom<usize>>(
    v: usize,
    what: &str,
    layer: Option<usize>,
) -> Result<T, ModelFileError> {
    T::try_from(v).map_err(|_| {
        let place = layer.map_or("header".to_string(), |l| format!("layer {l}"));
        ModelFileError::Unrepresentable(format!("{place}: {what} = {v} does not fit"))
    })
}

/// Serializes `model`; equal models give identical bytes.
pub fn save(model: &Model) -> Result<Vec<u8>, ModelFileError> {
    let spec = model.spec();
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(&MAGIC);
    w.u16(VERSION);
    w.u16(spec.topology.tag());
    w.u8(narrow(
        spec.thermometer.resolution() as usize,
        "resolution",
        None,
    )?);
    w.u8(0);
    w.u16(narrow(spec.image_height, "image height", None)?);
    w.u16(narrow(spec.image_width, "image width", None)?);
    w.u16(narrow(spec.classes, "classes", None)?);
    w.u16(narrow(spec.blocks.len(), "layer count", None)?);
    for (i, (b, p)) in spec.blocks.iter().zip(model.layers()).enumerate() {
        let l = Some(i);
        w.u8(b.kind.code());
        w.u8((b.has_shortcut as u8 * FLAG_SHORTCUT) | (b.downsample as u8 * FLAG_DOWNSAMPLE));
        w.u8(narrow(b.kernel(), "kernel", l)?);
        w.u8(narrow(b.stride, "stride", l)?);
        w.u8(narrow(b.pad, "pad", l)?);
        w.u8(0);
        w.u16(narrow(b.in_channels, "input channels", l)?);
        w.u16(narrow(b.out_channels, "output channels", l)?);
        w.u16(narrow(b.in_height, "input height", l)?);
        w.u16(narrow(b.in_width, "input width", l)?);
        match p {
            LayerParams::Input { weights, bn } => {
                w.weights(weights);
                for a in bn {
                    w.fx(a.scale);
                    w.fx(a.bias);
                }
            }
            LayerParams::Block {
                act_scale,
                weights,
                channels,
            } => {
                act_scale.iter().for_each(|&s| w.fx(s));
                w.weights(weights);
                for c in channels {
                    w.i32(c.delta);
                    w.fx(c.bn.scale);
                    w.fx(c.bn.bias);
                    w.fx(c.bprelu.alpha);
                    w.fx(c.bprelu.slope);
                    w.fx(c.bprelu.gamma);
                    w.fx(c.out_bn.scale);
                    w.fx(c.out_bn.bias);
                }
            }
            LayerParams::Pool => {}
            LayerParams::Classifier { weights, bias } => {
                w.0.extend(weights.weights().iter().map(|&v| v as u8));
                bias.iter().for_each(|&v| w.i32(v));
            }
        }
    }
    let crc = crc32fast::hash(&w.0);
    w.0.extend_from_slice(&crc.to_le_bytes());
    Ok(w.0)
}

pub fn save_to_path(model: &Model, path: impl AsRef<Path>) -> Result<(), ModelFileError> {
    std::fs::write(path, save(model)?)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    layer: Option<usize>,
}

impl<'a> Cursor<'a> {
    fn at(&self) -> Location {
        Location {
            offset: self.pos,
            layer: self.layer,
        }
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], ModelFileError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(ModelFileError::Truncated {
                what,
                needed: n,
                available,
                at: self.at(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, ModelFileError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, ModelFileError> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
}

fn le_i32(b: &[u8], i: usize) -> i32 {
    i32::from_le_bytes(b[4 * i..4 * i + 4].try_into().expect("4-byte slice"))
}

fn le_u64(b: &[u8], i: usize) -> u64 {
    u64::from_le_bytes(b[8 * i..8 * i + 8].try_into().expect("8-byte slice"))
}

/// One layer after the structural walk: header fields and raw payload.
struct RawLayer<'a> {
    index: usize,
    offset: usize,
    payload_offset: usize,
    kind: LayerKind,
    flags: u8,
    kernel: usize,
    stride: usize,
    pad: usize,
    reserved: u8,
    in_c: usize,
    out_c: usize,
    in_h: usize,
    in_w: usize,
    payload: &'a [u8],
}

impl RawLayer<'_> {
    fn loc(&self, offset: usize) -> Location {
        Location {
            offset,
            layer: Some(self.index),
        }
    }

    fn weight_words(&self) -> usize {
        self.out_c * self.kernel * self.kernel * words_for(self.in_c)
    }
}

/// Payload size implied by a layer header, or `None` on overflow.
fn payload_len(kind: LayerKind, kernel: usize, in_c: usize, out_c: usize) -> Option<usize> {
    let weights = || {
        out_c
            .checked_mul(kernel * kernel)?
            .checked_mul(words_for(in_c))?
            .checked_mul(8)
    };
    match kind {
        LayerKind::InputLayer => weights()?.checked_add(out_c.checked_mul(8)?),
        LayerKind::Conv3x3Block | LayerKind::Conv1x1Block => in_c
            .checked_mul(4)?
            .checked_add(weights()?)?
            .checked_add(out_c.checked_mul(4 * CHANNEL_RECORD)?),
        LayerKind::Pool => Some(0),
        LayerKind::Classifier => out_c.checked_mul(in_c)?.checked_add(out_c.checked_mul(4)?),
    }
}

struct FileHeader {
    topology: u16,
    resolution: u8,
    reserved: u8,
    image_h: usize,
    image_w: usize,
    classes: usize,
}

/// Walks headers and payload extents without interpreting values.
fn walk(bytes: &[u8]) -> Result<(FileHeader, Vec<RawLayer<'_>>), ModelFileError> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        layer: None,
    };
    let magic = cur.take(4, "magic").map_err(|_| ModelFileError::BadMagic {
        found: bytes.to_vec(),
        at: Location {
            offset: 0,
            layer: None,
        },
    })?;
    if magic != MAGIC {
        return Err(ModelFileError::BadMagic {
            found: magic.to_vec(),
            at: Location {
                offset: 0,
                layer: None,
            },
        });
    }
    let version_at = cur.at();
    let version = cur.u16("version")?;
    if version != VERSION {
        return Err(ModelFileError::UnsupportedVersion {
            version,
            at: version_at,
        });
    }
    let header = FileHeader {
        topology: cur.u16("topology")?,
        resolution: cur.u8("resolution")?,
        reserved: cur.u8("reserved byte")?,
        image_h: cur.u16("image height")? as usize,
        image_w: cur.u16("image width")? as usize,
        classes: cur.u16("class count")? as usize,
    };
    let count = cur.u16("layer count")? as usize;
    let mut layers = Vec::with_capacity(count.min(1024));
    for index in 0..count {
        cur.layer = Some(index);
        let offset = cur.pos;
        let code_at = cur.at();
        let code = cur.u8("layer header")?;
        let kind = LayerKind::from_code(code)
            .ok_or(ModelFileError::UnknownLayerKind { code, at: code_at })?;
        let flags = cur.u8("layer header")?;
        let kernel = cur.u8("layer header")? as usize;
        let stride = cur.u8("layer header")? as usize;
        let pad = cur.u8("layer header")? as usize;
        let reserved = cur.u8("layer header")?;
        let in_c = cur.u16("layer header")? as usize;
        let out_c = cur.u16("layer header")? as usize;
        let in_h = cur.u16("layer header")? as usize;
        let in_w = cur.u16("layer header")? as usize;
        let payload_offset = cur.pos;
        let len = payload_len(kind, kernel, in_c, out_c).ok_or(ModelFileError::Truncated {
            what: "layer payload",
            needed: usize::MAX,
            available: bytes.len() - cur.pos,
            at: cur.at(),
        })?;
        let payload = cur.take(len, "layer payload")?;
        layers.push(RawLayer {
            index,
            offset,
            payload_offset,
            kind,
            flags,
            kernel,
            stride,
            pad,
            reserved,
            in_c,
            out_c,
            in_h,
            in_w,
            payload,
        });
    }
    cur.layer = None;
    let rest = bytes.len() - cur.pos;
    if rest < CRC_LEN {
        cur.take(CRC_LEN, "CRC trailer")?;
    }
    if rest > CRC_LEN {
        return Err(ModelFileError::TrailingBytes {
            extra: rest - CRC_LEN,
            at: cur.at(),
        });
    }
    Ok((header, layers))
}

fn check_crc(bytes: &[u8]) -> Result<(), ModelFileError> {
    let body = bytes.len() - CRC_LEN;
    let stored = u32::from_le_bytes(bytes[body..].try_into().expect("4-byte trailer"));
    let computed = crc32fast::hash(&bytes[..body]);
    if stored != computed {
        return Err(ModelFileError::CrcMismatch {
            stored,
            computed,
            at: Location {
                offset: body,
                layer: None,
            },
        });
    }
    Ok(())
}

fn block_spec(r: &RawLayer<'_>) -> Result<BlockSpec, ModelFileError> {
    if r.reserved != 0 || r.flags & !(FLAG_SHORTCUT | FLAG_DOWNSAMPLE) != 0 {
        return Err(ModelFileError::ReservedBits {
            at: r.loc(r.offset),
        });
    }
    let b = BlockSpec {
        kind: r.kind,
        in_channels: r.in_c,
        out_channels: r.out_c,
        in_height: r.in_h,
        in_width: r.in_w,
        stride: r.stride,
        pad: r.pad,
        has_shortcut: r.flags & FLAG_SHORTCUT != 0,
        downsample: r.flags & FLAG_DOWNSAMPLE != 0,
    };
    if b.kernel() != r.kernel {
        return Err(ModelFileError::Shape {
            reason: format!(
                "{} declares kernel {}, expected {}",
                r.kind.name(),
                r.kernel,
                b.kernel()
            ),
            at: r.loc(r.offset + 2),
        });
    }
    Ok(b)
}

fn conv_weights(r: &RawLayer<'_>, start: usize) -> Result<ConvWeights, ModelFileError> {
    let dims = Dims::new(r.in_c, r.kernel, r.kernel);
    let per_kernel = r.kernel * r.kernel * words_for(r.in_c);
    let planes = (0..r.out_c)
        .map(|o| {
            let words: Vec<u64> = (0..per_kernel)
                .map(|i| le_u64(&r.payload[start..], o * per_kernel + i))
                .collect();
            PackedBitPlane::from_words(dims, words).map_err(|e| match e {
                BitpackError::PaddingLanes { word } => ModelFileError::PaddingLanes {
                    out_channel: o,
                    at: r.loc(r.payload_offset + start + 8 * (o * per_kernel + word)),
                },
                other => ModelFileError::Shape {
                    reason: other.to_string(),
                    at: r.loc(r.payload_offset + start),
                },
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    ConvWeights::new(r.in_c, r.kernel, planes).map_err(|e| ModelFileError::Shape {
        reason: e.to_string(),
        at: r.loc(r.offset),
    })
}

fn decode_params(r: &RawLayer<'_>) -> Result<LayerParams, ModelFileError> {
    let p = r.payload;
    Ok(match r.kind {
        LayerKind::InputLayer => {
            let weights = conv_weights(r, 0)?;
            let tail = &p[8 * r.weight_words()..];
            let bn = (0..r.out_c)
                .map(|c| Affine {
                    scale: Fx(le_i32(tail, 2 * c)),
                    bias: Fx(le_i32(tail, 2 * c + 1)),
                })
                .collect();
            LayerParams::Input { weights, bn }
        }
        LayerKind::Conv3x3Block | LayerKind::Conv1x1Block => {
            let act_scale: Vec<Fx> = (0..r.in_c).map(|c| Fx(le_i32(p, c))).collect();
            if let Some(c) = act_scale.iter().position(|s| s.raw() <= 0) {
                return Err(ModelFileError::InvalidParam {
                    reason: format!("activation scale {c} is {}", act_scale[c]),
                    at: r.loc(r.payload_offset + 4 * c),
                });
            }
            let weights = conv_weights(r, 4 * r.in_c)?;
            let tail = &p[4 * r.in_c + 8 * r.weight_words()..];
            let channels = (0..r.out_c)
                .map(|c| {
                    let v = |i| le_i32(tail, CHANNEL_RECORD * c + i);
                    ChannelParams {
                        delta: v(0),
                        bn: Affine {
                            scale: Fx(v(1)),
                            bias: Fx(v(2)),
                        },
                        bprelu: BpreluParams {
                            alpha: Fx(v(3)),
                            slope: Fx(v(4)),
                            gamma: Fx(v(5)),
                        },
                        out_bn: Affine {
                            scale: Fx(v(6)),
                            bias: Fx(v(7)),
                        },
                    }
                })
                .collect();
            LayerParams::Block {
                act_scale,
                weights,
                channels,
            }
        }
        LayerKind::Pool => LayerParams::Pool,
        LayerKind::Classifier => {
            let n = r.out_c * r.in_c;
            let w = p[..n].iter().map(|&b| b as i8).collect();
            let weights =
                ClassifierWeights::new(r.out_c, r.in_c, w).map_err(|e| ModelFileError::Shape {
                    reason: e.to_string(),
                    at: r.loc(r.offset),
                })?;
            let bias = (0..r.out_c).map(|j| le_i32(&p[n..], j)).collect();
            LayerParams::Classifier { weights, bias }
        }
    })
}

/// Parses and validates a model file.
pub fn load(bytes: &[u8]) -> Result<Model, ModelFileError> {
    let (hdr, raw) = walk(bytes)?;
    check_crc(bytes)?;

    let file_at = |offset| Location {
        offset,
        layer: None,
    };
    let topology = Topology::from_tag(hdr.topology).ok_or(ModelFileError::UnknownTopology {
        tag: hdr.topology,
        at: file_at(6),
    })?;
    if hdr.reserved != 0 {
        return Err(ModelFileError::ReservedBits { at: file_at(9) });
    }
    let thermometer = ThermometerConfig::new(hdr.resolution as u32).map_err(|e| {
        ModelFileError::InvalidParam {
            reason: e.to_string(),
            at: file_at(8),
        }
    })?;
    let blocks = raw.iter().map(block_spec).collect::<Result<Vec<_>, _>>()?;
    let spec = NetworkSpec {
        topology,
        thermometer,
        image_height: hdr.image_h,
        image_width: hdr.image_w,
        classes: hdr.classes,
        blocks,
    };
    let layer_at = |layer: usize| Location {
        offset: raw.get(layer).map_or(FILE_HEADER_LEN, |r| r.offset),
        layer: Some(layer),
    };
    spec.validate().map_err(|e| shape_error(e, &layer_at))?;
    if topology == Topology::FracbnnResnet20 {
        check_topology(&spec, &layer_at)?;
    }
    let params = raw
        .iter()
        .map(decode_params)
        .collect::<Result<Vec<_>, _>>()?;
    Model::new(spec, params).map_err(|e| shape_error(e, &layer_at))
}

fn shape_error(e: ModelError, layer_at: &impl Fn(usize) -> Location) -> ModelFileError {
    match e {
        ModelError::Layer { layer, reason } => ModelFileError::Shape {
            reason,
            at: layer_at(layer),
        },
        other => ModelFileError::Shape {
            reason: other.to_string(),
            at: layer_at(0),
        },
    }
}

fn check_topology(
    spec: &NetworkSpec,
    layer_at: &impl Fn(usize) -> Location,
) -> Result<(), ModelFileError> {
    let reference = build_fracbnn_resnet20(spec.thermometer, spec.classes);
    if (spec.image_height, spec.image_width) != (reference.image_height, reference.image_width) {
        return Err(ModelFileError::TopologyMismatch {
            reason: format!("{}x{} input", spec.image_width, spec.image_height),
            at: Location {
                offset: 10,
                layer: None,
            },
        });
    }
    if spec.blocks.len() != reference.blocks.len() {
        return Err(ModelFileError::TopologyMismatch {
            reason: format!(
                "{} layers, expected {}",
                spec.blocks.len(),
                reference.blocks.len()
            ),
            at: Location {
                offset: 16,
                layer: None,
            },
        });
    }
    if let Some(i) = (0..spec.blocks.len()).find(|&i| spec.blocks[i] != reference.blocks[i]) {
        return Err(ModelFileError::TopologyMismatch {
            reason: format!(
                "layer {i} is not the reference {}",
                reference.blocks[i].kind.name()
            ),
            at: layer_at(i),
        });
    }
    Ok(())
}

pub fn load_from_path(path: impl AsRef<Path>) -> Result<Model, ModelFileError> {
    load(&std::fs::read(path)?)
}
