//! Tensor bundle files (`.tsb`).
//!
//! ```text
//! "TSB1"                 4 bytes
//! manifest length        u64 little-endian
//! manifest               UTF-8 JSON
//! payload                concatenated tensor bytes
//! ```
//!
//! The manifest maps each tensor name to its dtype, shape, byte offset and
//! byte length within the payload. Data is row-major and little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::Annotation;
use crate::clustering::{Prediction, Segmentation};
use crate::geometry::{CameraIntrinsics, ObjectFeature, FEATURE_DIM};
use crate::grid::Grid;
use crate::scenegen::FrameBundle;

pub const MAGIC: [u8; 4] = *b"TSB1";
const HEADER_LEN: usize = 12;
const LAYOUT: &str = "row-major";
const ENDIANNESS: &str = "little";

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a tensor bundle (bad magic bytes)")]
    BadMagic,
    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),
    #[error("truncated file: need {needed} bytes, have {available}")]
    Truncated { needed: u64, available: u64 },
    #[error("unsupported dtype {0:?}")]
    UnsupportedDtype(String),
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("invalid tensor name {0:?}: names must be non-empty ASCII")]
    InvalidName(String),
    #[error("tensor {name:?}: {reason}")]
    BadTensor { name: String, reason: String },
    #[error("missing tensor {0:?}")]
    Missing(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    U8,
    U16,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::U16 => 2,
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(DType::F32),
            "f64" => Some(DType::F64),
            "u8" => Some(DType::U8),
            "u16" => Some(DType::U16),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    U16(Vec<u16>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U8(_) => DType::U8,
            TensorData::U16(_) => DType::U16,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::U16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
            TensorData::U16(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read_le(dtype: DType, bytes: &[u8]) -> Self {
        fn chunks<const N: usize>(b: &[u8]) -> impl Iterator<Item = [u8; N]> + '_ {
            b.chunks_exact(N)
                .map(|c| c.try_into().expect("exact chunk"))
        }
        match dtype {
            DType::F32 => TensorData::F32(chunks(bytes).map(f32::from_le_bytes).collect()),
            DType::F64 => TensorData::F64(chunks(bytes).map(f64::from_le_bytes).collect()),
            DType::U8 => TensorData::U8(bytes.to_vec()),
            DType::U16 => TensorData::U16(chunks(bytes).map(u16::from_le_bytes).collect()),
        }
    }
}

/// A named n-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Option<Self> {
        (shape.iter().product::<usize>() == data.len()).then_some(Self { shape, data })
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    /// Bit-level equality, so NaN payloads compare equal to themselves.
    pub fn bit_eq(&self, other: &Self) -> bool {
        if self.shape != other.shape || self.dtype() != other.dtype() {
            return false;
        }
        let (mut a, mut b) = (Vec::new(), Vec::new());
        self.data.write_le(&mut a);
        other.data.write_le(&mut b);
        a == b
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
    pub layout: String,
    pub endianness: String,
}

/// Ordered name → tensor map.
pub type Bundle = BTreeMap<String, Tensor>;

fn check_name(name: &str) -> Result<(), DataError> {
    if name.is_empty() || !name.is_ascii() {
        return Err(DataError::InvalidName(name.to_string()));
    }
    Ok(())
}

/// Serializes tensors in the given order.
pub fn encode_bundle<'a>(
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<Vec<u8>, DataError> {
    let mut manifest = BTreeMap::new();
    let mut payload = Vec::new();
    for (name, t) in tensors {
        check_name(name)?;
        if t.shape.iter().product::<usize>() != t.data.len() {
            return Err(DataError::BadTensor {
                name: name.to_string(),
                reason: format!(
                    "shape {:?} does not hold {} elements",
                    t.shape,
                    t.data.len()
                ),
            });
        }
        let offset = payload.len() as u64;
        t.data.write_le(&mut payload);
        let entry = ManifestEntry {
            dtype: serde_json::to_value(t.dtype())
                .expect("serializable")
                .as_str()
                .expect("string")
                .to_string(),
            shape: t.shape.clone(),
            offset,
            length: payload.len() as u64 - offset,
            layout: LAYOUT.into(),
            endianness: ENDIANNESS.into(),
        };
        if manifest.insert(name.to_string(), entry).is_some() {
            return Err(DataError::DuplicateName(name.to_string()));
        }
    }
    let json = serde_json::to_vec(&manifest).expect("serializable");
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses a bundle, validating every manifest entry against the payload.
pub fn decode_bundle(bytes: &[u8]) -> Result<Bundle, DataError> {
    let avail = bytes.len() as u64;
    if bytes.len() < MAGIC.len() {
        return if MAGIC.starts_with(bytes) {
            Err(DataError::Truncated {
                needed: HEADER_LEN as u64,
                available: avail,
            })
        } else {
            Err(DataError::BadMagic)
        };
    }
    if bytes[..4] != MAGIC {
        return Err(DataError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(DataError::Truncated {
            needed: HEADER_LEN as u64,
            available: avail,
        });
    }
    let manifest_len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes"));
    let manifest_end =
        (HEADER_LEN as u64)
            .checked_add(manifest_len)
            .ok_or(DataError::Truncated {
                needed: u64::MAX,
                available: avail,
            })?;
    if manifest_end > avail {
        return Err(DataError::Truncated {
            needed: manifest_end,
            available: avail,
        });
    }
    let manifest_end = manifest_end as usize;
    let manifest: BTreeMap<String, ManifestEntry> =
        serde_json::from_slice(&bytes[HEADER_LEN..manifest_end])
            .map_err(|e| DataError::CorruptManifest(e.to_string()))?;
    let payload = &bytes[manifest_end..];

    let mut spans: Vec<(u64, u64, &str)> = Vec::new();
    let mut out = Bundle::new();
    for (name, e) in &manifest {
        check_name(name)
            .map_err(|_| DataError::CorruptManifest(format!("invalid tensor name {name:?}")))?;
        let dtype =
            DType::parse(&e.dtype).ok_or_else(|| DataError::UnsupportedDtype(e.dtype.clone()))?;
        if e.layout != LAYOUT || e.endianness != ENDIANNESS {
            return Err(DataError::CorruptManifest(format!(
                "{name:?}: unsupported layout {:?} / endianness {:?}",
                e.layout, e.endianness
            )));
        }
        let expected = e
            .shape
            .iter()
            .try_fold(dtype.size() as u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| DataError::CorruptManifest(format!("{name:?}: shape overflows")))?;
        if expected != e.length {
            return Err(DataError::CorruptManifest(format!(
                "{name:?}: length {} does not match shape {:?} of {}",
                e.length, e.shape, e.dtype
            )));
        }
        let end = e
            .offset
            .checked_add(e.length)
            .ok_or_else(|| DataError::CorruptManifest(format!("{name:?}: offset overflows")))?;
        if end > payload.len() as u64 {
            return Err(DataError::Truncated {
                needed: manifest_end as u64 + end,
                available: avail,
            });
        }
        spans.push((e.offset, end, name));
        let data = TensorData::read_le(dtype, &payload[e.offset as usize..end as usize]);
        out.insert(
            name.clone(),
            Tensor {
                shape: e.shape.clone(),
                data,
            },
        );
    }
    spans.sort_unstable();
    if let Some(w) = spans.windows(2).find(|w| w[0].1 > w[1].0) {
        return Err(DataError::CorruptManifest(format!(
            "{:?} overlaps {:?}",
            w[0].2, w[1].2
        )));
    }
    Ok(out)
}

pub fn write_bundle<'a>(
    path: &Path,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<(), DataError> {
    std::fs::write(path, encode_bundle(tensors)?)?;
    Ok(())
}

pub fn read_bundle(path: &Path) -> Result<Bundle, DataError> {
    decode_bundle(&std::fs::read(path)?)
}

// Typed conversions.

fn grid_shape<T>(g: &Grid<T>) -> Vec<usize> {
    if g.channels() == 1 {
        vec![g.height(), g.width()]
    } else {
        vec![g.height(), g.width(), g.channels()]
    }
}

fn f64_grid(g: &Grid<f64>) -> Tensor {
    Tensor {
        shape: grid_shape(g),
        data: TensorData::F64(g.as_slice().to_vec()),
    }
}

fn u8_grid(g: &Grid<u8>) -> Tensor {
    Tensor {
        shape: grid_shape(g),
        data: TensorData::U8(g.as_slice().to_vec()),
    }
}

fn label_grid(name: &str, g: &Grid<u32>) -> Result<Tensor, DataError> {
    let data = g
        .as_slice()
        .iter()
        .map(|&l| u16::try_from(l))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| DataError::BadTensor {
            name: name.into(),
            reason: "label exceeds the u16 range".into(),
        })?;
    Ok(Tensor {
        shape: grid_shape(g),
        data: TensorData::U16(data),
    })
}

fn get<'a>(b: &'a Bundle, name: &str) -> Result<&'a Tensor, DataError> {
    b.get(name).ok_or_else(|| DataError::Missing(name.into()))
}

fn bad(name: &str, reason: impl Into<String>) -> DataError {
    DataError::BadTensor {
        name: name.into(),
        reason: reason.into(),
    }
}

fn f64s<'a>(b: &'a Bundle, name: &str) -> Result<(&'a [usize], &'a [f64]), DataError> {
    match get(b, name)? {
        Tensor {
            shape,
            data: TensorData::F64(v),
        } => Ok((shape, v)),
        _ => Err(bad(name, "expected f64")),
    }
}

fn to_grid<T: Clone>(
    name: &str,
    shape: &[usize],
    data: &[T],
    h: usize,
    w: usize,
    c: usize,
) -> Result<Grid<T>, DataError> {
    let ok = match shape {
        [sh, sw] => c == 1 && *sh == h && *sw == w,
        [sh, sw, sc] => *sh == h && *sw == w && *sc == c,
        _ => false,
    };
    if !ok {
        return Err(bad(name, format!("shape {shape:?}, expected {h}x{w}x{c}")));
    }
    Grid::from_vec(h, w, c, data.to_vec()).ok_or_else(|| bad(name, "element count"))
}

fn read_f64_grid(
    b: &Bundle,
    name: &str,
    h: usize,
    w: usize,
    c: usize,
) -> Result<Grid<f64>, DataError> {
    let (shape, v) = f64s(b, name)?;
    to_grid(name, shape, v, h, w, c)
}

fn read_u8_grid(b: &Bundle, name: &str, h: usize, w: usize) -> Result<Grid<u8>, DataError> {
    match get(b, name)? {
        Tensor {
            shape,
            data: TensorData::U8(v),
        } => to_grid(name, shape, v, h, w, 1),
        _ => Err(bad(name, "expected u8")),
    }
}

fn read_label_grid(b: &Bundle, name: &str) -> Result<Grid<u32>, DataError> {
    match get(b, name)? {
        Tensor {
            shape,
            data: TensorData::U16(v),
        } if shape.len() == 2 => {
            let data: Vec<u32> = v.iter().map(|&l| u32::from(l)).collect();
            to_grid(name, shape, &data, shape[0], shape[1], 1)
        }
        _ => Err(bad(name, "expected a 2-D u16 map")),
    }
}

fn vector(values: Vec<f64>, shape: Vec<usize>) -> Tensor {
    Tensor {
        shape,
        data: TensorData::F64(values),
    }
}

/// Tensors describing a rendered frame, names prefixed with `frame/`.
pub fn frame_to_bundle(frame: &FrameBundle) -> Result<Bundle, DataError> {
    let (h, w, k) = (frame.height(), frame.width(), frame.num_objects());
    let c = &frame.camera;
    let mut b = Bundle::new();
    b.insert(
        "frame/camera".into(),
        vector(vec![c.fx, c.fy, c.ppx, c.ppy], vec![4]),
    );
    b.insert("frame/rgb".into(), f64_grid(&frame.rgb));
    b.insert("frame/depth".into(), f64_grid(&frame.depth));
    b.insert("frame/xyz".into(), f64_grid(&frame.xyz));
    b.insert(
        "frame/instance_map".into(),
        label_grid("frame/instance_map", &frame.instance_map)?,
    );
    let amodal: Vec<u8> = frame
        .amodal_masks
        .iter()
        .flat_map(|m| m.as_slice().iter().copied())
        .collect();
    b.insert(
        "frame/amodal_masks".into(),
        Tensor {
            shape: vec![k, h, w],
            data: TensorData::U8(amodal),
        },
    );
    b.insert(
        "frame/occlusion_scores".into(),
        vector(frame.occlusion_scores.clone(), vec![k]),
    );
    Ok(b)
}

pub fn frame_from_bundle(b: &Bundle) -> Result<FrameBundle, DataError> {
    let instance_map = read_label_grid(b, "frame/instance_map")?;
    let (h, w) = (instance_map.height(), instance_map.width());
    let (_, cam) = f64s(b, "frame/camera")?;
    let [fx, fy, ppx, ppy]: [f64; 4] = cam
        .try_into()
        .map_err(|_| bad("frame/camera", "expected 4 values"))?;
    let camera = CameraIntrinsics::new(fx, fy, ppx, ppy, w, h)
        .map_err(|e| bad("frame/camera", e.to_string()))?;
    let (occ_shape, occ) = f64s(b, "frame/occlusion_scores")?;
    let k = occ.len();
    if occ_shape != [k] {
        return Err(bad("frame/occlusion_scores", "expected a vector"));
    }
    let amodal_masks = match get(b, "frame/amodal_masks")? {
        Tensor {
            shape,
            data: TensorData::U8(v),
        } if shape == &[k, h, w] => v
            .chunks(h * w)
            .take(k)
            .map(|m| Grid::from_vec(h, w, 1, m.to_vec()).expect("sized"))
            .collect(),
        _ => {
            return Err(bad(
                "frame/amodal_masks",
                format!("expected u8 {k}x{h}x{w}"),
            ))
        }
    };
    Ok(FrameBundle {
        camera,
        rgb: read_f64_grid(b, "frame/rgb", h, w, 3)?,
        depth: read_f64_grid(b, "frame/depth", h, w, 1)?,
        xyz: read_f64_grid(b, "frame/xyz", h, w, 3)?,
        instance_map,
        amodal_masks,
        occlusion_scores: occ.to_vec(),
    })
}

/// Tensors describing an annotation, names prefixed with `ann/`.
pub fn annotation_to_bundle(ann: &Annotation) -> Result<Bundle, DataError> {
    let k = ann.per_object_xi.len();
    let mut b = Bundle::new();
    b.insert("ann/xi_map".into(), f64_grid(&ann.xi_map));
    b.insert("ann/eta_gt".into(), u8_grid(&ann.eta_gt));
    b.insert("ann/b_map".into(), f64_grid(&ann.b_map));
    b.insert("ann/fg_mask".into(), u8_grid(&ann.fg_mask));
    b.insert(
        "ann/instance_map".into(),
        label_grid("ann/instance_map", &ann.instance_map)?,
    );
    b.insert(
        "ann/per_object_xi".into(),
        vector(
            ann.per_object_xi.iter().flat_map(|f| f.0).collect(),
            vec![k, FEATURE_DIM],
        ),
    );
    Ok(b)
}

pub fn annotation_from_bundle(b: &Bundle) -> Result<Annotation, DataError> {
    let instance_map = read_label_grid(b, "ann/instance_map")?;
    let (h, w) = (instance_map.height(), instance_map.width());
    let (shape, xi) = f64s(b, "ann/per_object_xi")?;
    if shape.len() != 2 || shape[1] != FEATURE_DIM {
        return Err(bad("ann/per_object_xi", "expected Kx9"));
    }
    Ok(Annotation {
        xi_map: read_f64_grid(b, "ann/xi_map", h, w, FEATURE_DIM)?,
        eta_gt: read_u8_grid(b, "ann/eta_gt", h, w)?,
        b_map: read_f64_grid(b, "ann/b_map", h, w, 1)?,
        fg_mask: read_u8_grid(b, "ann/fg_mask", h, w)?,
        per_object_xi: xi
            .chunks_exact(FEATURE_DIM)
            .map(|c| ObjectFeature(c.try_into().expect("9 values")))
            .collect(),
        instance_map,
    })
}

/// Tensors describing a prediction, names prefixed with `pred/`.
pub fn prediction_to_bundle(p: &Prediction) -> Bundle {
    let mut b = Bundle::new();
    b.insert("pred/xi_hat".into(), f64_grid(&p.xi_hat));
    b.insert("pred/eta_hat".into(), f64_grid(&p.eta_hat));
    b.insert("pred/b_hat".into(), f64_grid(&p.b_hat));
    b.insert("pred/mask_prob".into(), f64_grid(&p.mask_prob));
    b
}

pub fn prediction_from_bundle(b: &Bundle) -> Result<Prediction, DataError> {
    let (shape, _) = f64s(b, "pred/mask_prob")?;
    let [h, w] = shape
        .try_into()
        .map_err(|_| bad("pred/mask_prob", "expected HxW"))?;
    Ok(Prediction {
        xi_hat: read_f64_grid(b, "pred/xi_hat", h, w, FEATURE_DIM)?,
        eta_hat: read_f64_grid(b, "pred/eta_hat", h, w, 1)?,
        b_hat: read_f64_grid(b, "pred/b_hat", h, w, 1)?,
        mask_prob: read_f64_grid(b, "pred/mask_prob", h, w, 1)?,
    })
}

/// Tensors describing a segmentation, names prefixed with `seg/`.
pub fn segmentation_to_bundle(seg: &Segmentation) -> Result<Bundle, DataError> {
    let m = seg.num_instances();
    let mut b = Bundle::new();
    b.insert("seg/labels".into(), label_grid("seg/labels", &seg.labels)?);
    b.insert("seg/scores".into(), vector(seg.scores.clone(), vec![m]));
    b.insert(
        "seg/seeds".into(),
        vector(
            seg.seeds
                .iter()
                .flat_map(|&(r, c)| [r as f64, c as f64])
                .collect(),
            vec![m, 2],
        ),
    );
    Ok(b)
}

pub fn segmentation_from_bundle(b: &Bundle) -> Result<Segmentation, DataError> {
    let labels = read_label_grid(b, "seg/labels")?;
    let (_, scores) = f64s(b, "seg/scores")?;
    let (shape, seeds) = f64s(b, "seg/seeds")?;
    if shape != [scores.len(), 2] {
        return Err(bad("seg/seeds", "expected Mx2 matching the scores"));
    }
    Ok(Segmentation {
        labels,
        scores: scores.to_vec(),
        seeds: seeds
            .chunks_exact(2)
            .map(|p| (p[0] as usize, p[1] as usize))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::{annotate, AnnotationConfig};
    use crate::clustering::segment;
    use crate::predictor::oracle_predict;
    use crate::scenegen::{render, sample_scene, GeneratorConfig};
    use proptest::prelude::*;

    fn t(shape: Vec<usize>, data: TensorData) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    fn round_trip(b: &Bundle) -> Bundle {
        decode_bundle(&encode_bundle(b.iter().map(|(k, v)| (k.as_str(), v))).unwrap()).unwrap()
    }

    #[test]
    fn empty_bundle_is_valid() {
        let bytes = encode_bundle([]).unwrap();
        assert_eq!(&bytes[..4], b"TSB1");
        assert!(decode_bundle(&bytes).unwrap().is_empty());
    }

    #[test]
    fn every_dtype_round_trips_bit_exactly() {
        let mut b = Bundle::new();
        b.insert(
            "a".into(),
            t(
                vec![2, 2],
                TensorData::F32(vec![1.5, -0.0, f32::MIN_POSITIVE, f32::NAN]),
            ),
        );
        b.insert(
            "b".into(),
            t(vec![3], TensorData::F64(vec![0.1, f64::MAX, -f64::NAN])),
        );
        b.insert(
            "c".into(),
            t(vec![1, 2, 2], TensorData::U8(vec![0, 1, 254, 255])),
        );
        b.insert("d".into(), t(vec![2], TensorData::U16(vec![65534, 65535])));
        b.insert("e".into(), t(vec![0, 4], TensorData::F64(vec![])));
        let back = round_trip(&b);
        assert_eq!(back.len(), b.len());
        for (k, v) in &b {
            assert!(v.bit_eq(&back[k]), "{k}");
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.tsb");
        let m = t(vec![1, 1], TensorData::U16(vec![65534]));
        write_bundle(&path, [("map", &m)]).unwrap();
        assert_eq!(read_bundle(&path).unwrap()["map"], m);
    }

    #[test]
    fn writer_rejects_bad_names() {
        let m = t(vec![1], TensorData::U8(vec![1]));
        assert!(matches!(
            encode_bundle([("x", &m), ("x", &m)]),
            Err(DataError::DuplicateName(_))
        ));
        assert!(matches!(
            encode_bundle([("", &m)]),
            Err(DataError::InvalidName(_))
        ));
        assert!(matches!(
            encode_bundle([("ξ", &m)]),
            Err(DataError::InvalidName(_))
        ));
    }

    fn sample_bytes() -> Vec<u8> {
        let a = t(vec![2, 3], TensorData::F64((0..6).map(f64::from).collect()));
        let b = t(vec![4], TensorData::U16(vec![1, 2, 3, 4]));
        encode_bundle([("a", &a), ("b", &b)]).unwrap()
    }

    fn with_manifest(json: &str, payload: &[u8]) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(json.as_bytes());
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn distinguishes_failure_kinds() {
        let bytes = sample_bytes();
        for cut in [0, 3, 8, 20, bytes.len() - 1] {
            assert!(
                matches!(
                    decode_bundle(&bytes[..cut]),
                    Err(DataError::Truncated { .. })
                ),
                "cut {cut}"
            );
        }
        assert!(matches!(
            decode_bundle(b"NOPE and more"),
            Err(DataError::BadMagic)
        ));

        let entry = |dtype: &str, len: u64| {
            format!(
                r#"{{"x":{{"dtype":"{dtype}","shape":[2],"offset":0,"length":{len},"layout":"row-major","endianness":"little"}}}}"#
            )
        };
        assert!(matches!(
            decode_bundle(&with_manifest(&entry("c64", 16), &[0; 16])),
            Err(DataError::UnsupportedDtype(d)) if d == "c64"
        ));
        assert!(matches!(
            decode_bundle(&with_manifest("{not json", &[])),
            Err(DataError::CorruptManifest(_))
        ));
        assert!(matches!(
            decode_bundle(&with_manifest(&entry("f64", 8), &[0; 16])),
            Err(DataError::CorruptManifest(_))
        ));
        assert!(matches!(
            decode_bundle(&with_manifest(&entry("f64", 16), &[0; 8])),
            Err(DataError::Truncated { .. })
        ));
        let overlap = r#"{"x":{"dtype":"u8","shape":[2],"offset":0,"length":2,"layout":"row-major","endianness":"little"},"y":{"dtype":"u8","shape":[2],"offset":1,"length":2,"layout":"row-major","endianness":"little"}}"#;
        assert!(matches!(
            decode_bundle(&with_manifest(overlap, &[0; 4])),
            Err(DataError::CorruptManifest(_))
        ));
        let huge = r#"{"x":{"dtype":"f64","shape":[4294967296,4294967296],"offset":0,"length":0,"layout":"row-major","endianness":"little"}}"#;
        assert!(matches!(
            decode_bundle(&with_manifest(huge, &[])),
            Err(DataError::CorruptManifest(_))
        ));
    }

    #[test]
    fn pipeline_bundles_round_trip() {
        let cfg = GeneratorConfig {
            width: 24,
            height: 20,
            focal: 24.0,
            ..Default::default()
        };
        let scene = sample_scene(3, &cfg).unwrap();
        let frame = render(&scene);
        let ann = annotate(&scene, &frame, &AnnotationConfig::default()).unwrap();
        let pred = oracle_predict(&ann);
        let seg = segment(&pred, 0.5).unwrap();

        let mut all = frame_to_bundle(&frame).unwrap();
        all.extend(annotation_to_bundle(&ann).unwrap());
        all.extend(prediction_to_bundle(&pred));
        all.extend(segmentation_to_bundle(&seg).unwrap());
        let back = round_trip(&all);
        assert_eq!(frame_from_bundle(&back).unwrap(), frame);
        assert_eq!(annotation_from_bundle(&back).unwrap(), ann);
        assert_eq!(prediction_from_bundle(&back).unwrap(), pred);
        assert_eq!(segmentation_from_bundle(&back).unwrap(), seg);
        assert!(matches!(
            frame_from_bundle(&Bundle::new()),
            Err(DataError::Missing(_))
        ));
    }

    #[test]
    fn oversized_labels_are_rejected() {
        let g = Grid::from_vec(1, 1, 1, vec![70000u32]).unwrap();
        assert!(label_grid("m", &g).is_err());
    }

    proptest! {
        #[test]
        fn random_bytes_never_panic(body in prop::collection::vec(any::<u8>(), 0..256), json_len in 0u64..400) {
            let mut bytes = MAGIC.to_vec();
            bytes.extend_from_slice(&json_len.to_le_bytes());
            bytes.extend_from_slice(&body);
            let _ = decode_bundle(&bytes);
            let _ = decode_bundle(&body);
        }

        #[test]
        fn mutated_manifests_never_panic(pos in 0usize..400, byte in any::<u8>(), cut in 0usize..600) {
            let mut bytes = sample_bytes();
            let p = pos % bytes.len();
            bytes[p] = byte;
            bytes.truncate(cut.min(bytes.len()));
            let _ = decode_bundle(&bytes);
        }

        #[test]
        fn random_tensors_round_trip(
            h in 0usize..5, w in 0usize..5,
            f in prop::collection::vec(any::<f64>(), 25),
            u in prop::collection::vec(any::<u16>(), 25),
        ) {
            let mut b = Bundle::new();
            b.insert("f".into(), t(vec![h, w], TensorData::F64(f[..h * w].to_vec())));
            b.insert("u".into(), t(vec![w, h], TensorData::U16(u[..h * w].to_vec())));
            b.insert("g".into(), t(vec![h * w], TensorData::F32(f[..h * w].iter().map(|&x| x as f32).collect())));
            let back = round_trip(&b);
            for (k, v) in &b {
                prop_assert!(v.bit_eq(&back[k]));
            }
        }
    }
}
