//! Named-tensor checkpoint archives and the flat task-vector view.
//!
//! On disk an archive is:
//!
//! - bytes `0..8`: little-endian `u64` header length `H`
//! - bytes `8..8+H`: UTF-8 JSON object, `name -> {"dtype":"f32","shape":[..],"role":"..","offset":[begin,end]}`
//!   plus an optional `"__meta__"` string map
//! - remainder: little-endian `f32` payload, tensors concatenated in name order,
//!   offsets in bytes relative to the payload start
//!
//! In memory all values are `f64`. Stored `f32` values widen exactly, so
//! save -> load -> save is byte-identical.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};

const META_KEY: &str = "__meta__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Attention,
    Mlp,
    Head,
    Other,
}

impl Role {
    /// Roles whose 2-D tensors are subject to layerwise rank truncation.
    pub fn is_sliceable(self) -> bool {
        matches!(self, Role::Attention | Role::Mlp)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Role::Attention => "attention",
            Role::Mlp => "mlp",
            Role::Head => "head",
            Role::Other => "other",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    role: Role,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, role: Role, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} has a zero dimension"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, role, data })
    }

    pub fn zeros(shape: Vec<usize>, role: Role) -> Result<Self> {
        let numel = shape.iter().product();
        Tensor::new(shape, role, vec![0.0; numel])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }
}

/// Ordered collection of named tensors. Iteration is lexicographic by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    entries: BTreeMap<String, Tensor>,
    meta: BTreeMap<String, String>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name == META_KEY {
            return Err(Error::InvalidArgument(format!(
                "reserved or empty tensor name {name:?}"
            )));
        }
        if self.entries.contains_key(&name) {
            return Err(Error::DuplicateName(name));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    /// Replaces the data of an existing tensor, keeping shape and role.
    pub fn replace_data(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let t = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::LayoutMismatch(format!("no tensor named {name:?}")))?;
        if t.data.len() != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "{name}: expected {} values, got {}",
                t.data.len(),
                data.len()
            )));
        }
        t.data = data;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    pub fn meta_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.meta
    }

    /// Identifier stored under the `id` meta key, or the empty string.
    pub fn id(&self) -> &str {
        self.meta.get("id").map(String::as_str).unwrap_or("")
    }

    pub fn set_id(&mut self, id: impl Into<String>) {
        self.meta.insert("id".to_string(), id.into());
    }

    /// Names of head tensors in name order.
    pub fn head_names(&self) -> Vec<&str> {
        self.iter()
            .filter(|(_, t)| t.role == Role::Head)
            .map(|(n, _)| n)
            .collect()
    }

    /// Flat layout of all non-head tensors in name order.
    pub fn backbone_layout(&self) -> Layout {
        let mut offset = 0;
        let mut entries = Vec::new();
        for (name, t) in self.iter().filter(|(_, t)| t.role != Role::Head) {
            entries.push(LayoutEntry {
                name: name.to_string(),
                shape: t.shape.clone(),
                role: t.role,
                offset,
            });
            offset += t.numel();
        }
        Layout {
            entries,
            dim: offset,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = serde_json::Map::new();
        let mut offset = 0usize;
        for (name, t) in &self.entries {
            if let Some(index) = t.first_non_finite() {
                return Err(Error::NonFinite {
                    name: name.clone(),
                    index,
                });
            }
            let end = offset + 4 * t.numel();
            let entry = HeaderEntry {
                dtype: "f32".to_string(),
                shape: t.shape.clone(),
                role: t.role,
                offset: [offset as u64, end as u64],
            };
            header.insert(name.clone(), serde_json::to_value(entry)?);
            offset = end;
        }
        if !self.meta.is_empty() {
            header.insert(META_KEY.to_string(), serde_json::to_value(&self.meta)?);
        }
        let header = serde_json::to_vec(&serde_json::Value::Object(header))?;

        let mut out = Vec::with_capacity(8 + header.len() + offset);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.entries.values() {
            for &v in &t.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::MalformedHeader(format!(
                "file is {} bytes, shorter than the 8-byte length prefix",
                bytes.len()
            )));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        let available = bytes.len() as u64 - 8;
        if header_len > available {
            return Err(Error::MalformedHeader(format!(
                "header length {header_len} exceeds remaining {available} bytes"
            )));
        }
        let header_end = 8 + header_len as usize;
        let header_text = std::str::from_utf8(&bytes[8..header_end])
            .map_err(|e| Error::MalformedHeader(format!("header is not UTF-8: {e}")))?;
        let raw: RawHeader =
            serde_json::from_str(header_text).map_err(|e| Error::MalformedHeader(e.to_string()))?;
        let payload = &bytes[header_end..];

        let mut archive = TensorArchive::new();
        let mut seen = std::collections::BTreeSet::new();
        for (name, value) in raw.0 {
            if !seen.insert(name.clone()) {
                return Err(Error::DuplicateName(name));
            }
            if name == META_KEY {
                archive.meta = serde_json::from_value(value)
                    .map_err(|e| Error::MalformedHeader(format!("bad {META_KEY}: {e}")))?;
                continue;
            }
            let entry: HeaderEntry = serde_json::from_value(value)
                .map_err(|e| Error::MalformedHeader(format!("entry {name:?}: {e}")))?;
            if entry.dtype != "f32" {
                return Err(Error::MalformedHeader(format!(
                    "entry {name:?}: unsupported dtype {:?}",
                    entry.dtype
                )));
            }
            let [begin, end] = entry.offset;
            let numel: u64 = entry.shape.iter().map(|&d| d as u64).product();
            if end < begin || end - begin != 4 * numel {
                return Err(Error::MalformedHeader(format!(
                    "entry {name:?}: offsets [{begin},{end}] do not match shape {:?}",
                    entry.shape
                )));
            }
            if end > payload.len() as u64 {
                return Err(Error::TruncatedPayload {
                    needed: header_end as u64 + end,
                    available: bytes.len() as u64,
                });
            }
            let data: Vec<f64> = payload[begin as usize..end as usize]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            let tensor = Tensor::new(entry.shape, entry.role, data)
                .map_err(|e| Error::MalformedHeader(format!("entry {name:?}: {e}")))?;
            if let Some(index) = tensor.first_non_finite() {
                return Err(Error::NonFinite { name, index });
            }
            archive.insert(name, tensor).map_err(|e| match e {
                Error::InvalidArgument(m) => Error::MalformedHeader(m),
                other => other,
            })?;
        }
        Ok(archive)
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    role: Role,
    offset: [u64; 2],
}

/// Header object with key order and duplicates preserved.
struct RawHeader(Vec<(String, serde_json::Value)>);

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct RawVisitor;
        impl<'de> Visitor<'de> for RawVisitor {
            type Value = RawHeader;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object")
            }
            fn visit_map<A: MapAccess<'de>>(
                self,
                mut map: A,
            ) -> std::result::Result<RawHeader, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, serde_json::Value>()? {
                    out.push((k, v));
                }
                Ok(RawHeader(out))
            }
        }
        deserializer.deserialize_map(RawVisitor)
    }
}

pub fn load_archive(path: impl AsRef<Path>) -> Result<TensorArchive> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    TensorArchive::from_bytes(&bytes)
}

pub fn save_archive(archive: &TensorArchive, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = archive.to_bytes()?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: Role,
    pub offset: usize,
}

impl LayoutEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.numel()
    }
}

/// Contiguous, name-ordered map from flat indices back to tensors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    entries: Vec<LayoutEntry>,
    dim: usize,
}

impl Layout {
    /// Builds a contiguous layout from `(name, shape, role)` triples, sorted by name.
    pub fn new(mut tensors: Vec<(String, Vec<usize>, Role)>) -> Result<Self> {
        tensors.sort_by(|a, b| a.0.cmp(&b.0));
        let mut entries = Vec::with_capacity(tensors.len());
        let mut offset = 0;
        for (name, shape, role) in tensors {
            if entries.last().is_some_and(|e: &LayoutEntry| e.name == name) {
                return Err(Error::DuplicateName(name));
            }
            let e = LayoutEntry {
                name,
                shape,
                role,
                offset,
            };
            offset += e.numel();
            entries.push(e);
        }
        Ok(Layout {
            entries,
            dim: offset,
        })
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// 2-D attention/MLP tensors, the targets of layerwise truncation.
    pub fn slices(&self) -> Vec<LayerSlice> {
        self.entries
            .iter()
            .filter(|e| e.role.is_sliceable() && e.shape.len() == 2)
            .map(|e| LayerSlice {
                name: e.name.clone(),
                rows: e.shape[0],
                cols: e.shape[1],
                offset: e.offset,
            })
            .collect()
    }
}

/// A 2-D tensor viewed inside a flat task vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSlice {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl LayerSlice {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn min_dim(&self) -> usize {
        self.rows.min(self.cols)
    }
}

/// Flattened parameter difference over the non-head tensors of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
    pub base_id: String,
    pub specialist_id: String,
}

impl TaskVector {
    pub fn new(values: Vec<f64>, layout: Arc<Layout>) -> Result<Self> {
        if values.len() != layout.dim() {
            return Err(Error::LayoutMismatch(format!(
                "{} values for a layout of dimension {}",
                values.len(),
                layout.dim()
            )));
        }
        Ok(TaskVector {
            values,
            layout,
            base_id: String::new(),
            specialist_id: String::new(),
        })
    }

    /// Single-tensor vector, convenient for synthetic experiments.
    pub fn from_flat(values: Vec<f64>) -> Self {
        let tensors = if values.is_empty() {
            Vec::new()
        } else {
            vec![("theta".to_string(), vec![values.len()], Role::Other)]
        };
        let layout = Layout::new(tensors).expect("single entry");
        TaskVector::new(values, Arc::new(layout)).expect("dimension matches")
    }

    pub fn with_ids(
        mut self,
        base_id: impl Into<String>,
        specialist_id: impl Into<String>,
    ) -> Self {
        self.base_id = base_id.into();
        self.specialist_id = specialist_id.into();
        self
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        let d = layout.dim();
        TaskVector::new(vec![0.0; d], layout).expect("dimension matches")
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        let mut out = TaskVector::new(values, self.layout.clone())?;
        out.base_id = self.base_id.clone();
        out.specialist_id = self.specialist_id.clone();
        Ok(out)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_compatible(&self, other: &TaskVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || *self.layout == *other.layout
    }

    pub fn check_compatible(&self, other: &TaskVector) -> Result<()> {
        if self.is_compatible(other) {
            Ok(())
        } else {
            Err(Error::LayoutMismatch(format!(
                "task vectors {:?} and {:?} have different layouts",
                self.specialist_id, other.specialist_id
            )))
        }
    }

    pub fn norm(&self) -> f64 {
        vnorm(self)
    }

    pub fn scaled(&self, a: f64) -> TaskVector {
        let values = self.values.iter().map(|v| a * v).collect();
        self.with_values(values).expect("same length")
    }

    pub fn sub(&self, other: &TaskVector) -> Result<TaskVector> {
        self.check_compatible(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        self.with_values(values)
    }

    pub fn slice_values(&self, slice: &LayerSlice) -> &[f64] {
        &self.values[slice.range()]
    }
}

/// `τ = θ_specialist − θ_base` over all non-head tensors, in name order.
pub fn task_vector(specialist: &TensorArchive, base: &TensorArchive) -> Result<TaskVector> {
    check_same_structure(specialist, base)?;
    let layout = Arc::new(base.backbone_layout());
    let mut values = Vec::with_capacity(layout.dim());
    for e in layout.entries() {
        let s = specialist.get(&e.name).expect("checked");
        let b = base.get(&e.name).expect("checked");
        values.extend(s.data.iter().zip(&b.data).map(|(x, y)| x - y));
    }
    Ok(TaskVector::new(values, layout)?.with_ids(base.id(), specialist.id()))
}

/// Same layout check used for task vectors against one base.
pub fn task_vectors(
    specialists: &[TensorArchive],
    base: &TensorArchive,
) -> Result<Vec<TaskVector>> {
    let layout = Arc::new(base.backbone_layout());
    specialists
        .iter()
        .map(|s| {
            let mut t = task_vector(s, base)?;
            t.layout = layout.clone();
            Ok(t)
        })
        .collect()
}

fn check_same_structure(a: &TensorArchive, b: &TensorArchive) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "archives hold {} and {} tensors",
            a.len(),
            b.len()
        )));
    }
    for ((na, ta), (nb, tb)) in a.iter().zip(b.iter()) {
        if na != nb {
            return Err(Error::ShapeMismatch(format!(
                "tensor names differ: {na:?} vs {nb:?}"
            )));
        }
        if ta.shape != tb.shape || ta.role != tb.role {
            return Err(Error::ShapeMismatch(format!(
                "{na}: {:?}/{} vs {:?}/{}",
                ta.shape, ta.role, tb.shape, tb.role
            )));
        }
    }
    Ok(())
}

/// `base + u` on non-head tensors; head tensors are copied from `base`.
pub fn apply_update(base: &TensorArchive, u: &TaskVector) -> Result<TensorArchive> {
    let layout = base.backbone_layout();
    if layout != **u.layout() {
        return Err(Error::LayoutMismatch(
            "update layout does not match the base archive's non-head tensors".into(),
        ));
    }
    let mut out = base.clone();
    for e in layout.entries() {
        let t = out
            .entries
            .get_mut(&e.name)
            .expect("layout built from base");
        for (x, du) in t.data.iter_mut().zip(&u.values[e.range()]) {
            *x += du;
        }
    }
    Ok(out)
}

/// Euclidean norm, accumulated in flat order.
pub fn vnorm(u: &TaskVector) -> f64 {
    u.values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn vdot(u: &TaskVector, v: &TaskVector) -> Result<f64> {
    u.check_compatible(v)?;
    Ok(u.values.iter().zip(&v.values).map(|(a, b)| a * b).sum())
}

/// `a·u + v`.
pub fn vaxpy(a: f64, u: &TaskVector, v: &TaskVector) -> Result<TaskVector> {
    u.check_compatible(v)?;
    let values = u
        .values
        .iter()
        .zip(&v.values)
        .map(|(x, y)| a * x + y)
        .collect();
    v.with_values(values)
}

/// Layer slices of `u`, checked against the roles recorded in `archive`.
/// Everything that is not a 2-D attention/MLP tensor is pass-through.
pub fn classify_slices(u: &TaskVector, archive: &TensorArchive) -> Result<Vec<LayerSlice>> {
    let layout = archive.backbone_layout();
    if layout != **u.layout() {
        return Err(Error::LayoutMismatch(
            "task vector layout does not match archive".into(),
        ));
    }
    Ok(layout.slices())
}
