//! The ATNA container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"ATNA" | u32 version (=1) | u64 header_len | header (JSON, UTF-8) | payload
//! ```
//!
//! The JSON header carries a `kind` (`"embeddings"` or `"checkpoint"`), the
//! payload `dtype` (`"f32"`, the default, or `"f64"`), kind-specific
//! metadata, and a `fields` list of `{name, shape}` records. The payload is
//! the fields' elements in that order, row-major, with no padding.
//! Embedding archives store `f32` and are widened to `f64` on load;
//! checkpoints store `f64` so trained weights survive a round trip exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::adapters::{AdapterParams, UNIT_NORM_TOL};
use crate::error::{Error, Result};
use crate::numerics::{norm, Matrix};

pub const MAGIC: &[u8; 4] = b"ATNA";
pub const VERSION: u32 = 1;
pub const KIND_EMBEDDINGS: &str = "embeddings";
pub const KIND_CHECKPOINT: &str = "checkpoint";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl FieldSpec {
    fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub kind: String,
    #[serde(default)]
    pub dtype: Dtype,
    pub fields: Vec<FieldSpec>,
    #[serde(flatten)]
    pub meta: Map<String, Value>,
}

/// A decoded container: header plus one flat buffer per field.
#[derive(Debug, Clone)]
pub struct Container {
    pub header: ContainerHeader,
    pub payloads: Vec<Vec<f64>>,
}

impl Container {
    pub fn field(&self, name: &str) -> Option<(&FieldSpec, &[f64])> {
        self.header
            .fields
            .iter()
            .zip(&self.payloads)
            .find(|(f, _)| f.name == name)
            .map(|(f, p)| (f, p.as_slice()))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.header.fields.len() != self.payloads.len() {
            return Err(Error::Shape(format!(
                "{} fields declared but {} payloads given",
                self.header.fields.len(),
                self.payloads.len()
            )));
        }
        let header = serde_json::to_vec(&self.header).map_err(|e| Error::Header(e.to_string()))?;
        let width = self.header.dtype.width();
        let total: usize = self.payloads.iter().map(Vec::len).sum();
        let mut out = Vec::with_capacity(16 + header.len() + total * width);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (spec, data) in self.header.fields.iter().zip(&self.payloads) {
            if spec.len() != data.len() {
                return Err(Error::Shape(format!(
                    "field {} declares shape {:?} but holds {} values",
                    spec.name,
                    spec.shape,
                    data.len()
                )));
            }
            for &v in data {
                match self.header.dtype {
                    Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncated(format!(
                "{} bytes, no room for magic",
                bytes.len()
            )));
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        if bytes.len() < 16 {
            return Err(Error::Truncated(format!(
                "{} bytes, preamble needs 16",
                bytes.len()
            )));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|n| n.checked_add(16))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| {
                Error::Truncated(format!(
                    "header declares {header_len} bytes, only {} remain",
                    bytes.len() - 16
                ))
            })?;
        let header: ContainerHeader = serde_json::from_slice(&bytes[16..header_end])
            .map_err(|e| Error::Header(e.to_string()))?;

        let width = header.dtype.width();
        let mut offset = header_end;
        let mut payloads = Vec::with_capacity(header.fields.len());
        for spec in &header.fields {
            let n = spec.len();
            let need = n
                .checked_mul(width)
                .ok_or_else(|| Error::Shape(format!("field {} too large", spec.name)))?;
            if bytes.len() - offset < need {
                return Err(Error::Truncated(format!(
                    "field {} needs {need} bytes, only {} remain",
                    spec.name,
                    bytes.len() - offset
                )));
            }
            let chunk = &bytes[offset..offset + need];
            let data = match header.dtype {
                Dtype::F32 => chunk
                    .chunks_exact(4)
                    .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                    .collect(),
                Dtype::F64 => chunk
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            };
            payloads.push(data);
            offset += need;
        }
        if offset != bytes.len() {
            return Err(Error::Shape(format!(
                "{} trailing bytes after payload",
                bytes.len() - offset
            )));
        }
        Ok(Self { header, payloads })
    }
}

/// Writes `bytes` to `path` through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidConfig(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(
        ".{}.tmp-{}",
        file_name.to_string_lossy(),
        std::process::id()
    ));
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    drop(f);
    fs::rename(&tmp, path).map_err(io)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// One labeled image: pooled global feature and its local features.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub global: Vec<f64>,
    pub locals: Matrix,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingArchive {
    pub version: u32,
    pub class_names: Vec<String>,
    /// N × D, unit rows.
    pub category_embeddings: Matrix,
    pub samples: Vec<Sample>,
    pub per_class_zero_shot_acc: Option<Vec<f64>>,
}

impl EmbeddingArchive {
    pub fn num_classes(&self) -> usize {
        self.category_embeddings.rows()
    }

    pub fn dim(&self) -> usize {
        self.category_embeddings.cols()
    }

    pub fn num_locals(&self) -> usize {
        self.samples.first().map_or(0, |s| s.locals.rows())
    }

    /// Sample indices grouped by class.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes()];
        for (i, s) in self.samples.iter().enumerate() {
            by_class[s.label].push(i);
        }
        by_class
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_classes();
        let d = self.dim();
        let m = self.num_locals();
        if self.class_names.len() != n {
            return Err(Error::Shape(format!(
                "{} class names for {n} category embeddings",
                self.class_names.len()
            )));
        }
        for (i, row) in self.category_embeddings.row_iter().enumerate() {
            let nrm = norm(row);
            if (nrm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Shape(format!(
                    "category embedding {i} has norm {nrm}"
                )));
            }
        }
        for (i, s) in self.samples.iter().enumerate() {
            if s.label >= n {
                return Err(Error::Shape(format!(
                    "sample {i} has label {} but N = {n}",
                    s.label
                )));
            }
            if s.global.len() != d || s.locals.cols() != d || s.locals.rows() != m {
                return Err(Error::Shape(format!(
                    "sample {i}: global len {}, locals {:?}, expected D = {d}, M = {m}",
                    s.global.len(),
                    s.locals.shape()
                )));
            }
            let nrm = norm(&s.global);
            if (nrm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Shape(format!(
                    "sample {i} global feature has norm {nrm}"
                )));
            }
        }
        if let Some(acc) = &self.per_class_zero_shot_acc {
            if acc.len() != n {
                return Err(Error::Shape(format!(
                    "{} per-class accuracies for N = {n}",
                    acc.len()
                )));
            }
            if acc.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(Error::Shape("per-class accuracy outside [0, 1]".into()));
            }
        }
        Ok(())
    }

    pub fn to_container(&self) -> Result<Container> {
        self.validate()?;
        let (n, d, m, s) = (
            self.num_classes(),
            self.dim(),
            self.num_locals(),
            self.samples.len(),
        );
        let mut meta = Map::new();
        meta.insert("dim".into(), d.into());
        meta.insert("num_locals".into(), m.into());
        meta.insert("num_classes".into(), n.into());
        meta.insert("num_samples".into(), s.into());
        meta.insert("class_names".into(), self.class_names.clone().into());
        meta.insert(
            "labels".into(),
            self.samples
                .iter()
                .map(|x| x.label)
                .collect::<Vec<_>>()
                .into(),
        );
        let mut fields = vec![
            FieldSpec {
                name: "category_embeddings".into(),
                shape: vec![n, d],
            },
            FieldSpec {
                name: "globals".into(),
                shape: vec![s, d],
            },
            FieldSpec {
                name: "locals".into(),
                shape: vec![s, m, d],
            },
        ];
        let mut payloads = vec![
            self.category_embeddings.data().to_vec(),
            self.samples
                .iter()
                .flat_map(|x| x.global.iter().copied())
                .collect(),
            self.samples
                .iter()
                .flat_map(|x| x.locals.data().iter().copied())
                .collect(),
        ];
        if let Some(acc) = &self.per_class_zero_shot_acc {
            fields.push(FieldSpec {
                name: "per_class_zero_shot_acc".into(),
                shape: vec![n],
            });
            payloads.push(acc.clone());
        }
        Ok(Container {
            header: ContainerHeader {
                kind: KIND_EMBEDDINGS.into(),
                dtype: Dtype::F32,
                fields,
                meta,
            },
            payloads,
        })
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.header.kind != KIND_EMBEDDINGS {
            return Err(Error::Header(format!(
                "expected kind \"{KIND_EMBEDDINGS}\", found \"{}\"",
                c.header.kind
            )));
        }
        let meta = &c.header.meta;
        let d = meta_usize(meta, "dim")?;
        let m = meta_usize(meta, "num_locals")?;
        let n = meta_usize(meta, "num_classes")?;
        let s = meta_usize(meta, "num_samples")?;
        let class_names: Vec<String> = meta_field(meta, "class_names")?;
        let labels: Vec<usize> = meta_field(meta, "labels")?;
        if class_names.len() != n {
            return Err(Error::Shape(format!(
                "header N = {n} but {} class names",
                class_names.len()
            )));
        }
        if labels.len() != s {
            return Err(Error::Shape(format!(
                "header S = {s} but {} labels",
                labels.len()
            )));
        }
        let cats = expect_field(c, "category_embeddings", &[n, d])?;
        let globals = expect_field(c, "globals", &[s, d])?;
        let locals = expect_field(c, "locals", &[s, m, d])?;
        let acc = match c.field("per_class_zero_shot_acc") {
            Some(_) => Some(expect_field(c, "per_class_zero_shot_acc", &[n])?.to_vec()),
            None => None,
        };
        let samples = labels
            .iter()
            .enumerate()
            .map(|(i, &label)| {
                Ok(Sample {
                    global: globals[i * d..(i + 1) * d].to_vec(),
                    locals: Matrix::from_vec(m, d, locals[i * m * d..(i + 1) * m * d].to_vec())?,
                    label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let archive = Self {
            version: VERSION,
            class_names,
            category_embeddings: Matrix::from_vec(n, d, cats.to_vec())?,
            samples,
            per_class_zero_shot_acc: acc,
        };
        archive.validate()?;
        Ok(archive)
    }

    /// Rounds every stored value through `f32`, i.e. what a save/load
    /// round trip would produce.
    pub fn quantize(&mut self) {
        let q = |v: &mut f64| *v = f64::from(*v as f32);
        self.category_embeddings.data_mut().iter_mut().for_each(q);
        for s in &mut self.samples {
            s.global.iter_mut().for_each(q);
            s.locals.data_mut().iter_mut().for_each(q);
        }
        if let Some(acc) = &mut self.per_class_zero_shot_acc {
            acc.iter_mut().for_each(q);
        }
    }
}

fn meta_usize(meta: &Map<String, Value>, key: &str) -> Result<usize> {
    meta.get(key)
        .and_then(Value::as_u64)
        .map(|v| v as usize)
        .ok_or_else(|| Error::Header(format!("missing or non-integer \"{key}\"")))
}

fn meta_field<T: serde::de::DeserializeOwned>(meta: &Map<String, Value>, key: &str) -> Result<T> {
    let v = meta
        .get(key)
        .ok_or_else(|| Error::Header(format!("missing \"{key}\"")))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::Header(format!("\"{key}\": {e}")))
}

fn expect_field<'a>(c: &'a Container, name: &str, shape: &[usize]) -> Result<&'a [f64]> {
    let (spec, data) = c
        .field(name)
        .ok_or_else(|| Error::Shape(format!("missing field {name}")))?;
    if spec.shape != shape {
        return Err(Error::Shape(format!(
            "field {name} has shape {:?}, header dims imply {shape:?}",
            spec.shape
        )));
    }
    Ok(data)
}

pub fn save_archive(path: &Path, archive: &EmbeddingArchive) -> Result<()> {
    write_atomic(path, &archive.to_container()?.encode()?)
}

pub fn load_archive(path: &Path) -> Result<EmbeddingArchive> {
    EmbeddingArchive::from_container(&Container::decode(&read_file(path)?)?)
}

pub fn checkpoint_container(params: &AdapterParams) -> Container {
    let mut meta = Map::new();
    meta.insert("dim".into(), params.embed_dim().into());
    meta.insert("hidden".into(), params.hidden_dim().into());
    meta.insert("heads".into(), params.heads().into());
    meta.insert("seed".into(), params.seed.into());
    let tensors = params.tensors();
    let fields = tensors
        .iter()
        .map(|(name, (r, c), _)| FieldSpec {
            name: name.clone(),
            shape: if *c == 1 && name.ends_with(".bias") {
                vec![*r]
            } else {
                vec![*r, *c]
            },
        })
        .collect();
    let payloads = tensors.iter().map(|t| t.2.to_vec()).collect();
    Container {
        header: ContainerHeader {
            kind: KIND_CHECKPOINT.into(),
            dtype: Dtype::F64,
            fields,
            meta,
        },
        payloads,
    }
}

pub fn params_from_container(c: &Container) -> Result<AdapterParams> {
    if c.header.kind != KIND_CHECKPOINT {
        return Err(Error::Header(format!(
            "expected kind \"{KIND_CHECKPOINT}\", found \"{}\"",
            c.header.kind
        )));
    }
    let meta = &c.header.meta;
    let mut params = AdapterParams::zeros(
        meta_usize(meta, "dim")?,
        meta_usize(meta, "hidden")?,
        meta_usize(meta, "heads")?,
    )?;
    params.seed = meta
        .get("seed")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::Header("missing \"seed\"".into()))?;
    let expected = checkpoint_container(&params).header.fields;
    let mut flat = Vec::with_capacity(params.param_count());
    for spec in &expected {
        flat.extend_from_slice(expect_field(c, &spec.name, &spec.shape)?);
    }
    if c.header.fields.len() != expected.len() {
        return Err(Error::Shape(format!(
            "checkpoint has {} tensors, expected {}",
            c.header.fields.len(),
            expected.len()
        )));
    }
    params.assign_flat(&flat)?;
    Ok(params)
}

pub fn save_checkpoint(path: &Path, params: &AdapterParams) -> Result<()> {
    write_atomic(path, &checkpoint_container(params).encode()?)
}

pub fn load_checkpoint(path: &Path) -> Result<AdapterParams> {
    params_from_container(&Container::decode(&read_file(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::init_params;

    fn tiny() -> EmbeddingArchive {
        EmbeddingArchive {
            version: VERSION,
            class_names: vec!["cat".into(), "dog".into()],
            category_embeddings: Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap(),
            samples: vec![
                Sample {
                    global: vec![0.6, 0.8],
                    locals: Matrix::from_rows(&[[0.5, 0.25], [1.0, -2.0]]).unwrap(),
                    label: 1,
                },
                Sample {
                    global: vec![1.0, 0.0],
                    locals: Matrix::from_rows(&[[0.0, 0.0], [0.125, 0.5]]).unwrap(),
                    label: 0,
                },
            ],
            per_class_zero_shot_acc: Some(vec![1.0, 0.5]),
        }
    }

    #[test]
    fn round_trip_in_memory() {
        let mut a = tiny();
        a.quantize();
        let bytes = a.to_container().unwrap().encode().unwrap();
        let b = EmbeddingArchive::from_container(&Container::decode(&bytes).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_eq!(&bytes[..4], b"ATNA");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    }

    #[test]
    fn round_trip_without_accuracies() {
        let mut a = tiny();
        a.per_class_zero_shot_acc = None;
        let bytes = a.to_container().unwrap().encode().unwrap();
        let b = EmbeddingArchive::from_container(&Container::decode(&bytes).unwrap()).unwrap();
        assert_eq!(b.per_class_zero_shot_acc, None);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut p = init_params(42, 4, 6, 2).unwrap();
        p.memory.gate.weight.data_mut()[3] = 0.1 + 0.2;
        let bytes = checkpoint_container(&p).encode().unwrap();
        let q = params_from_container(&Container::decode(&bytes).unwrap()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn corrupt_inputs() {
        let bytes = tiny().to_container().unwrap().encode().unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Container::decode(&bad), Err(Error::BadMagic(_))));

        let mut bad = bytes.clone();
        bad[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            Container::decode(&bad),
            Err(Error::VersionMismatch {
                found: 2,
                expected: 1
            })
        ));

        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(Container::decode(cut), Err(Error::Truncated(_))));
        assert!(matches!(
            Container::decode(&bytes[..10]),
            Err(Error::Truncated(_))
        ));

        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Container::decode(&extra), Err(Error::Shape(_))));
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let c = checkpoint_container(&init_params(1, 2, 2, 1).unwrap());
        assert!(matches!(
            EmbeddingArchive::from_container(&c),
            Err(Error::Header(_))
        ));
        let c = tiny().to_container().unwrap();
        assert!(matches!(params_from_container(&c), Err(Error::Header(_))));
    }

    #[test]
    fn invalid_archive_refuses_to_save() {
        let mut a = tiny();
        a.samples[0].label = 5;
        assert!(matches!(a.to_container(), Err(Error::Shape(_))));
        let mut a = tiny();
        a.samples[0].global = vec![2.0, 0.0];
        assert!(a.validate().is_err());
        let mut a = tiny();
        a.per_class_zero_shot_acc = Some(vec![1.5, 0.0]);
        assert!(a.validate().is_err());
    }
}
