//! Versioned JSON serialization of trained parameters.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::retain::GruCell;
use super::{BackendError, BackendKind, BoxLmParams, ModelParams, RetainParams, Vocab, VolumeConfig};
use crate::ehr::{CcsId, Ontology};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ParamsIoError {
    #[error("params file: {0}")]
    Io(#[from] std::io::Error),
    #[error("params json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported params format_version {0}")]
    Version(u32),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("tensor `{name}`: {reason}")]
    BadTensor { name: String, reason: String },
    #[error("params vocabulary does not match the ontology ({params} codes vs {ontology})")]
    VocabMismatch { params: usize, ontology: usize },
    #[error("declared d={declared} but tensors have dimension {found}")]
    DimMismatch { declared: usize, found: usize },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum Tensor {
    Vector(Vec<f64>),
    Matrix(Vec<Vec<f64>>),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsDoc {
    format_version: u32,
    backend: BackendKind,
    d: usize,
    seed: u64,
    vocab: Vec<CcsId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    volume: Option<VolumeConfig>,
    tensors: BTreeMap<String, Tensor>,
}

fn vector(a: &Array1<f64>) -> Tensor {
    Tensor::Vector(a.to_vec())
}

fn matrix(a: &Array2<f64>) -> Tensor {
    Tensor::Matrix(a.outer_iter().map(|r| r.to_vec()).collect())
}

struct Tensors(BTreeMap<String, Tensor>);

impl Tensors {
    fn take(&mut self, name: &str) -> Result<Tensor, ParamsIoError> {
        self.0.remove(name).ok_or_else(|| ParamsIoError::MissingTensor(name.into()))
    }

    fn vector(&mut self, name: &str, len: usize) -> Result<Array1<f64>, ParamsIoError> {
        let bad = |reason: String| ParamsIoError::BadTensor { name: name.into(), reason };
        let v = match self.take(name)? {
            Tensor::Vector(v) => v,
            Tensor::Matrix(_) => return Err(bad("expected a vector".into())),
        };
        if v.len() != len {
            return Err(bad(format!("expected length {len}, found {}", v.len())));
        }
        Ok(Array1::from(v))
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<Array2<f64>, ParamsIoError> {
        let bad = |reason: String| ParamsIoError::BadTensor { name: name.into(), reason };
        let m = match self.take(name)? {
            Tensor::Matrix(m) => m,
            Tensor::Vector(v) if v.is_empty() => Vec::new(),
            Tensor::Vector(_) => return Err(bad("expected a matrix".into())),
        };
        if m.len() != rows || m.iter().any(|r| r.len() != cols) {
            return Err(bad(format!("expected shape {rows}x{cols}")));
        }
        let flat: Vec<f64> = m.into_iter().flatten().collect();
        Ok(Array2::from_shape_vec((rows, cols), flat).expect("checked shape"))
    }

    fn finish(self) -> Result<(), ParamsIoError> {
        match self.0.into_keys().next() {
            Some(extra) => Err(ParamsIoError::BadTensor { name: extra, reason: "unexpected tensor".into() }),
            None => Ok(()),
        }
    }
}

const GRU_MATS: [&str; 6] = ["w_z", "u_z", "w_r", "u_r", "w_h", "u_h"];
const GRU_VECS: [&str; 3] = ["b_z", "b_r", "b_h"];

fn put_gru(out: &mut BTreeMap<String, Tensor>, prefix: &str, g: &GruCell) {
    let mats = [&g.w_z, &g.u_z, &g.w_r, &g.u_r, &g.w_h, &g.u_h];
    for (name, m) in GRU_MATS.iter().zip(mats) {
        out.insert(format!("{prefix}.{name}"), matrix(m));
    }
    for (name, v) in GRU_VECS.iter().zip([&g.b_z, &g.b_r, &g.b_h]) {
        out.insert(format!("{prefix}.{name}"), vector(v));
    }
}

fn take_gru(t: &mut Tensors, prefix: &str, d: usize) -> Result<GruCell, ParamsIoError> {
    let mut m = |n: &str| t.matrix(&format!("{prefix}.{n}"), d, d);
    let (w_z, u_z, w_r, u_r, w_h, u_h) = (m("w_z")?, m("u_z")?, m("w_r")?, m("u_r")?, m("w_h")?, m("u_h")?);
    let mut v = |n: &str| t.vector(&format!("{prefix}.{n}"), d);
    Ok(GruCell { w_z, u_z, b_z: v("b_z")?, w_r, u_r, b_r: v("b_r")?, w_h, u_h, b_h: v("b_h")? })
}

fn to_doc(params: &ModelParams, seed: u64) -> ParamsDoc {
    let mut tensors = BTreeMap::new();
    let volume = match params {
        ModelParams::Box(p) => {
            tensors.insert("centers".into(), matrix(&p.centers));
            tensors.insert("offsets_raw".into(), matrix(&p.offsets_raw));
            tensors.insert("attn_query".into(), vector(&p.attn_query));
            tensors.insert("visit_weight".into(), vector(&p.visit_weight));
            Some(p.volume)
        }
        ModelParams::Retain(p) => {
            tensors.insert("embed".into(), matrix(&p.embed));
            put_gru(&mut tensors, "rnn_alpha", &p.rnn_alpha);
            put_gru(&mut tensors, "rnn_beta", &p.rnn_beta);
            tensors.insert("w_alpha".into(), vector(&p.w_alpha));
            tensors.insert("w_beta".into(), matrix(&p.w_beta));
            tensors.insert("b_beta".into(), vector(&p.b_beta));
            tensors.insert("w_o".into(), matrix(&p.w_o));
            tensors.insert("b_o".into(), vector(&p.b_o));
            None
        }
    };
    ParamsDoc {
        format_version: FORMAT_VERSION,
        backend: params.kind(),
        d: params.dim(),
        seed,
        vocab: params.vocab().codes().to_vec(),
        volume,
        tensors,
    }
}

fn from_doc(doc: ParamsDoc, ontology: &Ontology) -> Result<(ModelParams, u64), ParamsIoError> {
    if doc.format_version != FORMAT_VERSION {
        return Err(ParamsIoError::Version(doc.format_version));
    }
    let expected = Vocab::from_ontology(ontology);
    if doc.vocab != expected.codes() {
        return Err(ParamsIoError::VocabMismatch { params: doc.vocab.len(), ontology: expected.len() });
    }
    if doc.d == 0 {
        return Err(ParamsIoError::DimMismatch { declared: 0, found: 0 });
    }
    let (c, d) = (expected.len(), doc.d);
    let mut t = Tensors(doc.tensors);
    let params = match doc.backend {
        BackendKind::Box => {
            let volume = doc.volume.unwrap_or_default();
            volume.validate()?;
            let p = BoxLmParams {
                vocab: expected,
                centers: t.matrix("centers", c, d)?,
                offsets_raw: t.matrix("offsets_raw", c, d)?,
                attn_query: t.vector("attn_query", d)?,
                visit_weight: t.vector("visit_weight", d)?,
                volume,
            };
            ModelParams::Box(p)
        }
        BackendKind::Retain => {
            let embed = t.matrix("embed", d, c)?;
            let rnn_alpha = take_gru(&mut t, "rnn_alpha", d)?;
            let rnn_beta = take_gru(&mut t, "rnn_beta", d)?;
            let p = RetainParams {
                vocab: expected,
                embed,
                rnn_alpha,
                rnn_beta,
                w_alpha: t.vector("w_alpha", d)?,
                w_beta: t.matrix("w_beta", d, d)?,
                b_beta: t.vector("b_beta", d)?,
                w_o: t.matrix("w_o", c, d)?,
                b_o: t.vector("b_o", c)?,
            };
            ModelParams::Retain(p)
        }
    };
    t.finish()?;
    Ok((params, doc.seed))
}

pub fn write_params<W: Write>(params: &ModelParams, seed: u64, writer: W) -> Result<(), ParamsIoError> {
    let mut w = BufWriter::new(writer);
    serde_json::to_writer(&mut w, &to_doc(params, seed))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Reads parameters and the seed they were initialized from, validating every
/// tensor shape against `ontology`.
pub fn read_params<R: Read>(reader: R, ontology: &Ontology) -> Result<(ModelParams, u64), ParamsIoError> {
    let doc: ParamsDoc = serde_json::from_reader(BufReader::new(reader))?;
    from_doc(doc, ontology)
}

pub fn save_params(params: &ModelParams, seed: u64, path: impl AsRef<Path>) -> Result<(), ParamsIoError> {
    write_params(params, seed, File::create(path)?)
}

pub fn load_params(path: impl AsRef<Path>, ontology: &Ontology) -> Result<(ModelParams, u64), ParamsIoError> {
    read_params(File::open(path)?, ontology)
}
