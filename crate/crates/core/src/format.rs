//! On-disk formats: model manifest + weight blob, compiled bundles and
//! packed tensor blobs.
//!
//! A model is a JSON manifest plus a little-endian blob holding every
//! constant back to back. Manifest layout:
//!
//! ```json
//! {
//!   "format": "graphlower-model",
//!   "version": 1,
//!   "fresh_counter": 0,
//!   "storage": [
//!     {"id": 0, "name": "x", "kind": "placeholder", "type": "float<1 x 4>"},
//!     {"id": 1, "name": "w", "kind": "constant", "type": "float<4 x 2>"}
//!   ],
//!   "weights": [
//!     {"name": "w", "dtype": "float", "dims": [4, 2], "offset": 0, "length": 32}
//!   ],
//!   "functions": [
//!     {"name": "main", "differentiated": false, "nodes": [
//!       {"id": 0, "kind": "MatMul", "inputs": ["@x", "@w"], "type": "float<1 x 2>"},
//!       {"id": 1, "kind": "Save", "inputs": ["%0", "@out"]}
//!     ]}
//!   ]
//! }
//! ```
//!
//! `kind` of storage is `placeholder`, `trainable` or `constant`. Node
//! attributes use the dump syntax, e.g. `"attrs": "kernel=3, stride=1, pad=1"`.
//! Ids may skip values; gaps are removed nodes or storage and are kept so
//! that a saved module loads back identical.
//!
//! A packed tensor blob is the little-endian bytes of several tensors
//! concatenated in ascending name order, with no header.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Bindings;
use crate::graph::{verify_or_err, Module, Node, NodeId, NodeKind, Operand, Storage};
use crate::lowir::parse::{build_op, parse_attrs, Ctx};
use crate::lowir::{dump_ir, parse_ir, IrProgram, MemoryPlan, ValueRef};
use crate::tensor::{Tensor, TensorType};

const MODEL_FORMAT: &str = "graphlower-model";
const BUNDLE_FORMAT: &str = "graphlower-bundle";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub fresh_counter: u64,
    pub storage: Vec<StorageEntry>,
    pub weights: Vec<WeightEntry>,
    pub functions: Vec<FunctionEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StorageEntry {
    pub id: u32,
    pub name: String,
    pub kind: String,
    #[serde(rename = "type")]
    pub ty: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightEntry {
    pub name: String,
    pub dtype: String,
    pub dims: Vec<usize>,
    pub offset: usize,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionEntry {
    pub name: String,
    pub differentiated: bool,
    pub nodes: Vec<NodeEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeEntry {
    pub id: u32,
    pub kind: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub attrs: String,
    pub inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicate: Option<String>,
    #[serde(rename = "type", default, skip_serializing_if = "Option::is_none")]
    pub ty: Option<String>,
}

fn ferr<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

fn operand_text(m: &Module, o: Operand) -> String {
    match o {
        Operand::Node(n) => n.to_string(),
        Operand::Storage(s) => format!("@{}", m.storage(s).name()),
    }
}

/// Serialize a module into manifest text and weight blob.
pub fn save_model(m: &Module) -> Result<(String, Vec<u8>)> {
    let mut storage = Vec::new();
    let mut weights = Vec::new();
    let mut blob = Vec::new();
    for (id, st) in m.storages() {
        let kind = match st {
            Storage::Constant { .. } => "constant",
            Storage::Placeholder { trainable: true, .. } => "trainable",
            Storage::Placeholder { .. } => "placeholder",
        };
        storage.push(StorageEntry { id: id.0, name: st.name().into(), kind: kind.into(), ty: st.ty().to_string() });
        if let Some(t) = st.constant() {
            let bytes = t.to_le_bytes();
            weights.push(WeightEntry {
                name: st.name().into(),
                dtype: t.ty().kind.short_name().into(),
                dims: t.dims().to_vec(),
                offset: blob.len(),
                length: bytes.len(),
            });
            blob.extend(bytes);
        }
    }
    let mut functions = Vec::new();
    for (_, f) in m.functions() {
        let nodes = f
            .nodes()
            .map(|(id, n)| NodeEntry {
                id: id.0,
                kind: n.kind().name().into(),
                attrs: n.op.attr_string(),
                inputs: n.inputs.iter().map(|&o| operand_text(m, o)).collect(),
                predicate: n.predicate.map(|p| operand_text(m, p)),
                ty: n.ty.as_ref().map(|t| t.to_string()),
            })
            .collect();
        functions.push(FunctionEntry { name: f.name().into(), differentiated: f.differentiated, nodes });
    }
    let manifest = Manifest {
        format: MODEL_FORMAT.into(),
        version: VERSION,
        fresh_counter: m.fresh_counter(),
        storage,
        weights,
        functions,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    Ok((text, blob))
}

/// Rebuild and verify a module from manifest text and weight blob.
pub fn load_model(manifest: &str, blob: &[u8]) -> Result<Module> {
    let man: Manifest = serde_json::from_str(manifest)?;
    if man.format != MODEL_FORMAT || man.version != VERSION {
        return ferr(format!("unsupported format `{}` version {}", man.format, man.version));
    }
    let mut spans: Vec<(usize, usize, &str)> = Vec::new();
    let mut payload: BTreeMap<&str, &WeightEntry> = BTreeMap::new();
    for (i, w) in man.weights.iter().enumerate() {
        let end = w.offset.checked_add(w.length).filter(|&e| e <= blob.len());
        let Some(end) = end else {
            return ferr(format!("weights[{i}] `{}`: bytes {}..+{} outside blob of {}", w.name, w.offset, w.length, blob.len()));
        };
        if let Some((_, _, other)) = spans.iter().find(|(s, e, _)| w.offset < *e && *s < end) {
            return ferr(format!("weights[{i}] `{}` overlaps `{other}` in the blob", w.name));
        }
        spans.push((w.offset, end, &w.name));
        if payload.insert(&w.name, w).is_some() {
            return ferr(format!("weights[{i}]: duplicate entry `{}`", w.name));
        }
    }

    let mut m = Module::new();
    for (i, e) in man.storage.iter().enumerate() {
        let at = format!("storage[{i}] `{}`", e.name);
        if (e.id as usize) < m.storage_bound() {
            return ferr(format!("{at}: ids must increase"));
        }
        while m.storage_bound() < e.id as usize {
            m.push_storage_slot(None);
        }
        let ty: TensorType = e.ty.parse().map_err(|err| Error::Format(format!("{at}: {err}")))?;
        let made = match e.kind.as_str() {
            "placeholder" => m.create_placeholder(&e.name, ty),
            "trainable" => m.create_trainable(&e.name, ty),
            "constant" => {
                let Some(w) = payload.remove(e.name.as_str()) else { return ferr(format!("{at}: no weight entry")) };
                if w.dtype != ty.kind.short_name() || w.dims != ty.dims {
                    return ferr(format!("{at}: weight entry says {}{:?}, storage says {ty}", w.dtype, w.dims));
                }
                if w.length != ty.size_bytes() {
                    return ferr(format!("{at}: {} bytes for a {ty} constant", w.length));
                }
                let t = Tensor::from_le_bytes(ty, &blob[w.offset..w.offset + w.length])
                    .map_err(|err| Error::Format(format!("{at}: {err}")))?;
                m.create_constant(&e.name, t)
            }
            other => return ferr(format!("{at}: unknown storage kind `{other}`")),
        };
        made.map_err(|err| Error::Format(format!("{at}: {err}")))?;
    }
    if let Some(name) = payload.keys().next() {
        return ferr(format!("weight `{name}` has no constant storage entry"));
    }

    for (fi, fe) in man.functions.iter().enumerate() {
        let fid = m.create_function(&fe.name).map_err(|err| Error::Format(format!("functions[{fi}]: {err}")))?;
        m.function_mut(fid).differentiated = fe.differentiated;
        for (ni, ne) in fe.nodes.iter().enumerate() {
            let at = format!("functions[{fi}].nodes[{ni}]");
            let operand = |s: &str| -> Result<Operand> {
                if let Some(n) = s.strip_prefix('%') {
                    let id: u32 = n.parse().map_err(|_| Error::Format(format!("{at}: bad node reference `{s}`")))?;
                    Ok(Operand::Node(NodeId(id)))
                } else if let Some(n) = s.strip_prefix('@') {
                    m.storage_by_name(n)
                        .map(Operand::Storage)
                        .ok_or_else(|| Error::Format(format!("{at}: unknown storage `{s}`")))
                } else {
                    ferr(format!("{at}: bad operand `{s}`"))
                }
            };
            let Some(kind) = NodeKind::ALL.iter().find(|k| k.name() == ne.kind) else {
                return ferr(format!("{at}: unknown kind `{}`", ne.kind));
            };
            let ctx = Ctx { line: 0 };
            let op = parse_attrs(&ctx, &ne.attrs)
                .and_then(|a| build_op(&ctx, *kind, a))
                .map_err(|err| Error::Format(format!("{at}: {err}")))?;
            let inputs = ne.inputs.iter().map(|s| operand(s)).collect::<Result<Vec<_>>>()?;
            let predicate = ne.predicate.as_deref().map(operand).transpose()?;
            let ty = match &ne.ty {
                Some(t) => Some(t.parse::<TensorType>().map_err(|err| Error::Format(format!("{at}: {err}")))?),
                None => None,
            };
            let func = m.function_mut(fid);
            if (ne.id as usize) < func.id_bound() {
                return ferr(format!("{at}: ids must increase"));
            }
            while func.id_bound() < ne.id as usize {
                func.push_slot(None);
            }
            func.push_slot(Some(Node { op, inputs, ty, predicate }));
        }
        verify_or_err(&m, fid).map_err(|err| Error::Format(format!("function `{}`: {err}", fe.name)))?;
    }
    m.set_fresh_counter(man.fresh_counter);
    Ok(m)
}

pub fn save_model_files(m: &Module, manifest: &Path, blob: &Path) -> Result<()> {
    let (text, bytes) = save_model(m)?;
    fs::write(manifest, text)?;
    fs::write(blob, bytes)?;
    Ok(())
}

pub fn load_model_files(manifest: &Path, blob: &Path) -> Result<Module> {
    let text = fs::read_to_string(manifest)?;
    let bytes = fs::read(blob)?;
    load_model(&text, &bytes)
}

/// Concatenate tensors in ascending name order.
pub fn pack_tensors(tensors: &BTreeMap<String, Tensor>) -> Vec<u8> {
    tensors.values().flat_map(|t| t.to_le_bytes()).collect()
}

/// Split a packed blob by the given names and types.
pub fn unpack_tensors(blob: &[u8], types: &BTreeMap<String, TensorType>) -> Result<Bindings> {
    let want: usize = types.values().map(|t| t.size_bytes()).sum();
    if blob.len() != want {
        return ferr(format!("tensor blob has {} bytes, expected {want}", blob.len()));
    }
    let mut out = Bindings::new();
    let mut at = 0;
    for (name, ty) in types {
        let n = ty.size_bytes();
        out.insert(name.clone(), Tensor::from_le_bytes(ty.clone(), &blob[at..at + n])?);
        at += n;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BundleIndex {
    format: String,
    version: u32,
    arena_size: usize,
    constant_region: [usize; 2],
    mutable_region: [usize; 2],
    activation_region: [usize; 2],
    offsets: BTreeMap<String, usize>,
    constants: Vec<WeightEntry>,
}

/// Write a compiled bundle directory: `program.ir`, `bundle.json` (memory
/// plan and constant index) and `constants.bin`.
pub fn save_bundle(dir: &Path, program: &IrProgram, plan: &MemoryPlan) -> Result<()> {
    fs::create_dir_all(dir)?;
    let ir = &program.ir;
    let mut blob = Vec::new();
    let mut constants = Vec::new();
    for (name, t) in &program.constants {
        let bytes = t.to_le_bytes();
        constants.push(WeightEntry {
            name: name.clone(),
            dtype: t.ty().kind.short_name().into(),
            dims: t.dims().to_vec(),
            offset: blob.len(),
            length: bytes.len(),
        });
        blob.extend(bytes);
    }
    let offsets = plan.offsets.iter().map(|(&v, &o)| (ir.name(v).to_string(), o)).collect();
    let r = |r: &std::ops::Range<usize>| [r.start, r.end];
    let index = BundleIndex {
        format: BUNDLE_FORMAT.into(),
        version: VERSION,
        arena_size: plan.arena_size,
        constant_region: r(&plan.constant_region),
        mutable_region: r(&plan.mutable_region),
        activation_region: r(&plan.activation_region),
        offsets,
        constants,
    };
    fs::write(dir.join("program.ir"), dump_ir(ir))?;
    fs::write(dir.join("bundle.json"), serde_json::to_string_pretty(&index)? + "\n")?;
    fs::write(dir.join("constants.bin"), blob)?;
    Ok(())
}

pub fn load_bundle(dir: &Path) -> Result<(IrProgram, MemoryPlan)> {
    let ir = parse_ir(&fs::read_to_string(dir.join("program.ir"))?)?;
    let index: BundleIndex = serde_json::from_str(&fs::read_to_string(dir.join("bundle.json"))?)?;
    if index.format != BUNDLE_FORMAT || index.version != VERSION {
        return ferr(format!("unsupported bundle `{}` version {}", index.format, index.version));
    }
    let blob = fs::read(dir.join("constants.bin"))?;
    let mut constants = BTreeMap::new();
    for w in &index.constants {
        let Some(wi) = ir.weight_by_name(&w.name) else { return ferr(format!("constant `{}` is not declared", w.name)) };
        let ty = ir.weights[wi as usize].ty.clone();
        let bytes = blob
            .get(w.offset..w.offset.saturating_add(w.length))
            .ok_or_else(|| Error::Format(format!("constant `{}` lies outside constants.bin", w.name)))?;
        constants.insert(w.name.clone(), Tensor::from_le_bytes(ty, bytes)?);
    }
    let mut offsets = BTreeMap::new();
    let names: BTreeMap<&str, ValueRef> = (0..ir.weights.len() as u32)
        .map(ValueRef::Weight)
        .chain((0..ir.activations.len() as u32).map(ValueRef::Act))
        .map(|v| (ir.name(v), v))
        .collect();
    for (name, &off) in &index.offsets {
        let v = names.get(name.as_str()).ok_or_else(|| Error::Format(format!("offset for unknown value `{name}`")))?;
        offsets.insert(*v, off);
    }
    let r = |a: [usize; 2]| a[0]..a[1];
    let plan = MemoryPlan {
        arena_size: index.arena_size,
        offsets,
        constant_region: r(index.constant_region),
        mutable_region: r(index.mutable_region),
        activation_region: r(index.activation_region),
    };
    Ok((IrProgram { ir, constants }, plan))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity() -> Module {
        let mut m = Module::new();
        let f = m.create_function("main").unwrap();
        let x = m.create_placeholder("x", TensorType::float(&[4])).unwrap();
        let o = m.create_placeholder("out", TensorType::float(&[4])).unwrap();
        m.builder(f).save(x.into(), o);
        m
    }

    #[test]
    fn minimal_manifest_loads() {
        let m = identity();
        let (text, blob) = save_model(&m).unwrap();
        assert!(blob.is_empty());
        let back = load_model(&text, &blob).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.functions().count(), 1);
    }

    #[test]
    fn overlapping_weights_are_rejected() {
        let mut m = identity();
        m.create_constant("a", Tensor::from_f32(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
        m.create_constant("b", Tensor::from_f32(&[2], vec![3.0, 4.0]).unwrap()).unwrap();
        let (text, blob) = save_model(&m).unwrap();
        let mut man: Manifest = serde_json::from_str(&text).unwrap();
        man.weights[1].offset = 4;
        let err = load_model(&serde_json::to_string(&man).unwrap(), &blob).unwrap_err();
        assert!(err.to_string().contains("overlaps"), "{err}");
    }

    #[test]
    fn weight_past_blob_end_is_rejected() {
        let mut m = identity();
        m.create_constant("a", Tensor::from_f32(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
        let (text, blob) = save_model(&m).unwrap();
        assert!(load_model(&text, &blob[..4]).is_err());
    }

    #[test]
    fn packed_tensors_round_trip() {
        let mut ts = BTreeMap::new();
        ts.insert("b".to_string(), Tensor::from_f32(&[2], vec![1.0, -1.0]).unwrap());
        ts.insert("a".to_string(), Tensor::from_bool(&[3], vec![true, false, true]).unwrap());
        let blob = pack_tensors(&ts);
        let types = ts.iter().map(|(k, t)| (k.clone(), t.ty().clone())).collect();
        assert_eq!(unpack_tensors(&blob, &types).unwrap(), ts);
        assert!(unpack_tensors(&blob[1..], &types).is_err());
    }
}
