//! Graph and checkpoint serialization.
//!
//! Two on-disk forms:
//!
//! - a JSON document: ordered list of layer records `{name, type, config,
//!   inbound}`, optionally carrying flat parameter arrays (`params`) so a
//!   pruned graph stays runnable as a single file;
//! - a binary checkpoint: the topology JSON followed by a weight blob indexed
//!   by `(layer name, param name)`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Layer, LayerKind, ModelGraph, Param};

const CKPT_MAGIC: &[u8; 8] = b"VSCKPT01";
const BLOB_MAGIC: &[u8; 8] = b"VSWBLOB1";

#[derive(Debug, Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: [usize; 4],
    learnable: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    values: Option<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerRecord {
    name: String,
    #[serde(flatten)]
    kind: LayerKind,
    inbound: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    channel_ids: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    params: Option<Vec<ParamRecord>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GraphDoc {
    layers: Vec<LayerRecord>,
}

/// Serialize to the JSON document form. With `include_params` the parameter
/// values are embedded; otherwise only shapes are recorded.
pub fn graph_to_json(graph: &ModelGraph, include_params: bool) -> Result<String> {
    let doc = GraphDoc {
        layers: graph
            .layers()
            .iter()
            .map(|l| LayerRecord {
                name: l.name.clone(),
                kind: l.kind.clone(),
                inbound: l.inbound.clone(),
                channel_ids: l.channel_ids.clone(),
                params: Some(
                    l.params
                        .iter()
                        .map(|p| ParamRecord {
                            name: p.name.clone(),
                            shape: p.values.shape(),
                            learnable: p.learnable,
                            values: include_params.then(|| p.values.data().to_vec()),
                        })
                        .collect(),
                ),
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

pub fn graph_from_json(json: &str) -> Result<ModelGraph> {
    let doc: GraphDoc = serde_json::from_str(json)?;
    let mut graph = ModelGraph::new();
    for rec in doc.layers {
        let params = rec
            .params
            .unwrap_or_default()
            .into_iter()
            .map(|p| {
                let values = match p.values {
                    Some(v) => Tensor::from_vec(p.shape, v)?,
                    None => Tensor::zeros(p.shape),
                };
                Ok(Param { name: p.name, values, learnable: p.learnable })
            })
            .collect::<Result<Vec<_>>>()?;
        graph.push(Layer {
            name: rec.name,
            kind: rec.kind,
            inbound: rec.inbound,
            params,
            channel_ids: rec.channel_ids,
        })?;
    }
    Ok(graph)
}

fn write_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    write_u64(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Input("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Input("bad utf8 in checkpoint".into()))
    }
}

/// Weight blob: every parameter of every layer, indexed by name.
fn weights_to_blob(graph: &ModelGraph) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(BLOB_MAGIC);
    let count: u64 = graph.layers().iter().map(|l| l.params.len() as u64).sum();
    write_u64(&mut out, count);
    for layer in graph.layers() {
        for p in &layer.params {
            write_str(&mut out, &layer.name);
            write_str(&mut out, &p.name);
            out.push(u8::from(p.learnable));
            for d in p.values.shape() {
                write_u64(&mut out, d as u64);
            }
            for v in p.values.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

fn weights_from_blob(graph: &mut ModelGraph, blob: &[u8]) -> Result<()> {
    let mut r = Reader { buf: blob, pos: 0 };
    if r.take(8)? != BLOB_MAGIC {
        return Err(Error::Input("bad weight blob magic".into()));
    }
    let count = r.u64()?;
    for _ in 0..count {
        let lname = r.str()?;
        let pname = r.str()?;
        let learnable = r.take(1)?[0] != 0;
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = r.u64()? as usize;
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let b = r.take(8)?;
            data.push(f64::from_le_bytes(b.try_into().unwrap()));
        }
        let layer = graph
            .layer_mut(&lname)
            .ok_or_else(|| Error::Input(format!("blob refers to unknown layer '{lname}'")))?;
        match layer.param_mut(&pname) {
            Some(p) => {
                p.values = Tensor::from_vec(shape, data)?;
                p.learnable = learnable;
            }
            None => {
                return Err(Error::Input(format!(
                    "blob refers to unknown param '{lname}.{pname}'"
                )))
            }
        }
    }
    Ok(())
}

/// Single-file checkpoint: magic, topology JSON, weight blob.
pub fn save_checkpoint(graph: &ModelGraph, path: &Path) -> Result<()> {
    let json = graph_to_json(graph, false)?;
    let blob = weights_to_blob(graph);
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    write_u64(&mut out, json.len() as u64);
    out.extend_from_slice(json.as_bytes());
    out.extend_from_slice(&blob);
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelGraph> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(8)? != CKPT_MAGIC {
        return Err(Error::Input(format!("{} is not a checkpoint", path.display())));
    }
    let jlen = r.u64()? as usize;
    let json = std::str::from_utf8(r.take(jlen)?)
        .map_err(|_| Error::Input("bad utf8 in checkpoint header".into()))?;
    let mut graph = graph_from_json(json)?;
    weights_from_blob(&mut graph, &buf[r.pos..])?;
    Ok(graph)
}

/// Load a graph from a JSON file, falling back to checkpoint format when the
/// file carries the checkpoint magic.
pub fn load_graph_file(path: &Path) -> Result<ModelGraph> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(CKPT_MAGIC) {
        return load_checkpoint(path);
    }
    let s = std::str::from_utf8(&bytes).map_err(|_| Error::Input("graph file is not utf8".into()))?;
    graph_from_json(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::cost;
    use crate::graph::GraphBuilder;
    use crate::tensor::TensorSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> ModelGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut b = GraphBuilder::new(&mut rng);
        let img = b.input("img", 3);
        let c = b.conv_bn_silu("stem", &img, 8, 3, 2);
        let e = b.ema("att", &c, 2);
        let g = b.global_avg_pool("gap", &e);
        b.linear("fc", &g, 2, true);
        b.finish()
    }

    #[test]
    fn json_round_trip_preserves_costs_and_weights() {
        let g = sample();
        let spec = TensorSpec::new(1, 3, 16, 16).unwrap();
        let json = graph_to_json(&g, true).unwrap();
        let g2 = graph_from_json(&json).unwrap();
        assert_eq!(cost::count_params(&g), cost::count_params(&g2));
        assert_eq!(
            cost::count_flops(&g, &spec).unwrap(),
            cost::count_flops(&g2, &spec).unwrap()
        );
        let w1 = &g.layer("stem.conv").unwrap().params[0].values;
        let w2 = &g2.layer("stem.conv").unwrap().params[0].values;
        assert_eq!(w1, w2);
    }

    #[test]
    fn checkpoint_round_trip_bitexact() {
        let g = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&g, &path).unwrap();
        let g2 = load_checkpoint(&path).unwrap();
        for (a, b) in g.layers().iter().zip(g2.layers().iter()) {
            assert_eq!(a.name, b.name);
            for (pa, pb) in a.params.iter().zip(b.params.iter()) {
                assert_eq!(pa.values.data(), pb.values.data());
            }
        }
    }
}
