//! Plan construction and application.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Layer, LayerKind, ModelGraph};

use super::deps::{build_deps, Deps};
use super::importance_of;

/// Which dependency groups a plan may shrink.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PruneScope {
    /// Skip trunk (residual-coupled) groups; prune every other unprotected
    /// group. Parameter cost then scales roughly linearly with the ratio.
    #[default]
    Hidden,
    /// Prune every unprotected group, trunks included.
    All,
}

/// Keep masks per layer, indexed by *original* channel identity, so applying
/// the same plan to an already-pruned graph is a no-op.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub ratio: f64,
    /// layer name -> 0/1 per original output-channel id.
    pub masks: BTreeMap<String, Vec<u8>>,
}

impl PruningPlan {
    pub fn identity(graph: &ModelGraph) -> Self {
        let masks = graph
            .layers()
            .iter()
            .map(|l| (l.name.clone(), vec![1u8; original_width(l)]))
            .collect();
        Self { ratio: 0.0, masks }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Width of the layer before any pruning (original ids run 0..this).
fn original_width(layer: &Layer) -> usize {
    match &layer.channel_ids {
        Some(ids) => ids.iter().max().map_or(0, |m| m + 1),
        None => current_width(layer),
    }
}

fn current_width(layer: &Layer) -> usize {
    match &layer.kind {
        LayerKind::Input { channels } | LayerKind::BatchNorm { channels } | LayerKind::Ema { channels, .. } => *channels,
        LayerKind::Conv2d { out_channels, .. } => *out_channels,
        LayerKind::Linear { out_features, .. } => *out_features,
        // pass-through widths are derived when needed
        _ => 0,
    }
}

/// Original channel id of position `pos` in this layer.
fn orig_id(layer: &Layer, pos: usize) -> usize {
    match &layer.channel_ids {
        Some(ids) => ids[pos],
        None => pos,
    }
}

/// Rank channels per dependency group by summed importance and drop the
/// lowest-scoring ones to meet `ratio`. At least one channel survives per
/// group; kept count is `ceil((1 - ratio) * group width)`.
pub fn build_plan(graph: &ModelGraph, ratio: f64) -> Result<PruningPlan> {
    build_plan_scoped(graph, ratio, PruneScope::Hidden)
}

pub fn build_plan_scoped(graph: &ModelGraph, ratio: f64, scope: PruneScope) -> Result<PruningPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("pruning ratio {ratio} must be in [0, 1)")));
    }
    let deps = build_deps(graph)?;
    let scores = atom_scores(graph, &deps);

    // collect atoms per group root (in slot order, so ties keep lower ids)
    let mut atoms_of_group: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut seen = vec![false; deps.slot_count()];
    for slot in 0..deps.slot_count() {
        let atom = deps.atom_of(slot);
        if seen[atom] {
            continue;
        }
        seen[atom] = true;
        atoms_of_group.entry(deps.group_of(slot)).or_default().push(atom);
    }

    let mut dropped = vec![false; deps.slot_count()];
    for (_, atoms) in atoms_of_group {
        let any = atoms[0];
        if deps.is_protected(any) {
            continue;
        }
        if matches!(scope, PruneScope::Hidden) && deps.is_trunk(any) {
            continue;
        }
        let keep = (((1.0 - ratio) * atoms.len() as f64).ceil() as usize).max(1);
        if keep >= atoms.len() {
            continue;
        }
        let mut ranked: Vec<usize> = atoms.clone();
        ranked.sort_by(|&a, &b| {
            scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b))
        });
        for &atom in ranked.iter().skip(keep) {
            dropped[atom] = true;
        }
    }

    let mut masks = BTreeMap::new();
    for (idx, layer) in graph.layers().iter().enumerate() {
        let mut mask = vec![1u8; original_width_or_map(layer, &deps.out_maps[idx])];
        for (pos, &slot) in deps.out_maps[idx].iter().enumerate() {
            if dropped[deps.atom_of(slot)] {
                mask[orig_id(layer, pos)] = 0;
            }
        }
        masks.insert(layer.name.clone(), mask);
    }
    Ok(PruningPlan { ratio, masks })
}

fn original_width_or_map(layer: &Layer, out_map: &[usize]) -> usize {
    match &layer.channel_ids {
        Some(ids) => ids.iter().max().map_or(0, |m| m + 1),
        None => out_map.len(),
    }
}

/// Build a consistent plan that drops exactly the atoms containing the given
/// `(layer name, output channel position)` references.
pub fn plan_from_drops(graph: &ModelGraph, drops: &[(String, usize)]) -> Result<PruningPlan> {
    let deps = build_deps(graph)?;
    let mut dropped = vec![false; deps.slot_count()];
    for (name, pos) in drops {
        let idx = graph
            .index_of(name)
            .ok_or_else(|| Error::Plan(format!("no layer named '{name}'")))?;
        let map = &deps.out_maps[idx];
        if *pos >= map.len() {
            return Err(Error::Plan(format!("channel {pos} out of range for '{name}'")));
        }
        dropped[deps.atom_of(map[*pos])] = true;
    }
    let mut masks = BTreeMap::new();
    for (idx, layer) in graph.layers().iter().enumerate() {
        let mut mask = vec![1u8; original_width_or_map(layer, &deps.out_maps[idx])];
        for (pos, &slot) in deps.out_maps[idx].iter().enumerate() {
            if dropped[deps.atom_of(slot)] {
                mask[orig_id(layer, pos)] = 0;
            }
        }
        masks.insert(layer.name.clone(), mask);
    }
    Ok(PruningPlan { ratio: 0.0, masks })
}

/// Per-atom importance: the sum of L2 norms over every weight slice, bias
/// entry and normalization coefficient owned by the atom's channels.
fn atom_scores(graph: &ModelGraph, deps: &Deps) -> Vec<f64> {
    let mut scores = vec![0.0; deps.slot_count()];
    let mut add = |atom: usize, slice: &[f64]| {
        if let Ok(v) = importance_of(slice) {
            scores[atom] += v;
        }
    };
    for (idx, layer) in graph.layers().iter().enumerate() {
        let in_map =
            |i: usize| -> &Vec<usize> { &deps.out_maps[graph.index_of(&layer.inbound[i]).unwrap()] };
        match &layer.kind {
            LayerKind::Conv2d { in_channels, out_channels, groups, .. } => {
                let w = &layer.param("weight").unwrap().values;
                let [oc, icg, kh, kw] = w.shape();
                let slice_len = icg * kh * kw;
                if *groups == 1 {
                    for o in 0..oc {
                        let atom = deps.atom_of(deps.out_maps[idx][o]);
                        add(atom, &w.data()[o * slice_len..(o + 1) * slice_len]);
                        if let Some(b) = layer.param("bias") {
                            add(atom, &b.values.data()[o..o + 1]);
                        }
                    }
                    // consumer side: each input channel's column
                    let im = in_map(0);
                    for ic in 0..*in_channels {
                        let mut col = Vec::with_capacity(oc * kh * kw);
                        for o in 0..oc {
                            let base = (o * icg + ic) * kh * kw;
                            col.extend_from_slice(&w.data()[base..base + kh * kw]);
                        }
                        add(deps.atom_of(im[ic]), &col);
                    }
                } else {
                    let m = out_channels / in_channels;
                    let im = in_map(0);
                    for o in 0..oc {
                        let atom = deps.atom_of(im[o / m]);
                        add(atom, &w.data()[o * slice_len..(o + 1) * slice_len]);
                    }
                }
            }
            LayerKind::BatchNorm { channels } => {
                let im = in_map(0);
                for c in 0..*channels {
                    let atom = deps.atom_of(im[c]);
                    add(atom, &layer.param("gamma").unwrap().values.data()[c..c + 1]);
                    add(atom, &layer.param("beta").unwrap().values.data()[c..c + 1]);
                }
            }
            LayerKind::Linear { in_features, out_features, .. } => {
                let w = &layer.param("weight").unwrap().values;
                for o in 0..*out_features {
                    let atom = deps.atom_of(deps.out_maps[idx][o]);
                    add(atom, &w.data()[o * in_features..(o + 1) * in_features]);
                    if let Some(b) = layer.param("bias") {
                        add(atom, &b.values.data()[o..o + 1]);
                    }
                }
                let im = in_map(0);
                if im.len() == *in_features {
                    for f in 0..*in_features {
                        let col: Vec<f64> =
                            (0..*out_features).map(|o| w.data()[o * in_features + f]).collect();
                        add(deps.atom_of(im[f]), &col);
                    }
                }
            }
            LayerKind::Ema { channels, groups } => {
                let cpg = channels / groups;
                let im = in_map(0);
                let w1 = &layer.param("w1").unwrap().values;
                let w3 = &layer.param("w3").unwrap().values;
                for j in 0..cpg {
                    let atom = deps.atom_of(im[j]);
                    add(atom, &w1.data()[j * cpg..(j + 1) * cpg]);
                    add(atom, &w3.data()[j * cpg * 9..(j + 1) * cpg * 9]);
                    let col1: Vec<f64> = (0..cpg).map(|o| w1.data()[o * cpg + j]).collect();
                    add(atom, &col1);
                    let mut col3 = Vec::with_capacity(cpg * 9);
                    for o in 0..cpg {
                        let base = (o * cpg + j) * 9;
                        col3.extend_from_slice(&w3.data()[base..base + 9]);
                    }
                    add(atom, &col3);
                    for pname in ["b1", "b3", "gn_gamma", "gn_beta"] {
                        add(atom, &layer.param(pname).unwrap().values.data()[j..j + 1]);
                    }
                }
            }
            _ => {}
        }
    }
    scores
}

/// Apply a plan, producing a new graph with channels sliced out of every
/// coupled tensor. Masks must agree across each dependency atom; dropping a
/// protected (input/output-adjacent) channel is refused.
pub fn apply_plan(graph: &ModelGraph, plan: &PruningPlan) -> Result<ModelGraph> {
    let deps = build_deps(graph)?;

    // resolve a fate per atom from the masks, demanding consistency
    let mut fate: Vec<Option<bool>> = vec![None; deps.slot_count()];
    for (idx, layer) in graph.layers().iter().enumerate() {
        let mask = match plan.masks.get(&layer.name) {
            Some(m) => m,
            None => continue,
        };
        for (pos, &slot) in deps.out_maps[idx].iter().enumerate() {
            let oid = orig_id(layer, pos);
            if oid >= mask.len() {
                return Err(Error::Plan(format!(
                    "mask for '{}' has {} entries, channel id {} out of range",
                    layer.name,
                    mask.len(),
                    oid
                )));
            }
            let keep = mask[oid] != 0;
            let atom = deps.atom_of(slot);
            match fate[atom] {
                None => fate[atom] = Some(keep),
                Some(prev) if prev != keep => {
                    return Err(Error::Plan(format!(
                        "masks disagree on a dependency group at '{}' channel {}",
                        layer.name, pos
                    )))
                }
                _ => {}
            }
        }
    }
    let keep_atom = |slot: usize| fate[deps.atom_of(slot)].unwrap_or(true);

    for slot in 0..deps.slot_count() {
        if !keep_atom(slot) && deps.is_protected(slot) {
            return Err(Error::Plan(
                "plan drops a protected (input- or output-adjacent) channel".into(),
            ));
        }
    }

    let mut pruned = ModelGraph::new();
    for (idx, layer) in graph.layers().iter().enumerate() {
        let out_map = &deps.out_maps[idx];
        let keep_out: Vec<usize> =
            (0..out_map.len()).filter(|&p| keep_atom(out_map[p])).collect();
        if keep_out.is_empty() {
            return Err(Error::Plan(format!("plan empties layer '{}'", layer.name)));
        }
        let kept_ids: Vec<usize> = keep_out.iter().map(|&p| orig_id(layer, p)).collect();
        let all_kept = keep_out.len() == out_map.len();

        let in_keep = |i: usize| -> Vec<usize> {
            let im = &deps.out_maps[graph.index_of(&layer.inbound[i]).unwrap()];
            (0..im.len()).filter(|&p| keep_atom(im[p])).collect()
        };

        let mut new_layer = layer.clone();
        new_layer.channel_ids =
            if all_kept && layer.channel_ids.is_none() { None } else { Some(kept_ids) };

        match &mut new_layer.kind {
            LayerKind::Input { .. } | LayerKind::Silu | LayerKind::Sigmoid | LayerKind::Add
            | LayerKind::Concat | LayerKind::GlobalAvgPool => {}
            LayerKind::Conv2d { in_channels, out_channels, groups, .. } => {
                let ki = in_keep(0);
                if *groups == 1 {
                    for p in &mut new_layer.params {
                        if p.name == "weight" {
                            p.values = p.values.select_dim0(&keep_out).select_dim1(&ki);
                        } else if p.name == "bias" {
                            p.values = p.values.select_dim0(&keep_out);
                        }
                    }
                    *in_channels = ki.len();
                    *out_channels = keep_out.len();
                } else {
                    for p in &mut new_layer.params {
                        if p.name == "weight" {
                            p.values = p.values.select_dim0(&keep_out);
                        }
                    }
                    *in_channels = ki.len();
                    *out_channels = keep_out.len();
                    *groups = ki.len();
                }
            }
            LayerKind::BatchNorm { channels } => {
                for p in &mut new_layer.params {
                    p.values = p.values.select_dim0(&keep_out);
                }
                *channels = keep_out.len();
            }
            LayerKind::Linear { in_features, out_features, .. } => {
                let im_len = deps.out_maps[graph.index_of(&layer.inbound[0]).unwrap()].len();
                // when the input is flattened spatial features the upstream
                // group is protected, so only the feature==channel case slices
                let ki: Vec<usize> =
                    if im_len == *in_features { in_keep(0) } else { (0..*in_features).collect() };
                for p in &mut new_layer.params {
                    if p.name == "weight" {
                        p.values = p.values.select_dim0(&keep_out).select_dim1(&ki);
                    } else if p.name == "bias" {
                        p.values = p.values.select_dim0(&keep_out);
                    }
                }
                *in_features = ki.len();
                *out_features = keep_out.len();
            }
            LayerKind::Ema { channels, groups } => {
                let cpg = *channels / *groups;
                let j_keep: Vec<usize> =
                    (0..cpg).filter(|&j| keep_atom(deps.out_maps[idx][j])).collect();
                if keep_out.len() != j_keep.len() * *groups {
                    return Err(Error::Plan(format!(
                        "ema '{}': mask breaks equal group sizes",
                        layer.name
                    )));
                }
                for p in &mut new_layer.params {
                    match p.name.as_str() {
                        "w1" | "w3" => p.values = p.values.select_dim0(&j_keep).select_dim1(&j_keep),
                        _ => p.values = p.values.select_dim0(&j_keep),
                    }
                }
                *channels = keep_out.len();
            }
        }
        pruned.push(new_layer)?;
    }
    Ok(pruned)
}
