//! Channel dependency analysis.
//!
//! Every channel in the graph originates at a slot-creating layer (the input,
//! a dense convolution or a linear layer). All other layers propagate,
//! duplicate (depthwise/concat) or merge (residual add, grouped attention)
//! those slots. Two union-finds track the structure:
//!
//! - slots that must live or die together form an *atom* (e.g. the two
//!   concat positions fed by one ghost primary channel, residual partners,
//!   the per-group copies coupled by an EMA layer);
//! - atoms that belong to one rankable channel dimension form a *group* —
//!   the scope a pruning ratio is applied over.
//!
//! Groups touching the graph input or a sink are protected: removing those
//! channels would change the model's interface. Groups merged by a residual
//! add are flagged as trunks; the default planning scope leaves them intact
//! so a preset ratio translates into a comparable parameter reduction rather
//! than a quadratic one.

use crate::error::{Error, Result};
use crate::graph::{LayerKind, ModelGraph};

#[derive(Debug, Clone)]
pub(crate) struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new() -> Self {
        Self { parent: Vec::new() }
    }

    fn make(&mut self) -> usize {
        self.parent.push(self.parent.len());
        self.parent.len() - 1
    }

    pub(crate) fn find(&self, mut x: usize) -> usize {
        while self.parent[x] != x {
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // deterministic: lower root wins
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

#[derive(Debug)]
pub struct Deps {
    /// Per layer: slot id for each output-channel position.
    pub(crate) out_maps: Vec<Vec<usize>>,
    pub(crate) slot_uf: UnionFind,
    /// Origin group id of each slot.
    group_of_slot: Vec<usize>,
    group_uf: UnionFind,
    protected: Vec<bool>,
    trunk: Vec<bool>,
}

impl Deps {
    pub(crate) fn atom_of(&self, slot: usize) -> usize {
        self.slot_uf.find(slot)
    }

    pub(crate) fn group_of(&self, slot: usize) -> usize {
        self.group_uf.find(self.group_of_slot[slot])
    }

    pub(crate) fn is_protected(&self, slot: usize) -> bool {
        self.protected[self.group_of(slot)]
    }

    pub(crate) fn is_trunk(&self, slot: usize) -> bool {
        self.trunk[self.group_of(slot)]
    }

    pub(crate) fn slot_count(&self) -> usize {
        self.group_of_slot.len()
    }
}

pub fn build_deps(graph: &ModelGraph) -> Result<Deps> {
    let mut slot_uf = UnionFind::new();
    let mut group_uf = UnionFind::new();
    let mut group_of_slot: Vec<usize> = Vec::new();
    let mut protect_requests: Vec<usize> = Vec::new();
    let mut trunk_requests: Vec<usize> = Vec::new();
    let mut out_maps: Vec<Vec<usize>> = Vec::with_capacity(graph.len());

    let fresh_slots = |n: usize,
                           slot_uf: &mut UnionFind,
                           group_uf: &mut UnionFind,
                           group_of_slot: &mut Vec<usize>|
     -> (Vec<usize>, usize) {
        let gid = group_uf.make();
        let slots: Vec<usize> = (0..n)
            .map(|_| {
                let s = slot_uf.make();
                group_of_slot.push(gid);
                s
            })
            .collect();
        (slots, gid)
    };

    for (idx, layer) in graph.layers().iter().enumerate() {
        let ins: Vec<usize> = layer.inbound.iter().map(|n| graph.index_of(n).unwrap()).collect();
        let out_map: Vec<usize> = match &layer.kind {
            LayerKind::Input { channels } => {
                let (slots, gid) = fresh_slots(*channels, &mut slot_uf, &mut group_uf, &mut group_of_slot);
                protect_requests.push(gid);
                slots
            }
            LayerKind::Conv2d { in_channels, out_channels, groups, .. } => {
                if *groups == 1 {
                    let (slots, _) = fresh_slots(*out_channels, &mut slot_uf, &mut group_uf, &mut group_of_slot);
                    slots
                } else if groups == in_channels {
                    // depthwise (possibly with a channel multiplier): outputs
                    // are tied to their source channel
                    let m = out_channels / in_channels;
                    let in_map = &out_maps[ins[0]];
                    (0..*out_channels).map(|j| in_map[j / m]).collect()
                } else {
                    return Err(Error::Graph(format!(
                        "pruning does not support conv '{}' with groups {} (only dense or depthwise)",
                        layer.name, groups
                    )));
                }
            }
            LayerKind::BatchNorm { .. }
            | LayerKind::Silu
            | LayerKind::Sigmoid
            | LayerKind::GlobalAvgPool => out_maps[ins[0]].clone(),
            LayerKind::Add => {
                let first = out_maps[ins[0]].clone();
                for &other in &ins[1..] {
                    let om = &out_maps[other];
                    if om.len() != first.len() {
                        return Err(Error::Graph(format!(
                            "add '{}' joins different widths",
                            layer.name
                        )));
                    }
                    for (a, b) in first.iter().zip(om.iter()) {
                        slot_uf.union(*a, *b);
                        group_uf.union(group_of_slot[*a], group_of_slot[*b]);
                    }
                }
                for &s in &first {
                    trunk_requests.push(group_of_slot[s]);
                }
                first
            }
            LayerKind::Concat => {
                let mut map = Vec::new();
                for &i in &ins {
                    map.extend_from_slice(&out_maps[i]);
                }
                map
            }
            LayerKind::Linear { in_features, out_features, .. } => {
                let in_map = &out_maps[ins[0]];
                if in_map.len() != *in_features {
                    // consumes flattened spatial features; freeze the source
                    for &s in in_map {
                        protect_requests.push(group_of_slot[s]);
                    }
                }
                let (slots, _) = fresh_slots(*out_features, &mut slot_uf, &mut group_uf, &mut group_of_slot);
                slots
            }
            LayerKind::Ema { channels, groups } => {
                let in_map = out_maps[ins[0]].clone();
                let cpg = channels / groups;
                for j in 0..cpg {
                    for g in 1..*groups {
                        let (a, b) = (in_map[j], in_map[g * cpg + j]);
                        slot_uf.union(a, b);
                        group_uf.union(group_of_slot[a], group_of_slot[b]);
                    }
                }
                in_map
            }
        };
        out_maps.push(out_map);
        let _ = idx;
    }

    for sink in graph.sink_indices() {
        for &s in &out_maps[sink] {
            protect_requests.push(group_of_slot[s]);
        }
    }

    let n_groups = group_uf.parent.len();
    let mut protected = vec![false; n_groups];
    for g in protect_requests {
        protected[group_uf.find(g)] = true;
    }
    let mut trunk = vec![false; n_groups];
    for g in trunk_requests {
        trunk[group_uf.find(g)] = true;
    }
    // merged roots may have moved; normalize both flags onto final roots
    for g in 0..n_groups {
        let r = group_uf.find(g);
        if protected[g] {
            protected[r] = true;
        }
        if trunk[g] {
            trunk[r] = true;
        }
    }

    Ok(Deps { out_maps, slot_uf, group_of_slot, group_uf, protected, trunk })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphBuilder;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn residual_partners_share_atoms_and_trunk_flag() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = GraphBuilder::new(&mut rng);
        let img = b.input("img", 3);
        let c1 = b.conv("c1", &img, 8, 3, 1, 1, false);
        let c2 = b.conv("c2", &c1, 8, 3, 1, 1, false);
        let a = b.add("res", &[&c1, &c2]);
        b.conv("out", &a, 2, 1, 1, 1, true);
        let g = b.finish();
        let deps = build_deps(&g).unwrap();
        let m1 = &deps.out_maps[g.index_of("c1").unwrap()];
        let m2 = &deps.out_maps[g.index_of("c2").unwrap()];
        for (a, b) in m1.iter().zip(m2.iter()) {
            assert_eq!(deps.atom_of(*a), deps.atom_of(*b));
        }
        assert!(deps.is_trunk(m1[0]));
        // the final conv's outputs are sink-protected
        let mo = &deps.out_maps[g.index_of("out").unwrap()];
        assert!(deps.is_protected(mo[0]));
    }

    #[test]
    fn ema_couples_channels_across_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = GraphBuilder::new(&mut rng);
        let img = b.input("img", 3);
        let c = b.conv("c", &img, 8, 3, 1, 1, false);
        b.ema("e", &c, 2);
        let g = b.finish();
        let deps = build_deps(&g).unwrap();
        let m = &deps.out_maps[g.index_of("c").unwrap()];
        // channel j and j+4 live together, j and j+1 do not
        assert_eq!(deps.atom_of(m[0]), deps.atom_of(m[4]));
        assert_ne!(deps.atom_of(m[0]), deps.atom_of(m[1]));
    }

    #[test]
    fn depthwise_propagates_slots() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut b = GraphBuilder::new(&mut rng);
        let img = b.input("img", 3);
        let c = b.conv("c", &img, 4, 3, 1, 1, false);
        let d = b.depthwise("dw", &c, 5, 1, 1);
        b.concat("cat", &[&c, &d]);
        let g = b.finish();
        let deps = build_deps(&g).unwrap();
        let mc = &deps.out_maps[g.index_of("c").unwrap()];
        let cat = &deps.out_maps[g.index_of("cat").unwrap()];
        assert_eq!(cat.len(), 8);
        assert_eq!(deps.atom_of(cat[0]), deps.atom_of(cat[4]));
        assert_eq!(deps.atom_of(cat[0]), deps.atom_of(mc[0]));
    }
}
