//! Analytic memory profiling, im2col budget computation and buffer lifetime
//! allocation.
//!
//! The analytic measure is implementation-agnostic: a layer costs its input
//! plus output activation bytes (int8 sizing), with every other
//! simultaneously-live branch tensor added once. Weights are excluded from
//! the SRAM profile and counted against a separate Flash budget.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::ir::{Graph, NodeId, OpKind, TensorId};
use crate::qtensor::Shape;
use crate::{Error, Result};

/// Options controlling how execution is modeled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanOptions {
    /// Model stride-1 depthwise layers as in-place (output shares the input
    /// buffer, plus one channel plane of temporary).
    pub inplace_depthwise: bool,
}

/// Whether a node is eligible for the in-place depthwise path.
pub fn inplace_eligible(graph: &Graph, shapes: &[Shape], id: NodeId) -> bool {
    let node = &graph.nodes[id];
    if node.kind != OpKind::DwConv2d || node.attrs.stride != 1 {
        return false;
    }
    let preds = graph.pred_tensors(id);
    graph.shape_of(preds[0], shapes) == shapes[id]
}

/// One row of the analytic profile.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeMemory {
    pub id: NodeId,
    pub in_bytes: usize,
    pub out_bytes: usize,
    /// All bytes simultaneously live while this node executes.
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Profile {
    pub per_node: Vec<NodeMemory>,
    pub peak: usize,
    pub peak_node: NodeId,
}

fn tensor_bytes(graph: &Graph, shapes: &[Shape], t: TensorId) -> usize {
    graph.shape_of(t, shapes).elems()
}

/// Last node index that consumes each tensor. The graph output lives to the
/// end.
pub fn last_use(graph: &Graph) -> HashMap<TensorId, usize> {
    let mut last: HashMap<TensorId, usize> = HashMap::new();
    last.insert(TensorId::Input, 0);
    for node in &graph.nodes {
        for t in graph.pred_tensors(node.id) {
            last.insert(t, node.id);
        }
    }
    let out = TensorId::Node(graph.nodes.len() - 1);
    last.insert(out, graph.nodes.len() - 1);
    last
}

/// Analytic per-layer memory: input + output activation bytes plus any other
/// live branch tensors (shared inputs counted once). In-place depthwise
/// layers cost one map plus one channel plane.
pub fn analytic_profile(graph: &Graph, opts: PlanOptions) -> Result<Profile> {
    let shapes = crate::ir::validate(graph)?;
    let last = last_use(graph);
    let mut per_node = Vec::with_capacity(graph.nodes.len());
    let mut peak = 0usize;
    let mut peak_node = 0;
    for node in &graph.nodes {
        let preds = graph.pred_tensors(node.id);
        let in_bytes: usize = {
            let mut seen = std::collections::BTreeSet::new();
            for t in &preds {
                seen.insert(*t);
            }
            seen.iter().map(|t| tensor_bytes(graph, &shapes, *t)).sum()
        };
        let out_bytes = shapes[node.id].elems();
        let inplace = opts.inplace_depthwise && inplace_eligible(graph, &shapes, node.id);
        // Everything live while this node runs: its inputs and output plus
        // earlier tensors still needed later (e.g. a residual shortcut).
        let mut live = std::collections::BTreeSet::new();
        for t in &preds {
            live.insert(*t);
        }
        for (t, &l) in &last {
            let alive_before = match t {
                TensorId::Input => true,
                TensorId::Node(n) => *n < node.id,
            };
            if alive_before && l > node.id {
                live.insert(*t);
            }
        }
        let others: usize = live
            .iter()
            .filter(|t| !preds.contains(t))
            .map(|t| tensor_bytes(graph, &shapes, *t))
            .sum();
        let total = if inplace {
            let plane = out_bytes / shapes[node.id].channels();
            in_bytes + plane + others
        } else {
            in_bytes + out_bytes + others
        };
        if total > peak {
            peak = total;
            peak_node = node.id;
        }
        per_node.push(NodeMemory { id: node.id, in_bytes, out_bytes, total });
    }
    Ok(Profile { per_node, peak, peak_node })
}

/// Analytic peak over the suffix starting at node `from`, for the per-layer
/// remainder after a patched prefix. Tensors produced before `from` are
/// already released except the suffix's own input (node `from - 1`'s
/// output).
pub fn analytic_peak_range(graph: &Graph, opts: PlanOptions, from: usize) -> Result<usize> {
    let shapes = crate::ir::validate(graph)?;
    let last = last_use(graph);
    let mut peak = 0usize;
    for node in &graph.nodes[from..] {
        let preds = graph.pred_tensors(node.id);
        let mut live = std::collections::BTreeSet::new();
        for t in &preds {
            live.insert(*t);
        }
        for (t, &l) in &last {
            let alive_before = match t {
                TensorId::Input => from == 0,
                TensorId::Node(n) => *n < node.id && (*n + 1 >= from),
            };
            if alive_before && l > node.id {
                live.insert(*t);
            }
        }
        let inplace = opts.inplace_depthwise && inplace_eligible(graph, &shapes, node.id);
        let mut total: usize = live.iter().map(|t| tensor_bytes(graph, &shapes, *t)).sum();
        if inplace {
            total += shapes[node.id].elems() / shapes[node.id].channels();
        } else {
            total += shapes[node.id].elems();
        }
        peak = peak.max(total);
    }
    Ok(peak)
}

/// The im2col budget: `M` is the largest single transformed column over all
/// standard conv layers (k^2 * C_in bytes, linear counts as 1x1); each conv
/// then tiles `floor(M / column)` output columns at a time. Depthwise
/// convolutions use direct kernels and are excluded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Im2colBudget {
    pub m: usize,
    /// Tile width per conv-like node id.
    pub tile_width: HashMap<NodeId, usize>,
}

pub fn im2col_budget(graph: &Graph) -> Result<Im2colBudget> {
    crate::ir::validate(graph)?;
    let mut m = 0usize;
    let mut columns: Vec<(NodeId, usize)> = Vec::new();
    for node in &graph.nodes {
        match node.kind {
            OpKind::Conv2d | OpKind::Linear => {
                let col = node.attrs.kernel * node.attrs.kernel * node.attrs.in_channels;
                columns.push((node.id, col));
                m = m.max(col);
            }
            _ => {}
        }
    }
    let tile_width = columns.into_iter().map(|(id, col)| (id, (m / col).max(1))).collect();
    Ok(Im2colBudget { m, tile_width })
}

/// A planned buffer: lifetime in node indices and its assigned arena range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedBuffer {
    pub tensor: String,
    pub size: usize,
    pub first_use: usize,
    pub last_use: usize,
    pub offset: usize,
}

/// Complete memory plan for per-layer execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryPlan {
    pub arena: usize,
    pub buffers: Vec<PlannedBuffer>,
    pub m: usize,
    pub tile_width: HashMap<NodeId, usize>,
    pub profile: Profile,
    /// Node ids executed as in-place depthwise (output aliases input).
    pub inplace_nodes: Vec<NodeId>,
    /// Tensor key -> buffer key for in-place aliased outputs.
    #[serde(default)]
    pub aliases: HashMap<String, String>,
    pub flash_bytes: u64,
}

pub(crate) fn tensor_key(t: TensorId) -> String {
    match t {
        TensorId::Input => "input".to_string(),
        TensorId::Node(id) => format!("node{id}"),
    }
}

impl MemoryPlan {
    pub fn offset_of(&self, t: TensorId) -> Option<usize> {
        let key = tensor_key(t);
        let key = self.aliases.get(&key).unwrap_or(&key);
        self.buffers.iter().find(|b| &b.tensor == key).map(|b| b.offset)
    }
}

struct Interval {
    tensor: String,
    size: usize,
    first: usize,
    last: usize,
}

/// Greedy best-fit-by-size offset assignment: buffers are placed in
/// decreasing size order at the lowest offset where they fit against every
/// lifetime-overlapping buffer already placed.
fn assign_offsets(intervals: &[Interval]) -> Vec<PlannedBuffer> {
    let mut order: Vec<usize> = (0..intervals.len()).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(intervals[i].size), i));
    let mut placed: Vec<PlannedBuffer> = Vec::with_capacity(intervals.len());
    let mut placed_idx: Vec<usize> = Vec::with_capacity(intervals.len());
    for &i in &order {
        let iv = &intervals[i];
        let overlapping: Vec<&PlannedBuffer> = placed
            .iter()
            .enumerate()
            .filter(|(j, _)| {
                let other = &intervals[placed_idx[*j]];
                iv.first <= other.last && other.first <= iv.last
            })
            .map(|(_, b)| b)
            .collect();
        let mut candidates: Vec<usize> = vec![0];
        candidates.extend(overlapping.iter().map(|b| b.offset + b.size));
        candidates.sort_unstable();
        let offset = candidates
            .into_iter()
            .find(|&off| {
                overlapping
                    .iter()
                    .all(|b| off + iv.size <= b.offset || b.offset + b.size <= off)
            })
            .expect("a feasible offset always exists past every overlap");
        placed.push(PlannedBuffer {
            tensor: iv.tensor.clone(),
            size: iv.size,
            first_use: iv.first,
            last_use: iv.last,
            offset,
        });
        placed_idx.push(i);
    }
    // Restore definition order for stable output.
    let mut by_name: HashMap<&str, usize> = HashMap::new();
    for (j, b) in placed.iter().enumerate() {
        by_name.insert(b.tensor.as_str(), j);
    }
    intervals.iter().map(|iv| placed[by_name[iv.tensor.as_str()]].clone()).collect()
}

/// Verify pairwise disjointness of concurrently live ranges.
pub fn verify_no_overlap(buffers: &[PlannedBuffer]) -> Result<()> {
    for (i, a) in buffers.iter().enumerate() {
        for b in &buffers[i + 1..] {
            let time = a.first_use <= b.last_use && b.first_use <= a.last_use;
            let space = a.offset < b.offset + b.size && b.offset < a.offset + a.size;
            if time && space {
                return Err(Error::Invalid(format!(
                    "buffers {} and {} overlap in time and space",
                    a.tensor, b.tensor
                )));
            }
        }
    }
    Ok(())
}

/// Build the complete plan: analytic profile, im2col budget and a verified
/// greedy buffer allocation. Tensor lifetimes run from producer to last
/// consumer; the im2col scratch is charged as a persistent `M`-byte buffer.
pub fn plan_graph(graph: &Graph, opts: PlanOptions) -> Result<MemoryPlan> {
    let shapes = crate::ir::validate(graph)?;
    let profile = analytic_profile(graph, opts)?;
    let budget = im2col_budget(graph)?;
    let last = last_use(graph);
    let n = graph.nodes.len();

    let mut inplace_nodes = Vec::new();
    // In-place depthwise: the node's output aliases its input buffer, so the
    // pair becomes one interval spanning both lifetimes.
    let mut alias: HashMap<TensorId, TensorId> = HashMap::new();
    if opts.inplace_depthwise {
        for node in &graph.nodes {
            if inplace_eligible(graph, &shapes, node.id) {
                let src = graph.pred_tensors(node.id)[0];
                // Only alias when the input dies here (no other consumer).
                if last[&src] == node.id {
                    let root = alias.get(&src).copied().unwrap_or(src);
                    alias.insert(TensorId::Node(node.id), root);
                    inplace_nodes.push(node.id);
                }
            }
        }
    }

    fn note(
        t: TensorId,
        size: usize,
        first: usize,
        lastu: usize,
        merged: &mut HashMap<TensorId, (usize, usize, usize)>,
        order: &mut Vec<TensorId>,
    ) {
        let e = merged.entry(t).or_insert_with(|| {
            order.push(t);
            (size, first, lastu)
        });
        e.0 = e.0.max(size);
        e.1 = e.1.min(first);
        e.2 = e.2.max(lastu);
    }

    let mut intervals: Vec<Interval> = Vec::new();
    let mut merged: HashMap<TensorId, (usize, usize, usize)> = HashMap::new();
    let mut order: Vec<TensorId> = Vec::new();
    note(
        TensorId::Input,
        graph.input.shape().elems(),
        0,
        last[&TensorId::Input],
        &mut merged,
        &mut order,
    );
    for node in &graph.nodes {
        let t = TensorId::Node(node.id);
        let root = alias.get(&t).copied().unwrap_or(t);
        note(root, shapes[node.id].elems(), node.id, last[&t], &mut merged, &mut order);
        if inplace_nodes.contains(&node.id) {
            // One-channel-plane temporary live during the node.
            intervals.push(Interval {
                tensor: format!("dwtemp{}", node.id),
                size: shapes[node.id].elems() / shapes[node.id].channels(),
                first: node.id,
                last: node.id,
            });
        }
    }
    for t in order {
        let (size, first, lastu) = merged[&t];
        intervals.push(Interval { tensor: tensor_key(t), size, first, last: lastu });
    }
    if budget.m > 0 {
        intervals.push(Interval { tensor: "im2col".into(), size: budget.m, first: 0, last: n - 1 });
    }

    let buffers = assign_offsets(&intervals);
    verify_no_overlap(&buffers)?;
    let arena = buffers.iter().map(|b| b.offset + b.size).max().unwrap_or(0);
    let flash_bytes = crate::ir::count_flops_params(graph)?.param_bytes;
    let aliases = alias.iter().map(|(k, v)| (tensor_key(*k), tensor_key(*v))).collect();
    Ok(MemoryPlan {
        arena,
        buffers,
        m: budget.m,
        tile_width: budget.tile_width,
        profile,
        inplace_nodes,
        aliases,
        flash_bytes,
    })
}

/// Brute-force max-live-set lower bound for allocator quality checks.
pub fn max_live_set(graph: &Graph) -> Result<usize> {
    let shapes = crate::ir::validate(graph)?;
    let last = last_use(graph);
    let mut peak = 0usize;
    for step in 0..graph.nodes.len() {
        let mut total = 0usize;
        if last[&TensorId::Input] >= step {
            total += graph.input.shape().elems();
        }
        for node in &graph.nodes[..=step] {
            let t = TensorId::Node(node.id);
            if last[&t] >= step || node.id == step {
                total += shapes[node.id].elems();
            }
        }
        peak = peak.max(total);
    }
    Ok(peak)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::GraphBuilder;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn first_mobilenet_conv_memory() {
        let mut b = GraphBuilder::new(224, 224, 3);
        b.conv(None, 3, 2, 3, 32, true);
        let g = b.finish();
        let p = analytic_profile(&g, PlanOptions::default()).unwrap();
        assert_eq!(p.per_node[0].in_bytes, 3 * 224 * 224);
        assert_eq!(p.per_node[0].out_bytes, 32 * 112 * 112);
        assert_eq!(p.peak, 3 * 224 * 224 + 32 * 112 * 112);
    }

    #[test]
    fn pointwise_conv_sum() {
        let mut b = GraphBuilder::new(8, 8, 4);
        b.conv(None, 1, 1, 4, 4, false);
        let g = b.finish();
        let p = analytic_profile(&g, PlanOptions::default()).unwrap();
        assert_eq!(p.per_node[0].total, 512);
    }

    #[test]
    fn shared_residual_input_counted_once() {
        let mut gb = GraphBuilder::new(8, 8, 8);
        let stem = gb.conv(None, 1, 1, 8, 8, false);
        let e = gb.conv(Some(stem), 1, 1, 8, 16, true);
        let d = gb.dwconv(e, 3, 1, 16, true);
        let pj = gb.conv(Some(d), 1, 1, 16, 8, false);
        gb.add(stem, pj, 8);
        let g = gb.finish();
        let p = analytic_profile(&g, PlanOptions::default()).unwrap();
        // While the dwconv runs, live tensors: stem output (shortcut),
        // expand output (input), dw output. The shortcut appears once.
        let dw_total = p.per_node[d].total;
        assert_eq!(dw_total, 8 * 8 * 16 + 8 * 8 * 16 + 8 * 8 * 8);
    }

    #[test]
    fn im2col_budget_examples() {
        // columns {9*16=144, 25*32=800} -> M=800, tiles {5, 1}
        let mut b = GraphBuilder::new(16, 16, 16);
        let c1 = b.conv(None, 3, 1, 16, 32, true);
        b.conv(Some(c1), 5, 1, 32, 8, false);
        let g = b.finish();
        let budget = im2col_budget(&g).unwrap();
        assert_eq!(budget.m, 800);
        assert_eq!(budget.tile_width[&0], 5);
        assert_eq!(budget.tile_width[&1], 1);
    }

    #[test]
    fn single_layer_budget_is_own_column() {
        let mut b = GraphBuilder::new(8, 8, 4);
        b.conv(None, 3, 1, 4, 4, false);
        let g = b.finish();
        let budget = im2col_budget(&g).unwrap();
        assert_eq!(budget.m, 36);
        assert_eq!(budget.tile_width[&0], 1);
    }

    #[test]
    fn chain_reuses_dead_buffer() {
        // input -> A -> B -> C; by step 2 the input and A are dead, so B/C
        // can reuse their space and the arena stays at the live-set peak.
        let mut b = GraphBuilder::new(8, 8, 4);
        let a = b.conv(None, 1, 1, 4, 8, false);
        let c = b.conv(Some(a), 1, 1, 8, 4, false);
        b.conv(Some(c), 1, 1, 4, 4, false);
        let g = b.finish();
        let plan = plan_graph(&g, PlanOptions::default()).unwrap();
        let act_arena = plan.arena - plan.m;
        assert_eq!(act_arena, max_live_set(&g).unwrap());
        verify_no_overlap(&plan.buffers).unwrap();
    }

    #[test]
    fn inplace_depthwise_shares_buffer_and_plane() {
        let mut b = GraphBuilder::new(8, 8, 8);
        let c = b.conv(None, 1, 1, 8, 8, true);
        b.dwconv(c, 3, 1, 8, true);
        let g = b.finish();
        let off = analytic_profile(&g, PlanOptions::default()).unwrap();
        let on = analytic_profile(&g, PlanOptions { inplace_depthwise: true }).unwrap();
        let n = 8 * 8 * 8;
        assert_eq!(off.per_node[1].total, 2 * n);
        assert_eq!(on.per_node[1].total, n + n / 8);
        let plan = plan_graph(&g, PlanOptions { inplace_depthwise: true }).unwrap();
        assert_eq!(plan.inplace_nodes, vec![1]);
        assert_eq!(
            plan.offset_of(TensorId::Node(0)),
            plan.offset_of(TensorId::Node(1)),
            "in-place input and output share a buffer"
        );
    }

    fn random_chain(seed: u64) -> Graph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = GraphBuilder::new(12, 12, 4);
        let mut cur = None;
        let mut c = 4;
        let mut shortcut: Option<(NodeId, usize)> = None;
        for i in 0..rng.gen_range(3..8) {
            let out_c = [4, 8, 12][rng.gen_range(0..3)];
            let id = b.conv(cur, [1, 3][rng.gen_range(0..2)], 1, c, out_c, rng.gen_bool(0.5));
            if let Some((s, sc)) = shortcut {
                if sc == out_c && rng.gen_bool(0.5) {
                    let a = b.add(s, id, out_c);
                    cur = Some(a);
                    shortcut = None;
                    c = out_c;
                    continue;
                }
            }
            if rng.gen_bool(0.3) && i > 0 {
                shortcut = Some((id, out_c));
            }
            cur = Some(id);
            c = out_c;
        }
        b.finish()
    }

    #[test]
    fn allocator_stays_within_twice_lower_bound() {
        let mut checked = 0;
        for seed in 0..1000 {
            let g = random_chain(seed);
            if crate::ir::validate(&g).is_err() {
                continue;
            }
            checked += 1;
            let plan = plan_graph(&g, PlanOptions::default()).unwrap();
            verify_no_overlap(&plan.buffers).unwrap();
            let lb = max_live_set(&g).unwrap();
            assert!(plan.arena >= lb, "seed {seed}");
            assert!(plan.arena <= 2 * (lb + plan.m), "seed {seed}: {} > 2*{}", plan.arena, lb + plan.m);
        }
        assert!(checked > 500, "generator should mostly produce valid graphs");
    }

    #[test]
    fn mobilenet_imbalance_is_detected() {
        let g = crate::ir::mobilenet_v2_like(1.0, 224, 10).unwrap();
        let p = analytic_profile(&g, PlanOptions::default()).unwrap();
        let mut totals: Vec<usize> = p.per_node.iter().map(|n| n.total).collect();
        totals.sort_unstable();
        let median = totals[totals.len() / 2];
        assert!(p.peak as f64 / median as f64 >= 4.0, "peak {} median {median}", p.peak);
    }
}
