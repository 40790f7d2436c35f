//! Graph network building blocks on top of [`crate::adiff`].
//!
//! Every layer works on a *batch* of graphs stacked row-wise: feature
//! tensors have one row per vertex of every frame, and edge lists carry
//! batch-global vertex ids (see [`Graph::batched`]).

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adiff::{BatchStats, BnMode, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geom::{dist, Point3};

pub const GAT_HEADS: usize = 4;
pub const GAT_LEAKY_SLOPE: f64 = 0.2;
pub const DEFAULT_LEVELS: usize = 5;
pub const DEFAULT_BASE_RADIUS: f64 = 2.5;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Directed edge list; messages flow `src[e] → dst[e]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    pub vertex_count: usize,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
}

impl Graph {
    /// Both directions of every undirected pair, plus optional self-loops.
    pub fn from_pairs(vertex_count: usize, pairs: &[(usize, usize)], self_loops: bool) -> Self {
        let mut src = Vec::with_capacity(2 * pairs.len() + vertex_count);
        let mut dst = Vec::with_capacity(src.capacity());
        if self_loops {
            src.extend(0..vertex_count);
            dst.extend(0..vertex_count);
        }
        for &(i, j) in pairs {
            src.push(i);
            dst.push(j);
            src.push(j);
            dst.push(i);
        }
        Self {
            vertex_count,
            src,
            dst,
        }
    }

    pub fn edge_count(&self) -> usize {
        self.src.len()
    }

    /// `copies` disjoint copies with vertex ids offset by `k · vertex_count`.
    pub fn batched(&self, copies: usize) -> Self {
        let n = self.vertex_count;
        let e = self.edge_count();
        let mut src = Vec::with_capacity(copies * e);
        let mut dst = Vec::with_capacity(copies * e);
        for k in 0..copies {
            src.extend(self.src.iter().map(|&v| v + k * n));
            dst.extend(self.dst.iter().map(|&v| v + k * n));
        }
        Self {
            vertex_count: copies * n,
            src,
            dst,
        }
    }

    /// Disjoint union, in order.
    pub fn concat(graphs: &[Graph]) -> Self {
        let mut out = Self {
            vertex_count: 0,
            src: Vec::new(),
            dst: Vec::new(),
        };
        for g in graphs {
            let off = out.vertex_count;
            out.src.extend(g.src.iter().map(|&v| v + off));
            out.dst.extend(g.dst.iter().map(|&v| v + off));
            out.vertex_count += g.vertex_count;
        }
        out
    }

    pub fn in_degree(&self) -> Vec<usize> {
        let mut d = vec![0; self.vertex_count];
        for &t in &self.dst {
            d[t] += 1;
        }
        d
    }

    pub fn check_no_isolated(&self) -> Result<()> {
        match self.in_degree().iter().position(|&d| d == 0) {
            Some(v) => Err(Error::IsolatedVertex(v)),
            None => Ok(()),
        }
    }

    fn index_pair(&self) -> (Rc<[usize]>, Rc<[usize]>) {
        (Rc::from(self.src.as_slice()), Rc::from(self.dst.as_slice()))
    }
}

/// Greedy farthest point sampling from `seed_index`; ties go to the lowest
/// index.
pub fn farthest_point_sample(points: &[Point3], count: usize, seed_index: usize) -> Result<Vec<usize>> {
    let m = points.len();
    if count == 0 || count > m {
        return Err(Error::Hierarchy(format!("cannot sample {count} of {m} points")));
    }
    if seed_index >= m {
        return Err(Error::Hierarchy(format!("seed index {seed_index} out of {m}")));
    }
    let mut selected = Vec::with_capacity(count);
    let mut taken = vec![false; m];
    let mut min_d = vec![f64::INFINITY; m];
    let mut cur = seed_index;
    loop {
        selected.push(cur);
        taken[cur] = true;
        if selected.len() == count {
            return Ok(selected);
        }
        let mut best = None::<(usize, f64)>;
        for i in 0..m {
            if taken[i] {
                continue;
            }
            min_d[i] = min_d[i].min(dist(&points[i], &points[cur]));
            if best.is_none_or(|(_, d)| min_d[i] > d) {
                best = Some((i, min_d[i]));
            }
        }
        cur = best.expect("untaken point remains").0;
    }
}

/// Undirected pairs `(i, j)`, `i < j`, within `radius`.
pub fn radius_pairs(points: &[Point3], radius: f64) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            if dist(&points[i], &points[j]) <= radius {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Symmetric radius graph with self-loops.
pub fn build_radius_graph(points: &[Point3], radius: f64) -> Result<Graph> {
    if !(radius > 0.0) {
        return Err(Error::Hierarchy(format!("radius must be positive, got {radius}")));
    }
    Ok(Graph::from_pairs(points.len(), &radius_pairs(points, radius), true))
}

/// One resolution of a [`GraphHierarchy`].
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyLevel {
    /// Reference-chain indices of the vertices at this level, ascending.
    pub indices: Vec<usize>,
    /// For levels above 0: position of each vertex within the previous level.
    pub retained: Vec<usize>,
    pub positions: Vec<Point3>,
    pub radius: f64,
    pub graph: Graph,
    /// Position in the next level of each vertex's parent (empty at the top).
    pub parent: Vec<usize>,
}

impl HierarchyLevel {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// FPS-decimated levels built once from a reference conformation.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphHierarchy {
    pub levels: Vec<HierarchyLevel>,
}

impl GraphHierarchy {
    pub fn sizes(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.len()).collect()
    }

    pub fn top(&self) -> &HierarchyLevel {
        self.levels.last().expect("hierarchy has levels")
    }
}

/// Builds `levels` resolutions: level 0 is the whole chain and each next
/// level keeps `ceil(m / 2)` vertices chosen by FPS seeded at the first
/// vertex. Level `k` uses radius `base_radius · 2^k`.
pub fn build_hierarchy(reference: &[Point3], levels: usize, base_radius: f64) -> Result<GraphHierarchy> {
    if levels == 0 {
        return Err(Error::Hierarchy("need at least one level".into()));
    }
    let need = 1usize << (levels - 1);
    if reference.len() < need {
        return Err(Error::Hierarchy(format!(
            "chain of {} vertices is too short for {levels} levels (needs {need})",
            reference.len()
        )));
    }
    if reference.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("reference frame".into()));
    }
    let mut out: Vec<HierarchyLevel> = Vec::with_capacity(levels);
    let indices: Vec<usize> = (0..reference.len()).collect();
    let mut retained: Vec<usize> = Vec::new();
    let mut cur = indices;
    for k in 0..levels {
        let positions: Vec<Point3> = cur.iter().map(|&i| reference[i]).collect();
        let radius = base_radius * (1u64 << k) as f64;
        let graph = build_radius_graph(&positions, radius)?;
        out.push(HierarchyLevel {
            indices: cur.clone(),
            retained: std::mem::take(&mut retained),
            positions,
            radius,
            graph,
            parent: Vec::new(),
        });
        if k + 1 == levels {
            break;
        }
        let level = out.last_mut().expect("just pushed");
        let keep = level.len().div_ceil(2);
        let mut local = farthest_point_sample(&level.positions, keep, 0)?;
        local.sort_unstable();
        level.parent = level
            .positions
            .iter()
            .map(|p| {
                let mut best = (0, f64::INFINITY);
                for (slot, &li) in local.iter().enumerate() {
                    let d = dist(p, &level.positions[li]);
                    if d < best.1 {
                        best = (slot, d);
                    }
                }
                best.0
            })
            .collect();
        cur = local.iter().map(|&li| level.indices[li]).collect();
        retained = local;
    }
    Ok(GraphHierarchy { levels: out })
}

/// Running batch-norm statistics of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            var: vec![1.0; width],
        }
    }

    pub fn update(&mut self, batch: &BatchStats, momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

/// State for one forward pass: the tape, read-only parameters and running
/// statistics, and the batch statistics collected in train mode.
pub struct Pass<'a> {
    pub tape: Tape,
    pub store: &'a ParamStore,
    pub running: &'a BTreeMap<String, RunningStats>,
    pub train: bool,
    pub bn_updates: Vec<(String, BatchStats)>,
}

impl<'a> Pass<'a> {
    pub fn new(store: &'a ParamStore, running: &'a BTreeMap<String, RunningStats>, train: bool) -> Self {
        Self::with_tape(Tape::new(), store, running, train)
    }

    pub fn with_tape(
        tape: Tape,
        store: &'a ParamStore,
        running: &'a BTreeMap<String, RunningStats>,
        train: bool,
    ) -> Self {
        Self {
            tape,
            store,
            running,
            train,
            bn_updates: Vec::new(),
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }
}

/// Uniform(−√(1/fan_in), √(1/fan_in)) initializer.
pub fn uniform_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let b = (1.0 / fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-b..b)).collect();
    Tensor::new(rows, cols, data).expect("sized buffer")
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl DenseParams {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, input: usize, output: usize, bias: bool) -> Self {
        let w = store.add(format!("{name}.W"), uniform_init(rng, input, output, input));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(1, output)));
        Self { w, b, input, output }
    }

    pub fn forward(&self, pass: &mut Pass<'_>, x: Var) -> Result<Var> {
        let w = pass.param(self.w);
        let y = pass.tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = pass.param(b);
                pass.tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub key: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub width: usize,
}

impl BatchNormParams {
    pub fn init(store: &mut ParamStore, name: &str, width: usize) -> Self {
        let gamma = store.add(format!("{name}.bn.gamma"), Tensor::full(1, width, 1.0));
        let beta = store.add(format!("{name}.bn.beta"), Tensor::zeros(1, width));
        Self {
            key: name.to_string(),
            gamma,
            beta,
            width,
        }
    }

    pub fn forward(&self, pass: &mut Pass<'_>, x: Var) -> Result<Var> {
        let g = pass.param(self.gamma);
        let b = pass.param(self.beta);
        if pass.train {
            let (y, stats) = pass.tape.batch_norm(x, g, b, BnMode::Train { eps: BN_EPS })?;
            if let Some(s) = stats {
                pass.bn_updates.push((self.key.clone(), s));
            }
            Ok(y)
        } else {
            let rs = pass
                .running
                .get(&self.key)
                .ok_or_else(|| Error::Checkpoint(format!("missing running stats for {}", self.key)))?;
            let (y, _) = pass.tape.batch_norm(
                x,
                g,
                b,
                BnMode::Eval {
                    mean: &rs.mean,
                    var: &rs.var,
                    eps: BN_EPS,
                },
            )?;
            Ok(y)
        }
    }
}

fn bn_relu(pass: &mut Pass<'_>, bn: &Option<BatchNormParams>, x: Var) -> Result<Var> {
    match bn {
        Some(bn) => {
            let y = bn.forward(pass, x)?;
            Ok(pass.tape.relu(y))
        }
        None => Ok(x),
    }
}

/// What a layer does with a vertex that has no incident edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Isolated {
    Reject,
    /// Treat the missing mean as a zero vector.
    Zero,
}

/// Vertex signal as the mean of the incident edge signals (one row per
/// directed edge, aggregated at its `dst`).
pub fn edge_init_vertex_signal(pass: &mut Pass<'_>, edge_signal: Var, graph: &Graph) -> Result<Var> {
    edge_init_vertex_signal_with(pass, edge_signal, graph, Isolated::Reject)
}

pub fn edge_init_vertex_signal_with(
    pass: &mut Pass<'_>,
    edge_signal: Var,
    graph: &Graph,
    isolated: Isolated,
) -> Result<Var> {
    if isolated == Isolated::Reject {
        graph.check_no_isolated()?;
    }
    let (_, dst) = graph.index_pair();
    pass.tape.segment_mean(edge_signal, dst, graph.vertex_count)
}

/// Plain-slice version of [`edge_init_vertex_signal`].
pub fn edge_init_values(edge_signal: &[Vec<f64>], graph: &Graph) -> Result<Vec<Vec<f64>>> {
    graph.check_no_isolated()?;
    let width = edge_signal.first().map_or(0, Vec::len);
    let mut acc = vec![vec![0.0; width]; graph.vertex_count];
    for (e, &t) in graph.dst.iter().enumerate() {
        for (a, v) in acc[t].iter_mut().zip(&edge_signal[e]) {
            *a += v;
        }
    }
    for (row, d) in acc.iter_mut().zip(graph.in_degree()) {
        row.iter_mut().for_each(|a| *a /= d as f64);
    }
    Ok(acc)
}

/// Mean-aggregated edge convolution:
/// `h_i = W_self·f_i + mean_{(j→i)} W_nb·[f_j ‖ e_ji]`, then optional
/// batch norm and ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeConvParams {
    pub w_self: ParamId,
    pub w_nb: ParamId,
    pub bn: Option<BatchNormParams>,
    pub vertex_width: usize,
    pub edge_width: usize,
    pub output: usize,
}

impl EdgeConvParams {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        vertex_width: usize,
        edge_width: usize,
        output: usize,
        bn: bool,
    ) -> Self {
        let w_self = store.add(
            format!("{name}.W_self"),
            uniform_init(rng, vertex_width, output, vertex_width),
        );
        let nb_in = vertex_width + edge_width;
        let w_nb = store.add(format!("{name}.W_nb"), uniform_init(rng, nb_in, output, nb_in));
        let bn = bn.then(|| BatchNormParams::init(store, name, output));
        Self {
            w_self,
            w_nb,
            bn,
            vertex_width,
            edge_width,
            output,
        }
    }

    pub fn param_count(vertex_width: usize, edge_width: usize, output: usize, bn: bool) -> usize {
        (2 * vertex_width + edge_width) * output + if bn { 2 * output } else { 0 }
    }
}

pub fn edge_conv_layer(
    pass: &mut Pass<'_>,
    vertex_signal: Var,
    edge_signal: Var,
    graph: &Graph,
    params: &EdgeConvParams,
) -> Result<Var> {
    edge_conv_layer_with(pass, vertex_signal, edge_signal, graph, params, Isolated::Reject)
}

pub fn edge_conv_layer_with(
    pass: &mut Pass<'_>,
    vertex_signal: Var,
    edge_signal: Var,
    graph: &Graph,
    params: &EdgeConvParams,
    isolated: Isolated,
) -> Result<Var> {
    if isolated == Isolated::Reject {
        graph.check_no_isolated()?;
    }
    let n = pass.tape.value(vertex_signal).rows();
    if n != graph.vertex_count {
        return Err(Error::shape("edge_conv", format!("{n} rows for {} vertices", graph.vertex_count)));
    }
    let (src, dst) = graph.index_pair();
    let ws = pass.param(params.w_self);
    let wn = pass.param(params.w_nb);
    let own = pass.tape.matmul(vertex_signal, ws)?;
    let fj = pass.tape.gather_rows(vertex_signal, src)?;
    let cat = pass.tape.concat_cols(&[fj, edge_signal])?;
    let msg = pass.tape.matmul(cat, wn)?;
    let agg = pass.tape.segment_mean(msg, dst, n)?;
    let h = pass.tape.add(own, agg)?;
    bn_relu(pass, &params.bn, h)
}

/// Multi-head graph attention. Heads are concatenated, or averaged when
/// `concat` is false (output layer).
#[derive(Debug, Clone, PartialEq)]
pub struct GatLayerParams {
    pub w: ParamId,
    pub a_src: ParamId,
    pub a_dst: ParamId,
    pub bias: Option<ParamId>,
    pub bn: Option<BatchNormParams>,
    pub heads: usize,
    pub head_width: usize,
    pub concat: bool,
    pub input: usize,
}

impl GatLayerParams {
    /// Hidden layer: `output` split evenly over the heads, followed by batch
    /// norm and ReLU.
    pub fn hidden(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, input: usize, output: usize) -> Result<Self> {
        if output % GAT_HEADS != 0 {
            return Err(Error::InvalidConfig(format!(
                "attention width {output} is not divisible by {GAT_HEADS} heads"
            )));
        }
        Ok(Self::init(store, rng, name, input, output / GAT_HEADS, true, false, true))
    }

    /// Output layer: heads averaged, with a bias and no normalization.
    pub fn output(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, input: usize, output: usize) -> Self {
        Self::init(store, rng, name, input, output, false, true, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        input: usize,
        head_width: usize,
        concat: bool,
        bias: bool,
        bn: bool,
    ) -> Self {
        let heads = GAT_HEADS;
        let w = store.add(format!("{name}.W"), uniform_init(rng, input, heads * head_width, input));
        let a_src = store.add(
            format!("{name}.a_src"),
            uniform_init(rng, heads, head_width, 2 * head_width),
        );
        let a_dst = store.add(
            format!("{name}.a_dst"),
            uniform_init(rng, heads, head_width, 2 * head_width),
        );
        let out = if concat { heads * head_width } else { head_width };
        let bias = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(1, out)));
        let bn = bn.then(|| BatchNormParams::init(store, name, out));
        Self {
            w,
            a_src,
            a_dst,
            bias,
            bn,
            heads,
            head_width,
            concat,
            input,
        }
    }

    pub fn output_width(&self) -> usize {
        if self.concat {
            self.heads * self.head_width
        } else {
            self.head_width
        }
    }

    /// Closed-form parameter count of a layer built by [`Self::hidden`] or
    /// [`Self::output`].
    pub fn param_count(input: usize, output: usize, hidden: bool) -> usize {
        if hidden {
            let f = output / GAT_HEADS;
            input * output + 2 * GAT_HEADS * f + 2 * output
        } else {
            input * GAT_HEADS * output + 2 * GAT_HEADS * output + output
        }
    }
}

/// Output features and per-edge attention weights (`edges × heads`).
pub fn gat_layer_with_attention(
    pass: &mut Pass<'_>,
    x: Var,
    graph: &Graph,
    params: &GatLayerParams,
) -> Result<(Var, Var)> {
    let n = pass.tape.value(x).rows();
    if n != graph.vertex_count {
        return Err(Error::shape("gat", format!("{n} rows for {} vertices", graph.vertex_count)));
    }
    graph.check_no_isolated()?;
    let (h, f) = (params.heads, params.head_width);
    let (src, dst) = graph.index_pair();
    let w = pass.param(params.w);
    let wh = pass.tape.matmul(x, w)?;
    let a_s = pass.param(params.a_src);
    let a_d = pass.param(params.a_dst);
    let s_src = pass.tape.head_dot(wh, a_s, h)?;
    let s_dst = pass.tape.head_dot(wh, a_d, h)?;
    let e_src = pass.tape.gather_rows(s_src, src.clone())?;
    let e_dst = pass.tape.gather_rows(s_dst, dst.clone())?;
    let e = pass.tape.add(e_src, e_dst)?;
    let e = pass.tape.leaky_relu(e, GAT_LEAKY_SLOPE);
    let alpha = pass.tape.segment_softmax(e, dst.clone(), n)?;
    let whj = pass.tape.gather_rows(wh, src)?;
    let msg = pass.tape.head_scale(whj, alpha, h)?;
    let mut out = pass.tape.scatter_add(msg, dst, n)?;
    if !params.concat {
        let mut avg = Tensor::zeros(h * f, f);
        for k in 0..h {
            for j in 0..f {
                avg.data_mut()[(k * f + j) * f + j] = 1.0 / h as f64;
            }
        }
        let avg = pass.tape.constant(avg);
        out = pass.tape.matmul(out, avg)?;
    }
    if let Some(b) = params.bias {
        let b = pass.param(b);
        out = pass.tape.add(out, b)?;
    }
    let out = bn_relu(pass, &params.bn, out)?;
    Ok((out, alpha))
}

pub fn gat_layer(pass: &mut Pass<'_>, x: Var, graph: &Graph, params: &GatLayerParams) -> Result<Var> {
    gat_layer_with_attention(pass, x, graph, params).map(|(y, _)| y)
}

fn batched_index(local: &[usize], stride: usize, copies: usize) -> Rc<[usize]> {
    let mut idx = Vec::with_capacity(local.len() * copies);
    for k in 0..copies {
        idx.extend(local.iter().map(|&i| i + k * stride));
    }
    Rc::from(idx)
}

/// Restriction from level `k` to level `k + 1` for a batch of `copies` frames.
pub fn downsample_signal(pass: &mut Pass<'_>, x: Var, hierarchy: &GraphHierarchy, k: usize, copies: usize) -> Result<Var> {
    let (from, to) = level_pair(hierarchy, k)?;
    let idx = batched_index(&to.retained, from.len(), copies);
    pass.tape.gather_rows(x, idx)
}

/// Parent copy from level `k + 1` back to level `k`.
pub fn upsample_signal(pass: &mut Pass<'_>, x: Var, hierarchy: &GraphHierarchy, k: usize, copies: usize) -> Result<Var> {
    let (from, to) = level_pair(hierarchy, k)?;
    let idx = batched_index(&from.parent, to.len(), copies);
    pass.tape.gather_rows(x, idx)
}

fn level_pair(h: &GraphHierarchy, k: usize) -> Result<(&HierarchyLevel, &HierarchyLevel)> {
    match (h.levels.get(k), h.levels.get(k + 1)) {
        (Some(a), Some(b)) => Ok((a, b)),
        _ => Err(Error::Hierarchy(format!("no level {} above level {k}", k + 1))),
    }
}

/// Per-frame mean over vertices; `x` stacks `copies` frames of equal size.
pub fn global_avg_pool(pass: &mut Pass<'_>, x: Var, copies: usize) -> Result<Var> {
    let rows = pass.tape.value(x).rows();
    if copies == 0 || rows % copies != 0 || rows == 0 {
        return Err(Error::shape("global_avg_pool", format!("{rows} rows over {copies} frames")));
    }
    let per = rows / copies;
    let seg: Vec<usize> = (0..rows).map(|r| r / per).collect();
    pass.tape.segment_mean(x, Rc::from(seg), copies)
}

/// Mean pooling over frames of varying size, given each frame's vertex count.
pub fn segment_avg_pool(pass: &mut Pass<'_>, x: Var, sizes: &[usize]) -> Result<Var> {
    let seg: Vec<usize> = sizes
        .iter()
        .enumerate()
        .flat_map(|(k, &s)| std::iter::repeat_n(k, s))
        .collect();
    if sizes.contains(&0) {
        return Err(Error::shape("segment_avg_pool", "empty frame"));
    }
    pass.tape.segment_mean(x, Rc::from(seg), sizes.len())
}
