//! Declarative network-graph model: validation, extended Q/C map propagation,
//! slope polynomials, and maximal slope function construction/inversion.
//!
//! Graphs are DAGs of layers (affine, nonlinear, concat, normalized sum,
//! layer-norm, pool) with a designated input and output. Analyses treat
//! affine layers as identity maps on (q, c); nonlinear layers apply the local
//! Q/C maps of their activation; merges combine branches by the channel- or
//! weight-weighted rules.
//!
//! Slope polynomials are lazy expression trees in the per-nonlinearity slope
//! ψ; the maximal slope function is the pointwise maximum over the whole
//! network and every parallel-branch interior, obtained from a
//! series/parallel decomposition of the graph. Non-series-parallel DAGs are
//! rejected.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::activations::Registry;
use crate::error::{Error, Result};
use crate::localmaps::{self, QCState};

/// Kinds of pooling layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    /// Max pooling (identity-map heuristic).
    Max,
    /// Weighted mean pooling with norm-preserving weights (identity map).
    WeightedMean,
    /// Plain mean pooling: accepted with a warning, identity-map heuristic.
    Mean,
}

/// One layer of a [`NetworkGraph`].
#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    /// Network input with a channel count.
    Input {
        /// Number of channels.
        channels: usize,
    },
    /// Affine (dense or convolutional) layer.
    Affine {
        /// Input channels.
        in_channels: usize,
        /// Output channels.
        out_channels: usize,
        /// Filter height (1 for dense).
        filter_h: usize,
        /// Filter width (1 for dense).
        filter_w: usize,
        /// Stride (metadata only; does not affect map analysis).
        stride: usize,
    },
    /// Elementwise nonlinearity, referencing a registry activation by name.
    Nonlinear {
        /// Activation name.
        activation: String,
    },
    /// Channel-wise concatenation of the parents.
    Concat,
    /// Normalized weighted sum of the parents (squared weights sum to 1).
    NormSum {
        /// One weight per parent.
        weights: Vec<f64>,
    },
    /// Layer Normalization.
    LayerNorm,
    /// Pooling layer.
    Pool {
        /// Pooling flavor.
        kind: PoolKind,
    },
}

/// A node: id, kind, and parent references.
#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    /// Unique identifier.
    pub id: String,
    /// Layer kind and parameters.
    pub kind: NodeKind,
    /// Parent node ids (empty only for the input).
    pub parents: Vec<String>,
}

/// A DAG of layers with a designated output.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph {
    /// Nodes in declaration order.
    pub nodes: Vec<Node>,
    /// Id of the output node.
    pub output: String,
}

/// A single validation failure, naming the offending node.
#[derive(Debug, Clone, Serialize)]
pub struct Violation {
    /// Offending node id (or `"<graph>"` for global problems).
    pub node: String,
    /// Human-readable description.
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.node, self.message)
    }
}

/// Tolerance for the `Σ w_i² = 1` normalized-sum invariant.
pub const NORM_SUM_TOL: f64 = 1e-12;

// ---------------------------------------------------------------------------
// JSON schema
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct NodeJson {
    id: String,
    kind: String,
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    params: serde_json::Map<String, serde_json::Value>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    parents: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct GraphJson {
    nodes: Vec<NodeJson>,
    output: String,
}

fn get_usize(params: &serde_json::Map<String, serde_json::Value>, key: &str) -> Result<usize> {
    params
        .get(key)
        .and_then(|v| v.as_u64())
        .map(|v| v as usize)
        .ok_or_else(|| Error::Domain(format!("missing or invalid integer param '{key}'")))
}

impl NetworkGraph {
    /// Parses a graph from the JSON document format (`nodes` array with
    /// id/kind/params/parents plus an `output` id).
    pub fn from_json(text: &str) -> Result<Self> {
        let gj: GraphJson = serde_json::from_str(text)?;
        let mut nodes = Vec::with_capacity(gj.nodes.len());
        for nj in gj.nodes {
            let kind = match nj.kind.as_str() {
                "input" => NodeKind::Input {
                    channels: get_usize(&nj.params, "channels")?,
                },
                "affine" => NodeKind::Affine {
                    in_channels: get_usize(&nj.params, "in_channels")?,
                    out_channels: get_usize(&nj.params, "out_channels")?,
                    filter_h: get_usize(&nj.params, "filter_h")?,
                    filter_w: get_usize(&nj.params, "filter_w")?,
                    stride: get_usize(&nj.params, "stride").unwrap_or(1),
                },
                "nonlinear" => NodeKind::Nonlinear {
                    activation: nj
                        .params
                        .get("activation")
                        .and_then(|v| v.as_str())
                        .ok_or_else(|| {
                            Error::Domain("nonlinear node needs string param 'activation'".into())
                        })?
                        .to_string(),
                },
                "concat" => NodeKind::Concat,
                "norm_sum" => NodeKind::NormSum {
                    weights: nj
                        .params
                        .get("weights")
                        .and_then(|v| v.as_array())
                        .map(|a| a.iter().filter_map(|x| x.as_f64()).collect::<Vec<_>>())
                        .ok_or_else(|| {
                            Error::Domain("norm_sum node needs numeric array param 'weights'".into())
                        })?,
                },
                "layer_norm" => NodeKind::LayerNorm,
                "pool" => NodeKind::Pool {
                    kind: match nj.params.get("kind").and_then(|v| v.as_str()) {
                        Some("max") => PoolKind::Max,
                        Some("weighted_mean") => PoolKind::WeightedMean,
                        Some("mean") => PoolKind::Mean,
                        other => {
                            return Err(Error::Domain(format!(
                                "pool node needs param 'kind' in {{max, weighted_mean, mean}} (got {other:?})"
                            )))
                        }
                    },
                },
                other => {
                    return Err(Error::Domain(format!(
                        "unknown node kind '{other}' (node '{}')",
                        nj.id
                    )))
                }
            };
            nodes.push(Node {
                id: nj.id,
                kind,
                parents: nj.parents,
            });
        }
        Ok(NetworkGraph {
            nodes,
            output: gj.output,
        })
    }

    /// Serializes the graph to the JSON document format.
    pub fn to_json(&self) -> String {
        let nodes = self
            .nodes
            .iter()
            .map(|n| {
                let mut params = serde_json::Map::new();
                let kind = match &n.kind {
                    NodeKind::Input { channels } => {
                        params.insert("channels".into(), (*channels).into());
                        "input"
                    }
                    NodeKind::Affine {
                        in_channels,
                        out_channels,
                        filter_h,
                        filter_w,
                        stride,
                    } => {
                        params.insert("in_channels".into(), (*in_channels).into());
                        params.insert("out_channels".into(), (*out_channels).into());
                        params.insert("filter_h".into(), (*filter_h).into());
                        params.insert("filter_w".into(), (*filter_w).into());
                        params.insert("stride".into(), (*stride).into());
                        "affine"
                    }
                    NodeKind::Nonlinear { activation } => {
                        params.insert("activation".into(), activation.clone().into());
                        "nonlinear"
                    }
                    NodeKind::Concat => "concat",
                    NodeKind::NormSum { weights } => {
                        params.insert(
                            "weights".into(),
                            serde_json::Value::Array(
                                weights.iter().map(|&w| w.into()).collect(),
                            ),
                        );
                        "norm_sum"
                    }
                    NodeKind::LayerNorm => "layer_norm",
                    NodeKind::Pool { kind } => {
                        params.insert(
                            "kind".into(),
                            match kind {
                                PoolKind::Max => "max",
                                PoolKind::WeightedMean => "weighted_mean",
                                PoolKind::Mean => "mean",
                            }
                            .into(),
                        );
                        "pool"
                    }
                };
                NodeJson {
                    id: n.id.clone(),
                    kind: kind.to_string(),
                    params,
                    parents: n.parents.clone(),
                }
            })
            .collect();
        serde_json::to_string_pretty(&GraphJson {
            nodes,
            output: self.output.clone(),
        })
        .expect("graph serialization cannot fail")
    }

    fn index(&self) -> BTreeMap<&str, usize> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.as_str(), i))
            .collect()
    }

    /// Topological order of node indices; `None` if the graph has a cycle or
    /// dangling parent references.
    fn topo_order(&self) -> Option<Vec<usize>> {
        let idx = self.index();
        if idx.len() != self.nodes.len() {
            return None; // duplicate ids
        }
        let mut indeg = vec![0usize; self.nodes.len()];
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            for p in &n.parents {
                let &pi = idx.get(p.as_str())?;
                indeg[i] += 1;
                children[pi].push(i);
            }
        }
        let mut queue: Vec<usize> = (0..self.nodes.len()).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(i) = queue.pop() {
            order.push(i);
            for &c in &children[i] {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    queue.push(c);
                }
            }
        }
        (order.len() == self.nodes.len()).then_some(order)
    }

    /// Per-node channel counts, derived from the input and affine metadata.
    pub fn channels(&self) -> Result<BTreeMap<String, usize>> {
        let idx = self.index();
        let order = self
            .topo_order()
            .ok_or_else(|| Error::Domain("graph has a cycle or dangling parents".into()))?;
        let mut out: BTreeMap<String, usize> = BTreeMap::new();
        for i in order {
            let n = &self.nodes[i];
            let parent_ch = |p: &str| -> Result<usize> {
                out.get(p)
                    .copied()
                    .ok_or_else(|| Error::Domain(format!("unresolved parent '{p}'")))
            };
            let ch = match &n.kind {
                NodeKind::Input { channels } => *channels,
                NodeKind::Affine { out_channels, .. } => *out_channels,
                NodeKind::Concat => {
                    let mut sum = 0;
                    for p in &n.parents {
                        sum += parent_ch(p)?;
                    }
                    sum
                }
                _ => parent_ch(n.parents.first().map(String::as_str).unwrap_or(""))?,
            };
            out.insert(n.id.clone(), ch);
        }
        let _ = idx;
        Ok(out)
    }

    /// Checks all graph invariants, returning an empty list iff the graph is
    /// valid. Each violation names the offending node.
    pub fn validate(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        let mut seen = BTreeSet::new();
        for n in &self.nodes {
            if !seen.insert(n.id.as_str()) {
                v.push(Violation {
                    node: n.id.clone(),
                    message: "duplicate node id".into(),
                });
            }
        }
        let idx = self.index();
        for n in &self.nodes {
            for p in &n.parents {
                if !idx.contains_key(p.as_str()) {
                    v.push(Violation {
                        node: n.id.clone(),
                        message: format!("references unknown parent '{p}'"),
                    });
                }
            }
        }
        if !idx.contains_key(self.output.as_str()) {
            v.push(Violation {
                node: self.output.clone(),
                message: "designated output node does not exist".into(),
            });
        }
        if !v.is_empty() {
            return v; // structural problems make further checks meaningless
        }
        let order = match self.topo_order() {
            Some(o) => o,
            None => {
                v.push(Violation {
                    node: "<graph>".into(),
                    message: "graph contains a cycle".into(),
                });
                return v;
            }
        };

        let inputs: Vec<&Node> = self
            .nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::Input { .. }))
            .collect();
        if inputs.len() != 1 {
            v.push(Violation {
                node: "<graph>".into(),
                message: format!("graph must have exactly one input node (found {})", inputs.len()),
            });
        }

        // Parent-count rules per kind.
        for n in &self.nodes {
            let np = n.parents.len();
            let bad = match &n.kind {
                NodeKind::Input { .. } => np != 0,
                NodeKind::Affine { .. }
                | NodeKind::Nonlinear { .. }
                | NodeKind::LayerNorm
                | NodeKind::Pool { .. } => np != 1,
                NodeKind::Concat => np < 2,
                NodeKind::NormSum { weights } => {
                    if weights.len() != np {
                        v.push(Violation {
                            node: n.id.clone(),
                            message: format!(
                                "norm_sum has {np} parents but {} weights",
                                weights.len()
                            ),
                        });
                    }
                    np < 1
                }
            };
            if bad {
                v.push(Violation {
                    node: n.id.clone(),
                    message: format!("invalid parent count {np} for this node kind"),
                });
            }
        }

        // Normalized-sum weights.
        for n in &self.nodes {
            if let NodeKind::NormSum { weights } = &n.kind {
                let s: f64 = weights.iter().map(|w| w * w).sum();
                if (s - 1.0).abs() > NORM_SUM_TOL {
                    v.push(Violation {
                        node: n.id.clone(),
                        message: format!("squared norm_sum weights sum to {s}, expected 1"),
                    });
                }
            }
        }

        // Delta-initializable affine filters must have odd spatial extent.
        for n in &self.nodes {
            if let NodeKind::Affine {
                filter_h, filter_w, ..
            } = n.kind
            {
                if filter_h % 2 == 0 || filter_w % 2 == 0 {
                    v.push(Violation {
                        node: n.id.clone(),
                        message: format!(
                            "filter {filter_h}x{filter_w} must have odd extents for Delta initialization"
                        ),
                    });
                }
            }
        }

        // Combined-layer rule: every nonlinear layer's effective predecessor
        // (looking through LayerNorm) must be an affine layer, a normalized
        // sum of affine layers, or a pooling layer.
        for n in &self.nodes {
            if let NodeKind::Nonlinear { .. } = n.kind {
                if let Some(p) = n.parents.first() {
                    if !self.valid_nonlinear_predecessor(p) {
                        v.push(Violation {
                            node: n.id.clone(),
                            message: format!(
                                "nonlinear layer must directly follow an affine layer, a \
                                 normalized sum of affine layers, or a pooling layer \
                                 (optionally through layer_norm); found '{p}'"
                            ),
                        });
                    }
                }
            }
        }

        // Reachability of the output from the input.
        if inputs.len() == 1 {
            let input_id = &inputs[0].id;
            let mut reach: BTreeSet<&str> = BTreeSet::new();
            for &i in &order {
                let n = &self.nodes[i];
                if &n.id == input_id
                    || n.parents.iter().any(|p| reach.contains(p.as_str()))
                {
                    reach.insert(n.id.as_str());
                }
            }
            if !reach.contains(self.output.as_str()) {
                v.push(Violation {
                    node: self.output.clone(),
                    message: "output is not reachable from the input".into(),
                });
            }
        }

        // Channel consistency.
        if let Ok(ch) = self.channels() {
            for n in &self.nodes {
                if let NodeKind::Affine { in_channels, .. } = n.kind {
                    if let Some(p) = n.parents.first() {
                        if let Some(&pc) = ch.get(p) {
                            if pc != in_channels {
                                v.push(Violation {
                                    node: n.id.clone(),
                                    message: format!(
                                        "in_channels = {in_channels} but parent '{p}' has {pc} channels"
                                    ),
                                });
                            }
                        }
                    }
                }
                if let NodeKind::NormSum { .. } = n.kind {
                    let cs: Vec<usize> =
                        n.parents.iter().filter_map(|p| ch.get(p).copied()).collect();
                    if cs.windows(2).any(|w| w[0] != w[1]) {
                        v.push(Violation {
                            node: n.id.clone(),
                            message: format!("norm_sum parents have unequal channel counts {cs:?}"),
                        });
                    }
                }
            }
        }
        v
    }

    /// Whether `id` is a valid effective predecessor of a nonlinear layer:
    /// affine, normalized-sum-of-affines, or pool, looking transparently
    /// through layer-norm nodes.
    fn valid_nonlinear_predecessor(&self, id: &str) -> bool {
        let idx = self.index();
        let Some(&i) = idx.get(id) else {
            return false;
        };
        let n = &self.nodes[i];
        match &n.kind {
            NodeKind::Affine { .. } | NodeKind::Pool { .. } => true,
            // Sums of affine-type branches are themselves affine-type; this
            // covers residual stacks where a sum's shortcut parent is the
            // previous block's sum.
            NodeKind::NormSum { .. } => n
                .parents
                .iter()
                .all(|p| self.valid_nonlinear_predecessor(p)),
            NodeKind::LayerNorm => n
                .parents
                .first()
                .map(|p| self.valid_nonlinear_predecessor(p))
                .unwrap_or(false),
            _ => false,
        }
    }
}

// ---------------------------------------------------------------------------
// Extended Q/C map propagation
// ---------------------------------------------------------------------------

/// Result of [`qc_propagate`]: the per-node state plus any heuristic warnings.
#[derive(Debug, Clone)]
pub struct PropagateResult {
    /// Q/C state at the output of every node.
    pub states: BTreeMap<String, QCState>,
    /// Warnings emitted (e.g. plain mean pooling heuristics).
    pub warnings: Vec<String>,
}

/// Propagates a Q/C state from the input through every node of the graph.
///
/// Affine and pool layers are identity maps; nonlinear layers apply their
/// activation's local maps at the incoming q value; layer-norm resets q to 1
/// and applies `c ↦ (c − C_g(0)) / (1 − C_g(0))` with the predecessor's C(0);
/// concat and normalized sums use the channel- and weight-weighted rules.
///
/// # Errors
/// The graph must validate; nonlinear nodes must reference registered
/// activations.
pub fn qc_propagate(
    g: &NetworkGraph,
    registry: &Registry,
    input: QCState,
) -> Result<PropagateResult> {
    let violations = g.validate();
    if !violations.is_empty() {
        return Err(Error::InvalidGraph(violations));
    }
    let channels = g.channels()?;
    let order = g
        .topo_order()
        .ok_or_else(|| Error::Domain("graph has a cycle".into()))?;
    let idx = g.index();
    let mut states: BTreeMap<String, QCState> = BTreeMap::new();
    // Input q of each node, needed by the layer-norm rule.
    let mut input_q: BTreeMap<String, f64> = BTreeMap::new();
    let mut warnings = Vec::new();

    for i in order {
        let n = &g.nodes[i];
        let parent_state = |p: &str| -> Result<QCState> {
            states
                .get(p)
                .copied()
                .ok_or_else(|| Error::Domain(format!("unresolved parent '{p}'")))
        };
        let state = match &n.kind {
            NodeKind::Input { .. } => input,
            NodeKind::Affine { .. } => parent_state(&n.parents[0])?,
            NodeKind::Pool { kind } => {
                if *kind == PoolKind::Mean {
                    warnings.push(format!(
                        "node '{}': plain mean pooling propagated as a heuristic identity map",
                        n.id
                    ));
                }
                parent_state(&n.parents[0])?
            }
            NodeKind::Nonlinear { activation } => {
                let spec = registry.get(activation)?;
                let s = parent_state(&n.parents[0])?;
                input_q.insert(n.id.clone(), s.q);
                let c = localmaps::local_c(spec, s.c, s.q, s.q)?.clamp(-1.0, 1.0);
                let q = localmaps::local_q(spec, s.q)?;
                QCState { q, c }
            }
            NodeKind::LayerNorm => {
                let p = &n.parents[0];
                let s = parent_state(p)?;
                let c0 = layer_norm_c_zero(g, registry, &idx, &input_q, p)?;
                if (1.0 - c0).abs() < 1e-12 {
                    return Err(Error::Domain(format!(
                        "layer_norm '{}': predecessor C(0) = 1, map degenerate",
                        n.id
                    )));
                }
                QCState {
                    q: 1.0,
                    c: ((s.c - c0) / (1.0 - c0)).clamp(-1.0, 1.0),
                }
            }
            NodeKind::Concat => {
                let mut kq = 0.0;
                let mut kqc = 0.0;
                let mut k_total = 0.0;
                for p in &n.parents {
                    let s = parent_state(p)?;
                    let k = channels
                        .get(p)
                        .copied()
                        .ok_or_else(|| Error::Domain(format!("no channel count for '{p}'")))?
                        as f64;
                    kq += k * s.q;
                    kqc += k * s.q * s.c;
                    k_total += k;
                }
                QCState {
                    q: kq / k_total,
                    c: (kqc / kq).clamp(-1.0, 1.0),
                }
            }
            NodeKind::NormSum { weights } => {
                let mut wq = 0.0;
                let mut wqc = 0.0;
                for (p, &w) in n.parents.iter().zip(weights) {
                    let s = parent_state(p)?;
                    wq += w * w * s.q;
                    wqc += w * w * s.q * s.c;
                }
                QCState {
                    q: wq,
                    c: (wqc / wq).clamp(-1.0, 1.0),
                }
            }
        };
        states.insert(n.id.clone(), state);
    }
    Ok(PropagateResult { states, warnings })
}

/// C(0) of the subnetwork feeding a layer-norm node: the local C(0) of the
/// nonlinear predecessor at its input q value, or 0 for affine-type
/// predecessors (whose maps fix c = 0).
fn layer_norm_c_zero(
    g: &NetworkGraph,
    registry: &Registry,
    idx: &BTreeMap<&str, usize>,
    input_q: &BTreeMap<String, f64>,
    pred: &str,
) -> Result<f64> {
    let &i = idx
        .get(pred)
        .ok_or_else(|| Error::Domain(format!("unresolved parent '{pred}'")))?;
    match &g.nodes[i].kind {
        NodeKind::Nonlinear { activation } => {
            let spec = registry.get(activation)?;
            let q_in = input_q.get(pred).copied().unwrap_or(1.0);
            localmaps::cmap_zero(spec, q_in)
        }
        _ => Ok(0.0),
    }
}

// ---------------------------------------------------------------------------
// Slope polynomials
// ---------------------------------------------------------------------------

/// A lazy polynomial-in-ψ expression tree.
#[derive(Debug, Clone, PartialEq)]
pub enum SlopeExpr {
    /// A constant factor.
    Const(f64),
    /// The per-nonlinearity slope ψ.
    Psi,
    /// Product of sub-expressions.
    Product(Vec<SlopeExpr>),
    /// Weighted sum `Σ w_i · p_i`.
    WeightedSum(Vec<(f64, SlopeExpr)>),
}

impl SlopeExpr {
    /// Evaluates the expression at ψ (overflow saturates to +∞).
    pub fn eval(&self, psi: f64) -> f64 {
        match self {
            SlopeExpr::Const(v) => *v,
            SlopeExpr::Psi => psi,
            SlopeExpr::Product(fs) => fs.iter().map(|f| f.eval(psi)).product(),
            SlopeExpr::WeightedSum(ts) => ts.iter().map(|(w, f)| w * f.eval(psi)).sum(),
        }
    }

    /// Whether the expression contains a ψ node.
    pub fn contains_psi(&self) -> bool {
        match self {
            SlopeExpr::Const(_) => false,
            SlopeExpr::Psi => true,
            SlopeExpr::Product(fs) => fs.iter().any(SlopeExpr::contains_psi),
            SlopeExpr::WeightedSum(ts) => ts.iter().any(|(_, f)| f.contains_psi()),
        }
    }

    fn from_factors(mut factors: Vec<SlopeExpr>) -> SlopeExpr {
        match factors.len() {
            0 => SlopeExpr::Const(1.0),
            1 => factors.pop().unwrap(),
            _ => SlopeExpr::Product(factors),
        }
    }
}

/// Selects the subnetwork whose slope polynomial is requested.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subnet<'a> {
    /// The whole network (input to designated output).
    Whole,
    /// The subnetwork from the input up to (and including) the named node.
    UpTo(&'a str),
}

struct SpDecomposer<'g> {
    g: &'g NetworkGraph,
    idx: BTreeMap<&'g str, usize>,
    topo_pos: BTreeMap<&'g str, usize>,
    /// Dominator sets (node indices) per node index.
    dom: Vec<BTreeSet<usize>>,
    channels: BTreeMap<String, usize>,
}

impl<'g> SpDecomposer<'g> {
    fn new(g: &'g NetworkGraph) -> Result<Self> {
        let violations = g.validate();
        if !violations.is_empty() {
            return Err(Error::InvalidGraph(violations));
        }
        let idx = g.index();
        let order = g
            .topo_order()
            .ok_or_else(|| Error::Domain("graph has a cycle".into()))?;
        let mut topo_pos = BTreeMap::new();
        for (pos, &i) in order.iter().enumerate() {
            topo_pos.insert(g.nodes[i].id.as_str(), pos);
        }
        // Dominators over the parent DAG: dom(n) = {n} ∪ ∩ dom(parents).
        let n = g.nodes.len();
        let full: BTreeSet<usize> = (0..n).collect();
        let mut dom = vec![full; n];
        for &i in &order {
            let node = &g.nodes[i];
            let mut d: Option<BTreeSet<usize>> = None;
            for p in &node.parents {
                let pi = idx[p.as_str()];
                d = Some(match d {
                    None => dom[pi].clone(),
                    Some(acc) => acc.intersection(&dom[pi]).copied().collect(),
                });
            }
            let mut d = d.unwrap_or_default();
            d.insert(i);
            dom[i] = d;
        }
        let channels = g.channels()?;
        Ok(SpDecomposer {
            g,
            idx,
            topo_pos,
            dom,
            channels,
        })
    }

    /// The fork node of a merge: the deepest common dominator of its parents.
    fn fork_of(&self, merge: &Node) -> Result<usize> {
        let mut common: Option<BTreeSet<usize>> = None;
        for p in &merge.parents {
            let pi = self.idx[p.as_str()];
            common = Some(match common {
                None => self.dom[pi].clone(),
                Some(acc) => acc.intersection(&self.dom[pi]).copied().collect(),
            });
        }
        let common = common.unwrap_or_default();
        common
            .into_iter()
            .max_by_key(|&i| self.topo_pos[self.g.nodes[i].id.as_str()])
            .ok_or_else(|| {
                Error::NotSeriesParallel(format!(
                    "merge node '{}' has no common fork ancestor",
                    merge.id
                ))
            })
    }

    /// Slope-polynomial factor list and visited-node set for the subnetwork
    /// from `base` (exclusive) to `node` (inclusive).
    fn factors_between(
        &self,
        base: usize,
        node: usize,
    ) -> Result<(Vec<SlopeExpr>, BTreeSet<usize>)> {
        if node == base {
            return Ok((Vec::new(), BTreeSet::new()));
        }
        let n = &self.g.nodes[node];
        let mut visited = BTreeSet::new();
        visited.insert(node);
        let (mut factors, parent_visited) = match &n.kind {
            NodeKind::Input { .. } => {
                return Err(Error::NotSeriesParallel(format!(
                    "walked past the network input while decomposing towards '{}'",
                    self.g.nodes[base].id
                )))
            }
            NodeKind::Affine { .. } | NodeKind::LayerNorm | NodeKind::Pool { .. } => {
                let p = self.idx[n.parents[0].as_str()];
                self.factors_between(base, p)?
            }
            NodeKind::Nonlinear { .. } => {
                let p = self.idx[n.parents[0].as_str()];
                let (mut fs, vis) = self.factors_between(base, p)?;
                fs.push(SlopeExpr::Psi);
                (fs, vis)
            }
            NodeKind::NormSum { weights } => {
                let fork = self.fork_of(n)?;
                let (prefix, prefix_vis) = self.factors_between(base, fork)?;
                let mut terms = Vec::new();
                let mut branch_visits: Vec<BTreeSet<usize>> = Vec::new();
                for (p, &w) in n.parents.iter().zip(weights) {
                    let pi = self.idx[p.as_str()];
                    let (bf, bv) = self.factors_between(fork, pi)?;
                    terms.push((w * w, SlopeExpr::from_factors(bf)));
                    branch_visits.push(bv);
                }
                self.check_disjoint(&n.id, &branch_visits)?;
                let mut fs = prefix;
                fs.push(SlopeExpr::WeightedSum(terms));
                let mut vis = prefix_vis;
                for bv in branch_visits {
                    vis.extend(bv);
                }
                (fs, vis)
            }
            NodeKind::Concat => {
                let fork = self.fork_of(n)?;
                let (prefix, prefix_vis) = self.factors_between(base, fork)?;
                let total: f64 = n
                    .parents
                    .iter()
                    .map(|p| self.channels[p.as_str()] as f64)
                    .sum();
                let mut terms = Vec::new();
                let mut branch_visits: Vec<BTreeSet<usize>> = Vec::new();
                for p in &n.parents {
                    let pi = self.idx[p.as_str()];
                    let k = self.channels[p.as_str()] as f64;
                    let (bf, bv) = self.factors_between(fork, pi)?;
                    terms.push((k / total, SlopeExpr::from_factors(bf)));
                    branch_visits.push(bv);
                }
                self.check_disjoint(&n.id, &branch_visits)?;
                let mut fs = prefix;
                fs.push(SlopeExpr::WeightedSum(terms));
                let mut vis = prefix_vis;
                for bv in branch_visits {
                    vis.extend(bv);
                }
                (fs, vis)
            }
        };
        visited.extend(parent_visited);
        let fs = std::mem::take(&mut factors);
        Ok((fs, visited))
    }

    fn check_disjoint(&self, merge_id: &str, branch_visits: &[BTreeSet<usize>]) -> Result<()> {
        for (i, a) in branch_visits.iter().enumerate() {
            for b in branch_visits.iter().skip(i + 1) {
                if let Some(&shared) = a.intersection(b).next() {
                    return Err(Error::NotSeriesParallel(format!(
                        "branches of merge '{merge_id}' share node '{}'",
                        self.g.nodes[shared].id
                    )));
                }
            }
        }
        Ok(())
    }

    fn input_index(&self) -> usize {
        self.g
            .nodes
            .iter()
            .position(|n| matches!(n.kind, NodeKind::Input { .. }))
            .expect("validated graph has an input")
    }
}

/// Builds the slope polynomial of a subnetwork by the structural recipe:
/// nonlinear layers map to ψ; affine, layer-norm, pool and input map to 1;
/// series composition multiplies; normalized sums average with the squared
/// weights; concatenations average with channel fractions.
///
/// # Errors
/// Invalid graphs and non-series-parallel DAGs are rejected.
pub fn slope_poly(g: &NetworkGraph, sub: Subnet<'_>) -> Result<SlopeExpr> {
    let sp = SpDecomposer::new(g)?;
    let target = match sub {
        Subnet::Whole => g.output.as_str(),
        Subnet::UpTo(id) => id,
    };
    let &t = sp
        .idx
        .get(target)
        .ok_or_else(|| Error::Domain(format!("unknown subnetwork target node '{target}'")))?;
    let (factors, _) = sp.factors_between(sp.input_index(), t)?;
    Ok(SlopeExpr::from_factors(factors))
}

// ---------------------------------------------------------------------------
// Maximal slope function
// ---------------------------------------------------------------------------

/// The maximal slope function `μ(ψ) = max_f p_f(ψ)` over the whole network
/// and every parallel-branch interior subnetwork.
#[derive(Debug, Clone)]
pub struct MaxSlopeFn {
    /// Candidate slope polynomials; the value is their pointwise maximum.
    pub candidates: Vec<SlopeExpr>,
}

/// Function-value tolerance of the binary-search inversion.
pub const INVERT_TOL: f64 = 1e-6;

impl MaxSlopeFn {
    /// Evaluates `μ(ψ)` as the maximum over candidates.
    pub fn value(&self, psi: f64) -> f64 {
        self.candidates
            .iter()
            .map(|c| c.eval(psi))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Whether any candidate contains a ψ node.
    pub fn contains_psi(&self) -> bool {
        self.candidates.iter().any(SlopeExpr::contains_psi)
    }

    /// Finds `ψ* > 1` with `|μ(ψ*) − ζ| ≤ 1e-6` by binary search starting
    /// from `[1, 2]` with interval doubling.
    ///
    /// # Errors
    /// `ζ ≤ 1` is a domain error; a network with no nonlinear layer is not
    /// invertible.
    pub fn invert(&self, zeta: f64) -> Result<f64> {
        if !self.contains_psi() {
            return Err(Error::NonInvertibleSlope);
        }
        if !(zeta > 1.0 && zeta.is_finite()) {
            return Err(Error::Domain(format!(
                "slope target zeta = {zeta} must be > 1"
            )));
        }
        let mut lo = 1.0f64;
        let mut hi = 2.0f64;
        while self.value(hi) < zeta {
            lo = hi;
            hi *= 2.0;
            if hi > 1e12 {
                return Err(Error::Domain(format!(
                    "slope target zeta = {zeta} is unreachable"
                )));
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let v = self.value(mid);
            if (v - zeta).abs() <= INVERT_TOL {
                return Ok(mid);
            }
            if v < zeta {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Err(Error::Domain(format!(
            "binary search did not reach tolerance inverting mu at zeta = {zeta}"
        )))
    }
}

/// Constructs the maximal slope function of a graph.
///
/// Candidates are the whole-network polynomial plus, for every merge node,
/// every parallel-branch interior (prefixed by the polynomial from the input
/// to the branch fork). Candidates whose series factor list is a prefix of
/// another candidate's are pruned: every factor is ≥ 1 on ψ ≥ 1, so a prefix
/// is pointwise dominated.
pub fn maximal_slope(g: &NetworkGraph) -> Result<MaxSlopeFn> {
    let sp = SpDecomposer::new(g)?;
    let input = sp.input_index();
    let out = sp.idx[g.output.as_str()];
    let (whole, _) = sp.factors_between(input, out)?;
    let mut factor_lists: Vec<Vec<SlopeExpr>> = vec![whole];
    for n in &g.nodes {
        if matches!(n.kind, NodeKind::NormSum { .. } | NodeKind::Concat) {
            let fork = sp.fork_of(n)?;
            let (prefix, _) = sp.factors_between(input, fork)?;
            for p in &n.parents {
                let pi = sp.idx[p.as_str()];
                let (branch, _) = sp.factors_between(fork, pi)?;
                if branch.iter().any(SlopeExpr::contains_psi) {
                    let mut cand = prefix.clone();
                    cand.extend(branch);
                    factor_lists.push(cand);
                }
            }
        }
    }
    // Deduplicate and prune prefix-dominated candidates.
    let mut keep = vec![true; factor_lists.len()];
    for i in 0..factor_lists.len() {
        for j in 0..factor_lists.len() {
            if i == j || !keep[i] {
                continue;
            }
            let (a, b) = (&factor_lists[i], &factor_lists[j]);
            let dominated = a.len() < b.len() && b[..a.len()] == a[..];
            let duplicate = a == b && i > j;
            if dominated || duplicate {
                keep[i] = false;
            }
        }
    }
    let candidates = factor_lists
        .into_iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(f, _)| SlopeExpr::from_factors(f))
        .collect();
    Ok(MaxSlopeFn { candidates })
}

// ---------------------------------------------------------------------------
// Template builders
// ---------------------------------------------------------------------------

fn affine(id: &str, parent: &str, in_ch: usize, out_ch: usize) -> Node {
    Node {
        id: id.into(),
        kind: NodeKind::Affine {
            in_channels: in_ch,
            out_channels: out_ch,
            filter_h: 1,
            filter_w: 1,
            stride: 1,
        },
        parents: vec![parent.into()],
    }
}

fn nonlinear(id: &str, parent: &str, act: &str) -> Node {
    Node {
        id: id.into(),
        kind: NodeKind::Nonlinear {
            activation: act.into(),
        },
        parents: vec![parent.into()],
    }
}

/// A sequential MLP: `depth` combined (affine + nonlinear) layers followed by
/// a final affine layer. Slope polynomial ψ^depth.
pub fn template_mlp(depth: usize, width: usize, act: &str) -> NetworkGraph {
    let mut nodes = vec![Node {
        id: "in".into(),
        kind: NodeKind::Input { channels: width },
        parents: vec![],
    }];
    let mut prev = "in".to_string();
    for i in 0..depth {
        let a = format!("a{i}");
        let n = format!("n{i}");
        nodes.push(affine(&a, &prev, width, width));
        nodes.push(nonlinear(&n, &a, act));
        prev = n;
    }
    nodes.push(affine("out", &prev, width, width));
    NetworkGraph {
        nodes,
        output: "out".into(),
    }
}

/// A skip-free chain of `d` combined layers (the paper's deep vanilla
/// network); slope polynomial ψ^d.
pub fn template_skip_free(d: usize, act: &str) -> NetworkGraph {
    template_mlp(d, 16, act)
}

/// Appends a residual block: a branch of `n_psi` combined layers with weight
/// `w`, merged with the shortcut (weight `√(1-w²)`). Returns the merge id.
fn push_block(
    nodes: &mut Vec<Node>,
    trunk: &str,
    tag: &str,
    n_psi: usize,
    w: f64,
    width: usize,
    act: &str,
    pooled_shortcut: bool,
) -> String {
    let mut prev = trunk.to_string();
    for j in 0..n_psi {
        let a = format!("{tag}_a{j}");
        let n = format!("{tag}_n{j}");
        nodes.push(affine(&a, &prev, width, width));
        nodes.push(nonlinear(&n, &a, act));
        prev = n;
    }
    let shortcut = if pooled_shortcut {
        let p = format!("{tag}_pool");
        let sa = format!("{tag}_sc");
        nodes.push(Node {
            id: p.clone(),
            kind: NodeKind::Pool {
                kind: PoolKind::WeightedMean,
            },
            parents: vec![trunk.to_string()],
        });
        nodes.push(affine(&sa, &p, width, width));
        sa
    } else {
        trunk.to_string()
    };
    let m = format!("{tag}_sum");
    nodes.push(Node {
        id: m.clone(),
        kind: NodeKind::NormSum {
            weights: vec![w, (1.0 - w * w).sqrt()],
        },
        parents: vec![prev, shortcut],
    });
    m
}

/// The modified ResNet template with depth parameter `d` and residual weight
/// `w`: `(d-14)/3` normal residual blocks (3 nonlinearities each), 4
/// transition blocks (2 nonlinearities, pooled shortcut), and 5 sequential
/// combined layers. Slope polynomial
/// `(w²ψ³ + 1-w²)^((d-14)/3) · (w²ψ² + 1-w²)⁴ · ψ⁵`.
///
/// # Errors
/// `d` must satisfy `d ≥ 17` and `(d - 14) % 3 == 0`; `|w| ≤ 1`.
pub fn template_resnet_v2_modified(d: usize, w: f64, act: &str) -> Result<NetworkGraph> {
    if d < 17 || (d - 14) % 3 != 0 {
        return Err(Error::Domain(format!(
            "modified ResNet depth {d} must be ≥ 17 with (d - 14) divisible by 3"
        )));
    }
    if !(0.0..=1.0).contains(&w.abs()) {
        return Err(Error::Domain(format!("residual weight w = {w} outside [-1, 1]")));
    }
    let width = 16;
    let mut nodes = vec![Node {
        id: "in".into(),
        kind: NodeKind::Input { channels: width },
        parents: vec![],
    }];
    // Stem: one combined layer.
    nodes.push(affine("stem_a", "in", width, width));
    nodes.push(nonlinear("stem_n", "stem_a", act));
    let mut trunk = "stem_n".to_string();
    for b in 0..(d - 14) / 3 {
        trunk = push_block(&mut nodes, &trunk, &format!("blk{b}"), 3, w, width, act, false);
    }
    for t in 0..4 {
        trunk = push_block(&mut nodes, &trunk, &format!("trans{t}"), 2, w, width, act, true);
    }
    // Tail: four combined layers and the output affine.
    for j in 0..4 {
        let a = format!("tail_a{j}");
        let n = format!("tail_n{j}");
        nodes.push(affine(&a, &trunk, width, width));
        nodes.push(nonlinear(&n, &a, act));
        trunk = n;
    }
    nodes.push(affine("out", &trunk, width, width));
    Ok(NetworkGraph {
        nodes,
        output: "out".into(),
    })
}

/// The Wide-ResNet template with depth parameter `d`, channel `width` and
/// residual weight `w`: `(d-10)/2` normal blocks (2 nonlinearities), 3
/// transition blocks (1 nonlinearity, pooled shortcut), and 4 sequential
/// combined layers. Slope polynomial
/// `(w²ψ² + 1-w²)^((d-10)/2) · (w²ψ + 1-w²)³ · ψ⁴`.
///
/// # Errors
/// `d` must satisfy `d ≥ 12` and `(d - 10) % 2 == 0`; `|w| ≤ 1`.
pub fn template_wide_resnet(d: usize, width: usize, w: f64, act: &str) -> Result<NetworkGraph> {
    if d < 12 || (d - 10) % 2 != 0 {
        return Err(Error::Domain(format!(
            "Wide-ResNet depth {d} must be ≥ 12 with (d - 10) divisible by 2"
        )));
    }
    if !(0.0..=1.0).contains(&w.abs()) {
        return Err(Error::Domain(format!("residual weight w = {w} outside [-1, 1]")));
    }
    let mut nodes = vec![Node {
        id: "in".into(),
        kind: NodeKind::Input { channels: width },
        parents: vec![],
    }];
    nodes.push(affine("stem_a", "in", width, width));
    nodes.push(nonlinear("stem_n", "stem_a", act));
    let mut trunk = "stem_n".to_string();
    for b in 0..(d - 10) / 2 {
        trunk = push_block(&mut nodes, &trunk, &format!("blk{b}"), 2, w, width, act, false);
    }
    for t in 0..3 {
        trunk = push_block(&mut nodes, &trunk, &format!("trans{t}"), 1, w, width, act, true);
    }
    for j in 0..3 {
        let a = format!("tail_a{j}");
        let n = format!("tail_n{j}");
        nodes.push(affine(&a, &trunk, width, width));
        nodes.push(nonlinear(&n, &a, act));
        trunk = n;
    }
    nodes.push(affine("out", &trunk, width, width));
    Ok(NetworkGraph {
        nodes,
        output: "out".into(),
    })
}
