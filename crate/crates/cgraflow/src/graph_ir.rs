//! Model graph parsing, validation, and lowering into bundles.
//!
//! The model exchange format is a JSON document with explicit integer
//! weights. Lowering groups each compute-heavy layer (conv2d, dense, matmul)
//! with the pixel-wise layers that follow it into a `Bundle`, the unit the
//! engine plus host firmware execute deterministically.

use std::collections::{HashMap, HashSet};

use serde::Deserialize;
use thiserror::Error;

use crate::quant::{FixedPointFormat, QTensor, QuantError};
use crate::tiler::RuntimeParams;

pub type Shape4 = [usize; 4]; // [N, H, W, C]

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("duplicate layer id '{0}'")]
    DuplicateId(String),
    #[error("layer '{layer}' references unknown input '{input}'")]
    UnknownInput { layer: String, input: String },
    #[error("cyclic graph (back edge into '{0}')")]
    Cyclic(String),
    #[error("graph has {0} terminal nodes, expected exactly one")]
    TerminalCount(usize),
    #[error("shape mismatch at '{layer}': {detail}")]
    ShapeMismatch { layer: String, detail: String },
    #[error("layer '{layer}': {source}")]
    BadTensor { layer: String, source: QuantError },
    #[error("layer '{layer}': {detail}")]
    Invalid { layer: String, detail: String },
    #[error("unsupported model: {0}")]
    Unsupported(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d,
    Dense,
    Matmul,
    MaxPool,
    AvgPool,
    Activation,
    Flatten,
    Add,
    SoftmaxApprox,
    Attention,
}

impl LayerKind {
    pub fn is_compute_heavy(self) -> bool {
        matches!(self, LayerKind::Conv2d | LayerKind::Dense | LayerKind::Matmul)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActFunc {
    Relu,
    SoftmaxApprox,
}

/// One layer of the model description, validated.
#[derive(Debug, Clone)]
pub struct LayerSpec {
    pub id: String,
    pub kind: LayerKind,
    pub kernel: [usize; 2],
    pub out_channels: usize,
    pub stride: [usize; 2],
    pub padding: Padding,
    pub weights: Option<QTensor>,
    pub bias: Option<QTensor>,
    pub out_shift: u32,
    pub out_format: Option<FixedPointFormat>,
    pub inputs: Vec<String>,
    pub func: Option<ActFunc>,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct ModelGraph {
    pub name: String,
    pub nodes: Vec<LayerSpec>,
    /// (producer index, consumer index) pairs derived from `inputs`.
    pub edges: Vec<(usize, usize)>,
    pub input_shape: Shape4,
    pub input_format: FixedPointFormat,
    /// Output shape of every node, in node order.
    pub node_shapes: Vec<Shape4>,
    /// Format of every node's output tensor.
    pub node_formats: Vec<FixedPointFormat>,
    /// Topological order of node indices (parse order is required topological).
    pub topo: Vec<usize>,
}

// ---- raw JSON document -----------------------------------------------------

#[derive(Deserialize)]
struct FormatDoc {
    bits: u32,
    frac: i32,
    signed: bool,
}

impl From<&FormatDoc> for FixedPointFormat {
    fn from(d: &FormatDoc) -> Self {
        FixedPointFormat::new(d.bits, d.frac, d.signed)
    }
}

#[derive(Deserialize)]
struct WeightsDoc {
    bits: u32,
    frac: i32,
    signed: bool,
    data: Vec<i64>,
}

#[derive(Deserialize)]
struct InputDoc {
    shape: Vec<usize>,
    format: FormatDoc,
}

#[derive(Deserialize)]
struct LayerDoc {
    id: String,
    kind: String,
    #[serde(default)]
    kernel: Option<[usize; 2]>,
    #[serde(default)]
    out_channels: Option<usize>,
    #[serde(default)]
    stride: Option<[usize; 2]>,
    #[serde(default)]
    padding: Option<String>,
    #[serde(default)]
    weights: Option<WeightsDoc>,
    #[serde(default)]
    bias: Option<WeightsDoc>,
    #[serde(default)]
    out_shift: Option<u32>,
    #[serde(default)]
    out_format: Option<FormatDoc>,
    #[serde(default)]
    inputs: Vec<String>,
    #[serde(default)]
    func: Option<String>,
    #[serde(default)]
    heads: Option<usize>,
}

#[derive(Deserialize)]
struct ModelDoc {
    name: String,
    input: InputDoc,
    layers: Vec<LayerDoc>,
}

// ---- parsing ---------------------------------------------------------------

fn parse_kind(s: &str, layer: &str) -> Result<LayerKind, GraphError> {
    Ok(match s {
        "conv2d" => LayerKind::Conv2d,
        "dense" => LayerKind::Dense,
        "matmul" => LayerKind::Matmul,
        "maxpool" => LayerKind::MaxPool,
        "avgpool" => LayerKind::AvgPool,
        "activation" => LayerKind::Activation,
        "flatten" => LayerKind::Flatten,
        "add" => LayerKind::Add,
        "softmax-approx" => LayerKind::SoftmaxApprox,
        "attention" => LayerKind::Attention,
        other => {
            return Err(GraphError::Schema(format!(
                "layer '{layer}': unknown kind '{other}'"
            )))
        }
    })
}

/// Parse and validate a model description document.
pub fn parse_model(document: &str) -> Result<ModelGraph, GraphError> {
    let doc: ModelDoc =
        serde_json::from_str(document).map_err(|e| GraphError::Schema(e.to_string()))?;

    if doc.input.shape.len() != 4 {
        return Err(GraphError::Schema(format!(
            "input shape must have 4 dims [N,H,W,I], got {}",
            doc.input.shape.len()
        )));
    }
    let input_shape: Shape4 = [
        doc.input.shape[0],
        doc.input.shape[1],
        doc.input.shape[2],
        doc.input.shape[3],
    ];
    if input_shape.iter().any(|&d| d == 0) {
        return Err(GraphError::Schema("input shape has a zero dimension".into()));
    }
    let input_format: FixedPointFormat = (&doc.input.format).into();

    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut nodes = Vec::with_capacity(doc.layers.len());
    for (idx, l) in doc.layers.iter().enumerate() {
        if ids.insert(l.id.clone(), idx).is_some() {
            return Err(GraphError::DuplicateId(l.id.clone()));
        }
        let kind = parse_kind(&l.kind, &l.id)?;
        let padding = match l.padding.as_deref() {
            None | Some("same") => Padding::Same,
            Some("valid") => Padding::Valid,
            Some(p) => {
                return Err(GraphError::Schema(format!(
                    "layer '{}': unknown padding '{p}'",
                    l.id
                )))
            }
        };
        let func = match l.func.as_deref() {
            None => None,
            Some("relu") => Some(ActFunc::Relu),
            Some("softmax") => Some(ActFunc::SoftmaxApprox),
            Some(f) => {
                return Err(GraphError::Schema(format!(
                    "layer '{}': unknown activation func '{f}'",
                    l.id
                )))
            }
        };
        let weights = match &l.weights {
            None => None,
            Some(w) => {
                let fmt = FixedPointFormat::new(w.bits, w.frac, w.signed);
                // shape checked later once input channels are known
                Some(
                    QTensor::new(vec![w.data.len()], w.data.clone(), fmt)
                        .map_err(|e| GraphError::BadTensor { layer: l.id.clone(), source: e })?,
                )
            }
        };
        let bias = match &l.bias {
            None => None,
            Some(b) => {
                let fmt = FixedPointFormat::new(b.bits, b.frac, b.signed);
                Some(
                    QTensor::new(vec![b.data.len()], b.data.clone(), fmt)
                        .map_err(|e| GraphError::BadTensor { layer: l.id.clone(), source: e })?,
                )
            }
        };
        nodes.push(LayerSpec {
            id: l.id.clone(),
            kind,
            kernel: l.kernel.unwrap_or([1, 1]),
            out_channels: l.out_channels.unwrap_or(0),
            stride: l.stride.unwrap_or([1, 1]),
            padding,
            weights,
            bias,
            out_shift: l.out_shift.unwrap_or(0),
            out_format: l.out_format.as_ref().map(Into::into),
            inputs: l.inputs.clone(),
            func,
            heads: l.heads.unwrap_or(1),
        });
        let _ = idx;
    }

    // Edges; unknown references are schema errors. The reserved name "input"
    // refers to the model input unless a layer shadows it.
    let mut edges = Vec::new();
    for (ci, n) in nodes.iter().enumerate() {
        for inp in &n.inputs {
            match ids.get(inp) {
                Some(&pi) => edges.push((pi, ci)),
                None if inp == "input" => {}
                None => {
                    return Err(GraphError::UnknownInput {
                        layer: n.id.clone(),
                        input: inp.clone(),
                    })
                }
            }
        }
    }

    // Cycle check via DFS (0 = white, 1 = on stack, 2 = done).
    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
    for &(p, c) in &edges {
        succ[p].push(c);
    }
    let mut color = vec![0u8; nodes.len()];
    let mut topo = Vec::with_capacity(nodes.len());
    fn dfs(
        v: usize,
        succ: &[Vec<usize>],
        color: &mut [u8],
        topo: &mut Vec<usize>,
        nodes: &[LayerSpec],
    ) -> Result<(), GraphError> {
        color[v] = 1;
        for &s in &succ[v] {
            match color[s] {
                0 => dfs(s, succ, color, topo, nodes)?,
                1 => return Err(GraphError::Cyclic(nodes[s].id.clone())),
                _ => {}
            }
        }
        color[v] = 2;
        topo.push(v);
        Ok(())
    }
    for v in 0..nodes.len() {
        if color[v] == 0 {
            dfs(v, &succ, &mut color, &mut topo, &nodes)?;
        }
    }
    topo.reverse();

    // Exactly one terminal node.
    let mut consumed = vec![false; nodes.len()];
    for &(p, _) in &edges {
        consumed[p] = true;
    }
    let terminals = consumed.iter().filter(|&&c| !c).count();
    if nodes.is_empty() {
        return Err(GraphError::Schema("model has no layers".into()));
    }
    if terminals != 1 {
        return Err(GraphError::TerminalCount(terminals));
    }

    // Shape inference + per-node validation, in topological order.
    let mut node_shapes: Vec<Shape4> = vec![[0; 4]; nodes.len()];
    let mut node_formats: Vec<FixedPointFormat> = vec![input_format; nodes.len()];
    let order = topo.clone();
    for &v in &order {
        let n = &nodes[v];
        let in_shapes: Vec<Shape4> = if n.inputs.is_empty() {
            vec![input_shape]
        } else {
            n.inputs
                .iter()
                .map(|i| ids.get(i).map_or(input_shape, |&p| node_shapes[p]))
                .collect()
        };
        let in_formats: Vec<FixedPointFormat> = if n.inputs.is_empty() {
            vec![input_format]
        } else {
            n.inputs
                .iter()
                .map(|i| ids.get(i).map_or(input_format, |&p| node_formats[p]))
                .collect()
        };
        let (shape, format) = infer_node(n, &in_shapes, &in_formats)?;
        node_shapes[v] = shape;
        node_formats[v] = format;
    }

    Ok(ModelGraph {
        name: doc.name,
        nodes,
        edges,
        input_shape,
        input_format,
        node_shapes,
        node_formats,
        topo,
    })
}

fn out_dim(in_dim: usize, k: usize, stride: usize, padding: Padding) -> Result<usize, String> {
    match padding {
        Padding::Same => Ok(in_dim.div_ceil(stride)),
        Padding::Valid => {
            if in_dim < k {
                Err(format!("window {k} larger than dimension {in_dim}"))
            } else {
                Ok((in_dim - k) / stride + 1)
            }
        }
    }
}

fn infer_node(
    n: &LayerSpec,
    in_shapes: &[Shape4],
    in_formats: &[FixedPointFormat],
) -> Result<(Shape4, FixedPointFormat), GraphError> {
    let err = |detail: String| GraphError::ShapeMismatch { layer: n.id.clone(), detail };
    let inv = |detail: String| GraphError::Invalid { layer: n.id.clone(), detail };
    let single = || -> Result<Shape4, GraphError> {
        if in_shapes.len() != 1 {
            Err(err(format!("expected 1 input, got {}", in_shapes.len())))
        } else {
            Ok(in_shapes[0])
        }
    };
    match n.kind {
        LayerKind::Conv2d => {
            let [nn, h, w, i] = single()?;
            let [kh, kw] = n.kernel;
            let o = n.out_channels;
            if kh < 1 || kw < 1 || o < 1 || n.stride[0] < 1 || n.stride[1] < 1 {
                return Err(inv("kernel, out_channels, stride must be >= 1".into()));
            }
            let wlen = n.weights.as_ref().map(|t| t.len()).unwrap_or(0);
            if wlen != kh * kw * i * o {
                return Err(inv(format!(
                    "weight length {wlen} != K_H*K_W*I*O = {}",
                    kh * kw * i * o
                )));
            }
            if let Some(b) = &n.bias {
                if b.len() != o {
                    return Err(inv(format!("bias length {} != O = {o}", b.len())));
                }
            }
            let oh = out_dim(h, kh, n.stride[0], n.padding).map_err(err)?;
            let ow = out_dim(w, kw, n.stride[1], n.padding).map_err(err)?;
            let fmt = n
                .out_format
                .ok_or_else(|| inv("conv2d requires out_format".into()))?;
            Ok(([nn, oh, ow, o], fmt))
        }
        LayerKind::Dense => {
            let [nn, h, w, i] = single()?;
            if h != 1 || w != 1 {
                return Err(err(format!(
                    "dense expects flattened input [N,1,1,F], got [{nn},{h},{w},{i}]"
                )));
            }
            let o = n.out_channels;
            let wlen = n.weights.as_ref().map(|t| t.len()).unwrap_or(0);
            if o < 1 || wlen != i * o {
                return Err(inv(format!("weight length {wlen} != I*O = {}", i * o)));
            }
            if let Some(b) = &n.bias {
                if b.len() != o {
                    return Err(inv(format!("bias length {} != O = {o}", b.len())));
                }
            }
            let fmt = n
                .out_format
                .ok_or_else(|| inv("dense requires out_format".into()))?;
            Ok(([nn, 1, 1, o], fmt))
        }
        LayerKind::Matmul => {
            let [nn, h, w, i] = single()?;
            if nn != 1 || w != 1 {
                return Err(err(format!(
                    "matmul expects input [1,H,1,I], got [{nn},{h},{w},{i}]"
                )));
            }
            let o = n.out_channels;
            let wlen = n.weights.as_ref().map(|t| t.len()).unwrap_or(0);
            if o < 1 || wlen != i * o {
                return Err(inv(format!("weight length {wlen} != I*O = {}", i * o)));
            }
            let fmt = n
                .out_format
                .ok_or_else(|| inv("matmul requires out_format".into()))?;
            Ok(([1, h, 1, o], fmt))
        }
        LayerKind::MaxPool | LayerKind::AvgPool => {
            let [nn, h, w, i] = single()?;
            let [kh, kw] = n.kernel;
            if kh < 1 || kw < 1 {
                return Err(inv("pool window must be >= 1".into()));
            }
            let oh = out_dim(h, kh, n.stride[0], n.padding).map_err(&err)?;
            let ow = out_dim(w, kw, n.stride[1], n.padding).map_err(&err)?;
            Ok(([nn, oh, ow, i], in_formats[0]))
        }
        LayerKind::Activation | LayerKind::SoftmaxApprox => {
            Ok((single()?, n.out_format.unwrap_or(in_formats[0])))
        }
        LayerKind::Flatten => {
            let [nn, h, w, i] = single()?;
            Ok(([nn, 1, 1, h * w * i], in_formats[0]))
        }
        LayerKind::Add => {
            if in_shapes.len() != 2 {
                return Err(err(format!("add expects 2 inputs, got {}", in_shapes.len())));
            }
            if in_shapes[0] != in_shapes[1] {
                return Err(err(format!(
                    "operand shapes differ: {:?} vs {:?}",
                    in_shapes[0], in_shapes[1]
                )));
            }
            if in_formats[0] != in_formats[1] {
                return Err(inv("add operands must share a fixed-point format".into()));
            }
            Ok((in_shapes[0], in_formats[0]))
        }
        LayerKind::Attention => {
            let [nn, h, w, i] = single()?;
            if nn != 1 || w != 1 {
                return Err(err(format!(
                    "attention expects input [1,seq,1,dim], got [{nn},{h},{w},{i}]"
                )));
            }
            let heads = n.heads;
            if heads == 0 {
                return Err(inv("head count must be >= 1".into()));
            }
            if n.out_channels != i {
                return Err(inv(format!(
                    "attention model dim {} must equal input dim {i}",
                    n.out_channels
                )));
            }
            if i % heads != 0 {
                return Err(inv(format!("model dim {i} not divisible by {heads} heads")));
            }
            let wlen = n.weights.as_ref().map(|t| t.len()).unwrap_or(0);
            if wlen != 4 * i * i {
                return Err(inv(format!(
                    "attention weight length {wlen} != 4*dim*dim = {}",
                    4 * i * i
                )));
            }
            let fmt = n
                .out_format
                .ok_or_else(|| inv("attention requires out_format".into()))?;
            Ok(([1, h, 1, i], fmt))
        }
    }
}

// ---- bundles ---------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoreOp {
    Conv2d,
    Dense,
    Matmul,
}

/// A column range `[start, end)` over the channel dimension.
pub type ColRange = (usize, usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceSlice {
    pub bundle: usize,
    pub col_range: Option<ColRange>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSource {
    ModelInput,
    Bundle(SourceSlice),
    /// Channel-wise concatenation of bundle outputs (attention head merge).
    Concat(Vec<SourceSlice>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum WeightSource {
    Constant(QTensor),
    /// Weights streamed from an earlier bundle's output (attention).
    BundleOutput { bundle: usize, transpose: bool, col_range: Option<ColRange> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipSource {
    ModelInput,
    Bundle(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolOp {
    pub kind: PoolKind,
    pub window: [usize; 2],
    pub stride: [usize; 2],
    pub padding: Padding,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EnabledOps {
    pub bias: bool,
    pub quant_shift: bool,
    pub skip_add: bool,
    pub activation: Option<ActFunc>,
    pub pooling: Option<PoolOp>,
    pub flatten: bool,
    pub stride_subsample: Option<[usize; 2]>,
}

/// One deterministic hardware-executable unit: a single compute-heavy core op
/// plus optional fused pixel-wise host ops.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub id: usize,
    pub core: CoreOp,
    pub kernel: [usize; 2],
    pub padding: Padding,
    pub input: DataSource,
    /// Shape of the gathered core input, [N,H,W,I].
    pub in_shape: Shape4,
    /// Raw engine output shape (stride-1, 'same' domain), [N,H,W,O].
    pub core_shape: Shape4,
    /// Final bundle output shape after all enabled host ops.
    pub out_shape: Shape4,
    pub weights: WeightSource,
    pub weight_format: FixedPointFormat,
    pub bias: Option<QTensor>,
    pub out_shift: u32,
    /// Extra host-side right shift (attention 1/sqrt(d) scale).
    pub scale_shift: u32,
    pub in_format: FixedPointFormat,
    /// Saturation target of the quantization shift (the core op's format).
    pub quant_format: FixedPointFormat,
    /// Format of the bundle's final output after all enabled ops.
    pub out_format: FixedPointFormat,
    pub enabled: EnabledOps,
    pub skip_source: Option<SkipSource>,
    /// Original graph node ids realized by this bundle.
    pub node_ids: Vec<String>,
    /// Filled by the tiler.
    pub params: Option<RuntimeParams>,
}

impl Bundle {
    pub fn out_channels(&self) -> usize {
        self.core_shape[3]
    }
}

// Absorption slots in the fixed enabled-op order. skip_add < activation <
// pooling < flatten; each may be enabled at most once per bundle.
fn slot_of(kind: LayerKind) -> u8 {
    match kind {
        LayerKind::Add => 3,
        LayerKind::Activation | LayerKind::SoftmaxApprox => 4,
        LayerKind::MaxPool | LayerKind::AvgPool => 5,
        LayerKind::Flatten => 6,
        _ => unreachable!("compute-heavy kinds are never absorbed"),
    }
}

struct Lowering<'g> {
    graph: &'g ModelGraph,
    ids: HashMap<String, usize>,
    consumers: Vec<Vec<usize>>,
    bundles: Vec<Bundle>,
    /// node index -> bundle whose *final* output carries that node's value
    node_value: HashMap<usize, usize>,
    /// highest absorption slot used per bundle
    last_slot: Vec<u8>,
}

/// Lower a validated graph into an ordered bundle list.
pub fn lower_to_bundles(graph: &ModelGraph) -> Result<Vec<Bundle>, GraphError> {
    let ids: HashMap<String, usize> =
        graph.nodes.iter().enumerate().map(|(i, n)| (n.id.clone(), i)).collect();
    let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); graph.nodes.len()];
    for &(p, c) in &graph.edges {
        consumers[p].push(c);
    }
    let mut st = Lowering {
        graph,
        ids,
        consumers,
        bundles: Vec::new(),
        node_value: HashMap::new(),
        last_slot: Vec::new(),
    };
    for &v in &graph.topo {
        st.lower_node(v)?;
    }
    Ok(st.bundles)
}

impl<'g> Lowering<'g> {
    /// Node index behind an `inputs` entry; `None` means the model input.
    fn resolve(&self, name: &str) -> Option<usize> {
        self.ids.get(name).copied()
    }

    fn node_input_source(&self, v: usize) -> Result<DataSource, GraphError> {
        let n = &self.graph.nodes[v];
        let Some(name) = n.inputs.first() else { return Ok(DataSource::ModelInput) };
        let Some(pi) = self.resolve(name) else { return Ok(DataSource::ModelInput) };
        let b = *self.node_value.get(&pi).ok_or_else(|| {
            GraphError::Unsupported(format!(
                "node '{}' consumes '{}', which is not a bundle output (already fused past)",
                n.id, name
            ))
        })?;
        Ok(DataSource::Bundle(SourceSlice { bundle: b, col_range: None }))
    }

    fn input_shape_of(&self, v: usize) -> Shape4 {
        let n = &self.graph.nodes[v];
        match n.inputs.first().and_then(|name| self.resolve(name)) {
            Some(p) => self.graph.node_shapes[p],
            None => self.graph.input_shape,
        }
    }

    fn input_format_of(&self, v: usize) -> FixedPointFormat {
        let n = &self.graph.nodes[v];
        match n.inputs.first().and_then(|name| self.resolve(name)) {
            Some(p) => self.graph.node_formats[p],
            None => self.graph.input_format,
        }
    }

    fn lower_node(&mut self, v: usize) -> Result<(), GraphError> {
        let kind = self.graph.nodes[v].kind;
        if kind.is_compute_heavy() {
            self.lower_core(v)
        } else if kind == LayerKind::Attention {
            self.lower_attention(v)
        } else {
            self.absorb_pixelwise(v)
        }
    }

    fn lower_core(&mut self, v: usize) -> Result<(), GraphError> {
        let n = &self.graph.nodes[v];
        let in_shape = self.input_shape_of(v);
        let [nn, h, w, i] = in_shape;
        let o = n.out_channels;
        let core = match n.kind {
            LayerKind::Conv2d => CoreOp::Conv2d,
            LayerKind::Dense => CoreOp::Dense,
            LayerKind::Matmul => CoreOp::Matmul,
            _ => unreachable!(),
        };
        // Engine always computes the stride-1 'same'-domain output; padding
        // crop and stride subsampling are host-side.
        let core_shape = [nn, h, w, o];
        let weights = n.weights.clone().expect("validated");
        let wfmt = weights.format;
        let wdata = match core {
            CoreOp::Conv2d => QTensor::new(
                vec![n.kernel[0], n.kernel[1], i, o],
                weights.data,
                wfmt,
            )
            .map_err(|e| GraphError::BadTensor { layer: n.id.clone(), source: e })?,
            _ => QTensor::new(vec![1, 1, i, o], weights.data, wfmt)
                .map_err(|e| GraphError::BadTensor { layer: n.id.clone(), source: e })?,
        };
        let subsample = if n.stride != [1, 1] { Some(n.stride) } else { None };
        let out_shape = self.graph.node_shapes[v];
        let bundle = Bundle {
            id: self.bundles.len(),
            core,
            kernel: if core == CoreOp::Conv2d { n.kernel } else { [1, 1] },
            padding: n.padding,
            input: self.node_input_source(v)?,
            in_shape,
            core_shape,
            out_shape,
            weights: WeightSource::Constant(wdata),
            weight_format: wfmt,
            bias: n.bias.clone(),
            out_shift: n.out_shift,
            scale_shift: 0,
            in_format: self.input_format_of(v),
            quant_format: self.graph.node_formats[v],
            out_format: self.graph.node_formats[v],
            enabled: EnabledOps {
                bias: n.bias.is_some(),
                quant_shift: true,
                stride_subsample: subsample,
                ..Default::default()
            },
            skip_source: None,
            node_ids: vec![n.id.clone()],
            params: None,
        };
        self.push_bundle(bundle, v);
        Ok(())
    }

    fn push_bundle(&mut self, bundle: Bundle, node: usize) {
        self.node_value.insert(node, bundle.id);
        self.last_slot.push(2);
        self.bundles.push(bundle);
    }

    fn absorb_pixelwise(&mut self, v: usize) -> Result<(), GraphError> {
        let n = &self.graph.nodes[v];
        let slot = slot_of(n.kind);

        // Identify the main operand: for add, the operand produced by the
        // later bundle; the other becomes the skip source.
        let (main_input, skip): (&str, Option<SkipSource>) = match n.kind {
            LayerKind::Add => {
                // An operand resolves to: a bundle output, the model input, or
                // a value already fused past (unrepresentable).
                let mut srcs = Vec::with_capacity(2);
                for inp in &n.inputs {
                    let s = match self.resolve(inp) {
                        None => Some(SkipSource::ModelInput),
                        Some(p) => match self.node_value.get(&p) {
                            Some(&b) => Some(SkipSource::Bundle(b)),
                            None => None,
                        },
                    };
                    srcs.push(s);
                }
                match (srcs[0], srcs[1]) {
                    (Some(SkipSource::Bundle(a)), Some(SkipSource::Bundle(b))) => {
                        if a == b {
                            return Err(GraphError::Unsupported(format!(
                                "add '{}' sums a tensor with itself",
                                n.id
                            )));
                        }
                        let (mi, si) = if a > b { (0, 1) } else { (1, 0) };
                        (n.inputs[mi].as_str(), srcs[si])
                    }
                    (Some(SkipSource::Bundle(_)), Some(SkipSource::ModelInput)) => {
                        (n.inputs[0].as_str(), Some(SkipSource::ModelInput))
                    }
                    (Some(SkipSource::ModelInput), Some(SkipSource::Bundle(_))) => {
                        (n.inputs[1].as_str(), Some(SkipSource::ModelInput))
                    }
                    _ => {
                        return Err(GraphError::Unsupported(format!(
                            "add '{}' has no bundle-producing operand",
                            n.id
                        )))
                    }
                }
            }
            _ => {
                let inp = n.inputs.first().map(String::as_str).unwrap_or("");
                if inp.is_empty() || self.resolve(inp).is_none() {
                    return Err(GraphError::Unsupported(format!(
                        "pixel-wise layer '{}' has no preceding compute-heavy anchor",
                        n.id
                    )));
                }
                (inp, None)
            }
        };

        let main_idx = self.resolve(main_input).expect("main operand is a node");
        let b = *self.node_value.get(&main_idx).ok_or_else(|| {
            GraphError::Unsupported(format!(
                "pixel-wise layer '{}' has no preceding compute-heavy anchor",
                n.id
            ))
        })?;

        // The anchor bundle's current output must not be forked elsewhere.
        if self.consumers[main_idx].len() != 1 {
            return Err(GraphError::Unsupported(format!(
                "pixel-wise layer '{}' consumes forked tensor '{}'",
                n.id, main_input
            )));
        }
        if slot <= self.last_slot[b] {
            return Err(GraphError::Unsupported(format!(
                "layer '{}' cannot be fused: op order slot already passed in bundle {b}",
                n.id
            )));
        }

        match n.kind {
            LayerKind::Add => {
                let skip = skip.unwrap();
                // shape equality was validated during parse
                self.bundles[b].enabled.skip_add = true;
                self.bundles[b].skip_source = Some(skip);
            }
            LayerKind::Activation => {
                self.bundles[b].enabled.activation = Some(n.func.unwrap_or(ActFunc::Relu));
            }
            LayerKind::SoftmaxApprox => {
                self.bundles[b].enabled.activation = Some(ActFunc::SoftmaxApprox);
            }
            LayerKind::MaxPool | LayerKind::AvgPool => {
                self.bundles[b].enabled.pooling = Some(PoolOp {
                    kind: if n.kind == LayerKind::MaxPool { PoolKind::Max } else { PoolKind::Avg },
                    window: n.kernel,
                    stride: n.stride,
                    padding: n.padding,
                });
            }
            LayerKind::Flatten => {
                self.bundles[b].enabled.flatten = true;
            }
            _ => unreachable!(),
        }
        self.last_slot[b] = slot;
        self.bundles[b].out_shape = self.graph.node_shapes[v];
        self.bundles[b].out_format = self.graph.node_formats[v];
        self.bundles[b].node_ids.push(n.id.clone());
        let prev = self.node_value.remove(&main_idx);
        debug_assert_eq!(prev, Some(b));
        self.node_value.insert(v, b);
        Ok(())
    }

    fn lower_attention(&mut self, v: usize) -> Result<(), GraphError> {
        let n = self.graph.nodes[v].clone();
        let input = self.node_input_source(v)?;
        let in_shape = self.input_shape_of(v);
        let in_format = self.input_format_of(v);
        let bundles = decompose_attention_with(
            &n,
            input,
            in_shape,
            in_format,
            self.bundles.len(),
        )?;
        let last = self.bundles.len() + bundles.len() - 1;
        self.bundles.extend(bundles);
        self.last_slot.resize(self.bundles.len(), 2);
        self.node_value.insert(v, last);
        Ok(())
    }
}

/// Decompose an attention layer into matmul bundles.
///
/// Emits Q/K/V projections, a scaled Q·Kᵀ with host-stage softmax per head,
/// attention·V per head, and one output projection over the concatenated
/// heads. All intermediates share the layer's output format and shift.
pub fn decompose_attention(
    spec: &LayerSpec,
    input_shape: Shape4,
    input_format: FixedPointFormat,
) -> Result<Vec<Bundle>, GraphError> {
    decompose_attention_with(spec, DataSource::ModelInput, input_shape, input_format, 0)
}

fn decompose_attention_with(
    spec: &LayerSpec,
    input: DataSource,
    input_shape: Shape4,
    input_format: FixedPointFormat,
    first_id: usize,
) -> Result<Vec<Bundle>, GraphError> {
    let inv = |d: String| GraphError::Invalid { layer: spec.id.clone(), detail: d };
    let [_, seq, _, dim] = input_shape;
    let heads = spec.heads;
    if heads == 0 {
        return Err(inv("head count must be >= 1".into()));
    }
    if dim % heads != 0 {
        return Err(inv(format!("model dim {dim} not divisible by {heads} heads")));
    }
    let d_h = dim / heads;
    let w_all = spec.weights.as_ref().ok_or_else(|| inv("attention requires weights".into()))?;
    if w_all.len() != 4 * dim * dim {
        return Err(inv(format!("attention weight length {} != 4*dim*dim", w_all.len())));
    }
    let wfmt = w_all.format;
    let ofmt = spec.out_format.expect("validated");
    let shift = spec.out_shift;
    // 1/sqrt(d_h) rendered as a right shift by round(log2(d_h)/2).
    let scale_shift = (usize::BITS - 1 - (d_h as u32).leading_zeros()).div_ceil(2);

    let proj = |slice: usize| -> QTensor {
        let off = slice * dim * dim;
        QTensor::new(vec![1, 1, dim, dim], w_all.data[off..off + dim * dim].to_vec(), wfmt)
            .expect("validated range")
    };

    let mut out = Vec::new();
    let mut mk = |input: DataSource,
                  in_shape: Shape4,
                  in_format: FixedPointFormat,
                  weights: WeightSource,
                  o: usize,
                  scale: u32,
                  act: Option<ActFunc>,
                  tag: &str| {
        let id = first_id + out.len();
        let core_shape = [1, in_shape[1], 1, o];
        // streamed weights carry the producing bundle's output format
        let weight_format = match &weights {
            WeightSource::Constant(_) => wfmt,
            WeightSource::BundleOutput { .. } => ofmt,
        };
        out.push(Bundle {
            id,
            core: CoreOp::Matmul,
            kernel: [1, 1],
            padding: Padding::Same,
            input,
            in_shape,
            core_shape,
            out_shape: core_shape,
            weights,
            weight_format,
            bias: None,
            out_shift: shift,
            scale_shift: scale,
            in_format,
            quant_format: ofmt,
            out_format: ofmt,
            enabled: EnabledOps { quant_shift: true, activation: act, ..Default::default() },
            skip_source: None,
            node_ids: vec![format!("{}#{tag}", spec.id)],
            params: None,
        });
        id
    };

    let q = mk(input.clone(), input_shape, input_format, WeightSource::Constant(proj(0)), dim, 0, None, "q");
    let k = mk(input.clone(), input_shape, input_format, WeightSource::Constant(proj(1)), dim, 0, None, "k");
    let v = mk(input, input_shape, input_format, WeightSource::Constant(proj(2)), dim, 0, None, "v");

    let mut av_ids = Vec::with_capacity(heads);
    for hd in 0..heads {
        let cols = (hd * d_h, (hd + 1) * d_h);
        // Q_h · K_hᵀ, scaled, softmaxed host-side
        let qk = mk(
            DataSource::Bundle(SourceSlice { bundle: q, col_range: Some(cols) }),
            [1, seq, 1, d_h],
            ofmt,
            WeightSource::BundleOutput { bundle: k, transpose: true, col_range: Some(cols) },
            seq,
            scale_shift,
            Some(ActFunc::SoftmaxApprox),
            &format!("qk{hd}"),
        );
        // A_h · V_h
        let av = mk(
            DataSource::Bundle(SourceSlice { bundle: qk, col_range: None }),
            [1, seq, 1, seq],
            ofmt,
            WeightSource::BundleOutput { bundle: v, transpose: false, col_range: Some(cols) },
            d_h,
            0,
            None,
            &format!("av{hd}"),
        );
        av_ids.push(av);
    }

    let concat = if av_ids.len() == 1 {
        DataSource::Bundle(SourceSlice { bundle: av_ids[0], col_range: None })
    } else {
        DataSource::Concat(
            av_ids.iter().map(|&b| SourceSlice { bundle: b, col_range: None }).collect(),
        )
    };
    let out_id = mk(concat, [1, seq, 1, dim], ofmt, WeightSource::Constant(proj(3)), dim, 0, None, "out");
    // the final bundle realizes the original node id
    out.last_mut().unwrap().node_ids = vec![spec.id.clone()];
    let _ = out_id;
    Ok(out)
}

/// Replay a bundle list symbolically, should reproduce every intermediate
/// shape (lowering is shape-preserving).
pub fn bundle_shape_chain(bundles: &[Bundle]) -> Vec<Shape4> {
    bundles.iter().map(|b| b.out_shape).collect()
}

/// Count how many bundles carry a skip source.
pub fn skip_count(bundles: &[Bundle]) -> usize {
    bundles.iter().filter(|b| b.skip_source.is_some()).count()
}

pub fn validate_node_coverage(graph: &ModelGraph, bundles: &[Bundle]) -> bool {
    let mut seen: HashSet<&str> = HashSet::new();
    for b in bundles {
        for id in &b.node_ids {
            if !id.contains('#') && !seen.insert(id.as_str()) {
                return false;
            }
        }
    }
    graph.nodes.iter().all(|n| seen.contains(n.id.as_str()))
}
