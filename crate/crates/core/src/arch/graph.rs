//! Unrolled compute graph: parameter nodes plus the dataflow program that
//! the runtime interprets.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Shape;

use super::config::{NetworkConfig, Variant};
use super::shapes::propagate_shapes;

pub type NodeId = usize;
pub type OpId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Module {
    Encoder,
    Decoder,
    Transition,
    Head,
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Module::Encoder => "encoder",
            Module::Decoder => "decoder",
            Module::Transition => "transition",
            Module::Head => "head",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    BatchNorm {
        channels: usize,
    },
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv { kernel: 1, .. } => "conv1x1",
            LayerKind::Conv { .. } => "conv3x3",
            LayerKind::BatchNorm { .. } => "batchnorm",
        }
    }
}

/// A parameterized layer. Nodes are physical: every op that references a
/// node uses the same weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamNode {
    pub path: String,
    pub kind: LayerKind,
    pub module: Module,
    pub level: usize,
    /// Pass index for step-specific convs; `None` for layers every pass shares.
    pub step: Option<usize>,
    /// Stages whose head depends on this node.
    pub stages: BTreeSet<usize>,
}

impl ParamNode {
    /// Learnable tensors owned by this node, as `(path, shape)`.
    pub fn tensors(&self) -> Vec<(String, Shape)> {
        match self.kind {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
            } => vec![
                (
                    format!("{}/weight", self.path),
                    Shape::new(out_channels, in_channels, kernel, kernel),
                ),
                (format!("{}/bias", self.path), Shape::vector(out_channels)),
            ],
            LayerKind::BatchNorm { channels } => vec![
                (format!("{}/gamma", self.path), Shape::vector(channels)),
                (format!("{}/beta", self.path), Shape::vector(channels)),
            ],
        }
    }

    pub fn param_count(&self) -> usize {
        match self.kind {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
            } => out_channels * in_channels * kernel * kernel + out_channels,
            LayerKind::BatchNorm { channels } => 2 * channels,
        }
    }

    pub fn in_channels(&self) -> usize {
        match self.kind {
            LayerKind::Conv { in_channels, .. } => in_channels,
            LayerKind::BatchNorm { channels } => channels,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self.kind {
            LayerKind::Conv { out_channels, .. } => out_channels,
            LayerKind::BatchNorm { channels } => channels,
        }
    }
}

/// Where a backward skip takes its feedback half from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feedback {
    /// No earlier feature exists: the input is duplicated.
    Duplicate,
    /// Transition output of the same level in the previous pass.
    PriorPass,
    /// Transition output of the same level in the previous stage's final pass.
    PriorStage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpSpec {
    Input,
    /// Convolution, optionally followed by batch norm and ReLU.
    Conv {
        conv: NodeId,
        bn: Option<NodeId>,
        relu: bool,
    },
    MaxPool,
    Upsample,
    /// `[encoder feature, upsampled feature]`.
    ForwardSkip,
    /// Inputs are `[x_in]` for [`Feedback::Duplicate`], otherwise `[feedback, x_in]`.
    BackwardSkip(Feedback),
}

impl OpSpec {
    pub fn name(&self) -> &'static str {
        match self {
            OpSpec::Input => "input",
            OpSpec::Conv { bn: Some(_), .. } => "conv_bn_relu",
            OpSpec::Conv { .. } => "conv",
            OpSpec::MaxPool => "maxpool",
            OpSpec::Upsample => "upsample",
            OpSpec::ForwardSkip => "fsc",
            OpSpec::BackwardSkip(_) => "bsc",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProgramOp {
    pub path: String,
    pub spec: OpSpec,
    pub inputs: Vec<OpId>,
    pub stage: usize,
    pub pass: usize,
    /// Encoder or decoder level the op belongs to; 0 for the input.
    pub level: usize,
}

/// Fully unrolled network. `ops` is in topological order; `heads[s]` is the
/// logit op of stage `s + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComputeGraph {
    pub config: NetworkConfig,
    pub nodes: Vec<ParamNode>,
    pub ops: Vec<ProgramOp>,
    pub heads: Vec<OpId>,
}

impl ComputeGraph {
    /// Builds and validates the graph for `config.variant`.
    pub fn build(config: &NetworkConfig) -> Result<Self> {
        match config.variant {
            Variant::PlNet => build_plnet(config),
            Variant::UNet => build_unet(config),
        }
    }

    pub fn stages(&self) -> usize {
        self.heads.len()
    }

    pub fn node(&self, path: &str) -> Option<&ParamNode> {
        self.nodes.iter().find(|n| n.path == path)
    }

    pub fn node_id(&self, path: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.path == path)
    }

    pub fn op_id(&self, path: &str) -> Option<OpId> {
        self.ops.iter().position(|o| o.path == path)
    }

    /// Producer-to-consumer links between ops.
    pub fn edges(&self) -> Vec<(OpId, OpId)> {
        self.ops
            .iter()
            .enumerate()
            .flat_map(|(i, op)| op.inputs.iter().map(move |&p| (p, i)))
            .collect()
    }

    /// Nodes used only by the given stage.
    pub fn stage_exclusive(&self, stage: usize) -> Vec<&ParamNode> {
        self.nodes
            .iter()
            .filter(|n| n.stages.len() == 1 && n.stages.contains(&stage))
            .collect()
    }

    /// Ops needed to compute the heads of stages `1..=stage`.
    pub fn ops_for_stage(&self, stage: usize) -> Vec<OpId> {
        let roots: Vec<OpId> = self.heads[..stage.min(self.heads.len())].to_vec();
        let live = reachable(&self.ops, &roots);
        (0..self.ops.len()).filter(|&i| live[i]).collect()
    }

    /// Names of every learnable tensor, in node order.
    pub fn tensor_specs(&self) -> Vec<(String, Shape)> {
        self.nodes.iter().flat_map(ParamNode::tensors).collect()
    }
}

fn reachable(ops: &[ProgramOp], roots: &[OpId]) -> Vec<bool> {
    let mut live = vec![false; ops.len()];
    let mut stack = roots.to_vec();
    while let Some(i) = stack.pop() {
        if !live[i] {
            live[i] = true;
            stack.extend(&ops[i].inputs);
        }
    }
    live
}

struct Builder {
    config: NetworkConfig,
    nodes: Vec<ParamNode>,
    ops: Vec<ProgramOp>,
    stage: usize,
    pass: usize,
    level: usize,
}

impl Builder {
    fn new(config: &NetworkConfig) -> Self {
        Self {
            config: config.clone(),
            nodes: Vec::new(),
            ops: Vec::new(),
            stage: 1,
            pass: 1,
            level: 0,
        }
    }

    fn ch(&self, level: usize) -> usize {
        self.config.channels(level)
    }

    fn node(&mut self, path: String, kind: LayerKind, module: Module, level: usize, step: Option<usize>) -> NodeId {
        self.nodes.push(ParamNode {
            path,
            kind,
            module,
            level,
            step,
            stages: BTreeSet::new(),
        });
        self.nodes.len() - 1
    }

    /// Conv + BN pair under `prefix`; returns the conv node (the BN follows it).
    fn conv_bn(
        &mut self,
        prefix: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        module: Module,
        level: usize,
        step: Option<usize>,
    ) -> NodeId {
        let conv = self.node(
            format!("{prefix}/conv"),
            LayerKind::Conv {
                in_channels: cin,
                out_channels: cout,
                kernel,
            },
            module,
            level,
            step,
        );
        self.node(
            format!("{prefix}/bn"),
            LayerKind::BatchNorm { channels: cout },
            module,
            level,
            step,
        );
        conv
    }

    fn op(&mut self, path: String, spec: OpSpec, inputs: Vec<OpId>) -> OpId {
        let path = if matches!(spec, OpSpec::Input) {
            path
        } else {
            format!("s{}/p{}/{path}", self.stage, self.pass)
        };
        self.ops.push(ProgramOp {
            path,
            spec,
            inputs,
            stage: self.stage,
            pass: self.pass,
            level: self.level,
        });
        self.ops.len() - 1
    }

    /// Conv-BN-ReLU op using the pair whose conv is `conv`.
    fn cbr(&mut self, path: String, conv: NodeId, input: OpId) -> OpId {
        self.op(
            path,
            OpSpec::Conv {
                conv,
                bn: Some(conv + 1),
                relu: true,
            },
            vec![input],
        )
    }

    fn head(&mut self, path: String, conv: NodeId, input: OpId) -> OpId {
        self.op(
            path,
            OpSpec::Conv {
                conv,
                bn: None,
                relu: false,
            },
            vec![input],
        )
    }

    /// Drops ops no head depends on, then nodes no op uses, and tags every
    /// remaining node with the stages that reach it.
    fn finish(self, heads: Vec<OpId>) -> Result<ComputeGraph> {
        let live = reachable(&self.ops, &heads);
        let mut remap = vec![usize::MAX; self.ops.len()];
        let mut ops = Vec::new();
        for (i, op) in self.ops.into_iter().enumerate() {
            if live[i] {
                remap[i] = ops.len();
                ops.push(op);
            }
        }
        for op in &mut ops {
            for p in &mut op.inputs {
                *p = remap[*p];
            }
        }
        let heads: Vec<OpId> = heads.iter().map(|&h| remap[h]).collect();

        let mut stages: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); self.nodes.len()];
        for (s, &h) in heads.iter().enumerate() {
            let reach = reachable(&ops, &[h]);
            for (op, _) in ops.iter().zip(&reach).filter(|(_, &r)| r) {
                if let OpSpec::Conv { conv, bn, .. } = op.spec {
                    stages[conv].insert(s + 1);
                    if let Some(bn) = bn {
                        stages[bn].insert(s + 1);
                    }
                }
            }
        }
        let mut node_map = vec![usize::MAX; self.nodes.len()];
        let mut nodes = Vec::new();
        for (i, (mut node, st)) in self.nodes.into_iter().zip(stages).enumerate() {
            if st.is_empty() {
                log::debug!("dropping unused node {}", node.path);
                continue;
            }
            node.stages = st;
            node_map[i] = nodes.len();
            nodes.push(node);
        }
        for op in &mut ops {
            if let OpSpec::Conv { conv, bn, .. } = &mut op.spec {
                *conv = node_map[*conv];
                if let Some(b) = bn {
                    *b = node_map[*b];
                }
            }
        }
        let graph = ComputeGraph {
            config: self.config,
            nodes,
            ops,
            heads,
        };
        let input = Shape::new(
            1,
            graph.config.in_channels,
            graph.config.input_size,
            graph.config.input_size,
        );
        propagate_shapes(&graph, input).into_result()?;
        Ok(graph)
    }
}

/// Builds the progressive-learning network.
///
/// Every pass of a stage runs the full encoder-decoder at the stage's depth.
/// Each encoder level starts with a step-specific conv fed by a backward skip
/// (`[feedback, x_in]`, or `[x_in, x_in]` when nothing came before) followed by
/// a shared conv. Decoder levels mirror this behind a forward skip. A shared
/// transition conv per level maps the decoder-path feature down to the
/// channel count of the level above; its output is both upsampled for the
/// next decoder level and fed back to the encoder in the following pass, or
/// carried to the next stage after the last pass.
pub fn build_plnet(config: &NetworkConfig) -> Result<ComputeGraph> {
    if config.variant != Variant::PlNet {
        return Err(Error::config("build_plnet needs variant plnet"));
    }
    config.validate()?;
    let mut b = Builder::new(config);
    let depth = config.max_depth();
    let steps = config.steps;

    // Per-level node ids.
    let mut enc_step = vec![vec![0; steps + 1]; depth + 1];
    let mut dec_step = vec![vec![0; steps + 1]; depth + 1];
    let mut enc_block = vec![0; depth + 1];
    let mut dec_block = vec![0; depth + 1];
    let mut trans = vec![0; depth + 1];
    for l in 1..=depth {
        let (cprev, c) = (b.ch(l - 1), b.ch(l));
        for i in 1..=steps {
            enc_step[l][i] = b.conv_bn(
                &format!("enc/L{l}/step{i}"),
                2 * cprev,
                c,
                3,
                Module::Encoder,
                l,
                Some(i),
            );
        }
        enc_block[l] = b.conv_bn(&format!("enc/L{l}/block"), c, c, 3, Module::Encoder, l, None);
        if l < depth {
            for i in 1..=steps {
                dec_step[l][i] = b.conv_bn(&format!("dec/L{l}/step{i}"), 2 * c, c, 3, Module::Decoder, l, Some(i));
            }
            dec_block[l] = b.conv_bn(&format!("dec/L{l}/block"), c, c, 3, Module::Decoder, l, None);
        }
        trans[l] = b.conv_bn(&format!("up/L{l}"), c, cprev, 3, Module::Transition, l, None);
    }
    let head_nodes: Vec<NodeId> = (1..=config.stages())
        .map(|s| {
            b.node(
                format!("head/stage{s}/conv"),
                LayerKind::Conv {
                    in_channels: b.ch(1),
                    out_channels: config.out_channels,
                    kernel: 1,
                },
                Module::Head,
                1,
                None,
            )
        })
        .collect();

    let input = b.op("input".into(), OpSpec::Input, vec![]);
    let mut heads = Vec::new();
    // Transition outputs of the previous stage's final pass, by level.
    let mut carried: Vec<Option<OpId>> = vec![None; depth + 1];
    for (s, &d) in config.stage_depths.iter().enumerate() {
        b.stage = s + 1;
        let mut prior: Vec<Option<OpId>> = vec![None; depth + 1];
        let mut last_dec1 = input;
        for i in 1..=steps {
            b.pass = i;
            let mut enc = vec![input; d + 1];
            for l in 1..=d {
                b.level = l;
                let x_in = if l == 1 {
                    input
                } else {
                    b.op(format!("enc/L{l}/pool"), OpSpec::MaxPool, vec![enc[l - 1]])
                };
                let (kind, fb) = match (prior[l], carried[l]) {
                    (Some(p), _) => (Feedback::PriorPass, Some(p)),
                    (None, Some(c)) => (Feedback::PriorStage, Some(c)),
                    (None, None) => (Feedback::Duplicate, None),
                };
                let inputs = match fb {
                    Some(f) => vec![f, x_in],
                    None => vec![x_in],
                };
                let bsc = b.op(format!("enc/L{l}/bsc"), OpSpec::BackwardSkip(kind), inputs);
                let h = b.cbr(format!("enc/L{l}/step"), enc_step[l][i], bsc);
                enc[l] = b.cbr(format!("enc/L{l}/block"), enc_block[l], h);
            }
            let mut t = vec![None; d + 1];
            b.level = d;
            t[d] = Some(b.cbr(format!("up/L{d}"), trans[d], enc[d]));
            let mut dec = enc[d];
            for l in (1..d).rev() {
                b.level = l;
                let u = b.op(format!("dec/L{l}/upsample"), OpSpec::Upsample, vec![t[l + 1].unwrap()]);
                let f = b.op(format!("dec/L{l}/fsc"), OpSpec::ForwardSkip, vec![enc[l], u]);
                let h = b.cbr(format!("dec/L{l}/step"), dec_step[l][i], f);
                dec = b.cbr(format!("dec/L{l}/block"), dec_block[l], h);
                t[l] = Some(b.cbr(format!("up/L{l}"), trans[l], dec));
            }
            prior = t;
            last_dec1 = dec;
        }
        b.level = 1;
        heads.push(b.head("head".into(), head_nodes[s], last_dec1));
        carried = vec![None; depth + 1];
        carried[..=d].copy_from_slice(&prior);
    }
    b.finish(heads)
}

/// Builds the five-level U-Net baseline: two conv-BN-ReLU layers per block,
/// max-pool down, and on the way up a 1×1 conv-BN-ReLU that halves channels,
/// bilinear upsampling and a forward skip.
pub fn build_unet(config: &NetworkConfig) -> Result<ComputeGraph> {
    if config.variant != Variant::UNet {
        return Err(Error::config("build_unet needs variant unet"));
    }
    config.validate()?;
    let mut b = Builder::new(config);
    let depth = config.max_depth();
    let mut enc_nodes = vec![(0, 0); depth + 1];
    let mut dec_nodes = vec![(0, 0, 0); depth + 1];
    for l in 1..=depth {
        let (cprev, c) = (b.ch(l - 1), b.ch(l));
        let c1 = b.conv_bn(&format!("enc/L{l}/conv1"), cprev, c, 3, Module::Encoder, l, None);
        let c2 = b.conv_bn(&format!("enc/L{l}/conv2"), c, c, 3, Module::Encoder, l, None);
        enc_nodes[l] = (c1, c2);
    }
    for l in (1..depth).rev() {
        let c = b.ch(l);
        let up = b.conv_bn(&format!("dec/L{l}/up"), b.ch(l + 1), c, 1, Module::Decoder, l, None);
        let c1 = b.conv_bn(&format!("dec/L{l}/conv1"), 2 * c, c, 3, Module::Decoder, l, None);
        let c2 = b.conv_bn(&format!("dec/L{l}/conv2"), c, c, 3, Module::Decoder, l, None);
        dec_nodes[l] = (up, c1, c2);
    }
    let head_node = b.node(
        "head/conv".into(),
        LayerKind::Conv {
            in_channels: b.ch(1),
            out_channels: config.out_channels,
            kernel: 1,
        },
        Module::Head,
        1,
        None,
    );

    let input = b.op("input".into(), OpSpec::Input, vec![]);
    let mut enc = vec![input; depth + 1];
    for l in 1..=depth {
        b.level = l;
        let x = if l == 1 {
            input
        } else {
            b.op(format!("enc/L{l}/pool"), OpSpec::MaxPool, vec![enc[l - 1]])
        };
        let h = b.cbr(format!("enc/L{l}/conv1"), enc_nodes[l].0, x);
        enc[l] = b.cbr(format!("enc/L{l}/conv2"), enc_nodes[l].1, h);
    }
    let mut cur = enc[depth];
    for l in (1..depth).rev() {
        b.level = l;
        let (up, c1, c2) = dec_nodes[l];
        let r = b.cbr(format!("dec/L{l}/up"), up, cur);
        let u = b.op(format!("dec/L{l}/upsample"), OpSpec::Upsample, vec![r]);
        let f = b.op(format!("dec/L{l}/fsc"), OpSpec::ForwardSkip, vec![enc[l], u]);
        let h = b.cbr(format!("dec/L{l}/conv1"), c1, f);
        cur = b.cbr(format!("dec/L{l}/conv2"), c2, h);
    }
    b.level = 1;
    let head = b.head("head".into(), head_node, cur);
    b.finish(vec![head])
}

/// Parameter totals grouped by various keys.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamReport {
    pub nodes: Vec<(String, usize)>,
    pub by_module: BTreeMap<Module, usize>,
    /// Keyed by `step1`, `step2`, ... and `shared`.
    pub by_step: BTreeMap<String, usize>,
    /// Keyed by the stage set, e.g. `stage1+stage2`.
    pub by_stages: BTreeMap<String, usize>,
    pub by_level: BTreeMap<usize, usize>,
    pub total: usize,
}

impl ParamReport {
    pub fn size_bytes(&self) -> usize {
        self.total * 4
    }

    pub fn size_mb(&self) -> f64 {
        self.size_bytes() as f64 / 1e6
    }
}

pub fn stage_set_label(stages: &BTreeSet<usize>) -> String {
    stages.iter().map(|s| format!("stage{s}")).collect::<Vec<_>>().join("+")
}

/// Symbolic parameter count; shared nodes are counted once.
pub fn count_parameters(graph: &ComputeGraph) -> ParamReport {
    let mut r = ParamReport {
        nodes: Vec::with_capacity(graph.nodes.len()),
        by_module: BTreeMap::new(),
        by_step: BTreeMap::new(),
        by_stages: BTreeMap::new(),
        by_level: BTreeMap::new(),
        total: 0,
    };
    for n in &graph.nodes {
        let c = n.param_count();
        r.nodes.push((n.path.clone(), c));
        *r.by_module.entry(n.module).or_default() += c;
        let step = n.step.map_or_else(|| "shared".to_string(), |s| format!("step{s}"));
        *r.by_step.entry(step).or_default() += c;
        *r.by_stages.entry(stage_set_label(&n.stages)).or_default() += c;
        *r.by_level.entry(n.level).or_default() += c;
        r.total += c;
    }
    r
}
