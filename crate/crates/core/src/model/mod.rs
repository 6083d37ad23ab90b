//! Runtime: weights, batch-norm statistics and the interpreter that executes
//! a [`ComputeGraph`] on a tape.

mod export;
mod fusion;

pub use export::{mask_to_gray8, probability_to_gray8};
pub use fusion::{fuse_backward_skip, fuse_forward_skip, fuse_stage_outputs, progressive_unroll, StepContext};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::arch::{ComputeGraph, Module, NetworkConfig, NodeId, OpId, OpSpec};
use crate::error::{Error, Result};
use crate::nn::{kernels, BnConfig, BnRunning, Mode, OpKind, ParamStore, Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Transition outputs of a stage's final pass, by level; what the next
/// stage's first pass feeds back.
#[derive(Debug, Clone, Default)]
pub struct Carry {
    pub by_level: Vec<Option<Var>>,
}

#[derive(Debug, Clone)]
pub struct StageRun {
    /// `None` when the head was skipped.
    pub logits: Option<Var>,
    pub carry: Carry,
    /// Value of every program op this stage ran, indexed by op id.
    pub values: Vec<Option<Var>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PredictMode {
    /// Sigmoid of the summed logits of every stage.
    #[default]
    Fused,
    /// Sigmoid of the last stage's logits; earlier heads are not evaluated.
    FinalStage,
}

#[derive(Debug, Clone)]
pub struct StageOutputs<T> {
    pub logits: Vec<Tensor<T>>,
    pub probs: Vec<Tensor<T>>,
    pub fused: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct Prediction<T> {
    pub prob: Tensor<T>,
    pub trace: Vec<OpKind>,
}

/// Which uses of a batch-norm node share running statistics.
///
/// Weights are always shared; only the inference-time mean and variance
/// differ. With `Node` every pass and stage that runs a node feeds one
/// estimate. With `Use` each program op keeps its own, so passes whose inputs
/// have different distributions do not blur each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnScope {
    Node,
    #[default]
    Use,
}

impl std::str::FromStr for BnScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "node" => Ok(BnScope::Node),
            "use" => Ok(BnScope::Use),
            other => Err(Error::config(format!(
                "unknown batch-norm scope {other:?} (expected node or use)"
            ))),
        }
    }
}

impl std::fmt::Display for BnScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BnScope::Node => "node",
            BnScope::Use => "use",
        })
    }
}

/// A graph together with its weights and batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct Model<T> {
    graph: ComputeGraph,
    params: ParamStore<T>,
    node_params: Vec<Vec<usize>>,
    bn: BnConfig,
    scope: BnScope,
    /// Running statistics, one per slot.
    running: Vec<BnRunning<T>>,
    slot_names: Vec<String>,
    /// Slot used by each op's batch norm.
    op_slot: Vec<Option<usize>>,
}

impl<T: Scalar> Model<T> {
    /// Builds the graph for `config` and initializes weights from `seed`.
    pub fn new(config: &NetworkConfig, seed: u64) -> Result<Self> {
        Ok(Self::init(ComputeGraph::build(config)?, seed))
    }

    /// He-normal conv weights, zero biases, unit gamma, zero beta.
    pub fn init(graph: ComputeGraph, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for node in &graph.nodes {
            for (name, shape) in node.tensors() {
                let t = if name.ends_with("/weight") {
                    let fan_in = shape.channels * shape.height * shape.width;
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
                    let data = (0..shape.numel())
                        .map(|_| T::from_f64_lossy(normal.sample(&mut rng)))
                        .collect();
                    Tensor::from_vec(shape, data).expect("shape from node")
                } else if name.ends_with("/gamma") {
                    Tensor::full(shape, T::one())
                } else {
                    Tensor::zeros(shape)
                };
                params.insert(name, t).expect("node paths are unique");
            }
        }
        Self::from_parts(graph, params).expect("freshly built parameters match the graph")
    }

    /// Pairs a graph with existing weights; every node tensor must be present
    /// with the right shape. Running statistics start at mean 0, variance 1.
    pub fn from_parts(graph: ComputeGraph, params: ParamStore<T>) -> Result<Self> {
        let mut node_params = Vec::with_capacity(graph.nodes.len());
        let mut expected = 0;
        for node in &graph.nodes {
            let mut ids = Vec::new();
            for (name, shape) in node.tensors() {
                let i = params
                    .position(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
                let got = params.get(i).shape();
                if got != shape {
                    return Err(Error::Checkpoint(format!("{name}: expected {shape}, found {got}")));
                }
                ids.push(i);
                expected += 1;
            }
            node_params.push(ids);
        }
        if expected != params.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors supplied, graph has {expected}",
                params.len()
            )));
        }
        let mut model = Self {
            graph,
            params,
            node_params,
            bn: BnConfig::default(),
            scope: BnScope::default(),
            running: Vec::new(),
            slot_names: Vec::new(),
            op_slot: Vec::new(),
        };
        model.set_bn_scope(model.scope);
        Ok(model)
    }

    /// Switches the statistics scope; all running statistics are reset.
    pub fn set_bn_scope(&mut self, scope: BnScope) {
        let g = &self.graph;
        let mut names: Vec<String> = Vec::new();
        let mut running = Vec::new();
        let mut by_node = vec![None; g.nodes.len()];
        let mut op_slot = vec![None; g.ops.len()];
        for (i, op) in g.ops.iter().enumerate() {
            let OpSpec::Conv { bn: Some(bn), .. } = op.spec else {
                continue;
            };
            let fresh = |names: &mut Vec<String>, running: &mut Vec<BnRunning<T>>, name: String| {
                names.push(name);
                running.push(BnRunning::new(g.nodes[bn].in_channels()));
                names.len() - 1
            };
            op_slot[i] = Some(match scope {
                BnScope::Node => {
                    *by_node[bn].get_or_insert_with(|| fresh(&mut names, &mut running, g.nodes[bn].path.clone()))
                }
                BnScope::Use => fresh(&mut names, &mut running, format!("{}/bn", op.path)),
            });
        }
        self.scope = scope;
        self.running = running;
        self.slot_names = names;
        self.op_slot = op_slot;
    }

    pub fn bn_scope(&self) -> BnScope {
        self.scope
    }

    pub fn graph(&self) -> &ComputeGraph {
        &self.graph
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.graph.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn bn_config(&self) -> BnConfig {
        self.bn
    }

    pub fn set_bn_config(&mut self, bn: BnConfig) {
        self.bn = bn;
    }

    /// Running statistics by slot name: the batch-norm node path, or the op
    /// path plus `/bn` under [`BnScope::Use`].
    pub fn running(&self) -> impl Iterator<Item = (&str, &BnRunning<T>)> {
        self.slot_names.iter().map(String::as_str).zip(&self.running)
    }

    pub fn running_mut(&mut self, slot: &str) -> Option<&mut BnRunning<T>> {
        let i = self.slot_names.iter().position(|n| n == slot)?;
        Some(&mut self.running[i])
    }

    /// Statistics the batch norm of op `op` reads and updates.
    pub fn op_running(&self, op: OpId) -> Option<&BnRunning<T>> {
        self.op_slot.get(op).copied().flatten().map(|i| &self.running[i])
    }

    /// Parameter-store indices of the tensors owned by `node`.
    pub fn node_params(&self, node: NodeId) -> &[usize] {
        &self.node_params[node]
    }

    /// Number of learnable scalars actually allocated.
    pub fn weight_count(&self) -> usize {
        self.params.numel()
    }

    /// Parameter-store indices of every tensor the given stage's head depends on.
    pub fn stage_params(&self, stage: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .graph
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.stages.contains(&stage))
            .flat_map(|(i, _)| self.node_params[i].iter().copied())
            .collect();
        out.sort_unstable();
        out
    }

    /// Element-type conversion; running statistics are carried over.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64_lossy(x.to_f64_lossy())).collect();
        Model {
            graph: self.graph.clone(),
            params: self.params.cast(),
            running: self
                .running
                .iter()
                .map(|r| BnRunning {
                    mean: conv(&r.mean),
                    var: conv(&r.var),
                })
                .collect(),
            node_params: self.node_params.clone(),
            bn: self.bn,
            scope: self.scope,
            slot_names: self.slot_names.clone(),
            op_slot: self.op_slot.clone(),
        }
    }

    fn check_input(&self, shape: Shape) -> Result<()> {
        let c = &self.graph.config;
        if shape.channels != c.in_channels || shape.height != c.input_size || shape.width != c.input_size {
            return Err(Error::config(format!(
                "input {shape} does not match the configured (N, {}, {}, {})",
                c.in_channels, c.input_size, c.input_size
            )));
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_op(
        &mut self,
        tape: &mut Tape<T>,
        op: OpId,
        conv: NodeId,
        bn: Option<NodeId>,
        relu: bool,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let rename = |e: Error, path: &str| match e {
            Error::Shape { detail, .. } => Error::Shape {
                node: path.to_string(),
                detail,
            },
            other => other,
        };
        let (wi, bi) = (self.node_params[conv][0], self.node_params[conv][1]);
        let w = tape.param(wi, self.params.get(wi));
        let b = tape.param(bi, self.params.get(bi));
        let mut y = tape
            .conv2d(x, w, b)
            .map_err(|e| rename(e, &self.graph.nodes[conv].path))?;
        if let Some(bn) = bn {
            let (gi, be) = (self.node_params[bn][0], self.node_params[bn][1]);
            let g = tape.param(gi, self.params.get(gi));
            let beta = tape.param(be, self.params.get(be));
            let slot = self.op_slot[op].expect("batch-norm op has a statistics slot");
            let running = &mut self.running[slot];
            y = tape
                .batch_norm(y, g, beta, running, self.bn, mode)
                .map_err(|e| rename(e, &self.graph.nodes[bn].path))?;
        }
        if relu {
            y = tape.relu(y);
        }
        Ok(y)
    }

    /// Runs every pass of `stage` on input `x`.
    ///
    /// `carried` must hold the previous stage's carry for stages after the
    /// first and be `None` for the first. With `want_head` false the stage's
    /// head is not evaluated.
    pub fn forward_stage(
        &mut self,
        tape: &mut Tape<T>,
        stage: usize,
        x: Var,
        carried: Option<&Carry>,
        mode: Mode,
        want_head: bool,
    ) -> Result<StageRun> {
        let stages = self.graph.stages();
        if stage == 0 || stage > stages {
            return Err(Error::config(format!("stage {stage} out of range 1..={stages}")));
        }
        if carried.is_some() != (stage > 1) {
            return Err(Error::Wiring(format!(
                "stage {stage} {} a carried feature set",
                if stage > 1 { "needs" } else { "takes no" }
            )));
        }
        self.check_input(tape.shape(x))?;

        let cfg = &self.graph.config;
        let depth = cfg.stage_depths[stage - 1];
        let prior_depth = if stage > 1 { cfg.stage_depths[stage - 2] } else { 0 };
        let steps = cfg.steps;
        let head = self.graph.heads[stage - 1];
        let by_pass: Vec<Vec<usize>> = (1..=steps)
            .map(|p| {
                (0..self.graph.ops.len())
                    .filter(|&i| {
                        let op = &self.graph.ops[i];
                        op.stage == stage && op.pass == p && (want_head || i != head)
                    })
                    .collect()
            })
            .collect();

        let mut vals: Vec<Option<Var>> = vec![None; self.graph.ops.len()];
        let input_op = self
            .graph
            .ops
            .iter()
            .position(|o| o.spec == OpSpec::Input)
            .ok_or_else(|| Error::Wiring("program has no input".into()))?;
        vals[input_op] = Some(x);

        // The unrolled state is the set of transition outputs of the last pass.
        let last = progressive_unroll(vec![None; depth + 1], steps, |pass, prior: Vec<Option<Var>>| {
            let mut ctx = StepContext::new(stage, pass, depth, prior_depth);
            ctx.prior_pass = prior;
            if let Some(c) = carried {
                for (l, v) in c.by_level.iter().enumerate().take(depth + 1) {
                    ctx.prior_stage[l] = *v;
                }
            }
            let mut next = vec![None; depth + 1];
            for &i in &by_pass[pass - 1] {
                let op = self.graph.ops[i].clone();
                let arg = |k: usize| -> Result<Var> {
                    let src = op.inputs[k];
                    vals[src].ok_or_else(|| {
                        Error::Wiring(format!("{} reads {} before it ran", op.path, self.graph.ops[src].path))
                    })
                };
                let y = match op.spec {
                    OpSpec::Input => continue,
                    OpSpec::Conv { conv, bn, relu } => {
                        let xin = arg(0)?;
                        let y = self.conv_op(tape, i, conv, bn, relu, xin, mode)?;
                        if self.graph.nodes[conv].module == Module::Transition {
                            next[op.level] = Some(y);
                        }
                        y
                    }
                    OpSpec::MaxPool => tape.maxpool2(arg(0)?)?,
                    OpSpec::Upsample => tape.upsample2(arg(0)?),
                    OpSpec::ForwardSkip => fuse_forward_skip(tape, arg(0)?, arg(1)?)?,
                    OpSpec::BackwardSkip(kind) => {
                        let x_in = arg(op.inputs.len() - 1)?;
                        ctx.x_in[op.level] = Some(x_in);
                        if kind != crate::arch::Feedback::Duplicate {
                            // Features from an earlier stage are not in this call's table.
                            let fb = if kind == crate::arch::Feedback::PriorStage {
                                ctx.prior_stage[op.level]
                            } else {
                                Some(arg(0)?)
                            };
                            let expected = match kind {
                                crate::arch::Feedback::PriorPass => ctx.prior_pass[op.level],
                                _ => ctx.prior_stage[op.level],
                            };
                            if fb.is_none() || fb != expected {
                                return Err(Error::Wiring(format!(
                                    "{}: feedback does not match the unrolled state",
                                    op.path
                                )));
                            }
                        }
                        fuse_backward_skip(tape, &ctx, op.level)?
                    }
                };
                vals[i] = Some(y);
            }
            Ok(next)
        })?;

        Ok(StageRun {
            logits: if want_head { vals[head] } else { None },
            carry: Carry { by_level: last },
            values: vals,
        })
    }

    /// Logits of stages `1..=stages`.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode, stages: usize) -> Result<Vec<Var>> {
        let mut logits = Vec::with_capacity(stages);
        let mut carry: Option<Carry> = None;
        for s in 1..=stages {
            let run = self.forward_stage(tape, s, x, carry.as_ref(), mode, true)?;
            logits.push(run.logits.expect("head requested"));
            carry = Some(run.carry);
        }
        Ok(logits)
    }

    /// Inference-mode probability map for a batch of images.
    ///
    /// Only logits leave the stages; a single sigmoid is applied at the end.
    pub fn predict(&mut self, image: &Tensor<T>, mode: PredictMode) -> Result<Prediction<T>> {
        let mut tape = Tape::new();
        let x = tape.leaf(image.clone());
        let stages = self.graph.stages();
        let out = match mode {
            PredictMode::Fused => {
                let logits = self.forward(&mut tape, x, Mode::Infer, stages)?;
                fuse_stage_outputs(&mut tape, &logits)?
            }
            PredictMode::FinalStage => {
                let mut carry: Option<Carry> = None;
                let mut last = None;
                for s in 1..=stages {
                    let run = self.forward_stage(&mut tape, s, x, carry.as_ref(), Mode::Infer, s == stages)?;
                    last = run.logits;
                    carry = Some(run.carry);
                }
                let l = last.expect("final head evaluated");
                tape.sigmoid(l)
            }
        };
        let prob = tape.value(out).clone();
        if !prob.all_finite() {
            return Err(Error::NonFinite {
                context: "prediction".into(),
            });
        }
        Ok(Prediction {
            prob,
            trace: tape.trace(),
        })
    }

    /// Per-stage logits and probabilities plus the fused map, without
    /// updating any statistics.
    pub fn stage_outputs(&mut self, image: &Tensor<T>) -> Result<StageOutputs<T>> {
        let mut tape = Tape::new();
        let x = tape.leaf(image.clone());
        let logits = self.forward(&mut tape, x, Mode::Infer, self.graph.stages())?;
        let lt: Vec<Tensor<T>> = logits.iter().map(|&v| tape.value(v).clone()).collect();
        let probs = lt.iter().map(kernels::sigmoid).collect();
        let fused = fuse_logits(&lt)?;
        Ok(StageOutputs {
            logits: lt,
            probs,
            fused,
        })
    }
}

/// `sigmoid(Σ logits)` on plain tensors.
pub fn fuse_logits<T: Scalar>(logits: &[Tensor<T>]) -> Result<Tensor<T>> {
    let (first, rest) = logits
        .split_first()
        .ok_or_else(|| Error::shape("fuse", "no stage logits"))?;
    let mut sum = first.clone();
    for l in rest {
        if l.shape() != sum.shape() {
            return Err(Error::shape("fuse", format!("{} vs {}", l.shape(), sum.shape())));
        }
        sum.add_assign(l);
    }
    Ok(kernels::sigmoid(&sum))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetworkConfig {
        NetworkConfig::plnet()
            .with_ocs(0.125)
            .with_input_size(16)
            .with_depths(&[2, 3])
    }

    fn image(seed: u64, cfg: &NetworkConfig) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        Tensor::from_fn(Shape::new(2, 3, cfg.input_size, cfg.input_size), |_| n.sample(&mut rng))
    }

    #[test]
    fn weight_enumeration_matches_symbolic_count() {
        let m = Model::<f32>::new(&tiny(), 0).unwrap();
        let report = crate::arch::count_parameters(m.graph());
        assert_eq!(m.weight_count(), report.total);
    }

    #[test]
    fn output_shape_and_range() {
        let cfg = tiny();
        let mut m = Model::<f64>::new(&cfg, 1).unwrap();
        let p = m.predict(&image(0, &cfg), PredictMode::Fused).unwrap();
        assert_eq!(p.prob.shape(), Shape::new(2, 1, 16, 16));
        assert!(p.prob.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(p.trace.iter().filter(|&&k| k == OpKind::Sigmoid).count(), 1);
    }

    #[test]
    fn final_stage_mode_skips_first_head() {
        let cfg = tiny();
        let mut m = Model::<f64>::new(&cfg, 1).unwrap();
        let p = m.predict(&image(0, &cfg), PredictMode::FinalStage).unwrap();
        let convs = p.trace.iter().filter(|&&k| k == OpKind::Conv2d).count();
        let fused = m.predict(&image(0, &cfg), PredictMode::Fused).unwrap();
        let convs_fused = fused.trace.iter().filter(|&&k| k == OpKind::Conv2d).count();
        assert_eq!(convs + 1, convs_fused);
    }

    #[test]
    fn carry_required_exactly_for_later_stages() {
        let cfg = tiny();
        let mut m = Model::<f64>::new(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(image(0, &cfg));
        assert!(m.forward_stage(&mut tape, 2, x, None, Mode::Infer, true).is_err());
        let run = m.forward_stage(&mut tape, 1, x, None, Mode::Infer, true).unwrap();
        assert!(m
            .forward_stage(&mut tape, 1, x, Some(&run.carry), Mode::Infer, true)
            .is_err());
        assert!(m
            .forward_stage(&mut tape, 2, x, Some(&run.carry), Mode::Infer, true)
            .is_ok());
    }

    #[test]
    fn wrong_input_size_rejected() {
        let mut m = Model::<f32>::new(&tiny(), 0).unwrap();
        let img = Tensor::zeros(Shape::new(1, 3, 32, 32));
        assert!(matches!(m.predict(&img, PredictMode::Fused), Err(Error::Config(_))));
    }
}
