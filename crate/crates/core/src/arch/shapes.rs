//! Symbolic shape propagation over the program.

use std::collections::HashSet;
use std::fmt;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Shape;

use super::graph::{ComputeGraph, Feedback, LayerKind, NodeId, OpId, OpSpec};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mismatch {
    /// Node or op where the mismatch was detected.
    pub at: String,
    /// Producer whose output disagrees.
    pub producer: String,
    pub detail: String,
}

impl fmt::Display for Mismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} <- {}: {}", self.at, self.producer, self.detail)
    }
}

/// Output shape of every op, plus any inconsistencies found on the way.
#[derive(Debug, Clone)]
pub struct ShapeMap {
    pub ops: Vec<Shape>,
    pub mismatches: Vec<Mismatch>,
    node_io: Vec<Option<(Shape, Shape)>>,
}

impl ShapeMap {
    pub fn op(&self, id: OpId) -> Shape {
        self.ops[id]
    }

    /// Input and output shape of a parameter node at its first use.
    pub fn node(&self, id: NodeId) -> Option<(Shape, Shape)> {
        self.node_io[id]
    }

    pub fn is_ok(&self) -> bool {
        self.mismatches.is_empty()
    }

    pub fn into_result(self) -> Result<Self> {
        if self.mismatches.is_empty() {
            return Ok(self);
        }
        let mut detail = String::new();
        for (i, m) in self.mismatches.iter().enumerate() {
            if i > 0 {
                detail.push_str("; ");
            }
            let _ = write!(detail, "{m}");
        }
        Err(Error::Shape {
            node: self.mismatches[0].at.clone(),
            detail,
        })
    }
}

/// Propagates `input` through the program.
///
/// Each faulty node or op is reported once even if the program uses it many
/// times; after a mismatch the declared output shape is assumed so that one
/// fault does not cascade.
pub fn propagate_shapes(graph: &ComputeGraph, input: Shape) -> ShapeMap {
    let mut ops = Vec::with_capacity(graph.ops.len());
    let mut node_io = vec![None; graph.nodes.len()];
    let mut mismatches = Vec::new();
    let mut seen = HashSet::new();
    let mut report = |at: &str, producer: &str, detail: String| {
        if seen.insert(at.to_string()) {
            mismatches.push(Mismatch {
                at: at.to_string(),
                producer: producer.to_string(),
                detail,
            });
        }
    };

    for op in &graph.ops {
        let ins: Vec<Shape> = op.inputs.iter().map(|&i| ops[i]).collect();
        let producer = |k: usize| graph.ops[op.inputs[k]].path.as_str();
        let out = match op.spec {
            OpSpec::Input => {
                if input.channels != graph.config.in_channels {
                    report(
                        &op.path,
                        "input",
                        format!("expected {} channels, got {}", graph.config.in_channels, input.channels),
                    );
                }
                input
            }
            OpSpec::Conv { conv, bn, .. } => {
                let node = &graph.nodes[conv];
                let x = ins[0];
                let (cin, cout) = match node.kind {
                    LayerKind::Conv {
                        in_channels,
                        out_channels,
                        ..
                    } => (in_channels, out_channels),
                    LayerKind::BatchNorm { .. } => {
                        report(&node.path, &op.path, "not a convolution".into());
                        (x.channels, x.channels)
                    }
                };
                if x.channels != cin {
                    report(
                        &node.path,
                        producer(0),
                        format!("expects {cin} input channels, producer yields {x}"),
                    );
                }
                let y = x.with_channels(cout);
                if node_io[conv].is_none() {
                    node_io[conv] = Some((x, y));
                }
                if let Some(bn) = bn {
                    let bnode = &graph.nodes[bn];
                    if bnode.in_channels() != cout {
                        report(
                            &bnode.path,
                            &node.path,
                            format!("normalizes {} channels, conv yields {cout}", bnode.in_channels()),
                        );
                    }
                    if node_io[bn].is_none() {
                        node_io[bn] = Some((y, y));
                    }
                }
                y
            }
            OpSpec::MaxPool => {
                let x = ins[0];
                if !x.height.is_multiple_of(2) || !x.width.is_multiple_of(2) {
                    report(&op.path, producer(0), format!("cannot halve odd size {x}"));
                }
                x.with_spatial((x.height / 2).max(1), (x.width / 2).max(1))
            }
            OpSpec::Upsample => ins[0].with_spatial(ins[0].height * 2, ins[0].width * 2),
            OpSpec::ForwardSkip | OpSpec::BackwardSkip(_) => {
                if matches!(op.spec, OpSpec::BackwardSkip(Feedback::Duplicate)) {
                    ins[0].with_channels(ins[0].channels * 2)
                } else {
                    let (a, b) = (ins[0], ins[1]);
                    if !a.same_spatial(&b) {
                        report(
                            &op.path,
                            &format!("{} and {}", producer(0), producer(1)),
                            format!("cannot concatenate {a} with {b}"),
                        );
                    }
                    if let OpSpec::BackwardSkip(_) = op.spec {
                        if a.channels != b.channels {
                            report(
                                &op.path,
                                &format!("{} and {}", producer(0), producer(1)),
                                format!("feedback has {} channels, input has {}", a.channels, b.channels),
                            );
                        }
                    }
                    a.with_channels(a.channels + b.channels)
                }
            }
        };
        ops.push(out);
    }
    ShapeMap {
        ops,
        mismatches,
        node_io,
    }
}
