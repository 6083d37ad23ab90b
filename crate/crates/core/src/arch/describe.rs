use std::fmt::Write as _;

use crate::tensor::Shape;

use super::graph::{count_parameters, stage_set_label, ComputeGraph};
use super::shapes::propagate_shapes;

/// One line per parameter node: path, layer, input and output shape at batch 1,
/// parameter count, step tag and stage tags. Ends with the totals.
pub fn describe(graph: &ComputeGraph) -> String {
    let cfg = &graph.config;
    let input = Shape::new(1, cfg.in_channels, cfg.input_size, cfg.input_size);
    let shapes = propagate_shapes(graph, input);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "# variant={} input={} ocs={} steps={} depths={:?} base={}",
        cfg.variant, cfg.input_size, cfg.ocs, cfg.steps, cfg.stage_depths, cfg.base_channels
    );
    for (i, n) in graph.nodes.iter().enumerate() {
        let (x, y) = match shapes.node(i) {
            Some((x, y)) => (x.to_string(), y.to_string()),
            None => ("?".into(), "?".into()),
        };
        let step = n.step.map_or_else(|| "-".to_string(), |v| v.to_string());
        let _ = writeln!(
            s,
            "{:<24} {:<9} in={:<20} out={:<20} params={:<9} step={} stages={}",
            n.path,
            n.kind.name(),
            x,
            y,
            n.param_count(),
            step,
            stage_set_label(&n.stages)
        );
    }
    let report = count_parameters(graph);
    let _ = writeln!(s, "# total={} size_bytes={}", report.total, report.size_bytes());
    s
}
