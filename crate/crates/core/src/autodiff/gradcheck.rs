//! Central finite-difference checks of reverse-mode gradients.

use super::graph::{Feeds, Graph, NodeId, Op};
use crate::error::{Error, Result};

/// Denominator floor of [`relative_error`], so gradients that are zero up
/// to rounding compare by absolute difference.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Worst disagreement found by [`check_gradients`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    /// Input name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    /// Number of entries compared.
    pub checked: usize,
}

fn loss_at(graph: &mut Graph, feeds: &Feeds<'_>, loss: NodeId) -> Result<f64> {
    graph.forward(feeds)?;
    Ok(graph.value(loss).expect("forward fills every node").item())
}

/// Compares the gradient of `loss` with respect to every trainable input
/// against `(f(x + h) - f(x - h)) / 2h`, entry by entry.
pub fn check_gradients(graph: &mut Graph, feeds: &Feeds<'_>, loss: NodeId, h: f64) -> Result<GradCheck> {
    if !(h > 0.0) {
        return Err(Error::invalid(format!("step {h} must be positive")));
    }
    graph.forward(feeds)?;
    let analytic = graph.backward(loss)?;
    let names: Vec<String> = graph
        .nodes()
        .iter()
        .filter_map(|n| match n.op() {
            Op::Input { name, trainable: true } => Some(name.clone()),
            _ => None,
        })
        .collect();
    let mut report = GradCheck {
        max_relative_error: 0.0,
        worst: None,
        checked: 0,
    };
    for name in names {
        let base = feeds.get(&name).ok_or_else(|| Error::MissingFeed(name.clone()))?;
        let grad = analytic.get(&name).ok_or_else(|| Error::MissingGradient(name.clone()))?;
        let mut probe = base.clone();
        for i in 0..base.len() {
            let x = base.data()[i];
            probe.data_mut()[i] = x + h;
            let up = loss_at(graph, &feeds.clone().with(&name, &probe), loss)?;
            probe.data_mut()[i] = x - h;
            let down = loss_at(graph, &feeds.clone().with(&name, &probe), loss)?;
            probe.data_mut()[i] = x;
            let err = relative_error(grad.data()[i], (up - down) / (2.0 * h));
            report.checked += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = err.max(report.max_relative_error);
                report.worst = Some((name.clone(), i));
            }
        }
    }
    // leave the graph holding the unperturbed pass
    graph.forward(feeds)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn cubic_passes_and_a_wrong_gradient_would_not() {
        let mut g = Graph::new();
        let x = g.param("x");
        let x2 = g.mul(x, x);
        let y3 = g.mul(x2, x);
        let zero = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let loss = g.sse(y3, zero);
        let v = Tensor::vector(vec![0.7, -1.3]);
        let r = check_gradients(&mut g, &Feeds::new().with("x", &v), loss, 1e-5).unwrap();
        assert_eq!(r.checked, 2);
        assert!(r.max_relative_error < 1e-6, "{r:?}");
        assert!(relative_error(1.0, 1.1) > 0.09);
        assert_eq!(relative_error(0.0, 1e-9), 1e-3);
    }
}
