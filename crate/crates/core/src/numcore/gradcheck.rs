use super::{Graph, NodeId, NumError, Tensor};

/// Compares analytic gradients with central differences.
///
/// `build` receives a fresh graph and one trainable leaf per entry of
/// `leaves`, and returns a scalar root. The result is the maximum over every
/// leaf coordinate of `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(mut build: F, leaves: &[Tensor], epsilon: f64) -> Result<f64, NumError>
where
    F: FnMut(&mut Graph, &[NodeId]) -> NodeId,
{
    assert!(epsilon > 0.0, "epsilon must be positive");
    let mut g = Graph::new();
    let ids: Vec<NodeId> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
    let root = build(&mut g, &ids);
    g.forward(root)?;
    let grads = g.backward(root)?;

    let mut worst: f64 = 0.0;
    for (&id, base) in ids.iter().zip(leaves) {
        let analytic = grads.get(id).clone();
        for c in 0..base.len() {
            let mut plus = base.clone();
            plus.data_mut()[c] += epsilon;
            g.set_leaf(id, plus)?;
            let fp = g.forward(root)?.item();

            let mut minus = base.clone();
            minus.data_mut()[c] -= epsilon;
            g.set_leaf(id, minus)?;
            let fm = g.forward(root)?.item();

            let numeric = (fp - fm) / (2.0 * epsilon);
            let a = analytic.data()[c];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            worst = worst.max(err);
        }
        g.set_leaf(id, base.clone())?;
    }
    Ok(worst)
}
