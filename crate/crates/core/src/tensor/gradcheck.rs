use super::{Graph, ParamStore, Result, Tensor, Var};

/// Largest relative error between tape gradients and five-point central differences
/// with step `h`, over every scalar of every parameter. The denominator is floored
/// at `1e-6` so vanishing gradients compare absolutely.
pub fn gradient_check<F>(params: &ParamStore, h: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, params)?;
    let grads = g.backward(loss)?;
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = build(&mut g, store)?;
        Ok(g.value(l).item())
    };
    for id in params.ids() {
        let analytic = grads.dense(id, params);
        for i in 0..params.get(id).numel() {
            let orig = params.get(id).data()[i];
            let mut at = |d: f64| -> Result<f64> {
                probe.get_mut(id).data_mut()[i] = orig + d;
                eval(&probe)
            };
            let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// `Σ x ⊙ w` for a fixed weight tensor, turning any output into a scalar loss
/// whose gradient is not structurally zero.
pub fn weighted_sum(g: &mut Graph, x: Var, weights: Tensor) -> Result<Var> {
    let w = g.constant(weights)?;
    let p = g.mul(x, w)?;
    g.sum(p)
}
