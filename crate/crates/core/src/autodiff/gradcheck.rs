use super::{Graph, NodeId, ParamStore, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst element.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares recorded gradients against central finite differences for every
/// element of every non-frozen parameter.
///
/// `loss_fn` must build a scalar loss on the given graph using
/// `Graph::param(store, id)` for parameter access. Relative error uses the
/// denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(store: &mut ParamStore, eps: f64, mut loss_fn: F) -> Result<GradCheckReport, TensorError>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<NodeId, TensorError>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(TensorError::Invalid(format!("finite-difference step {eps} outside [1e-7, 1e-4]")));
    }
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    g.backward(loss)?;
    store.zero_grads();
    store.accumulate_grads(&g);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.get(id).frozen {
            continue;
        }
        let analytic = store.grad_or_zero(id);
        for i in 0..analytic.len() {
            let orig = store.get(id).value.data()[i];
            let mut eval = |store: &mut ParamStore, x: f64| -> Result<f64, TensorError> {
                store.get_mut(id).value.data_mut()[i] = x;
                let mut g = Graph::no_grad();
                let l = loss_fn(&mut g, store).map_err(|e| locate(e, store, id, i))?;
                Ok(g.value(l).data()[0])
            };
            let plus = eval(store, orig + eps);
            let minus = eval(store, orig - eps);
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((store.get(id).name.clone(), i));
            }
        }
    }
    Ok(report)
}

fn locate(e: TensorError, store: &ParamStore, id: super::ParamId, index: usize) -> TensorError {
    TensorError::Invalid(format!(
        "finite-difference evaluation failed at {}[{index}]: {e}",
        store.get(id).name
    ))
}
