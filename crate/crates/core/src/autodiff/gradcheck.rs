use super::params::ParamStore;
use super::tape::{NodeId, Tape};
use super::Result;

/// Gradients smaller than this are compared absolutely: central differences
/// carry roundoff near `1e-11` even where the true gradient is exactly zero.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Worst `|a − n| / max(|a|, |n|, GRAD_FLOOR)` over all coordinates.
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Compares reverse-mode gradients with central differences on every
/// coordinate of every parameter in `store`.
///
/// `build` must record a scalar loss on the tape it is given; it is called
/// once for the analytic pass and twice per coordinate.
pub fn grad_check<F>(store: &mut ParamStore, build: F, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<NodeId>,
{
    let analytic = {
        let mut tape = Tape::new(store);
        let loss = build(&mut tape)?;
        let grads = tape.backward(loss)?;
        store
            .ids()
            .map(|id| grads.param(id).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; store.value(id).len()]))
            .collect::<Vec<_>>()
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(store);
        let loss = build(&mut tape)?;
        Ok(tape.scalar(loss))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: None,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for (id, grad) in ids.into_iter().zip(analytic) {
        for (i, &a) in grad.iter().enumerate() {
            let original = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = original + h;
            let plus = eval(store);
            store.value_mut(id).data_mut()[i] = original - h;
            let minus = eval(store);
            store.value_mut(id).data_mut()[i] = original;
            let numeric = (plus? - minus?) / (2.0 * h);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst_param.is_none() {
                report.max_rel_error = err.max(report.max_rel_error);
                report.worst_param = Some(store.get(id).name.clone());
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
