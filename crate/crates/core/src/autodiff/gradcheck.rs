use crate::error::Result;

use super::{ParamStore, Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub h: f64,
    pub tol: f64,
    /// Check at most this many entries per parameter, evenly strided.
    pub max_entries_per_param: Option<usize>,
    /// Test hook: scales every GELU adjoint, to prove the check can fail.
    pub adjoint_fault: Option<f64>,
    /// Round-off of one loss evaluation, in units of `ε·max(|loss|, 1)`.
    pub noise_ulps: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { h: 1e-6, tol: 1e-5, max_entries_per_param: None, adjoint_fault: None, noise_ulps: 16.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupResult {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub groups: Vec<GroupResult>,
    pub tol: f64,
    /// Smallest gradient magnitude a central difference can resolve at this
    /// step; the relative error is taken against `max(|g|, floor / tol)`.
    pub noise_floor: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// Compares tape gradients of a scalar `forward` against central differences
/// for every parameter entry in `store`.
///
/// The error of entry `k` is `|g − fd| / max(|g|, noise / tol, 1e-8)` where
/// `noise = noise_ulps · ε · max(|loss|, 1) / h` is the round-off a central
/// difference incurs. Gradients too small for the difference to resolve are
/// thereby held to an absolute error of `noise` instead of an unreachable
/// relative one.
///
/// `forward` must bind parameters through [`Tape::param`] and be deterministic.
pub fn grad_check<F>(store: &ParamStore, forward: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    tape.inject_gelu_adjoint_fault(cfg.adjoint_fault);
    let loss = forward(&mut tape, store)?;
    tape.backward(loss)?;
    let grads = tape.param_grads();
    let noise = cfg.noise_ulps * f64::EPSILON * tape.value(loss).item().abs().max(1.0) / cfg.h;
    let floor = (noise / cfg.tol).max(1e-8);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::no_grad();
        let l = forward(&mut t, s)?;
        Ok(t.value(l).item())
    };

    let mut probe = store.clone();
    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, groups: vec![], tol: cfg.tol, noise_floor: noise };
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        let n = store.get(&name)?.numel();
        let stride = match cfg.max_entries_per_param {
            Some(cap) if cap > 0 && n > cap => n.div_ceil(cap),
            _ => 1,
        };
        let analytic = grads.get(&name);
        let mut group = GroupResult { name: name.clone(), checked: 0, max_rel_err: 0.0 };
        for k in (0..n).step_by(stride) {
            let orig = store.get(&name)?.data()[k];
            probe.get_mut(&name)?.data_mut()[k] = orig + cfg.h;
            let fp = eval(&probe)?;
            probe.get_mut(&name)?.data_mut()[k] = orig - cfg.h;
            let fm = eval(&probe)?;
            probe.get_mut(&name)?.data_mut()[k] = orig;
            let fd = (fp - fm) / (2.0 * cfg.h);
            let g = analytic.map_or(0.0, |t| t.data()[k]);
            let rel = (g - fd).abs() / g.abs().max(floor);
            group.checked += 1;
            if rel > group.max_rel_err {
                group.max_rel_err = rel;
            }
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = rel;
                report.worst = Some((name.clone(), k));
            }
        }
        report.groups.push(group);
    }
    Ok(report)
}
