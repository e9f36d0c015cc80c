//! Central finite-difference verification of analytic gradients.

use ndarray::Array2;

use crate::nn::params::ParamStore;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// (tensor name, max relative error over its entries).
    pub per_tensor: Vec<(String, f64)>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compare the analytic gradients returned by `loss` against central finite
/// differences, for every entry of every tensor named in the analytic
/// gradient list. `loss` must be a deterministic pure function of the store.
pub fn grad_check(
    params: &ParamStore,
    loss: &dyn Fn(&ParamStore) -> (f64, Vec<(String, Array2<f64>)>),
    h: f64,
) -> GradCheckReport {
    let (_, grads) = loss(params);
    let mut per_tensor = Vec::new();
    let mut max_rel_err: f64 = 0.0;
    for (name, g) in &grads {
        let mut worst: f64 = 0.0;
        for idx in 0..g.len() {
            let (r, c) = (idx / g.ncols(), idx % g.ncols());
            let mut plus = params.clone();
            plus.get_mut(name)[[r, c]] += h;
            let mut minus = params.clone();
            minus.get_mut(name)[[r, c]] -= h;
            let fd = (loss(&plus).0 - loss(&minus).0) / (2.0 * h);
            let an = g[[r, c]];
            let denom = fd.abs().max(an.abs()).max(1e-6);
            worst = worst.max(((fd - an) / denom).abs());
        }
        max_rel_err = max_rel_err.max(worst);
        per_tensor.push((name.clone(), worst));
    }
    GradCheckReport {
        per_tensor,
        max_rel_err,
    }
}
