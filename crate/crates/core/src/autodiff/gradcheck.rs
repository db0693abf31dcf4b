use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// Outcome of comparing tape gradients with central finite differences.
///
/// The per-element error is `|analytic - numeric| / max(1, |analytic|, |numeric|)`,
/// i.e. relative for gradients above one in magnitude and absolute below.
#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// (input index, element index) of the worst element.
    pub worst: (usize, usize),
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
    pub tol: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

/// Single-input form of [`gradcheck_many`].
pub fn gradcheck<F>(f: F, point: &Tensor, eps: f64, tol: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    gradcheck_many(|g, vs| f(g, vs[0]), std::slice::from_ref(point), eps, tol)
}

/// Checks the gradient of a scalar function of several tensors.
pub fn gradcheck_many<F>(f: F, points: &[Tensor], eps: f64, tol: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = pts.iter().map(|p| g.constant(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if v.len() != 1 {
            return Err(Error::dim(format!("gradcheck needs scalar output, got {:?}", v.shape())));
        }
        Ok(v.item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let y = g.value(out);
    if y.len() != 1 {
        return Err(Error::dim(format!("gradcheck needs scalar output, got {:?}", y.shape())));
    }
    if !y.item().is_finite() {
        return Err(Error::Numeric(format!("non-finite function value {}", y.item())));
    }
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(points)
        .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let mut numeric = Vec::with_capacity(points.len());
    let mut max_err = 0.0;
    let mut worst = (0, 0);
    let mut pts = points.to_vec();
    for k in 0..pts.len() {
        let mut num = Tensor::zeros(points[k].shape());
        for i in 0..points[k].len() {
            let x0 = points[k].data()[i];
            pts[k].data_mut()[i] = x0 + eps;
            let fp = eval(&pts)?;
            pts[k].data_mut()[i] = x0 - eps;
            let fm = eval(&pts)?;
            pts[k].data_mut()[i] = x0;
            let d = (fp - fm) / (2.0 * eps);
            let a = analytic[k].data()[i];
            if !d.is_finite() || !a.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at input {k}, element {i}: analytic {a}, numeric {d}"
                )));
            }
            num.data_mut()[i] = d;
            let err = (a - d).abs() / 1f64.max(a.abs()).max(d.abs());
            if err > max_err {
                max_err = err;
                worst = (k, i);
            }
        }
        numeric.push(num);
    }
    Ok(GradcheckReport {
        max_rel_error: max_err,
        worst,
        analytic,
        numeric,
        tol,
    })
}
