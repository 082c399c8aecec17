//! Central finite-difference gradient checking, the universal oracle for the
//! differentiable core.

use crate::error::{Error, Result};

use super::{Buf, Tape, Var};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub n_checked: usize,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

impl std::fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} (n={}, max_rel_err={:.3e}, tol={:.1e})",
            if self.passed() { "pass" } else { "FAIL" },
            self.n_checked,
            self.max_rel_err,
            self.tol
        )
    }
}

/// Compare analytic gradients against central finite differences.
///
/// `f` evaluates the scalar function at a flat parameter vector; `grad`
/// returns the full analytic gradient at the same point. `f` must be
/// deterministic: it is evaluated twice at `point` and the results compared.
/// Per-element relative error is `|g_a - g_fd| / max(1, |g_fd|)`.
pub fn gradcheck<F, G>(f: F, grad: G, point: &[f64], h: f64, tol: f64) -> Result<GradcheckReport>
where
    F: Fn(&[f64]) -> Result<f64>,
    G: FnOnce(&[f64]) -> Result<Vec<f64>>,
{
    let a = f(point)?;
    let b = f(point)?;
    if a != b {
        return Err(Error::NonDeterministicFunction { a, b });
    }
    let analytic = grad(point)?;
    if analytic.len() != point.len() {
        return Err(Error::shape(
            "gradcheck",
            format!("{} gradient entries for {} parameters", analytic.len(), point.len()),
        ));
    }
    let mut max_rel_err: f64 = 0.0;
    let mut perturbed = point.to_vec();
    for i in 0..point.len() {
        perturbed[i] = point[i] + h;
        let fp = f(&perturbed)?;
        perturbed[i] = point[i] - h;
        let fm = f(&perturbed)?;
        perturbed[i] = point[i];
        let fd = (fp - fm) / (2.0 * h);
        let rel = (analytic[i] - fd).abs() / fd.abs().max(1.0);
        max_rel_err = max_rel_err.max(rel);
    }
    Ok(GradcheckReport { n_checked: point.len(), max_rel_err, tol })
}

/// Gradcheck a tape-built composite. `build` constructs the graph from a fresh
/// tape and the flat parameter vector, returning the scalar root and the leaf
/// vars (in the order their values appear in `point`).
pub fn gradcheck_fn<B>(build: B, point: &[f64], h: f64, tol: f64) -> Result<GradcheckReport>
where
    B: Fn(&mut Tape, &[f64]) -> Result<(Var, Vec<Var>)>,
{
    let f = |p: &[f64]| -> Result<f64> {
        let mut tape = Tape::new();
        let (root, _) = build(&mut tape, p)?;
        Ok(tape.value(root).item())
    };
    let grad = |p: &[f64]| -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let (root, leaves) = build(&mut tape, p)?;
        tape.backward(root)?;
        let mut out = Vec::with_capacity(p.len());
        for leaf in leaves {
            out.extend_from_slice(tape.grad(leaf).data());
        }
        if out.len() != p.len() {
            return Err(Error::shape(
                "gradcheck_fn",
                format!("leaves hold {} values, point holds {}", out.len(), p.len()),
            ));
        }
        Ok(out)
    };
    gradcheck(f, grad, point, h, tol)
}

/// Split a flat parameter vector into tape leaves of the given shapes.
pub fn leaves_from_point(tape: &mut Tape, point: &[f64], shapes: &[&[usize]]) -> Result<Vec<Var>> {
    let mut leaves = Vec::with_capacity(shapes.len());
    let mut off = 0;
    for &shape in shapes {
        let len: usize = shape.iter().product();
        if off + len > point.len() {
            return Err(Error::shape("leaves_from_point", "point too short".to_string()));
        }
        let buf = Buf::from_vec(shape, point[off..off + len].to_vec())?;
        leaves.push(tape.leaf(buf, true));
        off += len;
    }
    if off != point.len() {
        return Err(Error::shape("leaves_from_point", "point too long".to_string()));
    }
    Ok(leaves)
}
