use super::{Graph, NnError, ParameterSet, Var};

/// Denominator floor of the relative error, so that gradients that are zero
/// on both sides compare as equal rather than as 0/0.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Options bounding the cost of a check on larger modules.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Check at most this many scalars per parameter (evenly strided).
    pub max_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { max_per_param: None }
    }
}

fn eval<F>(params: &ParameterSet, loss_fn: &F) -> Result<f64, NnError>
where
    F: Fn(&mut Graph) -> Result<Var, NnError>,
{
    let mut g = Graph::new(params);
    let v = loss_fn(&mut g)?;
    let value = g.value(v);
    if value.numel() != 1 {
        return Err(NnError::Shape("grad_check loss must be scalar".into()));
    }
    Ok(value.item())
}

/// Compares reverse-mode gradients of every trainable scalar with the central
/// difference `(f(x+h) - f(x-h)) / 2h`.
pub fn grad_check<F>(params: &ParameterSet, loss_fn: F, h: f64, tol: f64) -> Result<GradCheckReport, NnError>
where
    F: Fn(&mut Graph) -> Result<Var, NnError>,
{
    grad_check_with(params, loss_fn, h, tol, GradCheckOptions::default())
}

pub fn grad_check_with<F>(
    params: &ParameterSet,
    loss_fn: F,
    h: f64,
    tol: f64,
    opts: GradCheckOptions,
) -> Result<GradCheckReport, NnError>
where
    F: Fn(&mut Graph) -> Result<Var, NnError>,
{
    if h <= 0.0 {
        return Err(NnError::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let f0 = eval(params, &loss_fn)?;
    let f1 = eval(params, &loss_fn)?;
    if f0.to_bits() != f1.to_bits() {
        return Err(NnError::NonDeterministic(f0, f1));
    }
    let grads = {
        let mut g = Graph::new(params);
        let v = loss_fn(&mut g)?;
        g.backward(v)?
    };

    let mut work = params.clone();
    let names: Vec<String> = params.trainable_names().map(str::to_string).collect();
    let mut report = GradCheckReport {
        params: Vec::with_capacity(names.len()),
        max_rel_err: 0.0,
        tol,
    };
    for name in names {
        let n = params.get(&name).expect("listed").numel();
        let stride = match opts.max_per_param {
            Some(cap) if cap > 0 && n > cap => n.div_ceil(cap),
            _ => 1,
        };
        let analytic = grads.get(&name);
        let mut pc = ParamCheck {
            name: name.clone(),
            checked: 0,
            max_abs_err: 0.0,
            max_rel_err: 0.0,
        };
        for i in (0..n).step_by(stride) {
            let orig = work.get(&name).expect("listed").data()[i];
            work.get_mut(&name).expect("listed").data_mut()[i] = orig + h;
            let fp = eval(&work, &loss_fn)?;
            work.get_mut(&name).expect("listed").data_mut()[i] = orig - h;
            let fm = eval(&work, &loss_fn)?;
            work.get_mut(&name).expect("listed").data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.map(|t| t.data()[i]).unwrap_or(0.0);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            pc.checked += 1;
            pc.max_abs_err = pc.max_abs_err.max(abs);
            pc.max_rel_err = pc.max_rel_err.max(rel);
        }
        report.max_rel_err = report.max_rel_err.max(pc.max_rel_err);
        report.params.push(pc);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::{Linear, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_is_exact() {
        let mut p = ParameterSet::new();
        p.insert("x", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let report = grad_check(
            &p,
            |g| {
                let xv = g.param("x")?;
                let sq = g.mul(xv, xv)?;
                Ok(g.sum(sq))
            },
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        let mut g = Graph::new(&p);
        let x = g.param("x").unwrap();
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_function_passes() {
        let mut p = ParameterSet::new();
        p.insert("x", Tensor::vector(vec![0.5, -0.5])).unwrap();
        let report = grad_check(
            &p,
            |g| {
                let c = g.constant(Tensor::scalar(3.0));
                Ok(c)
            },
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(report.passed());
    }

    #[test]
    fn two_layer_tanh_perceptron() {
        // 3 -> 6 -> 2 perceptron: 3*6 + 6 + 6*2 + 2 = 38 weights plus a 12-value
        // input matrix treated as a parameter = 50 checked scalars.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = ParameterSet::new();
        let l1 = Linear::new("l1", 3, 6);
        let l2 = Linear::new("l2", 6, 2);
        l1.init(&mut p, &mut rng).unwrap();
        l2.init(&mut p, &mut rng).unwrap();
        // Non-zero biases so their gradients are exercised too.
        for b in ["l1.b", "l2.b"] {
            for v in p.get_mut(b).unwrap().data_mut() {
                *v = 0.1;
            }
        }
        let input: Vec<f64> = (0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect();
        p.insert("input", Tensor::matrix(4, 3, input)).unwrap();
        assert_eq!(p.num_scalars(), 50);
        let report = grad_check(
            &p,
            |g| {
                let x = g.param("input")?;
                let h = l1.forward(g, x)?;
                let h = g.tanh(h);
                let y = l2.forward(g, h)?;
                let y = g.tanh(y);
                let sq = g.mul(y, y)?;
                Ok(g.sum(sq))
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.worst());
    }

    #[test]
    fn non_deterministic_loss_is_detected() {
        use std::cell::Cell;
        let mut p = ParameterSet::new();
        p.insert("x", Tensor::scalar(1.0)).unwrap();
        let calls = Cell::new(0.0);
        let r = grad_check(
            &p,
            |g| {
                calls.set(calls.get() + 1.0);
                let x = g.param("x")?;
                let c = g.constant(Tensor::scalar(calls.get()));
                g.mul(x, c)
            },
            1e-5,
            1e-6,
        );
        assert!(matches!(r, Err(NnError::NonDeterministic(..))));
    }

    #[test]
    fn non_positive_step_rejected() {
        let p = ParameterSet::new();
        assert!(grad_check(&p, |g| Ok(g.constant(Tensor::scalar(0.0))), 0.0, 1e-6).is_err());
    }
}
