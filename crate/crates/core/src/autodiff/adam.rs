use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam optimizer state: one pair of moment tensors per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    /// Fresh state with the usual defaults (β1 0.9, β2 0.999, ε 1e-8).
    pub fn new(shapes: &[&[usize]], lr: f64) -> Self {
        let zeros = || shapes.iter().map(|s| Tensor::zeros(s.to_vec())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected Adam update. Gradients are validated before anything
    /// is modified, so a rejected step leaves parameters and state untouched.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[&Tensor],
        names: &[&str],
    ) -> Result<()> {
        if params.len() != self.m.len()
            || grads.len() != self.m.len()
            || names.len() != self.m.len()
        {
            return Err(Error::invalid(format!(
                "adam: {} moment slots but {} params, {} grads, {} names",
                self.m.len(),
                params.len(),
                grads.len(),
                names.len()
            )));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("adam: learning rate must be positive"));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::shape("adam", p.shape(), g.shape()));
            }
        }
        for (g, name) in grads.iter().zip(names) {
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, p) in params[i].data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *p -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = Tensor::vector(vec![1.5, -2.0]);
        let g = Tensor::zeros(vec![2]);
        let mut st = AdamState::new(&[&[2]], 1e-3);
        for _ in 0..5 {
            st.step(&mut [&mut p], &[&g], &["p"]).unwrap();
        }
        assert_eq!(p.data(), &[1.5, -2.0]);
        assert_eq!(st.t, 5);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        let mut p = Tensor::vector(vec![0.0]);
        let g = Tensor::vector(vec![0.37]);
        let mut st = AdamState::new(&[&[1]], 1e-3);
        st.step(&mut [&mut p], &[&g], &["p"]).unwrap();
        let delta = p.data()[0];
        assert!(delta < 0.0);
        assert!((delta.abs() - 1e-3).abs() < 1e-3 * 1e-6);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = Tensor::vector(vec![0.0]);
        let g = Tensor::vector(vec![f64::NAN]);
        let mut st = AdamState::new(&[&[1]], 1e-3);
        let err = st
            .step(&mut [&mut p], &[&g], &["cochlear.tau"])
            .unwrap_err();
        assert!(err.to_string().contains("cochlear.tau"));
        assert_eq!(st.t, 0);
        assert_eq!(p.data(), &[0.0]);
    }
}
