use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam moments for a fixed list of parameter tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    names: Vec<String>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new<'a>(names: Vec<String>, shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = shapes
            .into_iter()
            .map(|s| (Tensor::zeros(s), Tensor::zeros(s)))
            .unzip();
        assert_eq!(names.len(), m.len(), "one name per parameter tensor");
        Self {
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            names,
            m,
            v,
        }
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Reinstates moments read back from a checkpoint.
    pub fn restore(&mut self, t: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::InvalidArgument("optimizer state has the wrong tensor count".into()));
        }
        for (new, old) in m.iter().zip(&self.m).chain(v.iter().zip(&self.v)) {
            new.ensure_shape(old.shape())?;
        }
        self.t = t;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One bias-corrected Adam update, `p -= lr * m̂ / (sqrt(v̂) + eps)`.
    ///
    /// Gradients are validated before anything is written, so a rejected
    /// step leaves both parameters and moments untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "adam expects {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), (m, name)) in params.iter().zip(grads).zip(self.m.iter().zip(&self.names)) {
            p.ensure_shape(m.shape())?;
            g.ensure_shape(m.shape())?;
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let pd = p.data_mut();
            for (i, &gi) in g.data().iter().enumerate() {
                let mi = &mut m.data_mut()[i];
                *mi = b1 * *mi + (1.0 - b1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = m.data()[i] / bc1;
                let vhat = v.data()[i] / bc2;
                pd[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (Tensor, AdamState) {
        let p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let st = AdamState::new(vec!["p".into()], [p.shape()]);
        (p, st)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut p, mut st) = setup();
        let before = p.clone();
        st.step(&mut [&mut p], &[Tensor::zeros(&[3])], 1e-3).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_is_sign_like() {
        let (mut p, mut st) = setup();
        let before = p.clone();
        let g = Tensor::new(vec![3], vec![0.3, -4.0, 1e-3]).unwrap();
        let lr = 1e-2;
        st.step(&mut [&mut p], std::slice::from_ref(&g), lr).unwrap();
        for i in 0..3 {
            // m̂ = g and v̂ = g² after bias correction
            let gi = g.data()[i];
            let expected = lr * gi / (gi.abs() + 1e-8);
            let got = before.data()[i] - p.data()[i];
            assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
        }
    }

    #[test]
    fn deterministic() {
        let g = Tensor::new(vec![3], vec![0.1, 0.2, -0.3]).unwrap();
        let run = || {
            let (mut p, mut st) = setup();
            for _ in 0..5 {
                st.step(&mut [&mut p], std::slice::from_ref(&g), 1e-3).unwrap();
            }
            (p, st)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let (mut p, mut st) = setup();
        let g = Tensor::new(vec![3], vec![0.0, f64::NAN, 0.0]).unwrap();
        let err = st.step(&mut [&mut p], &[g], 1e-3).unwrap_err();
        assert!(err.to_string().contains("gradient of p"), "{err}");
        assert_eq!(st.t, 0);
    }
}
