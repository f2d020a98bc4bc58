use crate::error::{Error, Result};
use crate::network::{Gradients, Param};

/// Adam without weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &[Param]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.value.len()]).collect::<Vec<_>>();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [Param], grads: &Gradients, lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.0.len() != params.len() {
            return Err(Error::contract("optimizer state does not match the parameter set"));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for (((p, g), m), v) in params.iter_mut().zip(&grads.0).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), m), v) in p.value.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = f64::from(*m) / c1;
                let v_hat = f64::from(*v) / c2;
                *w -= (lr * m_hat / (v_hat.sqrt() + self.eps)) as f32;
            }
        }
        Ok(())
    }
}
