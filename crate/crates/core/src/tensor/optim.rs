use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators and step counter for one parameter store.
#[derive(Clone, Debug)]
pub struct OptimizerState<F> {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub step: u64,
    first: Vec<Tensor<F>>,
    second: Vec<Tensor<F>>,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(kind: OptimizerKind, lr: f64, store: &ParamStore<F>) -> Self {
        let zeros = || store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        let (first, second) = match kind {
            OptimizerKind::Sgd => (vec![], vec![]),
            OptimizerKind::Adam { .. } => (zeros(), zeros()),
        };
        Self {
            kind,
            lr,
            step: 0,
            first,
            second,
        }
    }

    /// Applies one update to every trainable parameter.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &Gradients<F>) -> Result<()> {
        if grads.len() != store.len() {
            return shape_err("optimizer_step", format!("{} grads for {} params", grads.len(), store.len()));
        }
        for id in store.ids() {
            let g = grads.get(id);
            if g.shape() != store.get(id).shape() {
                return shape_err(
                    "optimizer_step",
                    format!("{}: {:?} vs {:?}", store.path(id), g.shape(), store.get(id).shape()),
                );
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", store.path(id))));
            }
        }
        self.step += 1;
        let lr = F::lit(self.lr);
        for id in store.ids() {
            if !store.is_trainable(id) {
                continue;
            }
            let g = grads.get(id).data();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (p, &gi) in store.get_mut(id).data_mut().iter_mut().zip(g) {
                        *p -= lr * gi;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let (b1, b2, eps) = (F::lit(beta1), F::lit(beta2), F::lit(eps));
                    let t = self.step as i32;
                    let c1 = F::one() - b1.powi(t);
                    let c2 = F::one() - b2.powi(t);
                    let m = self.first[id.index()].data_mut();
                    let v = self.second[id.index()].data_mut();
                    let p = store.get_mut(id).data_mut();
                    for i in 0..p.len() {
                        m[i] = b1 * m[i] + (F::one() - b1) * g[i];
                        v[i] = b2 * v[i] + (F::one() - b2) * g[i] * g[i];
                        let mhat = m[i] / c1;
                        let vhat = v[i] / c2;
                        p[i] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
