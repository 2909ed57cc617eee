use serde::{Deserialize, Serialize};

use crate::model::{ModelParams, ParamGroup};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Heavy-ball momentum.
    #[default]
    Sgd,
    Adam,
}

/// First-order optimizer with separate rates for the backbone and the heads.
pub struct Optimizer {
    kind: OptimizerKind,
    momentum: f64,
    first: ModelParams,
    second: ModelParams,
    steps: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, momentum: f64, like: &ModelParams) -> Self {
        Optimizer {
            kind,
            momentum,
            first: like.zeros_like(),
            second: like.zeros_like(),
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grad: &ModelParams, lr_backbone: f64, lr_head: f64) {
        self.steps += 1;
        let grads = grad.tensors();
        let mut first = self.first.tensors_mut();
        let mut second = self.second.tensors_mut();
        for (k, (name, p)) in params.tensors_mut().into_iter().enumerate() {
            let lr = match ParamGroup::of(&name) {
                ParamGroup::Backbone => lr_backbone,
                ParamGroup::Head => lr_head,
            };
            let g = grads[k].1;
            let m = &mut first[k].1;
            match self.kind {
                OptimizerKind::Sgd => {
                    m.zip_mut_with(g, |mv, gv| *mv = self.momentum * *mv + gv);
                    p.scaled_add(-lr, m);
                }
                OptimizerKind::Adam => {
                    let (b1, b2, eps) = (self.momentum, 0.999, 1e-8);
                    let v = &mut second[k].1;
                    m.zip_mut_with(g, |mv, gv| *mv = b1 * *mv + (1.0 - b1) * gv);
                    v.zip_mut_with(g, |vv, gv| *vv = b2 * *vv + (1.0 - b2) * gv * gv);
                    let c1 = 1.0 - b1.powi(self.steps);
                    let c2 = 1.0 - b2.powi(self.steps);
                    ndarray::Zip::from(&mut **p).and(&**m).and(&**v).for_each(|pv, mv, vv| {
                        *pv -= lr * (mv / c1) / ((vv / c2).sqrt() + eps);
                    });
                }
            }
        }
    }
}
