//! Fully connected residual learner: window -> D -> D -> 1 with ReLU.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, Axis};

use super::params::{Init, ParamLayout, Slot};

#[derive(Debug, Clone)]
pub(crate) struct Fcnn {
    w1: Slot,
    b1: Slot,
    w2: Slot,
    b2: Slot,
    w3: Slot,
    b3: Slot,
}

struct Cache {
    z1: Array2<f64>,
    h1: Array2<f64>,
    z2: Array2<f64>,
    h2: Array2<f64>,
    y: Array2<f64>,
}

fn relu(z: &Array2<f64>) -> Array2<f64> {
    z.mapv(|v| v.max(0.0))
}

impl Fcnn {
    pub(crate) fn new(layout: &mut ParamLayout, lookback: usize, hidden: usize) -> Self {
        Self {
            w1: layout.add("fc1.w", lookback, hidden, Init::FanIn(lookback)),
            b1: layout.add("fc1.b", 1, hidden, Init::Const(0.0)),
            w2: layout.add("fc2.w", hidden, hidden, Init::FanIn(hidden)),
            b2: layout.add("fc2.b", 1, hidden, Init::Const(0.0)),
            w3: layout.add("out.w", hidden, 1, Init::FanIn(hidden)),
            b3: layout.add("out.b", 1, 1, Init::Const(0.0)),
        }
    }

    fn run(&self, p: &[f64], x: ArrayView2<f64>) -> Cache {
        let z1 = x.dot(&self.w1.mat(p)) + &self.b1.mat(p);
        let h1 = relu(&z1);
        let z2 = h1.dot(&self.w2.mat(p)) + &self.b2.mat(p);
        let h2 = relu(&z2);
        let y = h2.dot(&self.w3.mat(p)) + &self.b3.mat(p);
        Cache { z1, h1, z2, h2, y }
    }

    pub(crate) fn forward(&self, p: &[f64], x: ArrayView2<f64>) -> Vec<f64> {
        self.run(p, x).y.column(0).to_vec()
    }

    pub(crate) fn loss_grad(&self, p: &[f64], x: ArrayView2<f64>, targets: &[f64], grad: &mut [f64]) -> f64 {
        let c = self.run(p, x);
        let n = targets.len() as f64;
        let mut dy = Array2::zeros((targets.len(), 1));
        let mut loss = 0.0;
        for (i, t) in targets.iter().enumerate() {
            let e = c.y[[i, 0]] - t;
            loss += e * e;
            dy[[i, 0]] = 2.0 * e / n;
        }

        general_mat_mul(1.0, &c.h2.t(), &dy, 1.0, &mut self.w3.mat_mut(grad));
        self.b3.vec_mut(grad)[0] += dy.sum();
        let mut dz2 = dy.dot(&self.w3.mat(p).t());
        dz2.zip_mut_with(&c.z2, |d, z| if *z <= 0.0 { *d = 0.0 });

        general_mat_mul(1.0, &c.h1.t(), &dz2, 1.0, &mut self.w2.mat_mut(grad));
        self.b2.vec_mut(grad).scaled_add(1.0, &dz2.sum_axis(Axis(0)));
        let mut dz1 = dz2.dot(&self.w2.mat(p).t());
        dz1.zip_mut_with(&c.z1, |d, z| if *z <= 0.0 { *d = 0.0 });

        general_mat_mul(1.0, &x.t(), &dz1, 1.0, &mut self.w1.mat_mut(grad));
        self.b1.vec_mut(grad).scaled_add(1.0, &dz1.sum_axis(Axis(0)));
        loss / n
    }
}
