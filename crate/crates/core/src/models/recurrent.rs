//! Gated recurrent baselines (LSTM, GRU, stacked LSTM) over a scalar window.
//!
//! The window is consumed one step at a time with the whole batch in the rows
//! of each step matrix. The final hidden state of the top layer feeds a linear
//! head.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis};

use super::params::{Init, ParamLayout, Slot};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// LSTM layer, gate order `[input, forget, cell, output]`.
#[derive(Debug, Clone)]
struct LstmLayer {
    wx: Slot,
    wh: Slot,
    b: Slot,
    hidden: usize,
}

struct LstmCache {
    /// Activated gates per step, `B x 4D`.
    gates: Vec<Array2<f64>>,
    /// Cell states, index 0 is the zero initial state.
    c: Vec<Array2<f64>>,
    /// Hidden states, index 0 is the zero initial state.
    h: Vec<Array2<f64>>,
    tanh_c: Vec<Array2<f64>>,
}

impl LstmLayer {
    fn new(layout: &mut ParamLayout, name: &str, input: usize, hidden: usize) -> Self {
        let wx = layout.add(format!("{name}.wx"), input, 4 * hidden, Init::FanIn(input));
        let wh = layout.add(format!("{name}.wh"), hidden, 4 * hidden, Init::FanIn(hidden));
        let b = layout.add(format!("{name}.b"), 1, 4 * hidden, Init::Const(0.0));
        Self { wx, wh, b, hidden }
    }

    fn forward(&self, p: &[f64], xs: &[Array2<f64>]) -> LstmCache {
        let d = self.hidden;
        let batch = xs[0].nrows();
        let mut cache = LstmCache {
            gates: Vec::with_capacity(xs.len()),
            c: vec![Array2::zeros((batch, d))],
            h: vec![Array2::zeros((batch, d))],
            tanh_c: Vec::with_capacity(xs.len()),
        };
        let (wx, wh, b) = (self.wx.mat(p), self.wh.mat(p), self.b.mat(p));
        for x in xs {
            let h_prev = cache.h.last().expect("state");
            let mut z = x.dot(&wx) + &b;
            general_mat_mul(1.0, h_prev, &wh, 1.0, &mut z);
            z.slice_mut(s![.., 0..2 * d]).mapv_inplace(sigmoid);
            z.slice_mut(s![.., 2 * d..3 * d]).mapv_inplace(f64::tanh);
            z.slice_mut(s![.., 3 * d..]).mapv_inplace(sigmoid);
            let i = z.slice(s![.., 0..d]);
            let f = z.slice(s![.., d..2 * d]);
            let g = z.slice(s![.., 2 * d..3 * d]);
            let o = z.slice(s![.., 3 * d..]);
            let c = &f * cache.c.last().expect("state") + &i * &g;
            let tc = c.mapv(f64::tanh);
            let h = &o * &tc;
            cache.gates.push(z);
            cache.c.push(c);
            cache.tanh_c.push(tc);
            cache.h.push(h);
        }
        cache
    }

    /// `dhs[t]` is the loss gradient w.r.t. the hidden output at step `t`.
    /// Returns the gradient w.r.t. each step input.
    fn backward(
        &self,
        p: &[f64],
        xs: &[Array2<f64>],
        cache: &LstmCache,
        dhs: &[Array2<f64>],
        grad: &mut [f64],
    ) -> Vec<Array2<f64>> {
        let d = self.hidden;
        let (wx, wh) = (self.wx.mat(p), self.wh.mat(p));
        let batch = xs[0].nrows();
        let mut dh_next = Array2::<f64>::zeros((batch, d));
        let mut dc_next = Array2::<f64>::zeros((batch, d));
        let mut dxs = vec![Array2::zeros((0, 0)); xs.len()];
        for t in (0..xs.len()).rev() {
            let gates = &cache.gates[t];
            let i = gates.slice(s![.., 0..d]);
            let f = gates.slice(s![.., d..2 * d]);
            let g = gates.slice(s![.., 2 * d..3 * d]);
            let o = gates.slice(s![.., 3 * d..]);
            let tc = &cache.tanh_c[t];
            let c_prev = &cache.c[t];
            let dh = &dhs[t] + &dh_next;

            let d_o = &dh * tc;
            let dc = &dc_next + &(&dh * &o * &tc.mapv(|v| 1.0 - v * v));
            let d_i = &dc * &g;
            let d_g = &dc * &i;
            let d_f = &dc * c_prev;
            dc_next = &dc * &f;

            let mut dz = Array2::<f64>::zeros((batch, 4 * d));
            dz.slice_mut(s![.., 0..d]).assign(&(&d_i * &i.mapv(|v| v * (1.0 - v))));
            dz.slice_mut(s![.., d..2 * d]).assign(&(&d_f * &f.mapv(|v| v * (1.0 - v))));
            dz.slice_mut(s![.., 2 * d..3 * d]).assign(&(&d_g * &g.mapv(|v| 1.0 - v * v)));
            dz.slice_mut(s![.., 3 * d..]).assign(&(&d_o * &o.mapv(|v| v * (1.0 - v))));

            general_mat_mul(1.0, &xs[t].t(), &dz, 1.0, &mut self.wx.mat_mut(grad));
            general_mat_mul(1.0, &cache.h[t].t(), &dz, 1.0, &mut self.wh.mat_mut(grad));
            self.b.vec_mut(grad).scaled_add(1.0, &dz.sum_axis(Axis(0)));
            dh_next = dz.dot(&wh.t());
            dxs[t] = dz.dot(&wx.t());
        }
        dxs
    }
}

/// GRU layer: `z = σ(.)`, `r = σ(.)`, `n = tanh(x Wn + (r ⊙ h) Un + bn)`,
/// `h' = (1 - z) ⊙ n + z ⊙ h`.
#[derive(Debug, Clone)]
struct GruLayer {
    wx: Slot,
    wh_zr: Slot,
    wh_n: Slot,
    b: Slot,
    hidden: usize,
}

struct GruCache {
    /// `[z, r, n]` activations per step, `B x 3D`.
    gates: Vec<Array2<f64>>,
    h: Vec<Array2<f64>>,
}

impl GruLayer {
    fn new(layout: &mut ParamLayout, name: &str, input: usize, hidden: usize) -> Self {
        Self {
            wx: layout.add(format!("{name}.wx"), input, 3 * hidden, Init::FanIn(input)),
            wh_zr: layout.add(format!("{name}.wh_zr"), hidden, 2 * hidden, Init::FanIn(hidden)),
            wh_n: layout.add(format!("{name}.wh_n"), hidden, hidden, Init::FanIn(hidden)),
            b: layout.add(format!("{name}.b"), 1, 3 * hidden, Init::Const(0.0)),
            hidden,
        }
    }

    fn forward(&self, p: &[f64], xs: &[Array2<f64>]) -> GruCache {
        let d = self.hidden;
        let batch = xs[0].nrows();
        let (wx, wh_zr, wh_n, b) = (self.wx.mat(p), self.wh_zr.mat(p), self.wh_n.mat(p), self.b.mat(p));
        let mut cache = GruCache { gates: Vec::with_capacity(xs.len()), h: vec![Array2::zeros((batch, d))] };
        for x in xs {
            let h_prev = cache.h.last().expect("state");
            let mut a = x.dot(&wx) + &b;
            {
                let mut zr = a.slice_mut(s![.., 0..2 * d]);
                general_mat_mul(1.0, h_prev, &wh_zr, 1.0, &mut zr);
                zr.mapv_inplace(sigmoid);
            }
            let rh = &a.slice(s![.., d..2 * d]) * h_prev;
            {
                let mut n = a.slice_mut(s![.., 2 * d..]);
                general_mat_mul(1.0, &rh, &wh_n, 1.0, &mut n);
                n.mapv_inplace(f64::tanh);
            }
            let z = a.slice(s![.., 0..d]);
            let n = a.slice(s![.., 2 * d..]);
            let h = &n + &(&z * &(h_prev - &n));
            cache.gates.push(a);
            cache.h.push(h);
        }
        cache
    }

    fn backward(
        &self,
        p: &[f64],
        xs: &[Array2<f64>],
        cache: &GruCache,
        dhs: &[Array2<f64>],
        grad: &mut [f64],
    ) -> Vec<Array2<f64>> {
        let d = self.hidden;
        let (wx, wh_zr, wh_n) = (self.wx.mat(p), self.wh_zr.mat(p), self.wh_n.mat(p));
        let batch = xs[0].nrows();
        let mut dh_next = Array2::<f64>::zeros((batch, d));
        let mut dxs = vec![Array2::zeros((0, 0)); xs.len()];
        for t in (0..xs.len()).rev() {
            let gates = &cache.gates[t];
            let z = gates.slice(s![.., 0..d]);
            let r = gates.slice(s![.., d..2 * d]);
            let n = gates.slice(s![.., 2 * d..]);
            let h_prev = &cache.h[t];
            let dh = &dhs[t] + &dh_next;

            let dn = &dh * &z.mapv(|v| 1.0 - v);
            let dz = &dh * &(h_prev - &n);
            let mut dh_prev = &dh * &z;

            let mut da = Array2::<f64>::zeros((batch, 3 * d));
            let dan = &dn * &n.mapv(|v| 1.0 - v * v);
            let rh = &r * h_prev;
            general_mat_mul(1.0, &rh.t(), &dan, 1.0, &mut self.wh_n.mat_mut(grad));
            let drh = dan.dot(&wh_n.t());
            let dr = &drh * h_prev;
            dh_prev += &(&drh * &r);

            da.slice_mut(s![.., 0..d]).assign(&(&dz * &z.mapv(|v| v * (1.0 - v))));
            da.slice_mut(s![.., d..2 * d]).assign(&(&dr * &r.mapv(|v| v * (1.0 - v))));
            da.slice_mut(s![.., 2 * d..]).assign(&dan);

            let da_zr = da.slice(s![.., 0..2 * d]);
            general_mat_mul(1.0, &h_prev.t(), &da_zr, 1.0, &mut self.wh_zr.mat_mut(grad));
            dh_prev += &da_zr.dot(&wh_zr.t());
            general_mat_mul(1.0, &xs[t].t(), &da, 1.0, &mut self.wx.mat_mut(grad));
            self.b.vec_mut(grad).scaled_add(1.0, &da.sum_axis(Axis(0)));
            dxs[t] = da.dot(&wx.t());
            dh_next = dh_prev;
        }
        dxs
    }
}

#[derive(Debug, Clone)]
enum Layer {
    Lstm(LstmLayer),
    Gru(GruLayer),
}

enum LayerCache {
    Lstm(LstmCache),
    Gru(GruCache),
}

impl LayerCache {
    fn outputs(&self) -> &[Array2<f64>] {
        match self {
            LayerCache::Lstm(c) => &c.h[1..],
            LayerCache::Gru(c) => &c.h[1..],
        }
    }
}

impl Layer {
    fn forward(&self, p: &[f64], xs: &[Array2<f64>]) -> LayerCache {
        match self {
            Layer::Lstm(l) => LayerCache::Lstm(l.forward(p, xs)),
            Layer::Gru(l) => LayerCache::Gru(l.forward(p, xs)),
        }
    }

    fn backward(
        &self,
        p: &[f64],
        xs: &[Array2<f64>],
        cache: &LayerCache,
        dhs: &[Array2<f64>],
        grad: &mut [f64],
    ) -> Vec<Array2<f64>> {
        match (self, cache) {
            (Layer::Lstm(l), LayerCache::Lstm(c)) => l.backward(p, xs, c, dhs, grad),
            (Layer::Gru(l), LayerCache::Gru(c)) => l.backward(p, xs, c, dhs, grad),
            _ => unreachable!("layer/cache kinds always match"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum CellKind {
    Lstm,
    Gru,
}

#[derive(Debug, Clone)]
pub(crate) struct RecurrentNet {
    layers: Vec<Layer>,
    head_w: Slot,
    head_b: Slot,
    hidden: usize,
}

impl RecurrentNet {
    pub(crate) fn new(layout: &mut ParamLayout, cell: CellKind, hidden: usize, depth: usize) -> Self {
        let layers = (0..depth)
            .map(|l| {
                let input = if l == 0 { 1 } else { hidden };
                let name = format!("rnn{l}");
                match cell {
                    CellKind::Lstm => Layer::Lstm(LstmLayer::new(layout, &name, input, hidden)),
                    CellKind::Gru => Layer::Gru(GruLayer::new(layout, &name, input, hidden)),
                }
            })
            .collect();
        let head_w = layout.add("head.w", hidden, 1, Init::FanIn(hidden));
        let head_b = layout.add("head.b", 1, 1, Init::Const(0.0));
        Self { layers, head_w, head_b, hidden }
    }

    fn steps(x: ArrayView2<f64>) -> Vec<Array2<f64>> {
        x.columns().into_iter().map(|c| c.to_owned().insert_axis(Axis(1))).collect()
    }

    fn run(&self, p: &[f64], x: ArrayView2<f64>) -> (Vec<Vec<Array2<f64>>>, Vec<LayerCache>) {
        let mut inputs = vec![Self::steps(x)];
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let cache = layer.forward(p, inputs.last().expect("inputs"));
            inputs.push(cache.outputs().to_vec());
            caches.push(cache);
        }
        (inputs, caches)
    }

    pub(crate) fn forward(&self, p: &[f64], x: ArrayView2<f64>) -> Vec<f64> {
        let (inputs, _) = self.run(p, x);
        let last = inputs.last().and_then(|h| h.last()).expect("non-empty window");
        (last.dot(&self.head_w.mat(p)) + &self.head_b.mat(p)).column(0).to_vec()
    }

    /// Sigmoid gate activations of the first layer for one window (LSTM i, f,
    /// o; GRU r, z), one vector per step.
    pub(crate) fn first_layer_gates(&self, p: &[f64], window: &[f64]) -> Vec<Vec<f64>> {
        let x = Array2::from_shape_vec((1, window.len()), window.to_vec()).expect("window");
        let (_, caches) = self.run(p, x.view());
        let d = self.hidden;
        match &caches[0] {
            LayerCache::Lstm(c) => c
                .gates
                .iter()
                .map(|g| g.slice(s![.., 0..2 * d]).iter().chain(g.slice(s![.., 3 * d..4 * d])).copied().collect())
                .collect(),
            LayerCache::Gru(c) => {
                c.gates.iter().map(|g| g.slice(s![.., 0..2 * d]).iter().copied().collect()).collect()
            }
        }
    }

    pub(crate) fn loss_grad(&self, p: &[f64], x: ArrayView2<f64>, targets: &[f64], grad: &mut [f64]) -> f64 {
        let (inputs, caches) = self.run(p, x);
        let top = inputs.last().expect("outputs");
        let h_last = top.last().expect("non-empty window");
        let y = h_last.dot(&self.head_w.mat(p)) + &self.head_b.mat(p);
        let n = targets.len() as f64;
        let mut dy = Array2::zeros((targets.len(), 1));
        let mut loss = 0.0;
        for (i, t) in targets.iter().enumerate() {
            let e = y[[i, 0]] - t;
            loss += e * e;
            dy[[i, 0]] = 2.0 * e / n;
        }
        general_mat_mul(1.0, &h_last.t(), &dy, 1.0, &mut self.head_w.mat_mut(grad));
        self.head_b.vec_mut(grad)[0] += dy.sum();

        let steps = top.len();
        let mut dhs: Vec<Array2<f64>> = vec![Array2::zeros((targets.len(), self.hidden)); steps];
        dhs[steps - 1] = dy.dot(&self.head_w.mat(p).t());
        for (l, layer) in self.layers.iter().enumerate().rev() {
            dhs = layer.backward(p, &inputs[l], &caches[l], &dhs, grad);
        }
        loss / n
    }
}
