//! Encoder-only transformer for one-step forecasting.
//!
//! Each scalar of the window is projected to `d_model`, a sinusoidal
//! positional encoding is added, and the sequence passes through post-norm
//! encoder blocks (multi-head self-attention, then a ReLU feed-forward
//! network, each wrapped in residual + layer norm). The block outputs are
//! mean-pooled over positions and a linear head produces the forecast.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::params::{Init, ParamLayout, Slot};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
struct LayerNorm {
    gamma: Slot,
    beta: Slot,
}

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    fn new(layout: &mut ParamLayout, name: &str, d: usize) -> Self {
        Self {
            gamma: layout.add(format!("{name}.gamma"), 1, d, Init::Const(1.0)),
            beta: layout.add(format!("{name}.beta"), 1, d, Init::Const(0.0)),
        }
    }

    fn forward(&self, p: &[f64], y: &Array2<f64>) -> (Array2<f64>, LnCache) {
        let d = y.ncols() as f64;
        let mean = y.sum_axis(Axis(1)) / d;
        let centered = y - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
        let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
        let xhat = centered * &inv_std.view().insert_axis(Axis(1));
        let out = &xhat * &self.gamma.mat(p) + &self.beta.mat(p);
        (out, LnCache { xhat, inv_std })
    }

    fn backward(&self, p: &[f64], cache: &LnCache, dout: &Array2<f64>, grad: &mut [f64]) -> Array2<f64> {
        self.gamma.vec_mut(grad).scaled_add(1.0, &(dout * &cache.xhat).sum_axis(Axis(0)));
        self.beta.vec_mut(grad).scaled_add(1.0, &dout.sum_axis(Axis(0)));
        let d = dout.ncols() as f64;
        let dxhat = dout * &self.gamma.mat(p);
        let mean_dxhat = dxhat.sum_axis(Axis(1)) / d;
        let mean_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(1)) / d;
        let mut dy = dxhat - &mean_dxhat.view().insert_axis(Axis(1));
        dy -= &(&cache.xhat * &mean_dxhat_xhat.view().insert_axis(Axis(1)));
        dy * &cache.inv_std.view().insert_axis(Axis(1))
    }
}

#[derive(Debug, Clone)]
struct Block {
    wq: Slot,
    bq: Slot,
    wk: Slot,
    bk: Slot,
    wv: Slot,
    bv: Slot,
    wo: Slot,
    bo: Slot,
    ln1: LayerNorm,
    w1: Slot,
    b1: Slot,
    w2: Slot,
    b2: Slot,
    ln2: LayerNorm,
}

struct BlockCache {
    x_in: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Attention weights per head, each `W x W`, rows sum to one.
    attn: Vec<Array2<f64>>,
    o: Array2<f64>,
    ln1: LnCache,
    x1: Array2<f64>,
    ff_pre: Array2<f64>,
    ff_act: Array2<f64>,
    ln2: LnCache,
}

fn linear(x: &Array2<f64>, w: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    x.dot(&w) + &b
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

impl Block {
    fn new(layout: &mut ParamLayout, name: &str, d: usize, ffn: usize) -> Self {
        let mut lin = |n: &str, rows: usize, cols: usize| {
            (
                layout.add(format!("{name}.{n}.w"), rows, cols, Init::FanIn(rows)),
                layout.add(format!("{name}.{n}.b"), 1, cols, Init::Const(0.0)),
            )
        };
        let (wq, bq) = lin("q", d, d);
        let (wk, bk) = lin("k", d, d);
        let (wv, bv) = lin("v", d, d);
        let (wo, bo) = lin("o", d, d);
        let ln1 = LayerNorm::new(layout, &format!("{name}.ln1"), d);
        let (w1, b1) = {
            let w = layout.add(format!("{name}.ff1.w"), d, ffn, Init::FanIn(d));
            let b = layout.add(format!("{name}.ff1.b"), 1, ffn, Init::Const(0.0));
            (w, b)
        };
        let (w2, b2) = {
            let w = layout.add(format!("{name}.ff2.w"), ffn, d, Init::FanIn(ffn));
            let b = layout.add(format!("{name}.ff2.b"), 1, d, Init::Const(0.0));
            (w, b)
        };
        let ln2 = LayerNorm::new(layout, &format!("{name}.ln2"), d);
        Self { wq, bq, wk, bk, wv, bv, wo, bo, ln1, w1, b1, w2, b2, ln2 }
    }

    fn forward(&self, p: &[f64], x: Array2<f64>, heads: usize) -> (Array2<f64>, BlockCache) {
        let (w, d) = x.dim();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = linear(&x, self.wq.mat(p), self.bq.mat(p));
        let k = linear(&x, self.wk.mat(p), self.bk.mat(p));
        let v = linear(&x, self.wv.mat(p), self.bv.mat(p));
        let mut o = Array2::zeros((w, d));
        let mut attn = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut a = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            softmax_rows(&mut a);
            o.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
            attn.push(a);
        }
        let y1 = &x + &linear(&o, self.wo.mat(p), self.bo.mat(p));
        let (x1, ln1) = self.ln1.forward(p, &y1);
        let ff_pre = linear(&x1, self.w1.mat(p), self.b1.mat(p));
        let ff_act = ff_pre.mapv(|v| v.max(0.0));
        let y2 = &x1 + &linear(&ff_act, self.w2.mat(p), self.b2.mat(p));
        let (out, ln2) = self.ln2.forward(p, &y2);
        (out, BlockCache { x_in: x, q, k, v, attn, o, ln1, x1, ff_pre, ff_act, ln2 })
    }

    fn backward(&self, p: &[f64], c: &BlockCache, dout: &Array2<f64>, grad: &mut [f64]) -> Array2<f64> {
        let heads = c.attn.len();
        let (w, d) = c.x_in.dim();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        // feed-forward sublayer
        let dy2 = self.ln2.backward(p, &c.ln2, dout, grad);
        general_mat_mul(1.0, &c.ff_act.t(), &dy2, 1.0, &mut self.w2.mat_mut(grad));
        self.b2.vec_mut(grad).scaled_add(1.0, &dy2.sum_axis(Axis(0)));
        let mut dpre = dy2.dot(&self.w2.mat(p).t());
        dpre.zip_mut_with(&c.ff_pre, |g, z| if *z <= 0.0 { *g = 0.0 });
        general_mat_mul(1.0, &c.x1.t(), &dpre, 1.0, &mut self.w1.mat_mut(grad));
        self.b1.vec_mut(grad).scaled_add(1.0, &dpre.sum_axis(Axis(0)));
        let dx1 = dy2 + dpre.dot(&self.w1.mat(p).t());

        // attention sublayer
        let dy1 = self.ln1.backward(p, &c.ln1, &dx1, grad);
        general_mat_mul(1.0, &c.o.t(), &dy1, 1.0, &mut self.wo.mat_mut(grad));
        self.bo.vec_mut(grad).scaled_add(1.0, &dy1.sum_axis(Axis(0)));
        let d_o = dy1.dot(&self.wo.mat(p).t());
        let mut dq = Array2::<f64>::zeros((w, d));
        let mut dk = Array2::<f64>::zeros((w, d));
        let mut dv = Array2::<f64>::zeros((w, d));
        for (h, a) in c.attn.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let doh = d_o.slice(cols);
            let da = doh.dot(&c.v.slice(cols).t());
            dv.slice_mut(cols).assign(&a.t().dot(&doh));
            let row_dot = (&da * a).sum_axis(Axis(1));
            let ds = (da - &row_dot.view().insert_axis(Axis(1))) * a * scale;
            dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
        }
        let mut dx = dy1;
        for (dm, wslot, bslot) in [(&dq, self.wq, self.bq), (&dk, self.wk, self.bk), (&dv, self.wv, self.bv)] {
            general_mat_mul(1.0, &c.x_in.t(), dm, 1.0, &mut wslot.mat_mut(grad));
            bslot.vec_mut(grad).scaled_add(1.0, &dm.sum_axis(Axis(0)));
            general_mat_mul(1.0, dm, &wslot.mat(p).t(), 1.0, &mut dx);
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Transformer {
    in_w: Slot,
    in_b: Slot,
    blocks: Vec<Block>,
    head_w: Slot,
    head_b: Slot,
    heads: usize,
    pos: Array2<f64>,
}

/// Sinusoidal position table, `len x d`.
pub fn positional_encoding(len: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, d), |(pos, i)| {
        let angle = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

impl Transformer {
    pub(crate) fn new(
        layout: &mut ParamLayout,
        lookback: usize,
        d_model: usize,
        heads: usize,
        layers: usize,
        ffn: usize,
    ) -> Self {
        let in_w = layout.add("embed.w", 1, d_model, Init::FanIn(1));
        let in_b = layout.add("embed.b", 1, d_model, Init::Const(0.0));
        let blocks = (0..layers).map(|l| Block::new(layout, &format!("block{l}"), d_model, ffn)).collect();
        let head_w = layout.add("head.w", d_model, 1, Init::FanIn(d_model));
        let head_b = layout.add("head.b", 1, 1, Init::Const(0.0));
        Self { in_w, in_b, blocks, head_w, head_b, heads, pos: positional_encoding(lookback, d_model) }
    }

    fn embed(&self, p: &[f64], window: ndarray::ArrayView1<f64>) -> Array2<f64> {
        let col = window.to_owned().insert_axis(Axis(1));
        col.dot(&self.in_w.mat(p)) + &self.in_b.mat(p) + &self.pos
    }

    fn run(&self, p: &[f64], window: ndarray::ArrayView1<f64>) -> (f64, Array1<f64>, Vec<BlockCache>) {
        let mut x = self.embed(p, window);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (out, c) = b.forward(p, x, self.heads);
            x = out;
            caches.push(c);
        }
        let pooled = x.mean_axis(Axis(0)).expect("non-empty window");
        let y = pooled.dot(&self.head_w.mat(p).column(0)) + self.head_b.vec(p)[0];
        (y, pooled, caches)
    }

    pub(crate) fn forward(&self, p: &[f64], x: ArrayView2<f64>) -> Vec<f64> {
        x.rows().into_iter().map(|row| self.run(p, row).0).collect()
    }

    /// Attention weights for one window: `[layer][head]`, each `W x W`.
    pub(crate) fn attention(&self, p: &[f64], window: &[f64]) -> Vec<Vec<Array2<f64>>> {
        let (_, _, caches) = self.run(p, ndarray::ArrayView1::from(window));
        caches.into_iter().map(|c| c.attn).collect()
    }

    pub(crate) fn loss_grad(&self, p: &[f64], x: ArrayView2<f64>, targets: &[f64], grad: &mut [f64]) -> f64 {
        let n = targets.len() as f64;
        let mut loss = 0.0;
        for (row, &t) in x.rows().into_iter().zip(targets) {
            let (y, pooled, caches) = self.run(p, row);
            let e = y - t;
            loss += e * e;
            let dy = 2.0 * e / n;

            self.head_w.vec_mut(grad).scaled_add(dy, &pooled);
            self.head_b.vec_mut(grad)[0] += dy;
            let w = row.len();
            let dpooled = self.head_w.mat(p).column(0).to_owned() * (dy / w as f64);
            let mut dx = dpooled.insert_axis(Axis(0)).broadcast((w, pooled.len())).expect("broadcast").to_owned();
            for (b, c) in self.blocks.iter().zip(&caches).rev() {
                dx = b.backward(p, c, &dx, grad);
            }
            let col = row.to_owned().insert_axis(Axis(0));
            general_mat_mul(1.0, &col, &dx, 1.0, &mut self.in_w.mat_mut(grad));
            self.in_b.vec_mut(grad).scaled_add(1.0, &dx.sum_axis(Axis(0)));
        }
        loss / n
    }
}
