//! Flat parameter storage.
//!
//! Every model keeps its weights in one `Vec<f64>`; a [`ParamLayout`] maps
//! named tensors onto slices of it. Optimizers, checkpoints and finite
//! difference checks all work on the flat vector.

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// How a tensor is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanIn(usize),
    Const(f64),
}

/// A named tensor inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn mat<'a>(&self, p: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.rows, self.cols), &p[self.range()]).expect("slot shape")
    }

    pub fn mat_mut<'a>(&self, p: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
        ArrayViewMut2::from_shape((self.rows, self.cols), &mut p[self.range()]).expect("slot shape")
    }

    pub fn vec<'a>(&self, p: &'a [f64]) -> ArrayView1<'a, f64> {
        ArrayView1::from(&p[self.range()])
    }

    pub fn vec_mut<'a>(&self, p: &'a mut [f64]) -> ArrayViewMut1<'a, f64> {
        ArrayViewMut1::from(&mut p[self.range()])
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamLayout {
    entries: Vec<(String, Slot, Init)>,
    total: usize,
}

impl ParamLayout {
    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, init: Init) -> Slot {
        let slot = Slot { offset: self.total, rows, cols };
        self.total += slot.len();
        self.entries.push((name.into(), slot, init));
        slot
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn get(&self, name: &str) -> Option<Slot> {
        self.entries.iter().find(|(n, _, _)| n == name).map(|(_, s, _)| *s)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _, _)| n.as_str())
    }

    /// Fresh parameter vector drawn from each tensor's initializer.
    pub fn initialize(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut p = vec![0.0; self.total];
        for (_, slot, init) in &self.entries {
            let dst = &mut p[slot.range()];
            match *init {
                Init::FanIn(fan_in) => {
                    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                    dst.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
                }
                Init::Const(c) => dst.fill(c),
            }
        }
        p
    }
}

/// Adaptive-moment gradient descent over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn layout_offsets_are_contiguous() {
        let mut l = ParamLayout::default();
        let a = l.add("a", 2, 3, Init::FanIn(2));
        let b = l.add("b", 1, 4, Init::Const(1.0));
        assert_eq!((a.offset, b.offset, l.total()), (0, 6, 10));
        let p = l.initialize(&mut ChaCha8Rng::seed_from_u64(1));
        assert!(p[..6].iter().all(|v| v.abs() < 1.0 / 2f64.sqrt()));
        assert_eq!(&p[6..], &[1.0; 4]);
        assert_eq!(l.get("b"), Some(b));
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.1);
        for _ in 0..500 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            opt.step(&mut p, &g);
        }
        assert!(p.iter().all(|x| x.abs() < 1e-2));
    }
}
