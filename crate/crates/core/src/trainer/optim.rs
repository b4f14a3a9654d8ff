use std::collections::BTreeMap;

use ttts_tape::ParamStore;

use crate::Matrix;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Adam with per-parameter moments keyed by name. Parameters that never
/// receive a gradient never get state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub t: u64,
    pub m: BTreeMap<String, Matrix>,
    pub v: BTreeMap<String, Matrix>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Matrix>) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        for (name, g) in grads {
            let param = store.get_mut(name).expect("gradient for a stored parameter");
            let m = self.m.entry(name.clone()).or_insert_with(|| Matrix::zeros(g.dim()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Matrix::zeros(g.dim()));
            ndarray::Zip::from(param)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = BETA1 * *m + (1.0 - BETA1) * g;
                    *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                    *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient() {
        let mut store = ParamStore::new();
        store.insert("a", Matrix::from_elem((1, 2), 1.0));
        store.insert("b", Matrix::from_elem((1, 1), 5.0));
        let mut adam = Adam::new(0.1);
        let grads = BTreeMap::from([("a".to_owned(), Matrix::from_shape_vec((1, 2), vec![3.0, -0.5]).unwrap())]);
        adam.step(&mut store, &grads);
        let a = store.get("a").unwrap();
        assert!((a[[0, 0]] - 0.9).abs() < 1e-6 && (a[[0, 1]] - 1.1).abs() < 1e-6);
        assert_eq!(store.get("b").unwrap()[[0, 0]], 5.0);
        assert!(!adam.m.contains_key("b"));
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", Matrix::from_elem((1, 1), 4.0));
        let mut adam = Adam::new(0.05);
        for _ in 0..2000 {
            let x = store.get("x").unwrap()[[0, 0]];
            adam.step(&mut store, &BTreeMap::from([("x".to_owned(), Matrix::from_elem((1, 1), 2.0 * (x - 1.0)))]));
        }
        assert!((store.get("x").unwrap()[[0, 0]] - 1.0).abs() < 1e-2);
    }
}
