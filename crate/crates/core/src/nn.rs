//! Parameterized layers over a [`Session`].
//!
//! Layers only hold parameter names and sizes; values live in the
//! [`ParamStore`] so that freezing, checkpointing and optimizer state all key
//! on the same names.

use rand::Rng;
use ttts_tape::{ParamStore, Session, Var};

use crate::layout::PaddedLayout;
use crate::Matrix;

fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: String,
    bias: String,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(name: &str, input: usize, output: usize) -> Self {
        Self {
            weight: format!("{name}.w"),
            bias: format!("{name}.b"),
            input,
            output,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        store.insert(&self.weight, xavier(rng, self.input, self.output));
        store.insert(&self.bias, Matrix::zeros((1, self.output)));
    }

    pub fn forward(&self, s: &Session, x: Var) -> Var {
        s.add_row(s.matmul(x, s.param(&self.weight)), s.param(&self.bias))
    }
}

/// Width-3 convolution along time on a time-major padded input. Padding rows
/// are zeroed first so they never leak into valid neighbours.
#[derive(Clone, Debug)]
pub struct Conv3 {
    linear: Linear,
}

impl Conv3 {
    pub fn new(name: &str, input: usize, output: usize) -> Self {
        Self {
            linear: Linear::new(name, 3 * input, output),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.linear.init(store, rng);
    }

    pub fn forward(&self, s: &Session, x: Var, layout: &PaddedLayout, mask: &Matrix) -> Var {
        let x = s.mask_rows(x, mask);
        let step = layout.batch() as isize;
        let prev = s.shift_rows(x, step);
        let next = s.shift_rows(x, -step);
        self.linear.forward(s, s.concat_cols(&[prev, x, next]))
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    table: String,
    pub rows: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(name: &str, rows: usize, dim: usize) -> Self {
        Self {
            table: format!("{name}.weight"),
            rows,
            dim,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        store.insert(&self.table, Matrix::from_shape_fn((self.rows, self.dim), |_| rng.gen_range(-0.5..0.5)));
    }

    pub fn table_name(&self) -> &str {
        &self.table
    }

    pub fn lookup(&self, s: &Session, index: Vec<Option<usize>>) -> Var {
        s.gather_rows(s.param(&self.table), index)
    }

    /// Table rows as a constant, cut off from the table's gradient.
    pub fn lookup_detached(&self, s: &Session, index: &[Option<usize>]) -> Var {
        let table = s.store().get(&self.table).expect("embedding table bound");
        let mut out = Matrix::zeros((index.len(), self.dim));
        for (i, row) in index.iter().enumerate() {
            if let Some(row) = *row {
                out.row_mut(i).assign(&table.row(row));
            }
        }
        s.constant(out)
    }
}

pub struct GruOutput {
    /// `layout.rows() x hidden`, state after each step.
    pub outputs: Var,
    /// `batch x hidden`, state after each item's last valid step.
    pub last: Var,
}

#[derive(Clone, Debug)]
pub struct Gru {
    input_proj: Linear,
    recurrent: String,
    recurrent_bias: String,
    pub hidden: usize,
}

impl Gru {
    pub fn new(name: &str, input: usize, hidden: usize) -> Self {
        Self {
            input_proj: Linear::new(&format!("{name}.x"), input, 3 * hidden),
            recurrent: format!("{name}.u"),
            recurrent_bias: format!("{name}.bh"),
            hidden,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.input_proj.init(store, rng);
        store.insert(&self.recurrent, xavier(rng, self.hidden, 3 * self.hidden));
        store.insert(&self.recurrent_bias, Matrix::zeros((1, 3 * self.hidden)));
    }

    pub fn forward(&self, s: &Session, x: Var, layout: &PaddedLayout, reverse: bool) -> GruOutput {
        let batch = layout.batch();
        let projected = self.input_proj.forward(s, x);
        let u = s.param(&self.recurrent);
        let bh = s.param(&self.recurrent_bias);
        let mut h = s.constant(Matrix::zeros((batch, self.hidden)));
        let mut states = vec![h; layout.steps()];
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..layout.steps()).rev())
        } else {
            Box::new(0..layout.steps())
        };
        for t in order {
            let xg = s.slice_rows(projected, t * batch, batch);
            h = s.gru_cell(xg, h, u, bh, &layout.step_mask(t));
            states[t] = h;
        }
        let outputs = if states.is_empty() {
            s.constant(Matrix::zeros((0, self.hidden)))
        } else {
            s.concat_rows(&states)
        };
        GruOutput { outputs, last: h }
    }
}

/// Forward and backward GRUs with concatenated outputs.
#[derive(Clone, Debug)]
pub struct BiGru {
    forward: Gru,
    backward: Gru,
}

impl BiGru {
    /// `hidden` is the total output width, split evenly between directions.
    pub fn new(name: &str, input: usize, hidden: usize) -> Self {
        assert!(hidden.is_multiple_of(2), "bidirectional width must be even");
        Self {
            forward: Gru::new(&format!("{name}.fw"), input, hidden / 2),
            backward: Gru::new(&format!("{name}.bw"), input, hidden / 2),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.forward.init(store, rng);
        self.backward.init(store, rng);
    }

    pub fn forward(&self, s: &Session, x: Var, layout: &PaddedLayout) -> Var {
        let fw = self.forward.forward(s, x, layout, false);
        let bw = self.backward.forward(s, x, layout, true);
        s.concat_cols(&[fw.outputs, bw.outputs])
    }
}
