//! Single self-attention head over whole-statement rows, and the repetition
//! experiment: how repeating a statement `t` times in the context shifts the
//! softmax weight away from the query row.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};

/// `W^Q, W^K, W^V` are `d' x d`; `e` is the end-of-input vector of length `d'`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHead {
    pub wq: DMatrix<f64>,
    pub wk: DMatrix<f64>,
    pub wv: DMatrix<f64>,
    pub e: DVector<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput {
    pub logits: DVector<f64>,
    pub weights: DVector<f64>,
    pub output: DVector<f64>,
}

fn finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}

impl AttentionHead {
    pub fn new(
        wq: DMatrix<f64>,
        wk: DMatrix<f64>,
        wv: DMatrix<f64>,
        e: DVector<f64>,
    ) -> Result<Self> {
        let shape = wq.shape();
        if wk.shape() != shape || wv.shape() != shape {
            return Err(Error::InvalidArgument(format!(
                "W^Q, W^K, W^V must share a shape, got {:?}, {:?}, {:?}",
                shape,
                wk.shape(),
                wv.shape()
            )));
        }
        if e.len() != shape.0 {
            return Err(Error::InvalidArgument(format!(
                "end-of-input vector has length {}, expected {}",
                e.len(),
                shape.0
            )));
        }
        if shape.0 == 0 || shape.1 == 0 {
            return Err(Error::InvalidArgument("empty weight matrices".into()));
        }
        if !(finite(&wq) && finite(&wk) && finite(&wv) && e.iter().all(|x| x.is_finite())) {
            return Err(Error::InvalidArgument("non-finite weights".into()));
        }
        Ok(Self { wq, wk, wv, e })
    }

    /// Statement width `d'`.
    pub fn input_dim(&self) -> usize {
        self.wq.nrows()
    }

    /// Head width `d`.
    pub fn head_dim(&self) -> usize {
        self.wq.ncols()
    }

    fn query(&self) -> DVector<f64> {
        self.wq.tr_mul(&self.e) / (self.head_dim() as f64).sqrt()
    }

    /// Attention logit of a single statement row.
    pub fn row_logit(&self, row: &DVector<f64>) -> f64 {
        self.wk.tr_mul(row).dot(&self.query())
    }

    /// `Softmax(E^T W^Q (Z W^K)^T / sqrt(d)) Z W^V` for `Z` of shape `n x d'`.
    pub fn forward(&self, z: &DMatrix<f64>) -> Result<AttentionOutput> {
        if z.nrows() == 0 {
            return Err(Error::InvalidArgument(
                "input must have at least one row".into(),
            ));
        }
        if z.ncols() != self.input_dim() {
            return Err(Error::InvalidArgument(format!(
                "input has {} columns, expected {}",
                z.ncols(),
                self.input_dim()
            )));
        }
        if !finite(z) {
            return Err(Error::InvalidArgument("non-finite input".into()));
        }
        let logits = (z * &self.wk) * self.query();
        let max = logits.max();
        let exp = logits.map(|l| (l - max).exp());
        let weights = &exp / exp.sum();
        let output = (z * &self.wv).tr_mul(&weights);
        Ok(AttentionOutput {
            logits,
            weights,
            output,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RepetitionPoint {
    pub t: usize,
    /// Total softmax weight on the repeated rows.
    pub y_mass: f64,
    /// `||output - Y^T W^V||`.
    pub output_distance: f64,
}

/// `t e^{l_Y} / (e^{l_X} + t e^{l_Y})`, evaluated stably.
pub fn closed_form_y_mass(logit_x: f64, logit_y: f64, t: usize) -> f64 {
    let a = logit_y + (t as f64).ln() - logit_x;
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// Run the head on `Z = [X; Y repeated t times]` for each `t`.
pub fn repetition_experiment(
    head: &AttentionHead,
    x: &DVector<f64>,
    y: &DVector<f64>,
    t_values: &[usize],
) -> Result<Vec<RepetitionPoint>> {
    let d_in = head.input_dim();
    if x.len() != d_in || y.len() != d_in {
        return Err(Error::InvalidArgument(format!(
            "statement vectors must have length {d_in}"
        )));
    }
    let target = head.wv.tr_mul(y);
    t_values
        .iter()
        .map(|&t| {
            if t == 0 {
                return Err(Error::InvalidArgument("t must be positive".into()));
            }
            let z = DMatrix::from_fn(t + 1, d_in, |r, c| if r == 0 { x[c] } else { y[c] });
            let out = head.forward(&z)?;
            Ok(RepetitionPoint {
                t,
                y_mass: out.weights.rows(1, t).sum(),
                output_distance: (out.output - &target).norm(),
            })
        })
        .collect()
}
