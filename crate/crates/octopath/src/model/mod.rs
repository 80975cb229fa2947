//! From-scratch recurrent encoder-decoder over window+route sequences.
//!
//! The encoder is a single gated recurrent layer (update gate, reset gate,
//! candidate activation) reading tau_i+1 input vectors; its final hidden
//! state is the fixed-size context vector. The decoder is the same cell with
//! additional context matrices on every gate, an embedding of the previous
//! output symbol, and a softmax over the N window cells (classification
//! head) or a direct 2D output (regression head). Training is plain
//! backprop-through-time with Adam; everything is f64 and deterministic
//! given a seed.

mod adam;
mod backward;
mod checkpoint;
mod forward;
mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use backward::gradients;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use forward::{
    assemble_batch, batch_loss, decode_step, encode, forward, forward_regression, mse_loss,
    nll_loss, predict, predict_regression, BatchInput, DecodeMode, EncodeOutput, ForwardOutput,
    PredictionResult, PROB_FLOOR,
};
pub use train::{curve_to_csv, train, CurvePoint, TrainConfig, TrainResult};

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::GridSpec;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid class {0} (n_classes {1})")]
    InvalidClass(u32, u32),
    #[error("head mismatch: expected {expected:?}, got {got:?}")]
    HeadMismatch { expected: Head, got: Head },
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("format error: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Head {
    Classification,
    Regression,
}

/// Architecture hyperparameters; all weight shapes derive from these.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Window cells + 2 route coords + 2*tau_o future-route slots.
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub n_classes: usize,
    pub embed_dim: usize,
    pub tau_i: usize,
    pub tau_o: usize,
    pub head: Head,
}

impl ModelSpec {
    /// Spec matching a window grid. The per-timestep encoder input is the
    /// flattened window plus that timestep's ego-frame route point; the
    /// trailing 2*tau_o slots are zero except at the final timestep, which
    /// carries the future route points including the destination.
    pub fn for_grid(
        grid: &GridSpec,
        tau_i: usize,
        tau_o: usize,
        hidden_dim: usize,
        embed_dim: usize,
        head: Head,
    ) -> ModelSpec {
        ModelSpec {
            input_dim: grid.n_classes() + 2 + 2 * tau_o,
            hidden_dim,
            n_classes: grid.n_classes(),
            embed_dim,
            tau_i,
            tau_o,
            head,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, v) in [
            ("input_dim", self.input_dim),
            ("hidden_dim", self.hidden_dim),
            ("n_classes", self.n_classes),
            ("embed_dim", self.embed_dim),
            ("tau_o", self.tau_o),
        ] {
            if v == 0 {
                return Err(ModelError::InvalidSpec(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    /// Rows of the embedding/feedback matrix: classes plus a start token for
    /// the classification head, the 2 point coordinates for regression.
    pub fn embed_rows(&self) -> usize {
        match self.head {
            Head::Classification => self.n_classes + 1,
            Head::Regression => 2,
        }
    }

    /// Output layer width.
    pub fn out_dim(&self) -> usize {
        match self.head {
            Head::Classification => self.n_classes,
            Head::Regression => 2,
        }
    }

    /// Start-token row index (classification head).
    pub fn start_token(&self) -> usize {
        self.n_classes
    }
}

/// All trainable weights. The same struct doubles as the container for
/// gradients and Adam moments; `tensors`/`tensors_mut` fix the canonical
/// order used by the optimizer, the checkpoint format and the flat indexing.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub spec: ModelSpec,
    // Encoder gates.
    pub u_xz: Array2<f64>,
    pub u_xr: Array2<f64>,
    pub u_xh: Array2<f64>,
    pub u_hz: Array2<f64>,
    pub u_hr: Array2<f64>,
    pub u_rh: Array2<f64>,
    pub b_z: Array1<f64>,
    pub b_r: Array1<f64>,
    pub b_h: Array1<f64>,
    // Decoder gates (U_* on embedded feedback and state, C_* on the context).
    pub u_yz: Array2<f64>,
    pub u_yr: Array2<f64>,
    pub u_ys: Array2<f64>,
    pub u_sz: Array2<f64>,
    pub u_sr: Array2<f64>,
    pub u_rs: Array2<f64>,
    pub c_cz: Array2<f64>,
    pub c_cr: Array2<f64>,
    pub c_cs: Array2<f64>,
    pub d_z: Array1<f64>,
    pub d_r: Array1<f64>,
    pub d_s: Array1<f64>,
    // Feedback embedding (classification: n_classes+1 rows incl. start
    // token; regression: 2 rows projecting the previous point).
    pub embed: Array2<f64>,
    // Output projection: logits = (embed_prev + s U_s + c U_c) U_o + b_o.
    pub u_s: Array2<f64>,
    pub u_c: Array2<f64>,
    pub u_o: Array2<f64>,
    pub b_o: Array1<f64>,
}

impl ModelParams {
    pub fn zeros(spec: ModelSpec) -> Result<ModelParams, ModelError> {
        spec.validate()?;
        let (i, h, e) = (spec.input_dim, spec.hidden_dim, spec.embed_dim);
        let out = spec.out_dim();
        Ok(ModelParams {
            spec,
            u_xz: Array2::zeros((i, h)),
            u_xr: Array2::zeros((i, h)),
            u_xh: Array2::zeros((i, h)),
            u_hz: Array2::zeros((h, h)),
            u_hr: Array2::zeros((h, h)),
            u_rh: Array2::zeros((h, h)),
            b_z: Array1::zeros(h),
            b_r: Array1::zeros(h),
            b_h: Array1::zeros(h),
            u_yz: Array2::zeros((e, h)),
            u_yr: Array2::zeros((e, h)),
            u_ys: Array2::zeros((e, h)),
            u_sz: Array2::zeros((h, h)),
            u_sr: Array2::zeros((h, h)),
            u_rs: Array2::zeros((h, h)),
            c_cz: Array2::zeros((h, h)),
            c_cr: Array2::zeros((h, h)),
            c_cs: Array2::zeros((h, h)),
            d_z: Array1::zeros(h),
            d_r: Array1::zeros(h),
            d_s: Array1::zeros(h),
            embed: Array2::zeros((spec.embed_rows(), e)),
            u_s: Array2::zeros((h, e)),
            u_c: Array2::zeros((h, e)),
            u_o: Array2::zeros((e, out)),
            b_o: Array1::zeros(out),
        })
    }

    /// Scaled-uniform init (+-sqrt(6/(fan_in+fan_out))) for matrices, zero
    /// biases. Deterministic for a given seed.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<ModelParams, ModelError> {
        let mut params = ModelParams::zeros(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, mut t) in params.tensors_mut() {
            if is_bias(name) {
                continue;
            }
            let shape = t.shape().to_vec();
            let (fan_in, fan_out) = (shape[0] as f64, shape[1] as f64);
            let limit = (6.0 / (fan_in + fan_out)).sqrt();
            for v in t.iter_mut() {
                *v = rng.gen_range(-limit..limit);
            }
        }
        Ok(params)
    }

    pub fn tensors(&self) -> Vec<(&'static str, ArrayViewD<'_, f64>)> {
        vec![
            ("u_xz", self.u_xz.view().into_dyn()),
            ("u_xr", self.u_xr.view().into_dyn()),
            ("u_xh", self.u_xh.view().into_dyn()),
            ("u_hz", self.u_hz.view().into_dyn()),
            ("u_hr", self.u_hr.view().into_dyn()),
            ("u_rh", self.u_rh.view().into_dyn()),
            ("b_z", self.b_z.view().into_dyn()),
            ("b_r", self.b_r.view().into_dyn()),
            ("b_h", self.b_h.view().into_dyn()),
            ("u_yz", self.u_yz.view().into_dyn()),
            ("u_yr", self.u_yr.view().into_dyn()),
            ("u_ys", self.u_ys.view().into_dyn()),
            ("u_sz", self.u_sz.view().into_dyn()),
            ("u_sr", self.u_sr.view().into_dyn()),
            ("u_rs", self.u_rs.view().into_dyn()),
            ("c_cz", self.c_cz.view().into_dyn()),
            ("c_cr", self.c_cr.view().into_dyn()),
            ("c_cs", self.c_cs.view().into_dyn()),
            ("d_z", self.d_z.view().into_dyn()),
            ("d_r", self.d_r.view().into_dyn()),
            ("d_s", self.d_s.view().into_dyn()),
            ("embed", self.embed.view().into_dyn()),
            ("u_s", self.u_s.view().into_dyn()),
            ("u_c", self.u_c.view().into_dyn()),
            ("u_o", self.u_o.view().into_dyn()),
            ("b_o", self.b_o.view().into_dyn()),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, ArrayViewMutD<'_, f64>)> {
        vec![
            ("u_xz", self.u_xz.view_mut().into_dyn()),
            ("u_xr", self.u_xr.view_mut().into_dyn()),
            ("u_xh", self.u_xh.view_mut().into_dyn()),
            ("u_hz", self.u_hz.view_mut().into_dyn()),
            ("u_hr", self.u_hr.view_mut().into_dyn()),
            ("u_rh", self.u_rh.view_mut().into_dyn()),
            ("b_z", self.b_z.view_mut().into_dyn()),
            ("b_r", self.b_r.view_mut().into_dyn()),
            ("b_h", self.b_h.view_mut().into_dyn()),
            ("u_yz", self.u_yz.view_mut().into_dyn()),
            ("u_yr", self.u_yr.view_mut().into_dyn()),
            ("u_ys", self.u_ys.view_mut().into_dyn()),
            ("u_sz", self.u_sz.view_mut().into_dyn()),
            ("u_sr", self.u_sr.view_mut().into_dyn()),
            ("u_rs", self.u_rs.view_mut().into_dyn()),
            ("c_cz", self.c_cz.view_mut().into_dyn()),
            ("c_cr", self.c_cr.view_mut().into_dyn()),
            ("c_cs", self.c_cs.view_mut().into_dyn()),
            ("d_z", self.d_z.view_mut().into_dyn()),
            ("d_r", self.d_r.view_mut().into_dyn()),
            ("d_s", self.d_s.view_mut().into_dyn()),
            ("embed", self.embed.view_mut().into_dyn()),
            ("u_s", self.u_s.view_mut().into_dyn()),
            ("u_c", self.u_c.view_mut().into_dyn()),
            ("u_o", self.u_o.view_mut().into_dyn()),
            ("b_o", self.b_o.view_mut().into_dyn()),
        ]
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Flat coordinate access in canonical tensor order (row-major within
    /// each tensor); used by the finite-difference check.
    pub fn get_flat(&self, index: usize) -> f64 {
        let mut k = index;
        for (_, t) in self.tensors() {
            if k < t.len() {
                return *t.iter().nth(k).unwrap();
            }
            k -= t.len();
        }
        panic!("flat index {index} out of range");
    }

    pub fn set_flat(&mut self, index: usize, value: f64) {
        let mut k = index;
        for (_, mut t) in self.tensors_mut() {
            if k < t.len() {
                *t.iter_mut().nth(k).unwrap() = value;
                return;
            }
            k -= t.len();
        }
        panic!("flat index {index} out of range");
    }
}

fn is_bias(name: &str) -> bool {
    matches!(name, "b_z" | "b_r" | "b_h" | "d_z" | "d_r" | "d_s" | "b_o")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            input_dim: 20,
            hidden_dim: 8,
            n_classes: 12,
            embed_dim: 6,
            tau_i: 2,
            tau_o: 3,
            head: Head::Classification,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = ModelParams::init(tiny_spec(), 42).unwrap();
        let b = ModelParams::init(tiny_spec(), 42).unwrap();
        assert_eq!(a, b);
        let c = ModelParams::init(tiny_spec(), 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn biases_start_zero_and_matrices_bounded() {
        let p = ModelParams::init(tiny_spec(), 1).unwrap();
        assert!(p.b_z.iter().all(|v| *v == 0.0));
        assert!(p.b_o.iter().all(|v| *v == 0.0));
        let limit = (6.0f64 / 28.0).sqrt();
        assert!(p.u_xz.iter().all(|v| v.abs() <= limit));
    }

    #[test]
    fn invalid_spec_is_rejected() {
        let mut s = tiny_spec();
        s.hidden_dim = 0;
        assert!(matches!(ModelParams::init(s, 0), Err(ModelError::InvalidSpec(_))));
    }

    #[test]
    fn flat_indexing_roundtrip() {
        let mut p = ModelParams::zeros(tiny_spec()).unwrap();
        let n = p.n_params();
        p.set_flat(0, 1.5);
        p.set_flat(n - 1, -2.5);
        assert_eq!(p.get_flat(0), 1.5);
        assert_eq!(p.get_flat(n - 1), -2.5);
        assert_eq!(p.u_xz[[0, 0]], 1.5);
        assert_eq!(p.b_o[p.spec.out_dim() - 1], -2.5);
    }
}
