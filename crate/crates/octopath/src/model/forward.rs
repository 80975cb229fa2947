//! Forward pass: gated recurrent encoder, context-conditioned decoder,
//! losses, and greedy/beam decoding to metric space.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};

use crate::dataset::{position_of_cell, GridSpec, SampleSequence};
use crate::geom::{Pose2, Vec2};

use super::{Head, ModelError, ModelParams, ModelSpec};

/// Probabilities are floored here before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Assembled model inputs for a batch of samples.
pub struct BatchInput {
    /// (batch, tau_i+1, input_dim)
    pub xs: Array3<f64>,
    /// Per-sample future cell labels (classification targets).
    pub labels: Option<Vec<Vec<u32>>>,
    /// (batch, tau_o, 2) ego-frame targets for the regression head.
    pub targets: Option<Array3<f64>>,
}

impl BatchInput {
    pub fn batch_size(&self) -> usize {
        self.xs.shape()[0]
    }
}

/// Ego-frame center of a window cell, without any anchor transform.
fn ego_center_of_cell(class: u32, grid: &GridSpec) -> Vec2 {
    let i = (class as usize) / grid.height;
    let j = (class as usize) % grid.height;
    let res = grid.resolution;
    Vec2::new(
        (i as f64 + 0.5) * res,
        (j as f64 + 0.5) * res - grid.height as f64 * res / 2.0,
    )
}

/// Per-timestep encoder input: flattened window, that timestep's route
/// point, then the future-route slots (zero except at the final timestep).
fn fill_inputs(
    xs: &mut Array3<f64>,
    b: usize,
    windows: &[Vec<i8>],
    ref_window: &[Vec2],
    spec: &ModelSpec,
) {
    let t_len = spec.tau_i + 1;
    let cells = spec.input_dim - 2 - 2 * spec.tau_o;
    for (t, win) in windows.iter().enumerate() {
        for (k, v) in win.iter().enumerate() {
            xs[[b, t, k]] = *v as f64;
        }
        xs[[b, t, cells]] = ref_window[t].x;
        xs[[b, t, cells + 1]] = ref_window[t].y;
        if t == t_len - 1 {
            for f in 0..spec.tau_o {
                xs[[b, t, cells + 2 + 2 * f]] = ref_window[t_len + f].x;
                xs[[b, t, cells + 2 + 2 * f + 1]] = ref_window[t_len + f].y;
            }
        }
    }
}

fn check_sample(sample: &SampleSequence, spec: &ModelSpec, grid: &GridSpec) -> Result<(), ModelError> {
    let cells = grid.n_classes();
    if spec.input_dim != cells + 2 + 2 * spec.tau_o {
        return Err(ModelError::Shape(format!(
            "input_dim {} does not match grid cells {} + 2 + 2*tau_o",
            spec.input_dim, cells
        )));
    }
    if sample.windows.len() != spec.tau_i + 1 {
        return Err(ModelError::Shape(format!(
            "expected {} windows, got {}",
            spec.tau_i + 1,
            sample.windows.len()
        )));
    }
    if sample.windows.iter().any(|w| w.len() != cells) {
        return Err(ModelError::Shape("window cell count mismatch".into()));
    }
    if sample.ref_window.len() != spec.tau_i + spec.tau_o + 1 {
        return Err(ModelError::Shape("reference window length mismatch".into()));
    }
    if sample.labels.len() != spec.tau_o {
        return Err(ModelError::Shape("label count mismatch".into()));
    }
    Ok(())
}

/// Build the (xs, labels, targets) batch for training or evaluation.
pub fn assemble_batch(
    samples: &[&SampleSequence],
    spec: &ModelSpec,
    grid: &GridSpec,
) -> Result<BatchInput, ModelError> {
    if samples.is_empty() {
        return Err(ModelError::EmptyDataset("empty batch".into()));
    }
    if spec.head == Head::Classification && spec.n_classes != grid.n_classes() {
        return Err(ModelError::Shape(format!(
            "n_classes {} does not match grid {}",
            spec.n_classes,
            grid.n_classes()
        )));
    }
    let b_n = samples.len();
    let mut xs = Array3::zeros((b_n, spec.tau_i + 1, spec.input_dim));
    let mut labels = Vec::with_capacity(b_n);
    let mut targets = Array3::zeros((b_n, spec.tau_o, 2));
    for (b, sample) in samples.iter().enumerate() {
        check_sample(sample, spec, grid)?;
        fill_inputs(&mut xs, b, &sample.windows, &sample.ref_window, spec);
        for (t, label) in sample.labels.iter().enumerate() {
            let e = ego_center_of_cell(*label, grid);
            targets[[b, t, 0]] = e.x;
            targets[[b, t, 1]] = e.y;
        }
        labels.push(sample.labels.clone());
    }
    Ok(BatchInput { xs, labels: Some(labels), targets: Some(targets) })
}

/// Encoder activations for a batch; `h` holds tau_i+1 entries of (B, H).
pub(crate) struct EncCache {
    pub z: Vec<Array2<f64>>,
    pub r: Vec<Array2<f64>>,
    pub hc: Vec<Array2<f64>>,
    pub h: Vec<Array2<f64>>,
}

impl EncCache {
    pub fn context(&self) -> &Array2<f64> {
        self.h.last().unwrap()
    }
}

pub(crate) fn encode_batch(params: &ModelParams, xs: &Array3<f64>) -> Result<EncCache, ModelError> {
    let (b_n, t_len, in_dim) = (xs.shape()[0], xs.shape()[1], xs.shape()[2]);
    if in_dim != params.spec.input_dim {
        return Err(ModelError::Shape(format!(
            "input dim {in_dim}, model expects {}",
            params.spec.input_dim
        )));
    }
    let h_dim = params.spec.hidden_dim;
    let mut cache = EncCache { z: Vec::new(), r: Vec::new(), hc: Vec::new(), h: Vec::new() };
    let mut h_prev: Array2<f64> = Array2::zeros((b_n, h_dim));
    for t in 0..t_len {
        let x = xs.slice(s![.., t, ..]);
        let z = (&x.dot(&params.u_xz) + &h_prev.dot(&params.u_hz) + &params.b_z).mapv(sigmoid);
        let r = (&x.dot(&params.u_xr) + &h_prev.dot(&params.u_hr) + &params.b_r).mapv(sigmoid);
        let rh = &r * &h_prev;
        let hc = (&x.dot(&params.u_xh) + &rh.dot(&params.u_rh) + &params.b_h).mapv(f64::tanh);
        let h = (1.0 - &z) * &h_prev + &z * &hc;
        cache.z.push(z);
        cache.r.push(r);
        cache.hc.push(hc);
        cache.h.push(h.clone());
        h_prev = h;
    }
    Ok(cache)
}

/// Encoder output for a single sequence.
pub struct EncodeOutput {
    /// (tau_i+1, hidden): hidden state after each input.
    pub hidden_states: Array2<f64>,
    /// Final hidden state (the context / thought vector).
    pub context: Array1<f64>,
}

/// Run the encoder over one sequence of input vectors (rows).
pub fn encode(params: &ModelParams, inputs: ArrayView2<f64>) -> Result<EncodeOutput, ModelError> {
    let t_len = inputs.shape()[0];
    let xs = inputs
        .to_owned()
        .into_shape_with_order((1, t_len, inputs.shape()[1]))
        .map_err(|e| ModelError::Shape(e.to_string()))?;
    let cache = encode_batch(params, &xs)?;
    let mut hidden = Array2::zeros((t_len, params.spec.hidden_dim));
    for (t, h) in cache.h.iter().enumerate() {
        hidden.row_mut(t).assign(&h.row(0));
    }
    let context = cache.context().row(0).to_owned();
    Ok(EncodeOutput { hidden_states: hidden, context })
}

fn embed_of_indices(params: &ModelParams, idx: &[usize]) -> Array2<f64> {
    let e_dim = params.spec.embed_dim;
    let mut out = Array2::zeros((idx.len(), e_dim));
    for (b, &i) in idx.iter().enumerate() {
        out.row_mut(b).assign(&params.embed.row(i));
    }
    out
}

/// One batched decoder cell step; returns gate activations and the state.
pub(crate) fn dec_cell(
    params: &ModelParams,
    e_prev: &Array2<f64>,
    s_prev: &Array2<f64>,
    c: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>) {
    let zp = (&e_prev.dot(&params.u_yz) + &s_prev.dot(&params.u_sz) + &c.dot(&params.c_cz)
        + &params.d_z)
        .mapv(sigmoid);
    let rp = (&e_prev.dot(&params.u_yr) + &s_prev.dot(&params.u_sr) + &c.dot(&params.c_cr)
        + &params.d_r)
        .mapv(sigmoid);
    let rs = &rp * s_prev;
    let sc = (&e_prev.dot(&params.u_ys) + &rs.dot(&params.u_rs) + &c.dot(&params.c_cs)
        + &params.d_s)
        .mapv(f64::tanh);
    let st = (1.0 - &zp) * s_prev + &zp * &sc;
    (zp, rp, sc, st)
}

/// Pre-projection output activation: embed_prev + s U_s + c U_c.
pub(crate) fn out_pre(
    params: &ModelParams,
    e_prev: &Array2<f64>,
    st: &Array2<f64>,
    c: &Array2<f64>,
) -> Array2<f64> {
    e_prev + &st.dot(&params.u_s) + &c.dot(&params.u_c)
}

/// Single-step decode (classification head): distribution over the N cells
/// plus the next decoder state. `y_prev = None` means the start token.
pub fn decode_step(
    params: &ModelParams,
    y_prev: Option<u32>,
    s_prev: &Array1<f64>,
    context: &Array1<f64>,
) -> Result<(Array1<f64>, Array1<f64>), ModelError> {
    if params.spec.head != Head::Classification {
        return Err(ModelError::HeadMismatch {
            expected: Head::Classification,
            got: params.spec.head,
        });
    }
    let n = params.spec.n_classes as u32;
    let idx = match y_prev {
        None => params.spec.start_token(),
        Some(c) if c < n => c as usize,
        Some(c) => return Err(ModelError::InvalidClass(c, n)),
    };
    if s_prev.len() != params.spec.hidden_dim || context.len() != params.spec.hidden_dim {
        return Err(ModelError::Shape("decoder state/context dimension mismatch".into()));
    }
    let e_prev = embed_of_indices(params, &[idx]);
    let s2 = s_prev.view().insert_axis(Axis(0)).to_owned();
    let c2 = context.view().insert_axis(Axis(0)).to_owned();
    let (_, _, _, st) = dec_cell(params, &e_prev, &s2, &c2);
    let logits = out_pre(params, &e_prev, &st, &c2).dot(&params.u_o) + &params.b_o;
    let probs = softmax_rows(&logits);
    Ok((probs.row(0).to_owned(), st.row(0).to_owned()))
}

/// Decoder activations cached for backprop.
pub(crate) struct DecCache {
    /// Fed symbol per step (classification) or fed point (regression).
    pub feed_idx: Vec<Vec<usize>>,
    pub feed_pts: Vec<Array2<f64>>,
    pub e_prev: Vec<Array2<f64>>,
    pub zp: Vec<Array2<f64>>,
    pub rp: Vec<Array2<f64>>,
    pub sc: Vec<Array2<f64>>,
    pub st: Vec<Array2<f64>>,
    pub o_pre: Vec<Array2<f64>>,
    /// Softmax distributions (classification) or raw 2D outputs (regression).
    pub out: Vec<Array2<f64>>,
}

pub(crate) struct ForwardCache {
    pub enc: EncCache,
    pub dec: DecCache,
}

/// Full forward pass over a batch. With `teacher_forcing` the decoder is fed
/// the ground-truth previous symbol (or target point for the regression
/// head); otherwise it feeds back its own previous prediction.
pub(crate) fn forward_cached(
    params: &ModelParams,
    batch: &BatchInput,
    teacher_forcing: bool,
) -> Result<ForwardCache, ModelError> {
    let spec = &params.spec;
    let enc = encode_batch(params, &batch.xs)?;
    let b_n = batch.batch_size();
    let c = enc.context().clone();
    let mut dec = DecCache {
        feed_idx: Vec::new(),
        feed_pts: Vec::new(),
        e_prev: Vec::new(),
        zp: Vec::new(),
        rp: Vec::new(),
        sc: Vec::new(),
        st: Vec::new(),
        o_pre: Vec::new(),
        out: Vec::new(),
    };
    if teacher_forcing {
        match spec.head {
            Head::Classification if batch.labels.is_none() => {
                return Err(ModelError::Shape("teacher forcing requires labels".into()))
            }
            Head::Regression if batch.targets.is_none() => {
                return Err(ModelError::Shape("teacher forcing requires targets".into()))
            }
            _ => {}
        }
    }
    let mut s_prev: Array2<f64> = Array2::zeros((b_n, spec.hidden_dim));
    for step in 0..spec.tau_o {
        let e_prev = match spec.head {
            Head::Classification => {
                let idx: Vec<usize> = if step == 0 {
                    vec![spec.start_token(); b_n]
                } else if teacher_forcing {
                    let labels = batch.labels.as_ref().unwrap();
                    (0..b_n).map(|b| labels[b][step - 1] as usize).collect()
                } else {
                    let prev = &dec.out[step - 1];
                    (0..b_n).map(|b| argmax_row(&prev.row(b).to_owned())).collect()
                };
                let e = embed_of_indices(params, &idx);
                dec.feed_idx.push(idx);
                dec.feed_pts.push(Array2::zeros((b_n, 2)));
                e
            }
            Head::Regression => {
                let pts: Array2<f64> = if step == 0 {
                    Array2::zeros((b_n, 2))
                } else if teacher_forcing {
                    batch.targets.as_ref().unwrap().slice(s![.., step - 1, ..]).to_owned()
                } else {
                    dec.out[step - 1].clone()
                };
                let e = pts.dot(&params.embed);
                dec.feed_idx.push(Vec::new());
                dec.feed_pts.push(pts);
                e
            }
        };
        let (zp, rp, sc, st) = dec_cell(params, &e_prev, &s_prev, &c);
        let o_pre = out_pre(params, &e_prev, &st, &c);
        let logits = o_pre.dot(&params.u_o) + &params.b_o;
        let out = match spec.head {
            Head::Classification => softmax_rows(&logits),
            Head::Regression => logits,
        };
        dec.e_prev.push(e_prev);
        dec.zp.push(zp);
        dec.rp.push(rp);
        dec.sc.push(sc);
        dec.st.push(st.clone());
        dec.o_pre.push(o_pre);
        dec.out.push(out);
        s_prev = st;
    }
    Ok(ForwardCache { enc, dec })
}

fn argmax_row(row: &Array1<f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in row.iter().enumerate() {
        if *v > best_v {
            best_v = *v;
            best = i;
        }
    }
    best
}

/// Per-step outputs of a forward pass.
pub struct ForwardOutput {
    /// tau_o entries of (batch, n_classes) distributions — or (batch, 2)
    /// point outputs for the regression head.
    pub outputs: Vec<Array2<f64>>,
    /// Greedy per-step argmax classes (classification head).
    pub classes: Vec<Vec<u32>>,
}

pub fn forward(
    params: &ModelParams,
    batch: &BatchInput,
    teacher_forcing: bool,
) -> Result<ForwardOutput, ModelError> {
    let cache = forward_cached(params, batch, teacher_forcing)?;
    let classes = match params.spec.head {
        Head::Classification => cache
            .dec
            .out
            .iter()
            .map(|p| (0..p.shape()[0]).map(|b| argmax_row(&p.row(b).to_owned()) as u32).collect())
            .collect(),
        Head::Regression => Vec::new(),
    };
    Ok(ForwardOutput { outputs: cache.dec.out, classes })
}

/// Regression-head forward: tau_o ego-frame (x, y) outputs per sample.
pub fn forward_regression(
    params: &ModelParams,
    batch: &BatchInput,
    teacher_forcing: bool,
) -> Result<Vec<Array2<f64>>, ModelError> {
    if params.spec.head != Head::Regression {
        return Err(ModelError::HeadMismatch { expected: Head::Regression, got: params.spec.head });
    }
    Ok(forward(params, batch, teacher_forcing)?.outputs)
}

/// Mean over steps and batch of -ln p(label), probabilities floored first.
pub fn nll_loss(dists: &[Array2<f64>], labels: &[Vec<u32>]) -> Result<f64, ModelError> {
    if dists.len() != labels.first().map_or(0, |l| l.len()) {
        return Err(ModelError::Shape(format!(
            "{} distributions vs {} labels per sample",
            dists.len(),
            labels.first().map_or(0, |l| l.len())
        )));
    }
    let b_n = labels.len();
    let mut total = 0.0;
    for (step, d) in dists.iter().enumerate() {
        for (b, sample_labels) in labels.iter().enumerate() {
            let p = d[[b, sample_labels[step] as usize]].max(PROB_FLOOR);
            total -= p.ln();
        }
    }
    Ok(total / (b_n * dists.len()) as f64)
}

/// Mean squared position error per step: mean over steps/batch of
/// (dx^2 + dy^2).
pub fn mse_loss(outputs: &[Array2<f64>], targets: &Array3<f64>) -> Result<f64, ModelError> {
    let b_n = targets.shape()[0];
    if outputs.len() != targets.shape()[1] {
        return Err(ModelError::Shape("output/target step mismatch".into()));
    }
    let mut total = 0.0;
    for (step, o) in outputs.iter().enumerate() {
        for b in 0..b_n {
            let dx = o[[b, 0]] - targets[[b, step, 0]];
            let dy = o[[b, 1]] - targets[[b, step, 1]];
            total += dx * dx + dy * dy;
        }
    }
    Ok(total / (b_n * outputs.len()) as f64)
}

/// Teacher-forced loss of a batch under the head's training objective.
pub fn batch_loss(params: &ModelParams, batch: &BatchInput) -> Result<f64, ModelError> {
    let out = forward(params, batch, true)?;
    match params.spec.head {
        Head::Classification => nll_loss(
            &out.outputs,
            batch.labels.as_ref().ok_or_else(|| ModelError::Shape("labels required".into()))?,
        ),
        Head::Regression => mse_loss(
            &out.outputs,
            batch.targets.as_ref().ok_or_else(|| ModelError::Shape("targets required".into()))?,
        ),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

/// Decoded prediction: per-step distributions along the returned sequence,
/// the class sequence, and its cell centers in the global frame.
#[derive(Debug, Clone)]
pub struct PredictionResult {
    pub dists: Vec<Array1<f64>>,
    pub classes: Vec<u32>,
    pub points: Vec<Vec2>,
    pub log_prob: f64,
}

fn single_batch(
    windows: &[Vec<i8>],
    ref_window: &[Vec2],
    spec: &ModelSpec,
) -> Result<BatchInput, ModelError> {
    if windows.len() != spec.tau_i + 1 || ref_window.len() != spec.tau_i + spec.tau_o + 1 {
        return Err(ModelError::Shape("window/reference sequence length mismatch".into()));
    }
    let mut xs = Array3::zeros((1, spec.tau_i + 1, spec.input_dim));
    let cells = spec.input_dim - 2 - 2 * spec.tau_o;
    if windows.iter().any(|w| w.len() != cells) {
        return Err(ModelError::Shape("window cell count mismatch".into()));
    }
    fill_inputs(&mut xs, 0, windows, ref_window, spec);
    Ok(BatchInput { xs, labels: None, targets: None })
}

/// Greedy or beam decode of one sample; decoded points are window cell
/// centers mapped into the global frame at `anchor`.
pub fn predict(
    params: &ModelParams,
    grid: &GridSpec,
    windows: &[Vec<i8>],
    ref_window: &[Vec2],
    anchor: Pose2,
    mode: DecodeMode,
) -> Result<PredictionResult, ModelError> {
    if params.spec.head != Head::Classification {
        return Err(ModelError::HeadMismatch {
            expected: Head::Classification,
            got: params.spec.head,
        });
    }
    let batch = single_batch(windows, ref_window, &params.spec)?;
    let enc = encode_batch(params, &batch.xs)?;
    let context = enc.context().row(0).to_owned();
    let spec = params.spec;

    let classes: Vec<u32> = match mode {
        DecodeMode::Greedy => {
            let mut s = Array1::zeros(spec.hidden_dim);
            let mut prev: Option<u32> = None;
            let mut seq = Vec::with_capacity(spec.tau_o);
            for _ in 0..spec.tau_o {
                let (probs, s_next) = decode_step(params, prev, &s, &context)?;
                let cls = argmax_row(&probs) as u32;
                seq.push(cls);
                prev = Some(cls);
                s = s_next;
            }
            seq
        }
        DecodeMode::Beam(width) => {
            let width = width.max(1);
            beam_search(params, &context, width)?
        }
    };

    // Collect distributions along the chosen sequence.
    let mut dists = Vec::with_capacity(spec.tau_o);
    let mut s = Array1::zeros(spec.hidden_dim);
    let mut prev: Option<u32> = None;
    let mut log_prob = 0.0;
    for &cls in &classes {
        let (probs, s_next) = decode_step(params, prev, &s, &context)?;
        log_prob += probs[cls as usize].max(PROB_FLOOR).ln();
        dists.push(probs);
        prev = Some(cls);
        s = s_next;
    }
    let points = classes
        .iter()
        .map(|c| position_of_cell(*c, anchor, grid).map_err(|_| ModelError::InvalidClass(*c, spec.n_classes as u32)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PredictionResult { dists, classes, points, log_prob })
}

fn beam_search(
    params: &ModelParams,
    context: &Array1<f64>,
    width: usize,
) -> Result<Vec<u32>, ModelError> {
    struct Cand {
        seq: Vec<u32>,
        logp: f64,
        state: Array1<f64>,
    }
    let spec = params.spec;
    let mut cands = vec![Cand {
        seq: Vec::new(),
        logp: 0.0,
        state: Array1::zeros(spec.hidden_dim),
    }];
    for _ in 0..spec.tau_o {
        // (parent, class, logp, state)
        let mut pool: Vec<(usize, u32, f64)> = Vec::with_capacity(cands.len() * spec.n_classes);
        let mut states = Vec::with_capacity(cands.len());
        for (ci, cand) in cands.iter().enumerate() {
            let prev = cand.seq.last().copied();
            let (probs, s_next) = decode_step(params, prev, &cand.state, context)?;
            states.push(s_next);
            for (cls, p) in probs.iter().enumerate() {
                pool.push((ci, cls as u32, cand.logp + p.max(PROB_FLOOR).ln()));
            }
        }
        pool.sort_by(|a, b| {
            b.2.total_cmp(&a.2).then_with(|| (a.0, a.1).cmp(&(b.0, b.1)))
        });
        pool.truncate(width);
        cands = pool
            .into_iter()
            .map(|(parent, cls, logp)| {
                let mut seq = cands[parent].seq.clone();
                seq.push(cls);
                Cand { seq, logp, state: states[parent].clone() }
            })
            .collect();
    }
    Ok(cands.into_iter().next().unwrap().seq)
}

/// Regression prediction: ego-frame outputs plus their global positions.
#[derive(Debug, Clone)]
pub struct RegressionPrediction {
    pub ego: Vec<Vec2>,
    pub points: Vec<Vec2>,
}

pub fn predict_regression(
    params: &ModelParams,
    windows: &[Vec<i8>],
    ref_window: &[Vec2],
    anchor: Pose2,
) -> Result<RegressionPrediction, ModelError> {
    if params.spec.head != Head::Regression {
        return Err(ModelError::HeadMismatch { expected: Head::Regression, got: params.spec.head });
    }
    let batch = single_batch(windows, ref_window, &params.spec)?;
    let outs = forward(params, &batch, false)?.outputs;
    let ego: Vec<Vec2> = outs.iter().map(|o| Vec2::new(o[[0, 0]], o[[0, 1]])).collect();
    let points = ego.iter().map(|p| anchor.to_world(*p)).collect();
    Ok(RegressionPrediction { ego, points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            input_dim: 12 + 2 + 2 * 3,
            hidden_dim: 8,
            n_classes: 12,
            embed_dim: 6,
            tau_i: 2,
            tau_o: 3,
            head: Head::Classification,
        }
    }

    fn tiny_grid() -> GridSpec {
        GridSpec { width: 4, height: 3, resolution: 0.2 }
    }

    fn random_sample(rng: &mut ChaCha8Rng, spec: &ModelSpec, grid: &GridSpec) -> SampleSequence {
        let cells = grid.n_classes();
        let windows = (0..=spec.tau_i)
            .map(|_| (0..cells).map(|_| rng.gen_range(-1i8..=1)).collect())
            .collect();
        let ref_window = (0..spec.tau_i + spec.tau_o + 1)
            .map(|_| Vec2::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)))
            .collect();
        let labels =
            (0..spec.tau_o).map(|_| rng.gen_range(0..cells as u32)).collect();
        SampleSequence {
            run_id: 0,
            anchor: Pose2::new(0.0, 0.0, 0.0),
            windows,
            ref_window,
            labels,
        }
    }

    fn random_batch(seed: u64, n: usize) -> (ModelSpec, GridSpec, BatchInput) {
        let spec = tiny_spec();
        let grid = tiny_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<SampleSequence> =
            (0..n).map(|_| random_sample(&mut rng, &spec, &grid)).collect();
        let refs: Vec<&SampleSequence> = samples.iter().collect();
        let batch = assemble_batch(&refs, &spec, &grid).unwrap();
        (spec, grid, batch)
    }

    #[test]
    fn zero_params_zero_inputs_keep_hidden_at_zero() {
        let spec = tiny_spec();
        let params = ModelParams::zeros(spec).unwrap();
        let inputs = Array2::zeros((spec.tau_i + 1, spec.input_dim));
        let out = encode(&params, inputs.view()).unwrap();
        // sigmoid(0) = 0.5, tanh(0) = 0: h = 0 is the fixed point.
        assert!(out.hidden_states.iter().all(|v| *v == 0.0));
        assert!(out.context.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn recurrence_is_stateful() {
        let spec = tiny_spec();
        let params = ModelParams::init(spec, 5).unwrap();
        let x = Array1::from_iter((0..spec.input_dim).map(|i| (i as f64 * 0.17).sin()));
        let one = x.view().insert_axis(Axis(0)).to_owned();
        let two = ndarray::stack![Axis(0), x, x];
        let h1 = encode(&params, one.view()).unwrap().context;
        let h2 = encode(&params, two.view()).unwrap().context;
        let diff: f64 = (&h1 - &h2).iter().map(|v| v.abs()).sum();
        assert!(diff > 1e-9, "two identical steps must differ from one");
    }

    #[test]
    fn hidden_values_stay_in_open_unit_interval() {
        let spec = tiny_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..20 {
            let params = ModelParams::init(spec, trial).unwrap();
            let mut inputs = Array2::zeros((spec.tau_i + 1, spec.input_dim));
            for v in inputs.iter_mut() {
                *v = rng.gen_range(-3.0..3.0);
            }
            let out = encode(&params, inputs.view()).unwrap();
            assert!(out.hidden_states.iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn zero_params_give_uniform_distributions() {
        let (spec, _, batch) = random_batch(3, 4);
        let params = ModelParams::zeros(spec).unwrap();
        let out = forward(&params, &batch, true).unwrap();
        assert_eq!(out.outputs.len(), spec.tau_o);
        let n = spec.n_classes as f64;
        for d in &out.outputs {
            for v in d.iter() {
                assert!((v - 1.0 / n).abs() < 1e-15);
            }
        }
        // NLL of uniform = ln(N).
        let loss = nll_loss(&out.outputs, batch.labels.as_ref().unwrap()).unwrap();
        assert!((loss - n.ln()).abs() < 1e-12);
    }

    #[test]
    fn distributions_sum_to_one() {
        let (spec, _, batch) = random_batch(11, 5);
        let params = ModelParams::init(spec, 23).unwrap();
        let out = forward(&params, &batch, true).unwrap();
        for d in &out.outputs {
            for row in d.rows() {
                let s: f64 = row.sum();
                assert!((s - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|v| *v >= 0.0));
            }
        }
    }

    #[test]
    fn context_perturbation_changes_output() {
        let spec = tiny_spec();
        let params = ModelParams::init(spec, 7).unwrap();
        let s0 = Array1::zeros(spec.hidden_dim);
        let c = Array1::from_iter((0..spec.hidden_dim).map(|i| (i as f64 * 0.3).cos() * 0.5));
        let (p1, _) = decode_step(&params, None, &s0, &c).unwrap();
        let mut c2 = c.clone();
        c2[0] += 0.25;
        let (p2, _) = decode_step(&params, None, &s0, &c2).unwrap();
        let diff: f64 = (&p1 - &p2).iter().map(|v| v.abs()).sum();
        assert!(diff > 1e-9, "context must be wired into the output");
    }

    #[test]
    fn decode_step_rejects_invalid_class() {
        let spec = tiny_spec();
        let params = ModelParams::zeros(spec).unwrap();
        let s0 = Array1::zeros(spec.hidden_dim);
        let c = Array1::zeros(spec.hidden_dim);
        assert!(matches!(
            decode_step(&params, Some(12), &s0, &c),
            Err(ModelError::InvalidClass(12, 12))
        ));
    }

    #[test]
    fn teacher_forcing_only_differs_when_argmax_misses() {
        let (spec, _, batch) = random_batch(29, 3);
        let params = ModelParams::init(spec, 31).unwrap();
        let forced = forward(&params, &batch, true).unwrap();
        let free = forward(&params, &batch, false).unwrap();
        let labels = batch.labels.as_ref().unwrap();
        // If every argmax equals the label, outputs must match exactly;
        // otherwise they must diverge at some later step.
        let all_match = (0..3).all(|b| {
            (0..spec.tau_o - 1).all(|t| forced.classes[t][b] == labels[b][t])
        });
        let outputs_equal = forced
            .outputs
            .iter()
            .zip(&free.outputs)
            .all(|(a, b)| a.iter().zip(b.iter()).all(|(x, y)| x == y));
        if all_match {
            assert!(outputs_equal);
        } else {
            assert!(!outputs_equal);
        }
    }

    #[test]
    fn nll_extremes() {
        // One-hot correct: loss 0. One-hot wrong: the floor kicks in.
        let correct = vec![arr2(&[[0.0, 1.0, 0.0]])];
        let labels = vec![vec![1u32]];
        assert_eq!(nll_loss(&correct, &labels).unwrap(), 0.0);
        let wrong = vec![arr2(&[[1.0, 0.0, 0.0]])];
        let loss = nll_loss(&wrong, &labels).unwrap();
        assert!((loss - (1e-12f64).ln().abs()).abs() < 1e-9);
        assert!((loss - 27.631021115928547).abs() < 1e-9);
    }

    #[test]
    fn regression_zero_params_output_origin() {
        let mut spec = tiny_spec();
        spec.head = Head::Regression;
        let grid = tiny_grid();
        let params = ModelParams::zeros(spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sample = random_sample(&mut rng, &spec, &grid);
        let out = predict_regression(
            &params,
            &sample.windows,
            &sample.ref_window,
            Pose2::new(1.0, 2.0, 0.5),
        )
        .unwrap();
        for p in &out.ego {
            assert_eq!((p.x, p.y), (0.0, 0.0));
        }
        // Global decode of the origin is the anchor position.
        for p in &out.points {
            assert!((p.x - 1.0).abs() < 1e-12 && (p.y - 2.0).abs() < 1e-12);
        }

        // Perfect predictions give zero MSE.
        let refs = [&sample];
        let batch = assemble_batch(&refs, &spec, &grid).unwrap();
        let targets = batch.targets.as_ref().unwrap();
        let outs: Vec<Array2<f64>> = (0..spec.tau_o)
            .map(|t| targets.slice(s![.., t, ..]).to_owned())
            .collect();
        assert_eq!(mse_loss(&outs, targets).unwrap(), 0.0);

        // Head mismatch is rejected.
        let cls_params = ModelParams::zeros(tiny_spec()).unwrap();
        assert!(matches!(
            predict_regression(&cls_params, &sample.windows, &sample.ref_window, Pose2::new(0.0, 0.0, 0.0)),
            Err(ModelError::HeadMismatch { .. })
        ));
    }

    #[test]
    fn beam_one_equals_greedy_and_beam_dominates() {
        let spec = tiny_spec();
        let grid = tiny_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..8 {
            let params = ModelParams::init(spec, 100 + trial).unwrap();
            let sample = random_sample(&mut rng, &spec, &grid);
            let greedy = predict(
                &params,
                &grid,
                &sample.windows,
                &sample.ref_window,
                sample.anchor,
                DecodeMode::Greedy,
            )
            .unwrap();
            let beam1 = predict(
                &params,
                &grid,
                &sample.windows,
                &sample.ref_window,
                sample.anchor,
                DecodeMode::Beam(1),
            )
            .unwrap();
            assert_eq!(greedy.classes, beam1.classes);

            let mut last = f64::NEG_INFINITY;
            for width in [1usize, 2, 3, 5, 8] {
                let b = predict(
                    &params,
                    &grid,
                    &sample.windows,
                    &sample.ref_window,
                    sample.anchor,
                    DecodeMode::Beam(width),
                )
                .unwrap();
                assert!(
                    b.log_prob >= greedy.log_prob - 1e-12,
                    "beam({width}) {} < greedy {}",
                    b.log_prob,
                    greedy.log_prob
                );
                assert!(b.log_prob >= last - 1e-12, "beam({width}) decreased");
                last = b.log_prob;
            }
        }
    }

    #[test]
    fn argmax_invariant_under_monotone_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let row: Array1<f64> =
                Array1::from_iter((0..12).map(|_| rng.gen_range(-4.0..4.0)));
            let a = argmax_row(&row);
            let scaled = row.mapv(|v| 2.0 * v + 1.0);
            let cubed = row.mapv(|v| v.powi(3));
            assert_eq!(a, argmax_row(&scaled));
            assert_eq!(a, argmax_row(&cubed));
        }
    }

    #[test]
    fn predicted_points_are_cell_centers_in_global_frame() {
        let spec = tiny_spec();
        let grid = tiny_grid();
        let params = ModelParams::init(spec, 55).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut sample = random_sample(&mut rng, &spec, &grid);
        sample.anchor = Pose2::new(3.0, -1.0, 0.8);
        let pred = predict(
            &params,
            &grid,
            &sample.windows,
            &sample.ref_window,
            sample.anchor,
            DecodeMode::Greedy,
        )
        .unwrap();
        assert_eq!(pred.dists.len(), spec.tau_o);
        for (c, p) in pred.classes.iter().zip(&pred.points) {
            let expect = position_of_cell(*c, sample.anchor, &grid).unwrap();
            assert!(p.dist(expect) < 1e-12);
        }
    }
}
