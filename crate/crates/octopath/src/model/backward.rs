//! Backprop-through-time over the encoder-decoder recurrences. Gradients are
//! exact derivatives of the mean loss (NLL for the classification head, mean
//! squared position error for regression); decoder feedback symbols are
//! treated as constants in both teacher-forced and free-running modes.

use ndarray::{s, Array2, Axis};

use super::forward::{forward_cached, BatchInput};
use super::{Head, ModelError, ModelParams};

/// Loss and exact parameter gradients for one batch.
pub fn gradients(
    params: &ModelParams,
    batch: &BatchInput,
    teacher_forcing: bool,
) -> Result<(f64, ModelParams), ModelError> {
    let spec = params.spec;
    let cache = forward_cached(params, batch, teacher_forcing)?;
    let b_n = batch.batch_size();
    let k_n = spec.tau_o;
    let scale = 1.0 / (b_n * k_n) as f64;
    let mut grads = ModelParams::zeros(spec)?;

    // Loss and d(loss)/d(logits) per decoder step.
    let mut loss = 0.0;
    let mut dlogits: Vec<Array2<f64>> = Vec::with_capacity(k_n);
    match spec.head {
        Head::Classification => {
            let labels = batch
                .labels
                .as_ref()
                .ok_or_else(|| ModelError::Shape("labels required for gradients".into()))?;
            for (step, probs) in cache.dec.out.iter().enumerate() {
                let mut d = probs.clone();
                for (b, sample_labels) in labels.iter().enumerate() {
                    let y = sample_labels[step] as usize;
                    loss -= probs[[b, y]].max(super::forward::PROB_FLOOR).ln();
                    d[[b, y]] -= 1.0;
                }
                d.mapv_inplace(|v| v * scale);
                dlogits.push(d);
            }
        }
        Head::Regression => {
            let targets = batch
                .targets
                .as_ref()
                .ok_or_else(|| ModelError::Shape("targets required for gradients".into()))?;
            for (step, out) in cache.dec.out.iter().enumerate() {
                let diff = out - &targets.slice(s![.., step, ..]);
                loss += diff.iter().map(|v| v * v).sum::<f64>();
                dlogits.push(diff.mapv(|v| 2.0 * v * scale));
            }
        }
    }
    loss *= scale;

    let c = cache.enc.context().clone();
    let h_dim = spec.hidden_dim;
    let mut dc: Array2<f64> = Array2::zeros((b_n, h_dim));
    let mut ds_carry: Array2<f64> = Array2::zeros((b_n, h_dim));

    // Decoder steps, newest first.
    for k in (0..k_n).rev() {
        let dec = &cache.dec;
        let s_prev = if k == 0 {
            Array2::zeros((b_n, h_dim))
        } else {
            dec.st[k - 1].clone()
        };
        let e_k = &dec.e_prev[k];
        let zp = &dec.zp[k];
        let rp = &dec.rp[k];
        let sc = &dec.sc[k];
        let st = &dec.st[k];
        let rs = rp * &s_prev;

        // Output projection.
        let dl = &dlogits[k];
        grads.u_o += &dec.o_pre[k].t().dot(dl);
        grads.b_o += &dl.sum_axis(Axis(0));
        let do_pre = dl.dot(&params.u_o.t());
        let mut de = do_pre.clone();
        grads.u_s += &st.t().dot(&do_pre);
        let mut dst = do_pre.dot(&params.u_s.t());
        grads.u_c += &c.t().dot(&do_pre);
        dc += &do_pre.dot(&params.u_c.t());

        dst += &ds_carry;

        // st = (1 - zp) * s_prev + zp * sc
        let dzp = &dst * &(sc - &s_prev);
        let dsc = &dst * zp;
        let mut ds_prev = &dst * &(1.0 - zp);

        // sc = tanh(asc)
        let dasc = &dsc * &sc.mapv(|v| 1.0 - v * v);
        grads.u_ys += &e_k.t().dot(&dasc);
        de += &dasc.dot(&params.u_ys.t());
        grads.u_rs += &rs.t().dot(&dasc);
        let drs = dasc.dot(&params.u_rs.t());
        let drp = &drs * &s_prev;
        ds_prev += &(&drs * rp);
        grads.c_cs += &c.t().dot(&dasc);
        dc += &dasc.dot(&params.c_cs.t());
        grads.d_s += &dasc.sum_axis(Axis(0));

        // zp = sigmoid(azp)
        let dazp = &dzp * &zp.mapv(|v| v * (1.0 - v));
        grads.u_yz += &e_k.t().dot(&dazp);
        de += &dazp.dot(&params.u_yz.t());
        grads.u_sz += &s_prev.t().dot(&dazp);
        ds_prev += &dazp.dot(&params.u_sz.t());
        grads.c_cz += &c.t().dot(&dazp);
        dc += &dazp.dot(&params.c_cz.t());
        grads.d_z += &dazp.sum_axis(Axis(0));

        // rp = sigmoid(arp)
        let darp = &drp * &rp.mapv(|v| v * (1.0 - v));
        grads.u_yr += &e_k.t().dot(&darp);
        de += &darp.dot(&params.u_yr.t());
        grads.u_sr += &s_prev.t().dot(&darp);
        ds_prev += &darp.dot(&params.u_sr.t());
        grads.c_cr += &c.t().dot(&darp);
        dc += &darp.dot(&params.c_cr.t());
        grads.d_r += &darp.sum_axis(Axis(0));

        // Embedding / feedback projection.
        match spec.head {
            Head::Classification => {
                for (b, &idx) in dec.feed_idx[k].iter().enumerate() {
                    let mut row = grads.embed.row_mut(idx);
                    row += &de.row(b);
                }
            }
            Head::Regression => {
                grads.embed += &dec.feed_pts[k].t().dot(&de);
            }
        }

        ds_carry = ds_prev;
    }
    // ds_carry into s_{-1} = 0 stops here.

    // Encoder, newest step first; the context gradient enters at the top.
    let t_n = spec.tau_i + 1;
    let mut dh_carry = dc;
    for t in (0..t_n).rev() {
        let enc = &cache.enc;
        let h_prev = if t == 0 {
            Array2::zeros((b_n, h_dim))
        } else {
            enc.h[t - 1].clone()
        };
        let x = batch.xs.slice(s![.., t, ..]);
        let z = &enc.z[t];
        let r = &enc.r[t];
        let hc = &enc.hc[t];
        let rh = r * &h_prev;

        let dh = dh_carry;
        let dz = &dh * &(hc - &h_prev);
        let dhc = &dh * z;
        let mut dh_prev = &dh * &(1.0 - z);

        let dah = &dhc * &hc.mapv(|v| 1.0 - v * v);
        grads.u_xh += &x.t().dot(&dah);
        grads.u_rh += &rh.t().dot(&dah);
        let drh = dah.dot(&params.u_rh.t());
        let dr = &drh * &h_prev;
        dh_prev += &(&drh * r);
        grads.b_h += &dah.sum_axis(Axis(0));

        let daz = &dz * &z.mapv(|v| v * (1.0 - v));
        grads.u_xz += &x.t().dot(&daz);
        grads.u_hz += &h_prev.t().dot(&daz);
        dh_prev += &daz.dot(&params.u_hz.t());
        grads.b_z += &daz.sum_axis(Axis(0));

        let dar = &dr * &r.mapv(|v| v * (1.0 - v));
        grads.u_xr += &x.t().dot(&dar);
        grads.u_hr += &h_prev.t().dot(&dar);
        dh_prev += &dar.dot(&params.u_hr.t());
        grads.b_r += &dar.sum_axis(Axis(0));

        dh_carry = dh_prev;
    }

    Ok((loss, grads))
}
