//! Network-level ops: softmax, rmsnorm, embedding lookup, rotary position
//! encoding, and the fused next-token cross-entropy.

use std::rc::Rc;

use crate::error::CoreError;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::Result;

impl<E: Scalar> Tape<E> {
    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(CoreError::InvalidAxis {
                op: "softmax",
                axis,
                shape,
            });
        }
        let lane = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let xv = self.value(x);
        let mut out = vec![E::ZERO; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * lane * inner + i;
                let mut mx = xv[base];
                for l in 1..lane {
                    mx = mx.max(xv[base + l * inner]);
                }
                let mut sum = E::ZERO;
                for l in 0..lane {
                    let e = (xv[base + l * inner] - mx).exp();
                    out[base + l * inner] = e;
                    sum += e;
                }
                for l in 0..lane {
                    out[base + l * inner] = out[base + l * inner] / sum;
                }
            }
        }
        let needs = self.any_needs(&[x]);
        let out_rc = Rc::new(out);
        let y = Rc::clone(&out_rc);
        let n = y.len();
        let back = move |ctx: &crate::tape::BackCtx<'_, E>,
                         gy: &[E],
                         bufs: &mut crate::tape::GradBufs<E>| {
            if ctx.needs(x) {
                let g = bufs.acc(x, n);
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * lane * inner + i;
                        let mut dot = E::ZERO;
                        for l in 0..lane {
                            let idx = base + l * inner;
                            dot += gy[idx] * y[idx];
                        }
                        for l in 0..lane {
                            let idx = base + l * inner;
                            g[idx] += y[idx] * (gy[idx] - dot);
                        }
                    }
                }
            }
        };
        Ok(self.push("softmax", shape, out_rc, needs, Some(Box::new(back))))
    }

    /// RMS normalization over the trailing dim with a learned gain:
    /// y = x / sqrt(mean(x^2) + eps) * w.
    pub fn rmsnorm(&mut self, x: NodeId, w: NodeId, eps: f64) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let d = *xs.last().unwrap_or(&0);
        if ws.len() != 1 || ws[0] != d || d == 0 {
            return Err(CoreError::ShapeMismatch {
                op: "rmsnorm",
                lhs: xs,
                rhs: ws,
            });
        }
        let rows = xs[..xs.len() - 1].iter().product::<usize>();
        let epse = E::from_f64(eps);
        let dinv = E::from_f64(1.0 / d as f64);
        let xv = self.value(x);
        let wv = self.value(w);
        let mut out = vec![E::ZERO; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mut ms = E::ZERO;
            for &v in row {
                ms += v * v;
            }
            let rinv = E::ONE / (ms * dinv + epse).sqrt();
            for i in 0..d {
                out[r * d + i] = row[i] * rinv * wv[i];
            }
        }
        let needs = self.any_needs(&[x, w]);
        let back = move |ctx: &crate::tape::BackCtx<'_, E>,
                         gy: &[E],
                         bufs: &mut crate::tape::GradBufs<E>| {
            let xv = ctx.val(x);
            let wv = ctx.val(w);
            let need_x = ctx.needs(x);
            let need_w = ctx.needs(w);
            let mut gw_local = if need_w { vec![E::ZERO; d] } else { Vec::new() };
            if need_x || need_w {
                for r in 0..rows {
                    let row = &xv[r * d..(r + 1) * d];
                    let gyr = &gy[r * d..(r + 1) * d];
                    let mut ms = E::ZERO;
                    for &v in row {
                        ms += v * v;
                    }
                    let rinv = E::ONE / (ms * dinv + epse).sqrt();
                    if need_w {
                        for i in 0..d {
                            gw_local[i] += gyr[i] * row[i] * rinv;
                        }
                    }
                    if need_x {
                        let mut dot = E::ZERO;
                        for i in 0..d {
                            dot += gyr[i] * wv[i] * row[i];
                        }
                        let coef = rinv * rinv * rinv * dinv * dot;
                        let g = bufs.acc(x, rows * d);
                        for i in 0..d {
                            g[r * d + i] += gyr[i] * wv[i] * rinv - coef * row[i];
                        }
                    }
                }
            }
            if need_w {
                let g = bufs.acc(w, d);
                for i in 0..d {
                    g[i] += gw_local[i];
                }
            }
        };
        Ok(self.push("rmsnorm", xs, Rc::new(out), needs, Some(Box::new(back))))
    }

    /// Row lookup: table [V, d], ids shaped `ids_shape` -> [..ids_shape, d].
    pub fn embedding(&mut self, table: NodeId, ids: &[u32], ids_shape: &[usize]) -> Result<NodeId> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(CoreError::ShapeMismatch {
                op: "embedding",
                lhs: ts,
                rhs: ids_shape.to_vec(),
            });
        }
        let (v, d) = (ts[0], ts[1]);
        let n: usize = ids_shape.iter().product();
        assert_eq!(n, ids.len());
        let tv = self.value(table);
        let mut out = vec![E::ZERO; n * d];
        for (row, &id) in ids.iter().enumerate() {
            let id = id as usize;
            assert!(id < v, "token id {id} out of vocab {v}");
            out[row * d..(row + 1) * d].copy_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let needs = self.any_needs(&[table]);
        let ids: Rc<Vec<u32>> = Rc::new(ids.to_vec());
        let back = move |ctx: &crate::tape::BackCtx<'_, E>,
                         gy: &[E],
                         bufs: &mut crate::tape::GradBufs<E>| {
            if ctx.needs(table) {
                let g = bufs.acc(table, v * d);
                for (row, &id) in ids.iter().enumerate() {
                    let id = id as usize;
                    for i in 0..d {
                        g[id * d + i] += gy[row * d + i];
                    }
                }
            }
        };
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        Ok(self.push("embedding", shape, Rc::new(out), needs, Some(Box::new(back))))
    }

    /// Rotary position encoding on [B,T,H,hd] with half-split pairing:
    /// pair i is (x[i], x[i+hd/2]), rotated by pos * theta^(-2i/hd).
    pub fn rope(&mut self, x: NodeId, theta: f64, pos_offset: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[3] % 2 != 0 {
            return Err(CoreError::ShapeMismatch {
                op: "rope",
                lhs: xs.clone(),
                rhs: vec![],
            });
        }
        let (bsz, t, h, hd) = (xs[0], xs[1], xs[2], xs[3]);
        let half = hd / 2;
        // cos/sin tables per (position, pair)
        let mut cos = vec![E::ZERO; t * half];
        let mut sin = vec![E::ZERO; t * half];
        for p in 0..t {
            for i in 0..half {
                let freq = (theta).powf(-2.0 * i as f64 / hd as f64);
                let ang = (p + pos_offset) as f64 * freq;
                cos[p * half + i] = E::from_f64(ang.cos());
                sin[p * half + i] = E::from_f64(ang.sin());
            }
        }
        let xv = self.value(x);
        let mut out = vec![E::ZERO; xv.len()];
        for b in 0..bsz {
            for p in 0..t {
                for hh in 0..h {
                    let base = ((b * t + p) * h + hh) * hd;
                    for i in 0..half {
                        let (c, s) = (cos[p * half + i], sin[p * half + i]);
                        let x1 = xv[base + i];
                        let x2 = xv[base + half + i];
                        out[base + i] = x1 * c - x2 * s;
                        out[base + half + i] = x1 * s + x2 * c;
                    }
                }
            }
        }
        let needs = self.any_needs(&[x]);
        let cos = Rc::new(cos);
        let sin = Rc::new(sin);
        let n = xv.len();
        let back = move |ctx: &crate::tape::BackCtx<'_, E>,
                         gy: &[E],
                         bufs: &mut crate::tape::GradBufs<E>| {
            if ctx.needs(x) {
                let g = bufs.acc(x, n);
                for b in 0..bsz {
                    for p in 0..t {
                        for hh in 0..h {
                            let base = ((b * t + p) * h + hh) * hd;
                            for i in 0..half {
                                let (c, s) = (cos[p * half + i], sin[p * half + i]);
                                let g1 = gy[base + i];
                                let g2 = gy[base + half + i];
                                g[base + i] += g1 * c + g2 * s;
                                g[base + half + i] += -g1 * s + g2 * c;
                            }
                        }
                    }
                }
            }
        };
        Ok(self.push("rope", xs, Rc::new(out), needs, Some(Box::new(back))))
    }

    /// Mean cross-entropy over rows: logits [N, C], targets len N.
    /// Rows whose target equals `ignore` contribute nothing.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[u32],
        ignore: Option<u32>,
    ) -> Result<NodeId> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != targets.len() {
            return Err(CoreError::ShapeMismatch {
                op: "cross_entropy",
                lhs: ls,
                rhs: vec![targets.len()],
            });
        }
        let (n, c) = (ls[0], ls[1]);
        let lv = self.value(logits);
        let mut count = 0usize;
        let mut total = E::ZERO;
        for r in 0..n {
            if Some(targets[r]) == ignore {
                continue;
            }
            count += 1;
            let row = &lv[r * c..(r + 1) * c];
            let t = targets[r] as usize;
            debug_assert!(t < c);
            let mut mx = row[0];
            for &v in row {
                mx = mx.max(v);
            }
            let mut sum = E::ZERO;
            for &v in row {
                sum += (v - mx).exp();
            }
            total += sum.ln() + mx - row[t];
        }
        let m = count.max(1);
        let loss = total / E::from_f64(m as f64);
        let needs = self.any_needs(&[logits]);
        let targets: Rc<Vec<u32>> = Rc::new(targets.to_vec());
        let back = move |ctx: &crate::tape::BackCtx<'_, E>,
                         gy: &[E],
                         bufs: &mut crate::tape::GradBufs<E>| {
            if ctx.needs(logits) {
                let lv = ctx.val(logits);
                let g = bufs.acc(logits, n * c);
                let minv = E::from_f64(1.0 / m as f64) * gy[0];
                for r in 0..n {
                    if Some(targets[r]) == ignore {
                        continue;
                    }
                    let row = &lv[r * c..(r + 1) * c];
                    let t = targets[r] as usize;
                    let mut mx = row[0];
                    for &v in row {
                        mx = mx.max(v);
                    }
                    let mut sum = E::ZERO;
                    for &v in row {
                        sum += (v - mx).exp();
                    }
                    for j in 0..c {
                        let p = (row[j] - mx).exp() / sum;
                        let delta = if j == t { E::ONE } else { E::ZERO };
                        g[r * c + j] += (p - delta) * minv;
                    }
                }
            }
        };
        Ok(self.push(
            "cross_entropy",
            vec![1],
            Rc::new(vec![loss]),
            needs,
            Some(Box::new(back)),
        ))
    }
}
