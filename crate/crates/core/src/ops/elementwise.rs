//! Pointwise ops and dropout.

use std::rc::Rc;

use super::linalg::{check_same_shape, total};
use crate::error::CoreError;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::Result;

fn stable_sigmoid<E: Scalar>(x: E) -> E {
    if x >= E::ZERO {
        E::ONE / (E::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::ONE + e)
    }
}

impl<E: Scalar> Tape<E> {
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        check_same_shape(self, "add", a, b)?;
        let out: Vec<E> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let needs = self.any_needs(&[a, b]);
        let n = out.len();
        let back = move |ctx: &crate::tape::BackCtx<'_, E>,
                         gy: &[E],
                         bufs: &mut crate::tape::GradBufs<E>| {
            for id in [a, b] {
                if ctx.needs(id) {
                    let g = bufs.acc(id, n);
                    for (gi, &gyi) in g.iter_mut().zip(gy) {
                        *gi += gyi;
                    }
                }
            }
        };
        let shape = self.shape(a).to_vec();
        Ok(self.push("add", shape, Rc::new(out), needs, Some(Box::new(back))))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        check_same_shape(self, "sub", a, b)?;
        let out: Vec<E> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x - y)
            .collect();
        let needs = self.any_needs(&[a, b]);
        let n = out.len();
        let back = move |ctx: &crate::tape::BackCtx<'_, E>,
                         gy: &[E],
                         bufs: &mut crate::tape::GradBufs<E>| {
            if ctx.needs(a) {
                let g = bufs.acc(a, n);
                for (gi, &gyi) in g.iter_mut().zip(gy) {
                    *gi += gyi;
                }
            }
            if ctx.needs(b) {
                let g = bufs.acc(b, n);
                for (gi, &gyi) in g.iter_mut().zip(gy) {
                    *gi += -gyi;
                }
            }
        };
        let shape = self.shape(a).to_vec();
        Ok(self.push("sub", shape, Rc::new(out), needs, Some(Box::new(back))))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        check_same_shape(self, "mul", a, b)?;
        let out: Vec<E> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let needs = self.any_needs(&[a, b]);
        let n = out.len();
        let back = move |ctx: &crate::tape::BackCtx<'_, E>,
                         gy: &[E],
                         bufs: &mut crate::tape::GradBufs<E>| {
            if ctx.needs(a) {
                let bv = ctx.val(b);
                let g = bufs.acc(a, n);
                for i in 0..n {
                    g[i] += gy[i] * bv[i];
                }
            }
            if ctx.needs(b) {
                let av = ctx.val(a);
                let g = bufs.acc(b, n);
                for i in 0..n {
                    g[i] += gy[i] * av[i];
                }
            }
        };
        let shape = self.shape(a).to_vec();
        Ok(self.push("mul", shape, Rc::new(out), needs, Some(Box::new(back))))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let cc = E::from_f64(c);
        let out: Vec<E> = self.value(a).iter().map(|&x| x * cc).collect();
        let needs = self.any_needs(&[a]);
        let n = out.len();
        let back = move |ctx: &crate::tape::BackCtx<'_, E>,
                         gy: &[E],
                         bufs: &mut crate::tape::GradBufs<E>| {
            if ctx.needs(a) {
                let g = bufs.acc(a, n);
                for i in 0..n {
                    g[i] += gy[i] * cc;
                }
            }
        };
        let shape = self.shape(a).to_vec();
        self.push("scale", shape, Rc::new(out), needs, Some(Box::new(back)))
    }

    /// Broadcast add of a trailing-dim bias: [.., d] + [d].
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(bias).to_vec();
        let d = *xs.last().unwrap_or(&0);
        if bs.len() != 1 || bs[0] != d {
            return Err(CoreError::ShapeMismatch {
                op: "add_bias",
                lhs: xs,
                rhs: bs,
            });
        }
        let bv = self.value(bias).to_vec();
        let out: Vec<E> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i % d])
            .collect();
        let needs = self.any_needs(&[x, bias]);
        let n = out.len();
        let back = move |ctx: &crate::tape::BackCtx<'_, E>,
                         gy: &[E],
                         bufs: &mut crate::tape::GradBufs<E>| {
            if ctx.needs(x) {
                let g = bufs.acc(x, n);
                for i in 0..n {
                    g[i] += gy[i];
                }
            }
            if ctx.needs(bias) {
                let g = bufs.acc(bias, d);
                for i in 0..n {
                    g[i % d] += gy[i];
                }
            }
        };
        Ok(self.push("add_bias", xs, Rc::new(out), needs, Some(Box::new(back))))
    }

    /// Multiply each trailing-dim row of x by a per-row scalar:
    /// x: [.., d], s: x.shape without the last dim.
    pub fn row_scale(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ss = self.shape(s).to_vec();
        if xs.len() < 1 || ss[..] != xs[..xs.len() - 1] {
            return Err(CoreError::ShapeMismatch {
                op: "row_scale",
                lhs: xs,
                rhs: ss,
            });
        }
        let d = *xs.last().unwrap();
        let rows = total(self, s);
        let xv = self.value(x);
        let sv = self.value(s);
        let mut out = vec![E::ZERO; rows * d];
        for r in 0..rows {
            let sr = sv[r];
            for i in 0..d {
                out[r * d + i] = xv[r * d + i] * sr;
            }
        }
        let needs = self.any_needs(&[x, s]);
        let back = move |ctx: &crate::tape::BackCtx<'_, E>,
                         gy: &[E],
                         bufs: &mut crate::tape::GradBufs<E>| {
            if ctx.needs(x) {
                let sv = ctx.val(s);
                let g = bufs.acc(x, rows * d);
                for r in 0..rows {
                    let sr = sv[r];
                    for i in 0..d {
                        g[r * d + i] += gy[r * d + i] * sr;
                    }
                }
            }
            if ctx.needs(s) {
                let xv = ctx.val(x);
                let g = bufs.acc(s, rows);
                for r in 0..rows {
                    let mut dot = E::ZERO;
                    for i in 0..d {
                        dot += gy[r * d + i] * xv[r * d + i];
                    }
                    g[r] += dot;
                }
            }
        };
        Ok(self.push("row_scale", xs, Rc::new(out), needs, Some(Box::new(back))))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out: Vec<E> = self.value(x).iter().map(|&v| stable_sigmoid(v)).collect();
        let needs = self.any_needs(&[x]);
        let out_rc = Rc::new(out);
        let y = Rc::clone(&out_rc);
        let n = y.len();
        let back = move |ctx: &crate::tape::BackCtx<'_, E>,
                         gy: &[E],
                         bufs: &mut crate::tape::GradBufs<E>| {
            if ctx.needs(x) {
                let g = bufs.acc(x, n);
                for i in 0..n {
                    g[i] += gy[i] * y[i] * (E::ONE - y[i]);
                }
            }
        };
        let shape = self.shape(x).to_vec();
        self.push("sigmoid", shape, out_rc, needs, Some(Box::new(back)))
    }

    /// SiLU activation x * sigmoid(x), the SwiGLU gate nonlinearity.
    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let out: Vec<E> = self
            .value(x)
            .iter()
            .map(|&v| v * stable_sigmoid(v))
            .collect();
        let needs = self.any_needs(&[x]);
        let n = out.len();
        let back = move |ctx: &crate::tape::BackCtx<'_, E>,
                         gy: &[E],
                         bufs: &mut crate::tape::GradBufs<E>| {
            if ctx.needs(x) {
                let xv = ctx.val(x);
                let g = bufs.acc(x, n);
                for i in 0..n {
                    let s = stable_sigmoid(xv[i]);
                    g[i] += gy[i] * (s * (E::ONE + xv[i] * (E::ONE - s)));
                }
            }
        };
        let shape = self.shape(x).to_vec();
        self.push("silu", shape, Rc::new(out), needs, Some(Box::new(back)))
    }

    /// Inverted dropout: zero with probability `rate`, survivors scaled by
    /// 1/(1-rate). Identity when not training or rate == 0.
    pub fn dropout(
        &mut self,
        x: NodeId,
        rate: f64,
        training: bool,
        rng: &mut Rng,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(CoreError::InvalidRate { rate });
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep_scale = E::from_f64(1.0 / (1.0 - rate));
        let xv = self.value(x);
        let mask: Vec<E> = xv
            .iter()
            .map(|_| {
                if rng.next_f64() < rate {
                    E::ZERO
                } else {
                    keep_scale
                }
            })
            .collect();
        let out: Vec<E> = xv.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let needs = self.any_needs(&[x]);
        let n = out.len();
        let mask = Rc::new(mask);
        let back = move |ctx: &crate::tape::BackCtx<'_, E>,
                         gy: &[E],
                         bufs: &mut crate::tape::GradBufs<E>| {
            if ctx.needs(x) {
                let g = bufs.acc(x, n);
                for i in 0..n {
                    g[i] += gy[i] * mask[i];
                }
            }
        };
        let shape = self.shape(x).to_vec();
        Ok(self.push("dropout", shape, Rc::new(out), needs, Some(Box::new(back))))
    }
}
