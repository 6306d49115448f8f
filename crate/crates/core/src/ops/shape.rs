//! Shape manipulation and full reductions.

use std::rc::Rc;

use crate::error::CoreError;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::numel;
use crate::Result;

impl<E: Scalar> Tape<E> {
    /// View with a new shape; shares the underlying buffer.
    pub fn reshape(&mut self, x: NodeId, new_shape: &[usize]) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if numel(&xs) != numel(new_shape) {
            return Err(CoreError::ShapeMismatch {
                op: "reshape",
                lhs: xs,
                rhs: new_shape.to_vec(),
            });
        }
        let data = Rc::clone(&self.nodes[x].data);
        let needs = self.any_needs(&[x]);
        let n = data.len();
        let back = move |ctx: &crate::tape::BackCtx<'_, E>,
                         gy: &[E],
                         bufs: &mut crate::tape::GradBufs<E>| {
            if ctx.needs(x) {
                let g = bufs.acc(x, n);
                for i in 0..n {
                    g[i] += gy[i];
                }
            }
        };
        Ok(self.push(
            "reshape",
            new_shape.to_vec(),
            data,
            needs,
            Some(Box::new(back)),
        ))
    }

    /// Contiguous slice `start..start+len` along `axis`.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(CoreError::InvalidAxis {
                op: "slice",
                axis,
                shape: xs,
            });
        }
        if start + len > xs[axis] || len == 0 {
            return Err(CoreError::ShapeMismatch {
                op: "slice",
                lhs: xs,
                rhs: vec![start, len],
            });
        }
        let inner: usize = xs[axis + 1..].iter().product();
        let outer: usize = xs[..axis].iter().product();
        let lane = xs[axis];
        let xv = self.value(x);
        let mut out = vec![E::ZERO; outer * len * inner];
        for o in 0..outer {
            let src = o * lane * inner + start * inner;
            let dst = o * len * inner;
            out[dst..dst + len * inner].copy_from_slice(&xv[src..src + len * inner]);
        }
        let mut shape = xs.clone();
        shape[axis] = len;
        let needs = self.any_needs(&[x]);
        let n_in = xv.len();
        let back = move |ctx: &crate::tape::BackCtx<'_, E>,
                         gy: &[E],
                         bufs: &mut crate::tape::GradBufs<E>| {
            if ctx.needs(x) {
                let g = bufs.acc(x, n_in);
                for o in 0..outer {
                    let dst = o * lane * inner + start * inner;
                    let src = o * len * inner;
                    for i in 0..len * inner {
                        g[dst + i] += gy[src + i];
                    }
                }
            }
        };
        Ok(self.push("slice", shape, Rc::new(out), needs, Some(Box::new(back))))
    }

    /// Concatenate along `axis`; all other dims must match.
    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(CoreError::ShapeMismatch {
                op: "concat",
                lhs: vec![],
                rhs: vec![],
            });
        }
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(CoreError::InvalidAxis {
                op: "concat",
                axis,
                shape: first,
            });
        }
        let mut lanes = Vec::with_capacity(xs.len());
        for &id in xs {
            let s = self.shape(id);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(CoreError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            lanes.push(s[axis]);
        }
        let total_lane: usize = lanes.iter().sum();
        let inner: usize = first[axis + 1..].iter().product();
        let outer: usize = first[..axis].iter().product();
        let mut shape = first.clone();
        shape[axis] = total_lane;
        let mut out = vec![E::ZERO; outer * total_lane * inner];
        let mut lane_off = 0usize;
        for (&id, &lane) in xs.iter().zip(&lanes) {
            let v = self.value(id);
            for o in 0..outer {
                let src = o * lane * inner;
                let dst = o * total_lane * inner + lane_off * inner;
                out[dst..dst + lane * inner].copy_from_slice(&v[src..src + lane * inner]);
            }
            lane_off += lane;
        }
        let needs = self.any_needs(xs);
        let ids = xs.to_vec();
        let back = move |ctx: &crate::tape::BackCtx<'_, E>,
                         gy: &[E],
                         bufs: &mut crate::tape::GradBufs<E>| {
            let mut lane_off = 0usize;
            for (&id, &lane) in ids.iter().zip(&lanes) {
                if ctx.needs(id) {
                    let n_in = outer * lane * inner;
                    let g = bufs.acc(id, n_in);
                    for o in 0..outer {
                        let dst = o * lane * inner;
                        let src = o * total_lane * inner + lane_off * inner;
                        for i in 0..lane * inner {
                            g[dst + i] += gy[src + i];
                        }
                    }
                }
                lane_off += lane;
            }
        };
        Ok(self.push("concat", shape, Rc::new(out), needs, Some(Box::new(back))))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: E = self.value(x).iter().fold(E::ZERO, |acc, &v| acc + v);
        let needs = self.any_needs(&[x]);
        let n = self.value(x).len();
        let back = move |ctx: &crate::tape::BackCtx<'_, E>,
                         gy: &[E],
                         bufs: &mut crate::tape::GradBufs<E>| {
            if ctx.needs(x) {
                let g = bufs.acc(x, n);
                for gi in g.iter_mut() {
                    *gi += gy[0];
                }
            }
        };
        self.push("sum", vec![1], Rc::new(vec![s]), needs, Some(Box::new(back)))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len().max(1);
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }
}
