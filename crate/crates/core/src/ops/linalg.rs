//! Matrix products: generic broadcast-batched matmul plus the two fused
//! attention ops (masked-softmax scores and head-merged application).

use std::rc::Rc;
use std::sync::atomic::{AtomicBool, Ordering};

use crate::error::CoreError;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::numel;
use crate::Result;

/// Data-parallel kernels are bit-identical to the serial order (verified by
/// test); this switch exists to force single-threaded execution anyway.
static PARALLEL: AtomicBool = AtomicBool::new(true);

pub fn set_parallel(on: bool) {
    PARALLEL.store(on, Ordering::Relaxed);
}

fn parallel() -> bool {
    PARALLEL.load(Ordering::Relaxed)
}

/// Serial strided gemm: C = alpha*A@B + beta*C.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided<E: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: E,
    a: &[E],
    a_off: usize,
    rsa: isize,
    csa: isize,
    b: &[E],
    b_off: usize,
    rsb: isize,
    csb: isize,
    beta: E,
    c: &mut [E],
    c_off: usize,
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        E::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(a_off),
            rsa,
            csa,
            b.as_ptr().add(b_off),
            rsb,
            csb,
            beta,
            c.as_mut_ptr().add(c_off),
            rsc,
            csc,
        );
    }
}

/// Row-chunked parallel gemm over contiguous [m,k]x[k,n]->[m,n]. Each chunk
/// of output rows is an independent gemm over the same k order, so results
/// match the single-call product bit for bit.
pub(crate) fn par_gemm<E: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: E,
    a: &[E],
    b: &[E],
    beta: E,
    c: &mut [E],
) {
    let threads = rayon::current_num_threads();
    let big_enough = m >= 2 * threads && m * k * n >= (1 << 18);
    if !parallel() || threads < 2 || !big_enough {
        gemm_strided(
            m, k, n, alpha, a, 0, k as isize, 1, b, 0, n as isize, 1, beta, c, 0, n as isize, 1,
        );
        return;
    }
    let chunk_rows = m.div_ceil(threads);
    let a_ptr = SendPtr(a.as_ptr());
    let b_ptr = SendPtr(b.as_ptr());
    rayon::scope(|s| {
        for (ci, c_chunk) in c.chunks_mut(chunk_rows * n).enumerate() {
            let rows = c_chunk.len() / n;
            let row0 = ci * chunk_rows;
            let a_ptr = a_ptr;
            let b_ptr = b_ptr;
            s.spawn(move |_| unsafe {
                E::gemm(
                    rows,
                    k,
                    n,
                    alpha,
                    a_ptr.get().add(row0 * k),
                    k as isize,
                    1,
                    b_ptr.get(),
                    n as isize,
                    1,
                    beta,
                    c_chunk.as_mut_ptr(),
                    n as isize,
                    1,
                );
            });
        }
    });
}

// Raw-pointer wrappers for handing disjoint strided regions to rayon tasks;
// every kernel writes a region no other task touches.
#[derive(Clone, Copy)]
struct SendPtr<E>(*const E);
unsafe impl<E> Send for SendPtr<E> {}
unsafe impl<E> Sync for SendPtr<E> {}
impl<E> SendPtr<E> {
    // Method (not field) access so closures capture the wrapper whole.
    fn get(self) -> *const E {
        self.0
    }
}
#[derive(Clone, Copy)]
struct SendPtrMut<E>(*mut E);
unsafe impl<E> Send for SendPtrMut<E> {}
unsafe impl<E> Sync for SendPtrMut<E> {}
impl<E> SendPtrMut<E> {
    fn get(self) -> *mut E {
        self.0
    }
}

/// Map a flat output-batch index onto an input's batch offset, clamping
/// broadcast (size-1) dims.
fn batch_offset(out_idx: usize, out_batch: &[usize], in_batch: &[usize]) -> usize {
    let mut rem = out_idx;
    let mut idxs = vec![0usize; out_batch.len()];
    for i in (0..out_batch.len()).rev() {
        idxs[i] = rem % out_batch[i];
        rem /= out_batch[i];
    }
    let mut off = 0usize;
    let mut stride = 1usize;
    for i in (0..in_batch.len()).rev() {
        let j = i + out_batch.len() - in_batch.len();
        let id = if in_batch[i] == 1 { 0 } else { idxs[j] };
        off += id * stride;
        stride *= in_batch[i];
    }
    off
}

impl<E: Scalar> Tape<E> {
    /// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]` with
    /// broadcastable batch dims.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ashape, bshape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || CoreError::ShapeMismatch {
            op: "matmul",
            lhs: ashape.clone(),
            rhs: bshape.clone(),
        };
        if ashape.len() < 2 || bshape.len() < 2 {
            return Err(mismatch());
        }
        let (m, ka) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
        let (kb, n) = (bshape[bshape.len() - 2], bshape[bshape.len() - 1]);
        if ka != kb {
            return Err(mismatch());
        }
        let k = ka;
        let a_batch = &ashape[..ashape.len() - 2];
        let b_batch = &bshape[..bshape.len() - 2];
        let rank = a_batch.len().max(b_batch.len());
        let mut out_batch = vec![1usize; rank];
        for i in 0..rank {
            let da = if i >= rank - a_batch.len() {
                a_batch[i - (rank - a_batch.len())]
            } else {
                1
            };
            let db = if i >= rank - b_batch.len() {
                b_batch[i - (rank - b_batch.len())]
            } else {
                1
            };
            if da != db && da != 1 && db != 1 {
                return Err(mismatch());
            }
            out_batch[i] = da.max(db);
        }
        let nb: usize = out_batch.iter().product();
        let mut out_shape = out_batch.clone();
        out_shape.push(m);
        out_shape.push(n);

        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![E::ZERO; nb * m * n];

        if b_batch.iter().all(|&d| d == 1) && a_batch.iter().product::<usize>() == nb {
            // Weight-style product: flatten batch rows into one gemm.
            par_gemm(nb * m, k, n, E::ONE, av, bv, E::ZERO, &mut out);
        } else {
            let a_batch = a_batch.to_vec();
            let b_batch = b_batch.to_vec();
            for bi in 0..nb {
                let ao = batch_offset(bi, &out_batch, &a_batch) * m * k;
                let bo = batch_offset(bi, &out_batch, &b_batch) * k * n;
                gemm_strided(
                    m,
                    k,
                    n,
                    E::ONE,
                    av,
                    ao,
                    k as isize,
                    1,
                    bv,
                    bo,
                    n as isize,
                    1,
                    E::ZERO,
                    &mut out,
                    bi * m * n,
                    n as isize,
                    1,
                );
            }
        }

        let needs = self.any_needs(&[a, b]);
        let a_batch = ashape[..ashape.len() - 2].to_vec();
        let b_batch = bshape[..bshape.len() - 2].to_vec();
        let back = move |ctx: &crate::tape::BackCtx<'_, E>,
                         gy: &[E],
                         bufs: &mut crate::tape::GradBufs<E>| {
            let av = ctx.val(a);
            let bv = ctx.val(b);
            let na: usize = a_batch.iter().product();
            let nbv: usize = b_batch.iter().product();
            if ctx.needs(a) {
                let ga = bufs.acc(a, av.len());
                if nbv == 1 && na == nb {
                    // dA = dY @ B^T as one gemm over flattened rows.
                    gemm_strided(
                        nb * m,
                        n,
                        k,
                        E::ONE,
                        gy,
                        0,
                        n as isize,
                        1,
                        bv,
                        0,
                        1,
                        n as isize,
                        E::ONE,
                        ga,
                        0,
                        k as isize,
                        1,
                    );
                } else {
                    for bi in 0..nb {
                        let ao = batch_offset(bi, &out_batch, &a_batch) * m * k;
                        let bo = batch_offset(bi, &out_batch, &b_batch) * k * n;
                        gemm_strided(
                            m,
                            n,
                            k,
                            E::ONE,
                            gy,
                            bi * m * n,
                            n as isize,
                            1,
                            bv,
                            bo,
                            1,
                            n as isize,
                            E::ONE,
                            ga,
                            ao,
                            k as isize,
                            1,
                        );
                    }
                }
            }
            if ctx.needs(b) {
                let gb = bufs.acc(b, bv.len());
                if nbv == 1 && na == nb {
                    // dB = A^T @ dY accumulated over all batch rows.
                    gemm_strided(
                        k,
                        nb * m,
                        n,
                        E::ONE,
                        av,
                        0,
                        1,
                        k as isize,
                        gy,
                        0,
                        n as isize,
                        1,
                        E::ONE,
                        gb,
                        0,
                        n as isize,
                        1,
                    );
                } else {
                    for bi in 0..nb {
                        let ao = batch_offset(bi, &out_batch, &a_batch) * m * k;
                        let bo = batch_offset(bi, &out_batch, &b_batch) * k * n;
                        gemm_strided(
                            k,
                            m,
                            n,
                            E::ONE,
                            av,
                            ao,
                            1,
                            k as isize,
                            gy,
                            bi * m * n,
                            n as isize,
                            1,
                            E::ONE,
                            gb,
                            bo,
                            n as isize,
                            1,
                        );
                    }
                }
            }
        };
        Ok(self.push(
            "matmul",
            out_shape,
            Rc::new(out),
            needs,
            Some(Box::new(back)),
        ))
    }

    /// Fused causal attention probabilities:
    /// `softmax(scale * q k^T + causal mask)` per (batch, head).
    ///
    /// q: [B,T,H,hd], k: [B,T,KV,hd] with H divisible by KV.
    /// Output: [B,H,T,T].
    pub fn attn_probs(&mut self, q: NodeId, k: NodeId, scale: f64) -> Result<NodeId> {
        let qs = self.shape(q).to_vec();
        let ks = self.shape(k).to_vec();
        let mismatch = || CoreError::ShapeMismatch {
            op: "attn_probs",
            lhs: qs.clone(),
            rhs: ks.clone(),
        };
        if qs.len() != 4 || ks.len() != 4 || qs[0] != ks[0] || qs[1] != ks[1] || qs[3] != ks[3] {
            return Err(mismatch());
        }
        let (bsz, t, h, hd) = (qs[0], qs[1], qs[2], qs[3]);
        let kv = ks[2];
        if h % kv != 0 {
            return Err(mismatch());
        }
        let group = h / kv;
        let sc = E::from_f64(scale);

        let qv = self.value(q);
        let kvv = self.value(k);
        let mut out = vec![E::ZERO; bsz * h * t * t];
        {
            let qp = SendPtr(qv.as_ptr());
            let kp = SendPtr(kvv.as_ptr());
            let run_one = move |bh: usize, block: &mut [E]| {
                let (b, hh) = (bh / h, bh % h);
                let kvh = hh / group;
                unsafe {
                    E::gemm(
                        t,
                        hd,
                        t,
                        sc,
                        qp.get().add(b * t * h * hd + hh * hd),
                        (h * hd) as isize,
                        1,
                        kp.get().add(b * t * kv * hd + kvh * hd),
                        1,
                        (kv * hd) as isize,
                        E::ZERO,
                        block.as_mut_ptr(),
                        t as isize,
                        1,
                    );
                }
                // Causal mask + stabilized softmax, row by row.
                for i in 0..t {
                    let row = &mut block[i * t..(i + 1) * t];
                    let mut mx = row[0];
                    for &v in &row[..=i] {
                        mx = mx.max(v);
                    }
                    let mut sum = E::ZERO;
                    for v in row[..=i].iter_mut() {
                        *v = (*v - mx).exp();
                        sum += *v;
                    }
                    for v in row[..=i].iter_mut() {
                        *v = *v / sum;
                    }
                    for v in row[i + 1..].iter_mut() {
                        *v = E::ZERO;
                    }
                }
            };
            if parallel() && rayon::current_num_threads() > 1 && bsz * h > 1 {
                rayon::scope(|s| {
                    for (bh, block) in out.chunks_mut(t * t).enumerate() {
                        s.spawn(move |_| run_one(bh, block));
                    }
                });
            } else {
                for (bh, block) in out.chunks_mut(t * t).enumerate() {
                    run_one(bh, block);
                }
            }
        }

        let needs = self.any_needs(&[q, k]);
        let out_rc = Rc::new(out);
        let probs = Rc::clone(&out_rc);
        let back = move |ctx: &crate::tape::BackCtx<'_, E>,
                         gy: &[E],
                         bufs: &mut crate::tape::GradBufs<E>| {
            let qv = ctx.val(q);
            let kvv = ctx.val(k);
            let need_q = ctx.needs(q);
            let need_k = ctx.needs(k);
            let qlen = qv.len();
            let klen = kvv.len();
            // dS = P * (dP - rowsum(dP * P)); then dq/dk via gemms. KV heads
            // are shared across the group, so accumulate serially over heads.
            let mut ds = vec![E::ZERO; t * t];
            for b in 0..bsz {
                for hh in 0..h {
                    let kvh = hh / group;
                    let base = (b * h + hh) * t * t;
                    for i in 0..t {
                        let p = &probs[base + i * t..base + i * t + t];
                        let g = &gy[base + i * t..base + i * t + t];
                        let mut dot = E::ZERO;
                        for j in 0..=i {
                            dot += p[j] * g[j];
                        }
                        let dsr = &mut ds[i * t..i * t + t];
                        for j in 0..t {
                            dsr[j] = if j <= i { p[j] * (g[j] - dot) } else { E::ZERO };
                        }
                    }
                    if need_q {
                        let gq = bufs.acc(q, qlen);
                        gemm_strided(
                            t,
                            t,
                            hd,
                            sc,
                            &ds,
                            0,
                            t as isize,
                            1,
                            kvv,
                            b * t * kv * hd + kvh * hd,
                            (kv * hd) as isize,
                            1,
                            E::ONE,
                            gq,
                            b * t * h * hd + hh * hd,
                            (h * hd) as isize,
                            1,
                        );
                    }
                    if need_k {
                        let gk = bufs.acc(k, klen);
                        gemm_strided(
                            t,
                            t,
                            hd,
                            sc,
                            &ds,
                            0,
                            1,
                            t as isize,
                            qv,
                            b * t * h * hd + hh * hd,
                            (h * hd) as isize,
                            1,
                            E::ONE,
                            gk,
                            b * t * kv * hd + kvh * hd,
                            (kv * hd) as isize,
                            1,
                        );
                    }
                }
            }
        };
        Ok(self.push(
            "attn_probs",
            vec![bsz, h, t, t],
            out_rc,
            needs,
            Some(Box::new(back)),
        ))
    }

    /// Apply attention probabilities to values, merging heads:
    /// p: [B,H,T,T], v: [B,T,KV,hd] -> [B,T,H*hd].
    pub fn attn_apply(&mut self, p: NodeId, v: NodeId) -> Result<NodeId> {
        let ps = self.shape(p).to_vec();
        let vs = self.shape(v).to_vec();
        let mismatch = || CoreError::ShapeMismatch {
            op: "attn_apply",
            lhs: ps.clone(),
            rhs: vs.clone(),
        };
        if ps.len() != 4 || vs.len() != 4 || ps[0] != vs[0] || ps[2] != ps[3] || ps[3] != vs[1] {
            return Err(mismatch());
        }
        let (bsz, h, t) = (ps[0], ps[1], ps[2]);
        let (kv, hd) = (vs[2], vs[3]);
        if h % kv != 0 {
            return Err(mismatch());
        }
        let group = h / kv;

        let pv = self.value(p);
        let vv = self.value(v);
        let mut out = vec![E::ZERO; bsz * t * h * hd];
        {
            let pp = SendPtr(pv.as_ptr());
            let vp = SendPtr(vv.as_ptr());
            let op = SendPtrMut(out.as_mut_ptr());
            let run_one = move |bh: usize| {
                let (b, hh) = (bh / h, bh % h);
                let kvh = hh / group;
                unsafe {
                    E::gemm(
                        t,
                        t,
                        hd,
                        E::ONE,
                        pp.get().add((b * h + hh) * t * t),
                        t as isize,
                        1,
                        vp.get().add(b * t * kv * hd + kvh * hd),
                        (kv * hd) as isize,
                        1,
                        E::ZERO,
                        op.get().add(b * t * h * hd + hh * hd),
                        (h * hd) as isize,
                        1,
                    );
                }
            };
            if parallel() && rayon::current_num_threads() > 1 && bsz * h > 1 {
                rayon::scope(|s| {
                    for bh in 0..bsz * h {
                        s.spawn(move |_| run_one(bh));
                    }
                });
            } else {
                for bh in 0..bsz * h {
                    run_one(bh);
                }
            }
        }

        let needs = self.any_needs(&[p, v]);
        let back = move |ctx: &crate::tape::BackCtx<'_, E>,
                         gy: &[E],
                         bufs: &mut crate::tape::GradBufs<E>| {
            let pv = ctx.val(p);
            let vv = ctx.val(v);
            let plen = pv.len();
            let vlen = vv.len();
            for b in 0..bsz {
                for hh in 0..h {
                    let kvh = hh / group;
                    if ctx.needs(p) {
                        let gp = bufs.acc(p, plen);
                        // dP = dY_h @ V^T
                        gemm_strided(
                            t,
                            hd,
                            t,
                            E::ONE,
                            gy,
                            b * t * h * hd + hh * hd,
                            (h * hd) as isize,
                            1,
                            vv,
                            b * t * kv * hd + kvh * hd,
                            1,
                            (kv * hd) as isize,
                            E::ONE,
                            gp,
                            (b * h + hh) * t * t,
                            t as isize,
                            1,
                        );
                    }
                    if ctx.needs(v) {
                        let gv = bufs.acc(v, vlen);
                        // dV += P^T @ dY_h
                        gemm_strided(
                            t,
                            t,
                            hd,
                            E::ONE,
                            pv,
                            (b * h + hh) * t * t,
                            1,
                            t as isize,
                            gy,
                            b * t * h * hd + hh * hd,
                            (h * hd) as isize,
                            1,
                            E::ONE,
                            gv,
                            b * t * kv * hd + kvh * hd,
                            (kv * hd) as isize,
                            1,
                        );
                    }
                }
            }
        };
        Ok(self.push(
            "attn_apply",
            vec![bsz, t, h * hd],
            Rc::new(out),
            needs,
            Some(Box::new(back)),
        ))
    }
}

pub(crate) fn check_same_shape<E: Scalar>(
    tape: &Tape<E>,
    op: &'static str,
    a: NodeId,
    b: NodeId,
) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(CoreError::ShapeMismatch {
            op,
            lhs: tape.shape(a).to_vec(),
            rhs: tape.shape(b).to_vec(),
        });
    }
    Ok(())
}

pub(crate) fn total<E: Scalar>(tape: &Tape<E>, id: NodeId) -> usize {
    numel(tape.shape(id))
}
