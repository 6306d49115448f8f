//! Rough throughput probe for sizing training budgets.
use std::time::Instant;
use stitchkit_core::rng::Rng;
use stitchkit_core::tape::Tape;
use stitchkit_core::tensor::PTensor;

fn bench(d: usize, f: usize, seqs: usize, t_len: usize, h: usize, iters: usize) {
    let hd = d / h;
    let mut rng = Rng::seeded(1).stream("b");
    let x = PTensor::<f32>::randn(&[seqs, t_len, d], 0.5, &mut rng);
    let wq = PTensor::<f32>::randn(&[d, d], 0.02, &mut rng);
    let wk = PTensor::<f32>::randn(&[d, hd], 0.02, &mut rng);
    let wv = PTensor::<f32>::randn(&[d, hd], 0.02, &mut rng);
    let wo = PTensor::<f32>::randn(&[d, d], 0.02, &mut rng);
    let wg = PTensor::<f32>::randn(&[d, f], 0.02, &mut rng);
    let wu = PTensor::<f32>::randn(&[d, f], 0.02, &mut rng);
    let wd = PTensor::<f32>::randn(&[f, d], 0.02, &mut rng);
    let norm = PTensor::<f32>::from_vec(&[d], vec![1.0; d]);

    let start = Instant::now();
    for _ in 0..iters {
        let mut tape = Tape::<f32>::new(true);
        let xn = tape.leaf(&x);
        let (wqn, wkn, wvn, won) = (tape.leaf(&wq), tape.leaf(&wk), tape.leaf(&wv), tape.leaf(&wo));
        let (wgn, wun, wdn) = (tape.leaf(&wg), tape.leaf(&wu), tape.leaf(&wd));
        let nn = tape.leaf(&norm);
        // one transformer block
        let hsn = tape.rmsnorm(xn, nn, 1e-5).unwrap();
        let q = tape.matmul(hsn, wqn).unwrap();
        let k = tape.matmul(hsn, wkn).unwrap();
        let v = tape.matmul(hsn, wvn).unwrap();
        let q = tape.reshape(q, &[seqs, t_len, h, hd]).unwrap();
        let k = tape.reshape(k, &[seqs, t_len, 1, hd]).unwrap();
        let v = tape.reshape(v, &[seqs, t_len, 1, hd]).unwrap();
        let q = tape.rope(q, 1e4, 0).unwrap();
        let k = tape.rope(k, 1e4, 0).unwrap();
        let p = tape.attn_probs(q, k, 1.0 / (hd as f32).sqrt() as f64).unwrap();
        let att = tape.attn_apply(p, v).unwrap();
        let att = tape.matmul(att, won).unwrap();
        let x1 = tape.add(xn, att).unwrap();
        let h2 = tape.rmsnorm(x1, nn, 1e-5).unwrap();
        let g = tape.matmul(h2, wgn).unwrap();
        let u = tape.matmul(h2, wun).unwrap();
        let gs = tape.silu(g);
        let gu = tape.mul(gs, u).unwrap();
        let dn = tape.matmul(gu, wdn).unwrap();
        let x2 = tape.add(x1, dn).unwrap();
        let loss = tape.mean_all(x2);
        let _ = tape.backward(loss).unwrap();
    }
    let dt = start.elapsed().as_secs_f64();
    let tokens = (seqs * t_len * iters) as f64;
    println!(
        "d={d} f={f} seqs={seqs} T={t_len}: {:.1} tokens/s/layer (fwd+bwd), {:.2} ms/layer-step",
        tokens / dt,
        dt / iters as f64 * 1e3
    );
}

fn main() {
    for (d, f) in [(32, 128), (48, 192), (64, 256), (128, 512)] {
        bench(d, f, 16, 128, 4, 30);
    }
}
