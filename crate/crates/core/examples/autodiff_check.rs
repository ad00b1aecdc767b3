//! Differentiates a small masked policy head on the tape and compares the
//! result with central finite differences.

use edge_offload::tensor::{Matrix, Tape};
use rand::{Rng, SeedableRng};

fn loss(w1: &Matrix, w2: &Matrix, x: &Matrix, mask: &[bool], taken: &[usize]) -> (f64, Vec<Matrix>) {
    let mut t = Tape::new();
    let (a, b) = (t.param(w1.clone()), t.param(w2.clone()));
    let xin = t.constant(x.clone());
    let h = t.matmul(xin, a);
    let h = t.tanh(h);
    let z = t.matmul(h, b);
    let logp = t.masked_log_softmax(z, mask.repeat(x.rows));
    let picked = t.gather(logp, taken.to_vec());
    let nll = t.mean(picked);
    let loss = t.scale(nll, -1.0);
    let g = t.backward(loss);
    (t.value(loss).item(), vec![g.of(a), g.of(b)])
}

fn main() {
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let mut rand_m = |rows, cols| Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect());
    let (x, mut w1, mut w2) = (rand_m(4, 3), rand_m(3, 5), rand_m(5, 4));
    let mask = [true, false, true, true];
    let taken = [0, 2, 3, 2];
    let (l0, grads) = loss(&w1, &w2, &x, &mask, &taken);
    println!("loss {l0:.6}");

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (which, g) in grads.iter().enumerate() {
        for i in 0..g.data.len() {
            let w = if which == 0 { &mut w1 } else { &mut w2 };
            let orig = w.data[i];
            w.data[i] = orig + h;
            let up = loss(&w1, &w2, &x, &mask, &taken).0;
            let w = if which == 0 { &mut w1 } else { &mut w2 };
            w.data[i] = orig - h;
            let down = loss(&w1, &w2, &x, &mask, &taken).0;
            let w = if which == 0 { &mut w1 } else { &mut w2 };
            w.data[i] = orig;
            let fd = (up - down) / (2.0 * h);
            worst = worst.max((fd - g.data[i]).abs() / fd.abs().max(g.data[i].abs()).max(1e-8));
        }
    }
    // logits of the masked column never reach the loss
    let masked_col: f64 = (0..5).map(|r| grads[1].get(r, 1).abs()).sum();
    println!("worst relative error {worst:.2e}, gradient into masked logit {masked_col}");
}
