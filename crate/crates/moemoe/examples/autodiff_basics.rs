//! The numeric core: tensors on a dynamic tape, reverse-mode gradients, and
//! a finite-difference cross-check.
//!
//! ```bash
//! cargo run --release -p moemoe --example autodiff_basics
//! ```

use moemoe::{Tape, Tensor};

fn main() {
    // y = sum((x W + b)^2), gradients for every leaf.
    let mut tape = Tape::new();
    let x = tape.leaf(
        Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.0, -0.5])
            .unwrap()
            .with_grad(),
    );
    let w = tape.leaf(
        Tensor::new(vec![3, 2], vec![1.0, 0.5, -0.5, 1.0, 0.25, -1.0])
            .unwrap()
            .with_grad(),
    );
    let b = tape.leaf(Tensor::new(vec![2], vec![0.1, -0.2]).unwrap().with_grad());

    let h = tape.matmul(x, w).unwrap();
    let h = tape.add_bias(h, b).unwrap();
    let sq = tape.mul(h, h).unwrap();
    let loss = tape.sum(sq);
    println!("loss = {:.6}", tape.item(loss));

    tape.backward(loss).unwrap();
    println!("dL/dW = {:?}", tape.grad(w).unwrap());
    println!("dL/db = {:?}", tape.grad(b).unwrap());

    // Central finite differences on one weight entry as an independent check.
    let eval = |delta: f64| {
        let mut t = Tape::new();
        let x = t.constant(
            Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.0, -0.5]).unwrap(),
        );
        let mut wdata = vec![1.0, 0.5, -0.5, 1.0, 0.25, -1.0];
        wdata[0] += delta;
        let w = t.constant(Tensor::new(vec![3, 2], wdata).unwrap());
        let b = t.constant(Tensor::new(vec![2], vec![0.1, -0.2]).unwrap());
        let h = t.matmul(x, w).unwrap();
        let h = t.add_bias(h, b).unwrap();
        let sq = t.mul(h, h).unwrap();
        let l = t.sum(sq);
        t.item(l)
    };
    let h_step = 1e-5;
    let fd = (eval(h_step) - eval(-h_step)) / (2.0 * h_step);
    let autograd = tape.grad(w).unwrap()[0];
    println!("dL/dW[0,0]: autograd {autograd:.8}, finite differences {fd:.8}");
    assert!((autograd - fd).abs() / fd.abs().max(1.0) < 1e-6);
    println!("finite differences agree");
}
