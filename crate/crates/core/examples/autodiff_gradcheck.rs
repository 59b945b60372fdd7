//! Builds a tiny two-layer network on the tape, backpropagates, and checks
//! the gradient against central differences.

use hoi_query::numerics::gradcheck::check;
use hoi_query::numerics::{tol, Graph, Tensor};

fn main() -> hoi_query::Result<()> {
    let x = Tensor::from_rows(&[&[0.5, -1.0, 2.0], &[1.5, 0.25, -0.75]]);
    let w1 = Tensor::from_rows(&[&[0.1, -0.2], &[0.4, 0.3], &[-0.5, 0.25]]);
    let w2 = Tensor::from_rows(&[&[0.7], &[-1.1]]);

    let mut g = Graph::new();
    let (xv, w1v, w2v) = (g.input(x.clone(), false), g.input(w1.clone(), true), g.input(w2.clone(), true));
    let h = g.matmul(xv, w1v)?;
    let h = g.relu(h)?;
    let y = g.matmul(h, w2v)?;
    let loss = g.mean(y)?;
    println!("loss = {:.6}", g.value(loss).item());
    let grads = g.backward(loss)?;
    println!("dL/dW1 = {:?}", grads.wrt(w1v).unwrap());
    println!("dL/dW2 = {:?}", grads.wrt(w2v).unwrap());

    let report = check(&[x, w1, w2], tol::FD_STEP, |g, v| {
        let h = g.matmul(v[0], v[1])?;
        let h = g.relu(h)?;
        let y = g.matmul(h, v[2])?;
        g.mean(y)
    })?;
    println!("finite differences: {} entries, max relative error {:.2e}, passes: {}", report.checked, report.max_rel_err, report.passes());
    Ok(())
}
