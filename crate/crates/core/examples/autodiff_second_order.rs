//! Gradients, Hessian-vector products and double backpropagation on a tiny
//! softplus network, each checked against central finite differences.
//!
//!     cargo run --release --example autodiff_second_order

use decision_surface::autodiff::Graph;
use decision_surface::Result;

/// f(x, w) = sum softplus(w * x) with w a 3x3 matrix.
fn f(g: &mut Graph, w: &[f64], x: &[f64]) -> Result<f64> {
    let wv = g.constant(w.to_vec());
    let xv = g.constant(x.to_vec());
    let h = g.matvec(wv, xv)?;
    let s = g.softplus(h);
    let out = g.sum(s);
    Ok(g.scalar(out))
}

fn main() -> Result<()> {
    let w = vec![0.3, -0.2, 0.5, 0.1, 0.4, -0.6, -0.3, 0.2, 0.7];
    let x = vec![0.5, -1.0, 0.25];
    let v = vec![1.0, 0.5, -0.5];

    let mut g = Graph::new();
    let wv = g.leaf(w.clone());
    let xv = g.leaf(x.clone());
    let h = g.matvec(wv, xv)?;
    let s = g.softplus(h);
    let out = g.sum(s);

    let grad = g.gradient(out, &[xv])?.remove(0);
    let hvp = g.hessian_vector_product(out, xv, &v)?;
    // d/dw of ||df/dx||^2, the double-backprop quantity behind the penalty.
    let mixed = g.mixed_second(out, xv, &[wv], |g, gx| g.dot(gx, gx))?.remove(0);

    let eps = 1e-5;
    let fd = |k: usize, dir: &[f64], base: &[f64], eval: &dyn Fn(&[f64]) -> Result<Vec<f64>>| -> Result<f64> {
        let plus: Vec<f64> = base.iter().zip(dir).map(|(a, d)| a + eps * d).collect();
        let minus: Vec<f64> = base.iter().zip(dir).map(|(a, d)| a - eps * d).collect();
        Ok((eval(&plus)?[k] - eval(&minus)?[k]) / (2.0 * eps))
    };
    let grad_at = |x: &[f64]| -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let wv = g.constant(w.clone());
        let xv = g.leaf(x.to_vec());
        let h = g.matvec(wv, xv)?;
        let s = g.softplus(h);
        let out = g.sum(s);
        Ok(g.gradient(out, &[xv])?.remove(0))
    };
    let sq_grad_norm = |w: &[f64]| -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let wv = g.constant(w.to_vec());
        let xv = g.leaf(x.clone());
        let h = g.matvec(wv, xv)?;
        let s = g.softplus(h);
        let out = g.sum(s);
        let gx = g.gradient(out, &[xv])?.remove(0);
        Ok(vec![gx.iter().map(|a| a * a).sum()])
    };

    println!("f(x) = {:.6}", f(&mut Graph::new(), &w, &x)?);
    println!("{:>3} {:>14} {:>14} {:>14} {:>14}", "k", "df/dx", "fd", "(Hv)_k", "fd");
    for k in 0..3 {
        let mut e = vec![0.0; 3];
        e[k] = 1.0;
        let fd_grad = fd(0, &e, &x, &|p| Ok(vec![f(&mut Graph::new(), &w, p)?]))?;
        let fd_hvp = fd(k, &v, &x, &grad_at)?;
        println!("{k:>3} {:>14.9} {fd_grad:>14.9} {:>14.9} {fd_hvp:>14.9}", grad[k], hvp[k]);
    }
    println!("\nd ||df/dx||^2 / dw");
    for k in 0..w.len() {
        let mut e = vec![0.0; w.len()];
        e[k] = 1.0;
        println!("  w[{k}] {:>14.9}  fd {:>14.9}", mixed[k], fd(0, &e, &w, &sq_grad_norm)?);
    }
    Ok(())
}
