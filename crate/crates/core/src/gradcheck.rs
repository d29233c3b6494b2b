//! Central finite-difference checks of graph gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Compares the analytic gradient of a scalar function against central
/// differences at every coordinate of `x`.
///
/// `f` builds the function on a fresh graph from the leaf it is handed and
/// returns the scalar root. The result is the maximum over coordinates of
/// `|analytic − numeric| / max(1, |analytic|)`; NaNs propagate.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let analytic = analytic_grad(&f, x)?;
    let mut worst = 0.0_f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(1.0);
        if err.is_nan() {
            return Ok(f64::NAN);
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Gradient of `f` at `x` from one backward sweep.
pub fn analytic_grad<F>(f: &F, x: &Tensor) -> Result<Tensor>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let leaf = g.param(x.clone());
    let root = f(&mut g, leaf)?;
    g.backward(root)?;
    Ok(g.grad(leaf).unwrap_or_else(|| Tensor::zeros(x.shape())))
}

fn eval<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let leaf = g.constant(x.clone());
    let root = f(&mut g, leaf)?;
    Ok(g.value(root).item())
}

/// Random values in `±[lo, hi]` with random signs, keeping clear of the
/// kinks at zero.
fn away_from_zero<R: rand::Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(lo..hi);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

fn uniform<R: rand::Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("consistent shape")
}

/// Reduces an arbitrary tensor to a scalar through a fixed random weighting,
/// so every output coordinate contributes a distinct coefficient.
fn weighted_sum(g: &mut Graph, v: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

/// Finite-difference error of every primitive at random small inputs, with
/// step `1e-5`. Inputs avoid the kinks of relu, clamp, sign, max-pool and
/// the median so central differences are meaningful.
pub fn primitive_suite(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut out = Vec::new();
    macro_rules! check {
        ($name:expr, $x:expr, $out_shape:expr, |$g:ident, $v:ident| $body:expr) => {{
            let w = uniform(&mut rng, &$out_shape, -1.0, 1.0);
            let x: Tensor = $x;
            let err = finite_diff_check(
                |$g: &mut Graph, $v: Var| {
                    let o = $body?;
                    weighted_sum($g, o, &w)
                },
                &x,
                h,
            )?;
            out.push(($name, err));
        }};
    }
    let a = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    let b = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    check!("add", a.clone(), [3, 4], |g, v| {
        let c = g.constant(b.clone());
        g.add(v, c)
    });
    check!("sub", a.clone(), [3, 4], |g, v| {
        let c = g.constant(b.clone());
        g.sub(c, v)
    });
    check!("mul", a.clone(), [3, 4], |g, v| {
        let c = g.constant(b.clone());
        g.mul(v, c)
    });
    check!("mul_self", a.clone(), [3, 4], |g, v| g.mul(v, v));
    check!("scale", a.clone(), [3, 4], |g, v| Ok::<_, crate::Error>(
        g.scale(v, -2.5)
    ));
    check!("add_scalar", a.clone(), [3, 4], |g, v| Ok::<_, crate::Error>(
        g.add_scalar(v, 0.7)
    ));
    let s = Tensor::scalar(1.3);
    check!("mul_by/tensor", a.clone(), [3, 4], |g, v| {
        let c = g.constant(s.clone());
        g.mul_by(v, c)
    });
    check!("mul_by/scalar", s.clone(), [3, 4], |g, v| {
        let c = g.constant(a.clone());
        g.mul_by(c, v)
    });
    check!("div_by/tensor", a.clone(), [3, 4], |g, v| {
        let c = g.constant(s.clone());
        g.div_by(v, c)
    });
    check!("div_by/scalar", s.clone(), [3, 4], |g, v| {
        let c = g.constant(a.clone());
        g.div_by(c, v)
    });
    let m = uniform(&mut rng, &[4, 5], -1.0, 1.0);
    check!("matmul/left", a.clone(), [3, 5], |g, v| {
        let c = g.constant(m.clone());
        g.matmul(v, c)
    });
    check!("matmul/right", m.clone(), [3, 5], |g, v| {
        let c = g.constant(a.clone());
        g.matmul(c, v)
    });
    check!("transpose", a.clone(), [4, 3], |g, v| g.transpose(v));
    let row = uniform(&mut rng, &[4], -1.0, 1.0);
    check!("add_row/matrix", a.clone(), [3, 4], |g, v| {
        let c = g.constant(row.clone());
        g.add_row(v, c)
    });
    check!("add_row/row", row.clone(), [3, 4], |g, v| {
        let c = g.constant(a.clone());
        g.add_row(c, v)
    });
    let img = uniform(&mut rng, &[2, 3, 5, 5], -1.0, 1.0);
    let ker = uniform(&mut rng, &[4, 3, 3, 3], -0.5, 0.5);
    let bias = uniform(&mut rng, &[4], -0.5, 0.5);
    check!("conv2d/input", img.clone(), [2, 4, 5, 5], |g, v| {
        let (k, b) = (g.constant(ker.clone()), g.constant(bias.clone()));
        g.conv2d(v, k, Some(b), 1)
    });
    check!("conv2d/kernel", ker.clone(), [2, 4, 5, 5], |g, v| {
        let (x, b) = (g.constant(img.clone()), g.constant(bias.clone()));
        g.conv2d(x, v, Some(b), 1)
    });
    check!("conv2d/bias", bias.clone(), [2, 4, 3, 3], |g, v| {
        let (x, k) = (g.constant(img.clone()), g.constant(ker.clone()));
        g.conv2d(x, k, Some(v), 0)
    });
    check!(
        "relu",
        away_from_zero(&mut rng, &[3, 4], 0.05, 1.0),
        [3, 4],
        |g, v| Ok::<_, crate::Error>(g.relu(v))
    );
    // Distinct values keep every pooling window's maximum unique.
    let pool_in = {
        let mut vals: Vec<f64> = (0..2 * 2 * 4 * 4).map(|i| i as f64 * 0.01).collect();
        rand::seq::SliceRandom::shuffle(vals.as_mut_slice(), &mut rng);
        Tensor::new(vec![2, 2, 4, 4], vals).expect("consistent shape")
    };
    check!("max_pool2", pool_in, [2, 2, 2, 2], |g, v| g.max_pool2(v));
    check!("reshape", a.clone(), [2, 6], |g, v| g.reshape(v, vec![2, 6]));
    check!("flatten", img.clone(), [2, 75], |g, v| Ok::<_, crate::Error>(
        g.flatten(v)
    ));
    check!("sum", a.clone(), [1], |g, v| Ok::<_, crate::Error>(g.sum(v)));
    check!("mean", a.clone(), [1], |g, v| Ok::<_, crate::Error>(g.mean(v)));
    check!("exp", a.clone(), [3, 4], |g, v| Ok::<_, crate::Error>(g.exp(v)));
    check!("log", uniform(&mut rng, &[3, 4], 0.2, 2.0), [3, 4], |g, v| Ok::<
        _,
        crate::Error,
    >(
        g.log(v)
    ));
    let logits = uniform(&mut rng, &[4, 5], -2.0, 2.0);
    check!("softmax_ce", logits.clone(), [1], |g, v| g.softmax_ce(v, &[0, 3, 4, 1]));
    check!("log_softmax", logits.clone(), [4, 5], |g, v| g.log_softmax(v));
    let other = uniform(&mut rng, &[4, 5], -2.0, 2.0);
    check!("kl_div/p", logits.clone(), [4], |g, v| {
        let q = g.constant(other.clone());
        let (lp, lq) = (g.log_softmax(v)?, g.log_softmax(q)?);
        g.kl_div(lp, lq)
    });
    check!("kl_div/q", logits.clone(), [4], |g, v| {
        let p = g.constant(other.clone());
        let (lp, lq) = (g.log_softmax(p)?, g.log_softmax(v)?);
        g.kl_div(lp, lq)
    });
    let rows = uniform(&mut rng, &[5, 3], -1.0, 1.0);
    check!("pairwise_sq_dist", rows.clone(), [5, 5], |g, v| g.pairwise_sq_dist(v));
    check!("median_pairwise_dist", rows.clone(), [1], |g, v| {
        let d = g.pairwise_sq_dist(v)?;
        g.median_pairwise_dist(d)
    });
    let rows4 = uniform(&mut rng, &[4, 2], -1.0, 1.0);
    check!("median_pairwise_dist/even", rows4, [1], |g, v| {
        let d = g.pairwise_sq_dist(v)?;
        g.median_pairwise_dist(d)
    });
    let sq = uniform(&mut rng, &[4, 4], -1.0, 1.0);
    check!("trace", sq.clone(), [1], |g, v| g.trace(v));
    check!("center", sq.clone(), [4, 4], |g, v| g.center(v));
    let near = away_from_zero(&mut rng, &[3, 4], 0.05, 0.45).map(|x| if x.abs() > 0.3 { x * 3.0 } else { x });
    check!("clamp", near.clone(), [3, 4], |g, v| Ok::<_, crate::Error>(
        g.clamp(v, -0.6, 0.6)
    ));
    check!("sign", near, [3, 4], |g, v| Ok::<_, crate::Error>(g.sign(v)));
    check!("pick", logits, [4], |g, v| g.pick(v, &[1, 0, 4, 2]));
    Ok(out)
}
