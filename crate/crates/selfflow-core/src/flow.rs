//! Rectified-flow primitives: straight-line interpolation between data and
//! noise, the constant velocity target, the flow-matching loss, and the
//! backward Euler ODE sampler.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::schedules::EvalGrid;
use crate::tensor::{self, fmt_shape, Tensor};

/// A batch of token sequences `[B, N, C]` with optional class labels.
#[derive(Clone, Debug)]
pub struct TokenBatch {
    pub x: Tensor,
    pub labels: Option<Vec<usize>>,
}

impl TokenBatch {
    pub fn new(x: Tensor, labels: Option<Vec<usize>>) -> Result<TokenBatch> {
        if x.rank() != 3 {
            return Err(Error::InvalidArg(format!(
                "token batch must be [B,N,C], got {}",
                fmt_shape(x.shape())
            )));
        }
        if let Some(ls) = &labels {
            if ls.len() != x.shape()[0] {
                return Err(Error::InvalidArg(format!(
                    "{} labels for batch of {}",
                    ls.len(),
                    x.shape()[0]
                )));
            }
        }
        Ok(TokenBatch { x, labels })
    }

    pub fn batch_size(&self) -> usize {
        self.x.shape()[0]
    }
}

/// x_tau[b,n,:] = (1 − tau[b,n])·x0[b,n,:] + tau[b,n]·x1[b,n,:].
pub fn interpolate(x0: &Tensor, x1: &Tensor, tau: &Tensor) -> Result<Tensor> {
    if x0.shape() != x1.shape() {
        return Err(Error::ShapeMismatch {
            op: "interpolate",
            lhs: fmt_shape(x0.shape()),
            rhs: fmt_shape(x1.shape()),
        });
    }
    if x0.rank() != 3 || tau.shape() != &x0.shape()[..2] {
        return Err(Error::ShapeMismatch {
            op: "interpolate",
            lhs: fmt_shape(x0.shape()),
            rhs: fmt_shape(tau.shape()),
        });
    }
    if tau.data().iter().any(|&t| !(0.0..=1.0).contains(&t)) {
        return Err(Error::InvalidArg(
            "interpolate tau must lie in [0,1]".into(),
        ));
    }
    let c = x0.shape()[2];
    let tau_c = tensor::broadcast_last(tau, c)?;
    let one_minus = tau_c.map(|t| 1.0 - t);
    tensor::add(&tensor::mul(&one_minus, x0)?, &tensor::mul(&tau_c, x1)?)
}

/// The straight-path velocity x1 − x0, independent of t.
pub fn velocity_target(x0: &Tensor, x1: &Tensor) -> Result<Tensor> {
    tensor::sub(x1, x0)
}

/// Mean squared error between the predicted velocity (a graph node) and the
/// straight-path target, as a scalar graph node.
pub fn gen_loss(g: &mut Graph, pred: NodeId, x0: &Tensor, x1: &Tensor) -> Result<NodeId> {
    let target = g.input(velocity_target(x0, x1)?)?;
    let diff = g.sub(pred, target)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean_all(sq))
}

/// The same quantity on plain tensors, for evaluation paths.
pub fn gen_loss_value(pred: &Tensor, x0: &Tensor, x1: &Tensor) -> Result<f64> {
    let diff = tensor::sub(pred, &velocity_target(x0, x1)?)?;
    Ok(tensor::mean_all(&tensor::mul(&diff, &diff)?).item())
}

/// Integrate dx/dt = v(x, t) from t = 1 down to t = 0 along a descending
/// grid with explicit Euler steps. `model_fn` receives the state, the
/// homogeneous grid timestep, and the batch labels.
pub fn euler_sample<F>(
    mut model_fn: F,
    x1: &Tensor,
    grid: &EvalGrid,
    labels: Option<&[usize]>,
) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64, Option<&[usize]>) -> Result<Tensor>,
{
    let ts = &grid.timesteps;
    if ts.len() < 2 || ts[0] != 1.0 || *ts.last().unwrap() != 0.0 {
        return Err(Error::InvalidArg(
            "euler grid must descend from exactly 1 to exactly 0".into(),
        ));
    }
    let mut x = x1.clone();
    for (k, w) in ts.windows(2).enumerate() {
        let (t_cur, t_next) = (w[0], w[1]);
        let v = model_fn(&x, t_cur, labels)?;
        if v.shape() != x.shape() {
            return Err(Error::ShapeMismatch {
                op: "euler_sample",
                lhs: fmt_shape(x.shape()),
                rhs: fmt_shape(v.shape()),
            });
        }
        // t_next − t_cur < 0: integrating backward
        x = tensor::add(&x, &tensor::scale(&v, t_next - t_cur))?;
        if !x.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite state after euler step {k} (t = {t_cur} -> {t_next})"
            )));
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Philox;
    use crate::schedules::eval_grid;

    fn randn(rng: &mut Philox, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn interpolate_endpoints() {
        let mut rng = Philox::seed(1);
        let x0 = randn(&mut rng, &[2, 3, 4]);
        let x1 = randn(&mut rng, &[2, 3, 4]);
        let zeros = Tensor::zeros(&[2, 3]);
        let ones = Tensor::full(&[2, 3], 1.0);
        assert_eq!(interpolate(&x0, &x1, &zeros).unwrap(), x0);
        assert_eq!(interpolate(&x0, &x1, &ones).unwrap(), x1);
    }

    #[test]
    fn interpolate_quarter() {
        let x0 = Tensor::new(vec![1, 1, 1], vec![2.0]).unwrap();
        let x1 = Tensor::new(vec![1, 1, 1], vec![0.0]).unwrap();
        let tau = Tensor::new(vec![1, 1], vec![0.25]).unwrap();
        let y = interpolate(&x0, &x1, &tau).unwrap();
        assert_eq!(y.data(), &[1.5]);
    }

    #[test]
    fn interpolate_rejects_tau_outside_unit() {
        let x0 = Tensor::zeros(&[1, 1, 1]);
        let x1 = Tensor::zeros(&[1, 1, 1]);
        let tau = Tensor::new(vec![1, 1], vec![1.5]).unwrap();
        assert!(interpolate(&x0, &x1, &tau).is_err());
    }

    #[test]
    fn interpolate_affine_in_tau() {
        // three collinear tau values stay collinear in the output
        let mut rng = Philox::seed(2);
        let x0 = randn(&mut rng, &[1, 2, 3]);
        let x1 = randn(&mut rng, &[1, 2, 3]);
        let at = |t: f64| {
            interpolate(&x0, &x1, &Tensor::full(&[1, 2], t))
                .unwrap()
                .data()
                .to_vec()
        };
        let (a, b, c) = (at(0.2), at(0.5), at(0.8));
        for i in 0..a.len() {
            assert!((b[i] - 0.5 * (a[i] + c[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn velocity_is_difference() {
        let x0 = Tensor::new(vec![1, 1, 2], vec![1.0, 2.0]).unwrap();
        let x1 = Tensor::new(vec![1, 1, 2], vec![3.0, 1.0]).unwrap();
        assert_eq!(velocity_target(&x0, &x1).unwrap().data(), &[2.0, -1.0]);
        let same = velocity_target(&x0, &x0).unwrap();
        assert!(same.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn velocity_matches_time_derivative() {
        let mut rng = Philox::seed(3);
        let x0 = randn(&mut rng, &[1, 2, 2]);
        let x1 = randn(&mut rng, &[1, 2, 2]);
        let v = velocity_target(&x0, &x1).unwrap();
        let h = 1e-6;
        for &t in &[0.1, 0.5, 0.9] {
            let up = interpolate(&x0, &x1, &Tensor::full(&[1, 2], t + h)).unwrap();
            let dn = interpolate(&x0, &x1, &Tensor::full(&[1, 2], t - h)).unwrap();
            for i in 0..v.numel() {
                let fd = (up.data()[i] - dn.data()[i]) / (2.0 * h);
                assert!((fd - v.data()[i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn gen_loss_values() {
        let mut rng = Philox::seed(4);
        let x0 = randn(&mut rng, &[2, 2, 2]);
        let x1 = randn(&mut rng, &[2, 2, 2]);
        // perfect prediction
        assert_eq!(
            gen_loss_value(&velocity_target(&x0, &x1).unwrap(), &x0, &x1).unwrap(),
            0.0
        );
        // zero prediction against unit velocity
        let zeros3 = Tensor::zeros(&[1, 1, 2]);
        let x0u = Tensor::zeros(&[1, 1, 2]);
        let x1u = Tensor::full(&[1, 1, 2], 1.0);
        assert_eq!(gen_loss_value(&zeros3, &x0u, &x1u).unwrap(), 1.0);
    }

    #[test]
    fn gen_loss_gradient() {
        // d/dpred mean((pred − v)²) = 2(pred − v)/(B·N·C)
        let mut rng = Philox::seed(5);
        let x0 = randn(&mut rng, &[2, 2, 3]);
        let x1 = randn(&mut rng, &[2, 2, 3]);
        let pred = randn(&mut rng, &[2, 2, 3]);

        let mut g = Graph::new();
        let p = g.leaf(pred.clone()).unwrap();
        let loss = gen_loss(&mut g, p, &x0, &x1).unwrap();
        let grads = g.grad(loss, &[p]).unwrap();
        let gp = grads.get(p).unwrap();
        let v = velocity_target(&x0, &x1).unwrap();
        let n = pred.numel() as f64;
        for i in 0..pred.numel() {
            let expect = 2.0 * (pred.data()[i] - v.data()[i]) / n;
            assert!((gp.data()[i] - expect).abs() < 1e-12);
        }

        let err = crate::autodiff::finite_diff_check(
            |g, ids| gen_loss(g, ids[0], &x0, &x1),
            &[pred],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn oracle_velocity_recovers_x0_on_any_grid() {
        let mut rng = Philox::seed(6);
        let x0 = randn(&mut rng, &[2, 3, 4]);
        let x1 = randn(&mut rng, &[2, 3, 4]);
        let v = velocity_target(&x0, &x1).unwrap();
        for &(steps, shift) in &[(1usize, 1.0), (7, 2.0), (50, 1.78)] {
            let grid = eval_grid(steps, shift).unwrap();
            let out = euler_sample(|_, _, _| Ok(v.clone()), &x1, &grid, None).unwrap();
            for i in 0..x0.numel() {
                assert!(
                    (out.data()[i] - x0.data()[i]).abs() < 1e-12,
                    "steps={steps} shift={shift}"
                );
            }
        }
    }

    #[test]
    fn zero_velocity_returns_noise() {
        let mut rng = Philox::seed(7);
        let x1 = randn(&mut rng, &[1, 2, 2]);
        let grid = eval_grid(10, 1.0).unwrap();
        let out = euler_sample(
            |x, _, _| Ok(Tensor::zeros(x.shape())),
            &x1,
            &grid,
            None,
        )
        .unwrap();
        assert_eq!(out, x1);
    }

    #[test]
    fn grid_invariance_with_oracle() {
        let mut rng = Philox::seed(8);
        let x0 = randn(&mut rng, &[1, 4, 4]);
        let x1 = randn(&mut rng, &[1, 4, 4]);
        let v = velocity_target(&x0, &x1).unwrap();
        let one = euler_sample(
            |_, _, _| Ok(v.clone()),
            &x1,
            &eval_grid(1, 1.0).unwrap(),
            None,
        )
        .unwrap();
        let fifty = euler_sample(
            |_, _, _| Ok(v.clone()),
            &x1,
            &eval_grid(50, 3.0).unwrap(),
            None,
        )
        .unwrap();
        for i in 0..one.numel() {
            assert!((one.data()[i] - fifty.data()[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn non_finite_state_aborts_with_step_index() {
        let x1 = Tensor::full(&[1, 1, 1], 1.0);
        let grid = eval_grid(4, 1.0).unwrap();
        let err = euler_sample(
            |x, _, _| Ok(tensor::scale(x, 1e308)),
            &x1,
            &grid,
            None,
        )
        .unwrap_err();
        assert!(err.to_string().contains("step"), "{err}");
    }
}
