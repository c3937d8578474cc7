use super::{Float, Result, Tape, Tensor, Var};

/// Evaluates a scalar composition `f` and the gradient of every parameter.
///
/// Parameters that do not influence the output get an all-zero gradient.
pub fn value_and_grad<F, Fun>(f: Fun, params: &[Tensor<F>]) -> Result<(F, Vec<Tensor<F>>)>
where
    F: Float,
    Fun: for<'t> Fn(&'t Tape<F>, &[Var<'t, F>]) -> Result<Var<'t, F>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_, F>> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&tape, &vars)?;
    let value = out.value().item()?;
    let mut grads = tape.backward(out)?;
    let per_param = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((value, per_param))
}

/// Max relative error between reverse-mode gradients and central
/// differences over every coordinate of every parameter.
///
/// The perturbation for coordinate `x` is `h · max(1, |x|)`; the relative
/// error is `|analytic − cd| / (|analytic| + |cd| + 1e-12)`.
pub fn grad_check<Fun>(f: Fun, params: &[Tensor<f64>], h: f64) -> Result<f64>
where
    Fun: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    grad_check_sampled(f, params, h, usize::MAX)
}

/// Like [`grad_check`], visiting at most `max_per_tensor` evenly strided
/// coordinates of each parameter.
pub fn grad_check_sampled<Fun>(
    f: Fun,
    params: &[Tensor<f64>],
    h: f64,
    max_per_tensor: usize,
) -> Result<f64>
where
    Fun: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let (_, analytic) = value_and_grad(&f, params)?;
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        f(&tape, &vars)?.value().item()
    };

    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, grad) in analytic.iter().enumerate() {
        let n = grad.numel();
        let stride = n.div_ceil(max_per_tensor.max(1)).max(1);
        for idx in (0..n).step_by(stride) {
            let orig = work[pi].data()[idx];
            let step = h * orig.abs().max(1.0);
            work[pi].data_mut()[idx] = orig + step;
            let up = eval(&work)?;
            work[pi].data_mut()[idx] = orig - step;
            let down = eval(&work)?;
            work[pi].data_mut()[idx] = orig;
            let cd = (up - down) / (2.0 * step);
            let a = grad.data()[idx];
            let rel = (a - cd).abs() / (a.abs() + cd.abs() + 1e-12);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DivergenceKind;

    fn seeded(shape: &[usize], seed: u64) -> Tensor<f64> {
        // small LCG; the values only need to be irregular
        let mut state = seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        Tensor::from_fn(shape, |_| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn value_and_grad_of_sum_and_square() {
        let p = seeded(&[3, 2], 1);
        let (v, g) = value_and_grad(|_, ps| ps[0].sum(), std::slice::from_ref(&p)).unwrap();
        assert!((v - p.data().iter().sum::<f64>()).abs() < 1e-12);
        assert!(g[0].data().iter().all(|&x| x == 1.0));
        let (_, g) =
            value_and_grad(|_, ps| ps[0].mul(ps[0])?.sum(), std::slice::from_ref(&p)).unwrap();
        for (gi, pi) in g[0].data().iter().zip(p.data()) {
            assert_eq!(*gi, 2.0 * pi);
        }
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let ps = vec![seeded(&[2], 1), seeded(&[3], 2)];
        let (_, g) = value_and_grad(|_, ps| ps[0].sum(), &ps).unwrap();
        assert!(g[1].data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn linear_function_is_exact() {
        let ps = vec![seeded(&[4, 3], 3)];
        let w = seeded(&[3, 2], 4);
        let err = grad_check(
            move |tape, ps| {
                let c = tape.constant(w.clone());
                ps[0].matmul(c)?.sum()
            },
            &ps,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn softmax_cross_entropy_on_random_logits() {
        let ps = vec![seeded(&[5, 6], 7)];
        let err = grad_check(
            |tape, ps| {
                let logp = ps[0].log_softmax()?;
                let pick = tape.constant(onehot(&[1, 0, 5, 2, 3], 6));
                logp.mul(pick)?.sum()?.scale(-0.2)
            },
            &ps,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
        let err = grad_check(
            |_, ps| ps[0].cross_entropy(&[1, 0, 5, 2, 3], &[true, true, false, true, true]),
            &ps,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    fn onehot(targets: &[usize], vocab: usize) -> Tensor<f64> {
        Tensor::from_fn(&[targets.len(), vocab], |i| {
            if targets[i / vocab] == i % vocab {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn every_primitive_passes_gradient_check() {
        let ps = vec![
            seeded(&[6, 4], 11),
            seeded(&[4], 12),
            seeded(&[4], 13),
            seeded(&[4, 4], 14),
        ];
        let teacher = seeded(&[6, 4], 15);
        let err = grad_check(
            move |_, ps| {
                let h = ps[0].layer_norm(ps[1], ps[2], 1e-5)?;
                let h = h.matmul(ps[3])?.gelu()?.add_row(ps[1])?;
                let a = h.causal_attention(h, ps[0], 2, 3, 2, 2)?;
                let s = a.add(h)?.softmax()?.mul(ps[0])?;
                let nt = s.matmul_nt(ps[3])?.reshape(&[2, 12])?.mean()?;
                let kl = a.divergence(&teacher, &[true; 6], 1.3, DivergenceKind::Reverse)?;
                let fkl = h.divergence(&teacher, &[true; 6], 0.8, DivergenceKind::Forward)?;
                let emb = ps[3].embedding(&[2, 0, 2])?.sum()?.scale(0.1)?;
                nt.add(kl)?.add(fkl)?.add(emb)
            },
            &ps,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
