use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// Gradients smaller than this are compared in absolute terms, so that
/// round-off on near-zero entries does not read as a large relative error.
pub const REL_ERR_FLOOR: f64 = 1e-6;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR)
}

/// Central-difference check of `f` at `x`, refined by one Richardson
/// extrapolation step (steps `eps` and `eps / 2`). `f` receives `x` as
/// `Var::Param(0)` and must return a scalar node. Returns the maximum
/// relative error over all entries of `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>, Var) -> Result<Var>,
{
    grad_check_params(std::slice::from_ref(x), eps, None, 0, |g| f(g, Var::Param(0)))
}

/// Checks the gradient of `f` with respect to every tensor in `params`.
/// With `sample = Some(k)`, at most `k` randomly chosen entries per tensor
/// are perturbed.
pub fn grad_check_params<F>(params: &[Tensor<f64>], eps: f64, sample_per_tensor: Option<usize>, seed: u64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::config(format!("finite-difference step {eps} outside [1e-6, 1e-3]")));
    }
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new(ps);
        let out = f(&mut g)?;
        g.check_finite()?;
        let v = g.value(out);
        if v.len() != 1 {
            return Err(Error::Shape("grad_check needs a scalar function".into()));
        }
        Ok(v.data()[0])
    };
    let analytic = {
        let mut g = Graph::new(params);
        let out = f(&mut g)?;
        g.backward(out)?.params
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for (p, tensor) in params.iter().enumerate() {
        let n = tensor.len();
        let entries: Vec<usize> = match sample_per_tensor {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for i in entries {
            let orig = tensor.data()[i];
            let mut central = |h: f64| -> Result<f64> {
                work[p].data_mut()[i] = orig + h;
                let up = eval(&work)?;
                work[p].data_mut()[i] = orig - h;
                let down = eval(&work)?;
                work[p].data_mut()[i] = orig;
                Ok((up - down) / (2.0 * h))
            };
            // One Richardson step cancels the O(eps²) truncation term.
            let (d1, d2) = (central(eps)?, central(eps / 2.0)?);
            let numeric = (4.0 * d2 - d1) / 3.0;
            let a = analytic[p].as_ref().map_or(0.0, |g| g[i]);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::nn::attention::{AttentionMask, AttnLayout};
    use rand::Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let err = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn rejects_bad_eps() {
        let x = Tensor::new(vec![1], vec![1.0]).unwrap();
        assert!(grad_check(|g, x| Ok(g.sum(x)), &x, 1e-2).is_err());
    }

    #[test]
    fn every_op_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = vec![
            rand_tensor(&mut rng, &[3, 8]),  // x
            rand_tensor(&mut rng, &[8, 24]), // qkv weight
            rand_tensor(&mut rng, &[24]),    // qkv bias
            rand_tensor(&mut rng, &[8]),     // ln gain
            rand_tensor(&mut rng, &[8]),     // ln bias
            rand_tensor(&mut rng, &[8, 5]),  // head
            rand_tensor(&mut rng, &[6, 8]),  // embedding table
        ];
        let mask = AttentionMask::from_fn(3, 3, |i, j| j <= i || (i == 0 && j == 1)).unwrap();
        let layout = Arc::new(AttnLayout::single(mask));
        let err = grad_check_params(&params, 1e-5, None, 0, |g| {
            let e = g.embedding(Var::Param(6), &[5, 0, 5])?;
            let picked = g.gather_rows(Var::Param(0), vec![Some(2), None, Some(0)])?;
            let x = g.add(e, picked)?;
            let x = g.concat_rows(&[x])?;
            let x = g.mul(x, Var::Param(0))?;
            let h = g.layer_norm(x, Var::Param(3), Var::Param(4))?;
            let qkv = g.linear(h, Var::Param(1), Some(Var::Param(2)))?;
            let a = g.attention(qkv, layout.clone(), 2)?;
            let a = g.gelu(a);
            let logits = g.linear(a, Var::Param(5), None)?;
            g.cross_entropy(logits, &[Some(1), None, Some(4)], 2)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn full_attention_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = rand_tensor(&mut rng, &[3, 8]);
        let w = rand_tensor(&mut rng, &[8, 24]);
        let layout = Arc::new(AttnLayout::single(AttentionMask::full(3)));
        let err = grad_check(
            |g, x| {
                let wv = g.input(w.clone());
                let qkv = g.linear(x, wv, None)?;
                let a = g.attention(qkv, layout.clone(), 2)?;
                let a2 = g.mul(a, a)?;
                Ok(g.sum(a2))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
