use super::{ParamGrads, ParamSet, Result, Rng, TensorError};

const DENOM_FLOOR: f64 = 1e-6;

/// Central-difference check of analytic gradients.
///
/// `f` returns the loss and its analytic gradients for a parameter set.
/// Up to `samples` coordinates are drawn (seeded by `seed`) and each gets
/// `|analytic - central| / max(|analytic| + |central|, 1e-6)`; the maximum is
/// returned. The floor keeps gradients that are zero in exact arithmetic
/// (say, weights fed by a constant input) from turning float noise into a
/// large ratio.
pub fn finite_diff_check<F>(
    mut f: F,
    params: &ParamSet,
    h: f64,
    samples: usize,
    seed: u64,
) -> Result<f64>
where
    F: FnMut(&ParamSet) -> Result<(f64, ParamGrads)>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(TensorError::InvalidArgument(format!(
            "step h={h} outside [1e-7, 1e-3]"
        )));
    }
    let (base, grads) = f(params)?;
    let (again, _) = f(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(TensorError::Nondeterministic(base, again));
    }

    let mut coords: Vec<(String, usize)> = params
        .iter()
        .flat_map(|(name, t)| (0..t.numel()).map(move |i| (name.clone(), i)))
        .collect();
    let mut rng = Rng::new(seed);
    rng.shuffle(&mut coords);
    coords.truncate(samples);

    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for (name, i) in coords {
        let orig = params.get(&name)?.data()[i];
        let analytic = grads
            .get(&name)
            .map(|g| g.data()[i])
            .ok_or_else(|| TensorError::MissingParam(name.clone()))?;
        probe.get_mut(&name).unwrap().data_mut()[i] = orig + h;
        let (plus, _) = f(&probe)?;
        probe.get_mut(&name).unwrap().data_mut()[i] = orig - h;
        let (minus, _) = f(&probe)?;
        probe.get_mut(&name).unwrap().data_mut()[i] = orig;
        let central = (plus - minus) / (2.0 * h);
        let rel = (analytic - central).abs() / (analytic.abs() + central.abs()).max(DENOM_FLOOR);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Tensor};

    #[test]
    fn exact_quadratic() {
        let mut params = ParamSet::new();
        params.insert("x", Tensor::from_vec(vec![3.0]));
        let err = finite_diff_check(
            |p| {
                let mut g = Graph::new();
                let b = p.bind(&mut g);
                let x = b.var("x")?;
                let sq = g.mul(x, x)?;
                let loss = g.sum(sq)?;
                let v = g.value(loss).data()[0];
                Ok((v, b.collect(g.backward(loss)?, p)))
            },
            &params,
            1e-5,
            1,
            0,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn detects_nondeterminism() {
        let mut params = ParamSet::new();
        params.insert("x", Tensor::from_vec(vec![1.0]));
        let mut calls = 0.0;
        let res = finite_diff_check(
            |_| {
                calls += 1.0;
                Ok((calls, ParamGrads::new()))
            },
            &params,
            1e-5,
            1,
            0,
        );
        assert!(matches!(res, Err(TensorError::Nondeterministic(..))));
    }

    #[test]
    fn rejects_bad_step() {
        let params = ParamSet::new();
        let res = finite_diff_check(|_| Ok((0.0, ParamGrads::new())), &params, 1e-2, 1, 0);
        assert!(res.is_err());
    }
}
