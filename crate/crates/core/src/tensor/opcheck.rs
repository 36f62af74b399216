//! One small scalar-valued test function per differentiable graph op, for
//! finite-difference checks.

use super::{finite_diff_check, BoundParams, Graph, ParamSet, Result, Rng, Tensor, Var};

type Build = fn(&mut Graph<'_>, &BoundParams, &[Tensor]) -> Result<Var>;

pub struct OpCase {
    pub name: &'static str,
    pub params: ParamSet,
    /// Fixed non-parameter inputs (weights for the final reduction and the
    /// like).
    consts: Vec<Tensor>,
    build: Build,
}

impl OpCase {
    pub fn loss_and_grads(&self, params: &ParamSet) -> Result<(f64, super::ParamGrads)> {
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let loss = (self.build)(&mut g, &b, &self.consts)?;
        let v = g.value(loss).data()[0];
        Ok((v, b.collect(g.backward(loss)?, params)))
    }

    /// Worst relative error over every parameter coordinate.
    pub fn check(&self, h: f64, seed: u64) -> Result<f64> {
        let n = self.params.num_scalars();
        finite_diff_check(|p| self.loss_and_grads(p), &self.params, h, n, seed)
    }
}

/// Reduces `y` to a scalar with fixed random weights so every element
/// gets a distinct gradient.
fn weighted(g: &mut Graph<'_>, y: Var, w: &Tensor) -> Result<Var> {
    let w = g.input(w.clone());
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn case(name: &'static str, shapes: &[(&str, &[usize])], consts: &[&[usize]], build: Build, rng: &mut Rng) -> OpCase {
    let mut params = ParamSet::new();
    for (n, s) in shapes {
        params.insert(*n, Tensor::randn(s, 1.0, rng));
    }
    OpCase {
        name,
        params,
        consts: consts.iter().map(|s| Tensor::randn(s, 1.0, rng)).collect(),
        build,
    }
}

/// Every op the graph can differentiate through, each with fresh random
/// inputs drawn from `seed`.
pub fn registered_ops(seed: u64) -> Vec<OpCase> {
    let mut rng = Rng::new(seed);
    let r = &mut rng;
    vec![
        case(
            "linear",
            &[("x", &[3, 4]), ("w", &[4, 5]), ("b", &[5])],
            &[&[3, 5]],
            |g, b, c| {
                let y = g.linear(b.var("x")?, b.var("w")?, Some(b.var("b")?))?;
                weighted(g, y, &c[0])
            },
            r,
        ),
        case(
            "add",
            &[("a", &[2, 3]), ("b", &[2, 3])],
            &[&[2, 3]],
            |g, b, c| {
                let y = g.add(b.var("a")?, b.var("b")?)?;
                weighted(g, y, &c[0])
            },
            r,
        ),
        case(
            "add_broadcast",
            &[("x", &[2, 3, 4]), ("y", &[4])],
            &[&[2, 3, 4]],
            |g, b, c| {
                let y = g.add_broadcast(b.var("x")?, b.var("y")?)?;
                weighted(g, y, &c[0])
            },
            r,
        ),
        case(
            "mul",
            &[("a", &[2, 3]), ("b", &[2, 3])],
            &[&[2, 3]],
            |g, b, c| {
                let y = g.mul(b.var("a")?, b.var("b")?)?;
                weighted(g, y, &c[0])
            },
            r,
        ),
        case(
            "scale",
            &[("x", &[5])],
            &[&[5]],
            |g, b, c| {
                let y = g.scale(b.var("x")?, -1.7)?;
                weighted(g, y, &c[0])
            },
            r,
        ),
        case(
            "gelu",
            &[("x", &[6])],
            &[&[6]],
            |g, b, c| {
                let y = g.gelu(b.var("x")?)?;
                weighted(g, y, &c[0])
            },
            r,
        ),
        case(
            "tanh",
            &[("x", &[6])],
            &[&[6]],
            |g, b, c| {
                let y = g.tanh(b.var("x")?)?;
                weighted(g, y, &c[0])
            },
            r,
        ),
        case(
            "layernorm",
            &[("x", &[3, 5]), ("gamma", &[5]), ("beta", &[5])],
            &[&[3, 5]],
            |g, b, c| {
                let y = g.layernorm(b.var("x")?, b.var("gamma")?, b.var("beta")?, 1e-5)?;
                weighted(g, y, &c[0])
            },
            r,
        ),
        case(
            "attention",
            &[("q", &[2, 3, 6]), ("k", &[2, 5, 6]), ("v", &[2, 5, 6])],
            &[&[2, 3, 6]],
            |g, b, c| {
                let y = g.attention(b.var("q")?, b.var("k")?, b.var("v")?, 2, false)?;
                weighted(g, y, &c[0])
            },
            r,
        ),
        case(
            "attention_causal",
            &[("q", &[1, 3, 6]), ("k", &[1, 4, 6]), ("v", &[1, 4, 6])],
            &[&[1, 3, 6]],
            |g, b, c| {
                let y = g.attention(b.var("q")?, b.var("k")?, b.var("v")?, 3, true)?;
                weighted(g, y, &c[0])
            },
            r,
        ),
        case(
            "embedding",
            &[("table", &[5, 3])],
            &[&[2, 2, 3]],
            |g, b, c| {
                let y = g.embedding(b.var("table")?, &[4, 0, 4, 2], &[2, 2, 3])?;
                weighted(g, y, &c[0])
            },
            r,
        ),
        case(
            "concat",
            &[("a", &[2, 3]), ("b", &[2, 2])],
            &[&[2, 5]],
            |g, b, c| {
                let y = g.concat(&[b.var("a")?, b.var("b")?], 1)?;
                weighted(g, y, &c[0])
            },
            r,
        ),
        case(
            "slice",
            &[("x", &[3, 4])],
            &[&[3, 2]],
            |g, b, c| {
                let y = g.slice(b.var("x")?, 1, 1, 2)?;
                weighted(g, y, &c[0])
            },
            r,
        ),
        case(
            "reshape",
            &[("x", &[2, 6])],
            &[&[3, 4]],
            |g, b, c| {
                let y = g.reshape(b.var("x")?, &[3, 4])?;
                weighted(g, y, &c[0])
            },
            r,
        ),
        case(
            "sum",
            &[("x", &[4])],
            &[&[4]],
            |g, b, c| {
                let w = g.input(c[0].clone());
                let p = g.mul(b.var("x")?, w)?;
                let t = g.tanh(p)?;
                g.sum(t)
            },
            r,
        ),
        case(
            "mean",
            &[("x", &[4])],
            &[&[4]],
            |g, b, c| {
                let w = g.input(c[0].clone());
                let p = g.mul(b.var("x")?, w)?;
                let t = g.tanh(p)?;
                g.mean(t)
            },
            r,
        ),
        case(
            "cross_entropy",
            &[("logits", &[3, 5])],
            &[],
            |g, b, _| g.cross_entropy(b.var("logits")?, &[1, 4, 0]),
            r,
        ),
        case(
            "bc_loss",
            &[("pred", &[2, 3])],
            &[&[2, 3]],
            |g, b, c| g.bc_loss(b.var("pred")?, &c[0]),
            r,
        ),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_registered_op_passes_gradcheck() {
        for seed in 0..3 {
            for case in registered_ops(seed) {
                let err = case.check(1e-5, seed).unwrap();
                assert!(err < 1e-4, "{} seed {seed}: {err}", case.name);
            }
        }
    }
}
