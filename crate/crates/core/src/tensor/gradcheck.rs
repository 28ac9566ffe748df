//! Central finite-difference checks of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    /// Largest per-input relative error `‖a−n‖ / max(‖a‖, ‖n‖)`.
    pub max_rel_error: f64,
}

/// Relative error between analytic and numeric gradients; two gradients that
/// are both numerically zero count as agreeing.
pub fn relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    let diff = analytic.distance(numeric);
    let scale = analytic.frobenius_norm().max(numeric.frobenius_norm());
    if scale < 1e-8 {
        return diff;
    }
    diff / scale
}

/// Compares `backward` against central differences for every input.
///
/// `build` receives trainable leaves for `inputs` (in order) and must return a
/// scalar. It is re-run on fresh tapes for each perturbation, so it has to be
/// a pure function of the input values.
pub fn check<F>(name: &str, inputs: &[Tensor<f64>], step: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut worst: f64 = 0.0;
    let mut values = inputs.to_vec();
    for (idx, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[idx].shape()));
        let mut numeric = Tensor::zeros(inputs[idx].shape());
        for k in 0..inputs[idx].numel() {
            let orig = values[idx].data()[k];
            values[idx].data_mut()[k] = orig + step;
            let plus = eval(&values)?;
            values[idx].data_mut()[k] = orig - step;
            let minus = eval(&values)?;
            values[idx].data_mut()[k] = orig;
            numeric.data_mut()[k] = (plus - minus) / (2.0 * step);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(GradCheck {
        name: name.to_string(),
        max_rel_error: worst,
    })
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Weighted sum `Σ w ⊙ y` with fixed random weights so every output element
/// contributes to the checked scalar.
fn project(tape: &Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(randn(&shape, &mut rng));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// Gradient check of every differentiable op on small random shapes.
pub fn op_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = DEFAULT_STEP;
    let mut out = Vec::new();

    let a = randn(&[3, 4], &mut rng);
    let b = randn(&[4, 2], &mut rng);
    out.push(check("matmul", &[a, b], h, |t, v| {
        let y = t.matmul(v[0], v[1])?;
        project(t, y, 1)
    })?);

    let a = randn(&[2, 3], &mut rng);
    let b = randn(&[2, 3], &mut rng);
    out.push(check("add", &[a.clone(), b.clone()], h, |t, v| {
        let y = t.add(v[0], v[1])?;
        project(t, y, 2)
    })?);
    out.push(check("sub", &[a.clone(), b.clone()], h, |t, v| {
        let y = t.sub(v[0], v[1])?;
        project(t, y, 3)
    })?);
    out.push(check("mul", &[a.clone(), b.clone()], h, |t, v| {
        let y = t.mul(v[0], v[1])?;
        project(t, y, 4)
    })?);
    out.push(check("minimum", &[a.clone(), b], h, |t, v| {
        let y = t.minimum(v[0], v[1])?;
        project(t, y, 5)
    })?);
    out.push(check("scale", &[a.clone()], h, |t, v| {
        let y = t.scale(v[0], -1.7);
        project(t, y, 6)
    })?);

    let x = randn(&[3, 4], &mut rng);
    let bias = randn(&[4], &mut rng);
    out.push(check("add_row", &[x.clone(), bias], h, |t, v| {
        let y = t.add_row(v[0], v[1])?;
        project(t, y, 7)
    })?);
    out.push(check("gelu", &[x.clone()], h, |t, v| {
        let y = t.gelu(v[0]);
        project(t, y, 8)
    })?);
    out.push(check("exp", &[x.map(|v| v * 0.5)], h, |t, v| {
        let y = t.exp(v[0]);
        project(t, y, 9)
    })?);
    // keep entries away from the clamp corners so the difference quotient is smooth
    let xc = Tensor::from_vec(vec![0.1, 0.5, 0.95, 1.05, 1.3, 1.9, -0.4, 0.85]);
    out.push(check("clamp", &[xc], h, |t, v| {
        let y = t.clamp(v[0], 0.8, 1.2);
        project(t, y, 10)
    })?);

    let gain = randn(&[4], &mut rng);
    let lb = randn(&[4], &mut rng);
    out.push(check("layer_norm_lastdim", &[x.clone(), gain, lb], h, |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
        project(t, y, 11)
    })?);

    let table = randn(&[6, 3], &mut rng);
    out.push(check("embedding_gather", &[table], h, |t, v| {
        let y = t.gather(v[0], &[4, 1, 4, 0])?;
        project(t, y, 12)
    })?);

    let p = randn(&[2, 3], &mut rng);
    let q = randn(&[3, 3], &mut rng);
    out.push(check("concat_rows", &[p.clone(), q], h, |t, v| {
        let y = t.concat_rows(&[v[0], v[1]])?;
        project(t, y, 13)
    })?);
    let r = randn(&[2, 2], &mut rng);
    out.push(check("concat_cols", &[p.clone(), r], h, |t, v| {
        let y = t.concat_cols(&[v[0], v[1]])?;
        project(t, y, 14)
    })?);
    out.push(check("slice_rows", &[x.clone()], h, |t, v| {
        let y = t.slice_rows(v[0], 1, 2)?;
        project(t, y, 15)
    })?);
    out.push(check("slice_cols", &[x.clone()], h, |t, v| {
        let y = t.slice_cols(v[0], 1, 2)?;
        project(t, y, 16)
    })?);
    out.push(check("transpose2d", &[x.clone()], h, |t, v| {
        let y = t.transpose(v[0])?;
        project(t, y, 17)
    })?);
    out.push(check("sum", &[x.clone()], h, |t, v| {
        let s = t.sum(v[0]);
        Ok(t.scale(s, 0.3))
    })?);
    out.push(check("mean", &[x.clone()], h, |t, v| {
        let s = t.mean(v[0]);
        Ok(t.mul(s, s)?)
    })?);
    out.push(check("softmax_lastdim", &[x.clone()], h, |t, v| {
        let y = t.softmax_lastdim(v[0]);
        project(t, y, 18)
    })?);
    let sq = randn(&[4, 4], &mut rng);
    out.push(check("softmax_causal", &[sq], h, |t, v| {
        let y = t.softmax_causal(v[0], 0);
        project(t, y, 19)
    })?);
    let logits = randn(&[4, 7], &mut rng);
    let targets: Vec<usize> = (0..4).map(|_| rng.gen_range(0..7)).collect();
    let tg = targets.clone();
    out.push(check("cross_entropy_from_logits", &[logits.clone()], h, move |t, v| {
        t.cross_entropy(v[0], &tg)
    })?);
    out.push(check("log_softmax_pick", &[logits], h, move |t, v| {
        let y = t.log_softmax_pick(v[0], &targets)?;
        project(t, y, 20)
    })?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_finite_differences() {
        for seed in [1, 2, 3] {
            for r in op_suite(seed).unwrap() {
                assert!(r.max_rel_error < 1e-4, "{} rel err {}", r.name, r.max_rel_error);
            }
        }
    }

    #[test]
    fn relative_error_flags_disagreement() {
        let a = Tensor::from_vec(vec![1.0, 2.0]);
        let n = Tensor::from_vec(vec![1.0, 2.5]);
        assert!(relative_error(&a, &n) > 0.1);
    }
}
