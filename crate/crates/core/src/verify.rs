//! Finite-difference gradient checks for the autodiff kernel.
//!
//! Each check wraps one op in a scalar probe `f = Σ w ⊙ op(inputs)` with a
//! fixed random `w`, differentiates it with the tape, and compares against
//! central differences of the forward pass alone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::Result;

pub const FD_EPS: f32 = 1e-3;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub op: &'static str,
    pub seed: u64,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over all inputs.
    pub rel_err: f64,
}

type OpFn = dyn Fn(&mut Graph<'static>, &[Var]) -> Result<Var>;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample::<f32, _>(StandardNormal))
}

/// Values bounded away from zero (keeps ReLU off its kink under ±ε).
fn randn_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| loop {
        let v: f32 = rng.sample(StandardNormal);
        if v.abs() > 0.05 {
            break v;
        }
    })
}

/// Distinct values per column with gaps far above ε (keeps max-pool argmax
/// stable under perturbation).
fn randn_separated(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = Tensor::zeros(&[rows, cols]);
    for j in 0..cols {
        let mut perm: Vec<usize> = (0..rows).collect();
        for i in (1..rows).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        for i in 0..rows {
            let jitter: f32 = rng.random_range(-0.02..0.02);
            t.data_mut()[i * cols + j] = perm[i] as f32 * 0.1 + jitter;
        }
    }
    t
}

fn probe(inputs: &[Tensor], weights: &[f32], op: &OpFn) -> Result<f64> {
    let mut g = Graph::detached();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let y = op(&mut g, &vars)?;
    Ok(g
        .data(y)
        .iter()
        .zip(weights)
        .map(|(a, b)| *a as f64 * *b as f64)
        .sum())
}

/// Runs one check: tape gradient of the probe versus central differences.
pub fn check_op(op_name: &'static str, seed: u64, inputs: Vec<Tensor>, op: &OpFn) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    // output size from a dry run
    let out_len = {
        let mut g = Graph::detached();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let y = op(&mut g, &vars)?;
        g.value(y).len()
    };
    let weights: Vec<f32> = (0..out_len)
        .map(|_| rng.sample::<f32, _>(StandardNormal) / (out_len as f32).sqrt())
        .collect();

    let mut g = Graph::detached();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let y = op(&mut g, &vars)?;
    let w = g.input(Tensor::new(g.shape(y), weights.clone())?);
    let prod = g.mul(y, w)?;
    let f = g.sum(prod);
    let grads = g.backward(f)?;

    let mut err2 = 0.0f64;
    let mut a2 = 0.0f64;
    let mut n2 = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for i in 0..inputs[k].len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += FD_EPS;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= FD_EPS;
            // the perturbed value is what f32 can represent, not x ± ε exactly
            let h = (plus[k].data()[i] - minus[k].data()[i]) as f64;
            let numeric = (probe(&plus, &weights, op)? - probe(&minus, &weights, op)?) / h;
            let a = analytic[i] as f64;
            err2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
    }
    let denom = a2.sqrt().max(n2.sqrt()).max(1e-12);
    Ok(GradCheck {
        op: op_name,
        seed,
        rel_err: err2.sqrt() / denom,
    })
}

/// Gradient checks for every differentiable op, one per seed.
pub fn autodiff_suite(seeds: &[u64]) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;

        out.push(check_op("matmul", seed, vec![randn(r, &[3, 4]), randn(r, &[4, 5])], &|g, v| {
            g.matmul(v[0], v[1])
        })?);
        out.push(check_op("add", seed, vec![randn(r, &[3, 4]), randn(r, &[3, 4])], &|g, v| {
            g.add(v[0], v[1])
        })?);
        out.push(check_op("sub", seed, vec![randn(r, &[3, 4]), randn(r, &[3, 4])], &|g, v| {
            g.sub(v[0], v[1])
        })?);
        out.push(check_op("mul", seed, vec![randn(r, &[2, 5]), randn(r, &[2, 5])], &|g, v| {
            g.mul(v[0], v[1])
        })?);
        out.push(check_op("scale", seed, vec![randn(r, &[2, 3])], &|g, v| Ok(g.scale(v[0], -1.7)))?);
        out.push(check_op("add_const", seed, vec![randn(r, &[2, 3])], &|g, v| {
            g.add_const(v[0], &Tensor::full(&[2, 3], 0.25))
        })?);
        out.push(check_op("add_row_bias", seed, vec![randn(r, &[4, 3]), randn(r, &[3])], &|g, v| {
            g.add_row_bias(v[0], v[1])
        })?);
        out.push(check_op("add_col_bias", seed, vec![randn(r, &[3, 5]), randn(r, &[3])], &|g, v| {
            g.add_col_bias(v[0], v[1])
        })?);
        out.push(check_op("mul_col", seed, vec![randn(r, &[3, 5]), randn(r, &[3])], &|g, v| {
            g.mul_col(v[0], v[1])
        })?);
        out.push(check_op("relu", seed, vec![randn_away_from_zero(r, &[4, 4])], &|g, v| Ok(g.relu(v[0])))?);
        out.push(check_op("transpose", seed, vec![randn(r, &[2, 5])], &|g, v| Ok(g.transpose(v[0])))?);
        out.push(check_op("reshape", seed, vec![randn(r, &[2, 6])], &|g, v| g.reshape(v[0], &[3, 4]))?);
        out.push(check_op(
            "layer_norm",
            seed,
            vec![randn(r, &[3, 8]), randn(r, &[8]), randn(r, &[8])],
            &|g, v| g.layer_norm(v[0], v[1], v[2]),
        )?);
        out.push(check_op("softmax_rows", seed, vec![randn(r, &[3, 5])], &|g, v| g.softmax(v[0], 1))?);
        out.push(check_op("softmax_cols", seed, vec![randn(r, &[4, 3])], &|g, v| g.softmax(v[0], 0))?);
        out.push(check_op("slice_cols", seed, vec![randn(r, &[3, 6])], &|g, v| g.slice_cols(v[0], 1, 4))?);
        out.push(check_op("slice_rows", seed, vec![randn(r, &[5, 2])], &|g, v| g.slice_rows(v[0], 2, 5))?);
        out.push(check_op("concat_cols", seed, vec![randn(r, &[3, 2]), randn(r, &[3, 4])], &|g, v| {
            g.concat_cols(&[v[0], v[1]])
        })?);
        out.push(check_op("concat_rows", seed, vec![randn(r, &[1, 3]), randn(r, &[2, 3])], &|g, v| {
            g.concat_rows(&[v[0], v[1]])
        })?);
        out.push(check_op(
            "conv1d",
            seed,
            vec![randn(r, &[3, 9]), randn(r, &[4, 3, 3]), randn(r, &[4])],
            &|g, v| g.conv1d(v[0], v[1], v[2], 1, 1),
        )?);
        out.push(check_op(
            "conv1d_strided",
            seed,
            vec![randn(r, &[2, 11]), randn(r, &[3, 2, 3]), randn(r, &[3])],
            &|g, v| g.conv1d(v[0], v[1], v[2], 2, 1),
        )?);
        out.push(check_op(
            "conv1d_seg",
            seed,
            vec![randn(r, &[2, 22]), randn(r, &[3, 2, 3]), randn(r, &[3])],
            &|g, v| g.conv1d_seg(v[0], v[1], v[2], 2, 1, 2),
        )?);
        out.push(check_op("add_seg_bias", seed, vec![randn(r, &[3, 8]), randn(r, &[2, 3])], &|g, v| {
            g.add_seg_bias(v[0], v[1], 2)
        })?);
        out.push(check_op("mul_seg", seed, vec![randn(r, &[3, 8]), randn(r, &[2, 3])], &|g, v| {
            g.mul_seg(v[0], v[1], 2)
        })?);
        out.push(check_op("upsample_nearest_seg", seed, vec![randn(r, &[2, 6])], &|g, v| {
            g.upsample_nearest_seg(v[0], 5, 2)
        })?);
        out.push(check_op("max_pool_global", seed, vec![randn_separated(r, 6, 4)], &|g, v| {
            g.max_pool_global(v[0], 4)
        })?);
        out.push(check_op("mean_rows", seed, vec![randn(r, &[5, 3])], &|g, v| Ok(g.mean_rows(v[0])))?);
        out.push(check_op("upsample_nearest", seed, vec![randn(r, &[2, 3])], &|g, v| {
            g.upsample_nearest(v[0], 6)
        })?);
        out.push(check_op(
            "multi_head_attention",
            seed,
            vec![randn(r, &[3, 8]), randn(r, &[5, 8]), randn(r, &[5, 8])],
            &|g, v| g.multi_head_attention(v[0], v[1], v[2], 2, Some(4)),
        )?);
        out.push(check_op("sum", seed, vec![randn(r, &[2, 3])], &|g, v| Ok(g.sum(v[0])))?);
        out.push(check_op("sum_squares", seed, vec![randn(r, &[2, 3])], &|g, v| Ok(g.sum_squares(v[0])))?);
        let target = r.random_range(0..5);
        out.push(check_op("cross_entropy", seed, vec![randn(r, &[1, 5])], &move |g, v| {
            g.cross_entropy(v[0], target)
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_on_one_seed() {
        for c in autodiff_suite(&[11]).unwrap() {
            assert!(c.rel_err < 1e-3, "{} seed {}: rel err {:.2e}", c.op, c.seed, c.rel_err);
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // the probe itself must be able to fail: compare relu's tape gradient
        // against a function whose forward is relu but shifted
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn_away_from_zero(&mut rng, &[3, 3]);
        let c = check_op("scaled", 0, vec![x], &|g, v| {
            // forward of 2x with a gradient of 1x: detach half the signal
            let y = g.scale(v[0], 1.0);
            let z = g.value(v[0]).clone();
            let c = g.input(z);
            g.add(y, c)
        })
        .unwrap();
        assert!(c.rel_err > 0.1, "{}", c.rel_err);
    }
}
