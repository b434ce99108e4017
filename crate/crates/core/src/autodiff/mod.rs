//! Minimal reverse-mode automatic differentiation over `f32` matrices.
//!
//! The closed set of ops covers what the flow and scorer networks need:
//! matmul, elementwise arithmetic, bias adds, ReLU, layer norm, softmax,
//! 1D convolution, masked global max pooling, multi-head attention and the
//! training losses. There is no general broadcasting; the only broadcast
//! forms are row/column bias adds and per-channel scaling.

mod graph;
pub mod layers;
mod params;
mod tensor;

pub use graph::{Grads, Graph, Var};
pub use params::{AdamConfig, Param, ParamGrads, ParamStore};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Sinusoidal embedding of flow time `tau`.
///
/// Channels are interleaved `(sin, cos)` pairs at frequencies spaced
/// geometrically from 1 down to 1e-4, applied to `1000 * tau`.
pub fn sinusoidal_embed(tau: f32, dim: usize) -> Result<Vec<f32>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!(
            "sinusoidal embedding needs a positive even dim, got {dim}"
        )));
    }
    let half = dim / 2;
    let x = 1000.0 * tau as f64;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let exponent = if half > 1 {
            i as f64 / (half - 1) as f64
        } else {
            0.0
        };
        let freq = 1e4f64.powf(-exponent);
        out.push((x * freq).sin() as f32);
        out.push((x * freq).cos() as f32);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_at_zero() {
        let e = sinusoidal_embed(0.0, 16).unwrap();
        for p in e.chunks(2) {
            assert_eq!(p, [0.0, 1.0]);
        }
    }

    #[test]
    fn embedding_range_and_separation() {
        let es: Vec<_> = [0.0, 0.5, 1.0]
            .iter()
            .map(|&t| sinusoidal_embed(t, 64).unwrap())
            .collect();
        for e in &es {
            assert!(e.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        for i in 0..3 {
            for j in i + 1..3 {
                let d: f32 = es[i]
                    .iter()
                    .zip(&es[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f32>()
                    .sqrt();
                assert!(d > 0.1, "tau pair ({i},{j}) too close: {d}");
            }
        }
    }

    #[test]
    fn odd_dim_rejected() {
        assert!(matches!(sinusoidal_embed(0.3, 7), Err(Error::Config(_))));
    }

    #[test]
    fn segmented_ops_match_per_segment_ops() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        store.init_uniform("w", &[3, 2, 3], 6, &mut rng).unwrap();
        store.init_uniform("b", &[3], 6, &mut rng).unwrap();
        let a: Vec<f32> = (0..14).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..14).map(|i| (i as f32 * 0.71).cos()).collect();
        let run = |g: &mut Graph<'_>, x: Vec<f32>, segs: usize| {
            let l = x.len() / 2;
            let x = g.input(Tensor::new(&[2, l], x).unwrap());
            let (w, bias) = (g.param("w").unwrap(), g.param("b").unwrap());
            let y = g.conv1d_seg(x, w, bias, 2, 1, segs).unwrap();
            let y = g.upsample_nearest_seg(y, 7, segs).unwrap();
            g.data(y).to_vec()
        };
        let mut g = Graph::inference(&store);
        let ya = run(&mut g, a.clone(), 1);
        let yb = run(&mut g, b.clone(), 1);
        // [2 × 14] holding both sequences side by side
        let mut both = Vec::new();
        for c in 0..2 {
            both.extend_from_slice(&a[c * 7..(c + 1) * 7]);
            both.extend_from_slice(&b[c * 7..(c + 1) * 7]);
        }
        let y = run(&mut g, both, 2);
        for c in 0..3 {
            assert_eq!(&y[c * 14..c * 14 + 7], &ya[c * 7..(c + 1) * 7]);
            assert_eq!(&y[c * 14 + 7..(c + 1) * 14], &yb[c * 7..(c + 1) * 7]);
        }
    }
}
