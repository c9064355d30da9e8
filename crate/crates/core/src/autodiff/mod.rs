//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every op checks shapes up front and rejects non-finite results. Only a
//! rank-0 right operand broadcasts; anything else must match exactly.
//!
//! [`Tensor`]: crate::tensor::Tensor

mod graph;
pub(crate) mod kernels;

pub use graph::{sinusoidal_embedding, Activation, Gradients, Graph, Var};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[3.0, 4.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i3 = g.constant(Tensor::eye(3));
        let v = g.constant(t(&[3, 1], &[0.5, -2.0, 7.0]));
        let r = g.matmul(i3, v).unwrap();
        assert_eq!(g.value(r).data(), &[0.5, -2.0, 7.0]);
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn([2, 3, 5, 6], &mut rng);
        // Co = Ci = 3, 3x3 kernel with a centred delta on the diagonal channel pairs.
        let mut w = Tensor::zeros([3, 3, 3, 3]);
        for c in 0..3 {
            w.data_mut()[((c * 3 + c) * 3 + 1) * 3 + 1] = 1.0;
        }
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w);
        let y = g.conv2d(xv, wv, None, 1, 1).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn quadratic_gradient() {
        let mut g = Graph::new();
        let x = g.variable(t(&[2], &[1.0, -2.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let loss = g.scale(s, 0.5).unwrap();
        assert_eq!(g.gradient(loss, x).unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.variable(t(&[3], &[1.0, 2.0, 3.0]));
        let zero = g.scale(x, 0.0).unwrap();
        let c = g.constant(Tensor::scalar(4.0));
        let s = g.sum(zero).unwrap();
        let loss = g.add(s, c).unwrap();
        assert_eq!(g.gradient(loss, x).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(g.add(a, b).is_err());
        let m = g.constant(t(&[1, 2], &[1.0, 2.0]));
        assert!(g.add(a, m).is_err());
    }

    #[test]
    fn non_finite_is_rejected() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1], &[1e300]));
        assert!(g.mul(a, a).is_err());
    }

    #[test]
    fn gradient_rejects_foreign_or_constant_vars() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1], &[1.0]));
        let s = g.sum(x).unwrap();
        assert!(g.gradient(s, x).is_err());
        let mut other = Graph::new();
        let y = other.variable(t(&[1], &[1.0]));
        assert!(g.gradient(s, y).is_err());
    }

    #[test]
    fn graph_reusable_for_second_wrt() {
        let mut g = Graph::new();
        let a = g.variable(t(&[2], &[1.0, 2.0]));
        let b = g.variable(t(&[2], &[3.0, 5.0]));
        let p = g.mul(a, b).unwrap();
        let l = g.sum(p).unwrap();
        assert_eq!(g.gradient(l, a).unwrap().data(), &[3.0, 5.0]);
        assert_eq!(g.gradient(l, b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn embedding_at_zero() {
        let e = sinusoidal_embedding(&[0.0], 8).unwrap();
        assert_eq!(&e.data()[..4], &[0.0; 4]);
        assert_eq!(&e.data()[4..], &[1.0; 4]);
        assert!(sinusoidal_embedding(&[1.0], 7).is_err());
    }

    #[test]
    fn upsample_preserves_constants() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full([1, 2, 3, 3], 0.75));
        let y = g.upsample_bilinear(x, 8, 8).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 0.75).abs() < 1e-15));
    }
}
