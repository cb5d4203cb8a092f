//! Property-based invariants for the tensor ops and checkpoint format.

use ctscribe_tensor::{checkpoint, Parameter, Tensor};
use proptest::prelude::*;

/// Shapes of rank 1..=4 with at most 64 elements.
fn small_shape() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..5, 1..=4)
}

fn tensor_for_shape(shape: Vec<usize>) -> impl Strategy<Value = (Vec<usize>, Vec<f64>)> {
    let numel: usize = shape.iter().product();
    (
        Just(shape),
        prop::collection::vec(-100.0f64..100.0, numel..=numel),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn permute_then_inverse_is_bitwise_identity(
        (shape, data) in small_shape().prop_flat_map(tensor_for_shape),
        perm_seed in 0usize..24,
    ) {
        let rank = shape.len();
        // Lehmer-style permutation from the seed.
        let mut axes: Vec<usize> = (0..rank).collect();
        let mut s = perm_seed;
        for i in (1..rank).rev() {
            axes.swap(i, s % (i + 1));
            s /= i + 1;
        }
        let mut inverse = vec![0usize; rank];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }

        let t = Tensor::from_vec(data.clone(), &shape).unwrap();
        let round = t.permute(&axes).unwrap().permute(&inverse).unwrap();
        prop_assert_eq!(round.shape(), &shape[..]);
        let bits: Vec<u64> = round.to_vec().iter().map(|v| v.to_bits()).collect();
        let orig: Vec<u64> = data.iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(bits, orig);
    }

    #[test]
    fn reshape_round_trip_is_bitwise_identity(
        (shape, data) in small_shape().prop_flat_map(tensor_for_shape),
    ) {
        let numel: usize = shape.iter().product();
        let t = Tensor::from_vec(data.clone(), &shape).unwrap();
        let round = t.reshape(&[numel]).unwrap().reshape(&shape).unwrap();
        let bits: Vec<u64> = round.to_vec().iter().map(|v| v.to_bits()).collect();
        let orig: Vec<u64> = data.iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(bits, orig);
    }

    #[test]
    fn avg_pool3d_of_dyadic_constant_is_exact(
        numerator in -1024i32..=1024,
        k in 1usize..=3,
        d1 in 1usize..=2,
        d2 in 1usize..=2,
        d3 in 1usize..=2,
    ) {
        // Constants on a 1/256 grid keep every k³-term partial sum exact, so
        // pooling a constant field must reproduce it bit for bit.
        let c = f64::from(numerator) / 256.0;
        let shape = [1, 1, d1 * k, d2 * k, d3 * k];
        let numel: usize = shape.iter().product();
        let t = Tensor::from_vec(vec![c; numel], &shape).unwrap();
        let pooled = t.avg_pool3d(k).unwrap();
        prop_assert_eq!(pooled.shape(), &[1, 1, d1, d2, d3]);
        for v in pooled.to_vec() {
            prop_assert_eq!(v.to_bits(), c.to_bits());
        }
    }

    #[test]
    fn avg_pool3d_of_any_constant_is_close(
        c in -1000.0f64..1000.0,
        k in 1usize..=4,
    ) {
        let shape = [1, 2, k, k, k];
        let numel: usize = shape.iter().product();
        let t = Tensor::from_vec(vec![c; numel], &shape).unwrap();
        for v in t.avg_pool3d(k).unwrap().to_vec() {
            prop_assert!((v - c).abs() <= 1e-12 * c.abs().max(1.0));
        }
    }

    #[test]
    fn narrow_concat_reassembles_original(
        (shape, data) in small_shape().prop_flat_map(tensor_for_shape),
        axis_pick in 0usize..4,
        cut_pick in 0usize..16,
    ) {
        let axis = axis_pick % shape.len();
        let dim = shape[axis];
        let cut = 1 + cut_pick % dim.max(1);
        prop_assume!(cut < dim || dim == cut);

        let t = Tensor::from_vec(data.clone(), &shape).unwrap();
        let round = if cut == dim {
            t.narrow(axis, 0, dim).unwrap()
        } else {
            let head = t.narrow(axis, 0, cut).unwrap();
            let tail = t.narrow(axis, cut, dim - cut).unwrap();
            Tensor::concat(&[&head, &tail], axis).unwrap()
        };
        prop_assert_eq!(round.shape(), &shape[..]);
        let bits: Vec<u64> = round.to_vec().iter().map(|v| v.to_bits()).collect();
        let orig: Vec<u64> = data.iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(bits, orig);
    }

    #[test]
    fn elementwise_ops_commute(
        (shape, data_a) in small_shape().prop_flat_map(tensor_for_shape),
        seed in any::<u64>(),
    ) {
        // add/mul are symmetric definitions; swapping operands must be
        // bitwise identical.
        let numel: usize = shape.iter().product();
        let mut s = seed | 1;
        let data_b: Vec<f64> = (0..numel)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 33) as f64) / f64::from(u32::MAX) - 0.5
            })
            .collect();
        let a = Tensor::from_vec(data_a, &shape).unwrap();
        let b = Tensor::from_vec(data_b, &shape).unwrap();
        prop_assert_eq!(a.add(&b).unwrap().to_vec(), b.add(&a).unwrap().to_vec());
        prop_assert_eq!(a.mul(&b).unwrap().to_vec(), b.mul(&a).unwrap().to_vec());
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise(
        (shape, data) in small_shape().prop_flat_map(tensor_for_shape),
        frozen in any::<bool>(),
    ) {
        let values: Vec<f32> = data.iter().map(|&v| v as f32).collect();
        let p = Parameter::new(
            "prop.param",
            Tensor::from_vec(values.clone(), &shape).unwrap(),
        );
        if frozen {
            p.freeze();
        }
        let bytes = checkpoint::to_bytes(std::slice::from_ref(&p));
        let entries = checkpoint::from_bytes(&bytes).unwrap();
        let restored = Parameter::new("prop.param", Tensor::<f32>::zeros(&shape));
        checkpoint::load_into(std::slice::from_ref(&restored), &entries).unwrap();

        let orig_bits: Vec<u32> = values.iter().map(|v| v.to_bits()).collect();
        let back_bits: Vec<u32> =
            restored.tensor().to_vec().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(orig_bits, back_bits);
        prop_assert_eq!(restored.is_frozen(), frozen);
    }
}
