//! Elementwise arithmetic with size-1 broadcasting and axis-mean reductions.

use super::Tensor;
use crate::error::{CoreError, CoreResult};

/// Elementwise operation kinds. `Sqrt` and `Square` are unary; the rest take
/// two operands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Sqrt,
    Square,
}

impl ElementwiseOp {
    pub fn is_unary(self) -> bool {
        matches!(self, ElementwiseOp::Sqrt | ElementwiseOp::Square)
    }
}

/// Applies `op` elementwise. Binary operands must have equal rank; along each
/// axis the sizes must match or one of them must be 1, which is stretched.
/// There is no implicit rank promotion.
pub fn elementwise(op: ElementwiseOp, a: &Tensor, b: Option<&Tensor>) -> CoreResult<Tensor> {
    match (op.is_unary(), b) {
        (true, None) => Ok(match op {
            ElementwiseOp::Sqrt => a.map(f64::sqrt),
            ElementwiseOp::Square => a.map(|v| v * v),
            _ => unreachable!(),
        }),
        (true, Some(_)) => Err(CoreError::Argument(format!(
            "{op:?} is unary but a second operand was supplied"
        ))),
        (false, None) => Err(CoreError::Argument(format!(
            "{op:?} needs a second operand"
        ))),
        (false, Some(b)) => {
            let f = match op {
                ElementwiseOp::Add => |x: f64, y: f64| x + y,
                ElementwiseOp::Sub => |x: f64, y: f64| x - y,
                ElementwiseOp::Mul => |x: f64, y: f64| x * y,
                ElementwiseOp::Div => |x: f64, y: f64| x / y,
                ElementwiseOp::Max => f64::max,
                _ => unreachable!(),
            };
            broadcast_zip(a, b, f)
        }
    }
}

/// Broadcast shape of two equal-rank shapes, or a shape error.
fn broadcast_shape(a: &[usize], b: &[usize]) -> CoreResult<Vec<usize>> {
    if a.len() != b.len() {
        return Err(CoreError::Shape(format!(
            "broadcast requires equal ranks, got {a:?} and {b:?}"
        )));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            if x == y || y == 1 {
                Ok(x)
            } else if x == 1 {
                Ok(y)
            } else {
                Err(CoreError::Shape(format!(
                    "cannot broadcast {a:?} with {b:?}"
                )))
            }
        })
        .collect()
}

/// Applies a binary function under broadcasting.
pub fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> CoreResult<Tensor> {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Tensor::from_vec(a.shape(), data);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let rank = out_shape.len();
    let stride_for = |shape: &[usize]| {
        let mut strides = vec![0usize; rank];
        let mut acc = 1;
        for axis in (0..rank).rev() {
            strides[axis] = if shape[axis] == 1 { 0 } else { acc };
            acc *= shape[axis];
        }
        strides
    };
    let sa = stride_for(a.shape());
    let sb = stride_for(b.shape());
    let total: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut index = vec![0usize; rank];
    let (da, db) = (a.data(), b.data());
    for _ in 0..total {
        let (mut ia, mut ib) = (0, 0);
        for axis in 0..rank {
            ia += index[axis] * sa[axis];
            ib += index[axis] * sb[axis];
        }
        out.push(f(da[ia], db[ib]));
        for axis in (0..rank).rev() {
            index[axis] += 1;
            if index[axis] < out_shape[axis] {
                break;
            }
            index[axis] = 0;
        }
    }
    Tensor::from_vec(&out_shape, out)
}

/// Mean over the given axes. Reduced axes are kept with size 1 so the result
/// broadcasts back against the input.
pub fn reduce_mean_over(t: &Tensor, axes: &[usize]) -> CoreResult<Tensor> {
    let rank = t.rank();
    let mut reduce = vec![false; rank];
    for &axis in axes {
        if axis >= rank {
            return Err(CoreError::Argument(format!(
                "axis {axis} out of range for rank {rank}"
            )));
        }
        if reduce[axis] {
            return Err(CoreError::Argument(format!("axis {axis} listed twice")));
        }
        reduce[axis] = true;
    }
    let out_shape: Vec<usize> = t
        .shape()
        .iter()
        .enumerate()
        .map(|(axis, &dim)| if reduce[axis] { 1 } else { dim })
        .collect();
    let count: usize = t
        .shape()
        .iter()
        .enumerate()
        .filter(|(axis, _)| reduce[*axis])
        .map(|(_, &dim)| dim)
        .product();
    let mut sums = Tensor::zeros(&out_shape);
    let mut out_strides = vec![0usize; rank];
    let mut acc = 1;
    for axis in (0..rank).rev() {
        out_strides[axis] = if out_shape[axis] == 1 { 0 } else { acc };
        acc *= out_shape[axis];
    }
    let mut index = vec![0usize; rank];
    let sums_data = sums.data_mut();
    for &v in t.data() {
        let mut io = 0;
        for axis in 0..rank {
            io += index[axis] * out_strides[axis];
        }
        sums_data[io] += v;
        for axis in (0..rank).rev() {
            index[axis] += 1;
            if index[axis] < t.shape()[axis] {
                break;
            }
            index[axis] = 0;
        }
    }
    let scale = 1.0 / count as f64;
    for v in sums.data_mut() {
        *v *= scale;
    }
    Ok(sums)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mean_of_two_values() {
        let t = Tensor::from_vec(&[2], vec![1.0, 3.0]).unwrap();
        let m = reduce_mean_over(&t, &[0]).unwrap();
        assert_eq!(m.shape(), &[1]);
        assert_eq!(m.data(), &[2.0]);
    }

    #[test]
    fn mean_of_singleton_is_identity() {
        let t = Tensor::from_vec(&[1], vec![5.0]).unwrap();
        let m = reduce_mean_over(&t, &[0]).unwrap();
        assert_eq!(m.data(), &[5.0]);
    }

    #[test]
    fn mean_over_two_axes_matches_loop_reference() {
        let t = Tensor::from_vec(&[2, 2, 2], (1..=8).map(|v| v as f64).collect()).unwrap();
        let m = reduce_mean_over(&t, &[0, 2]).unwrap();
        assert_eq!(m.shape(), &[1, 2, 1]);
        // Loop reference: average over axes 0 and 2 for each middle index.
        let mut expected = [0.0f64; 2];
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    expected[j] += t.at(&[i, j, k]) / 4.0;
                }
            }
        }
        assert_eq!(m.at(&[0, 0, 0]), expected[0]);
        assert_eq!(m.at(&[0, 1, 0]), expected[1]);
    }

    #[test]
    fn elementwise_max_and_sqrt() {
        let a = Tensor::from_vec(&[2], vec![1.0, 5.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![3.0, 2.0]).unwrap();
        let m = elementwise(ElementwiseOp::Max, &a, Some(&b)).unwrap();
        assert_eq!(m.data(), &[3.0, 5.0]);
        let four = Tensor::from_vec(&[1], vec![4.0]).unwrap();
        let s = elementwise(ElementwiseOp::Sqrt, &four, None).unwrap();
        assert_eq!(s.data(), &[2.0]);
    }

    #[test]
    fn broadcast_add_matches_loop_reference() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[1, 2], vec![10.0, 20.0]).unwrap();
        let sum = elementwise(ElementwiseOp::Add, &a, Some(&b)).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(sum.at(&[i, j]), a.at(&[i, j]) + b.at(&[0, j]));
            }
        }
    }

    #[test]
    fn broadcast_rejects_rank_promotion() {
        let a = Tensor::zeros(&[2, 2]);
        let b = Tensor::zeros(&[2]);
        let err = elementwise(ElementwiseOp::Add, &a, Some(&b)).unwrap_err();
        assert!(matches!(err, crate::error::CoreError::Shape(_)), "got {err}");
    }

    #[test]
    fn broadcast_rejects_mismatched_non_unit_axes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 2]);
        assert!(elementwise(ElementwiseOp::Add, &a, Some(&b)).is_err());
    }

    proptest! {
        #[test]
        fn mean_subtract_centers_any_tensor(
            values in proptest::collection::vec(-100.0f64..100.0, 1..48),
        ) {
            let n = values.len();
            let t = Tensor::from_vec(&[n], values).unwrap();
            let m = reduce_mean_over(&t, &[0]).unwrap();
            let centered = elementwise(ElementwiseOp::Sub, &t, Some(&m)).unwrap();
            let residual = reduce_mean_over(&centered, &[0]).unwrap().data()[0];
            prop_assert!(residual.abs() < 1e-12, "residual mean {residual}");
        }

        #[test]
        fn broadcast_add_agrees_with_explicit_indexing(
            rows in 1usize..4, cols in 1usize..4, seed in 0u64..1000,
        ) {
            let mut rng = crate::tensor::Rng::new(seed);
            let a = rng.normal_tensor(&[rows, cols], 0.0, 1.0);
            let b = rng.normal_tensor(&[rows, 1], 0.0, 1.0);
            let sum = elementwise(ElementwiseOp::Add, &a, Some(&b)).unwrap();
            for i in 0..rows {
                for j in 0..cols {
                    prop_assert_eq!(sum.at(&[i, j]), a.at(&[i, j]) + b.at(&[i, 0]));
                }
            }
        }
    }
}
