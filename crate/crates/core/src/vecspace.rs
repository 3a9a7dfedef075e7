//! Embedding vectors and the two geometric primitives used throughout:
//! length normalization and cosine distance.

use ndarray::{Array1, ArrayView1};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A fixed-dimension real embedding with finite components.
#[derive(Debug, Clone, PartialEq)]
pub struct IVector<T> {
    values: Array1<T>,
}

impl<T: Scalar> IVector<T> {
    pub fn new(values: Array1<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Shape("i-vector must have at least one component".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("i-vector component {i}")));
        }
        Ok(Self { values })
    }

    pub fn from_vec(values: Vec<T>) -> Result<Self> {
        Self::new(Array1::from(values))
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn view(&self) -> ArrayView1<'_, T> {
        self.values.view()
    }

    pub fn as_array(&self) -> &Array1<T> {
        &self.values
    }

    pub fn into_array(self) -> Array1<T> {
        self.values
    }

    pub fn norm(&self) -> T {
        l2_norm(self.view())
    }

    pub fn scaled(&self, factor: T) -> Result<Self> {
        Self::new(&self.values * factor)
    }

    pub fn cast<U: Scalar>(&self) -> IVector<U> {
        IVector {
            values: self.values.mapv(|v| U::from_f64_lossy(v.to_f64_lossy())),
        }
    }
}

pub(crate) fn l2_norm<T: Scalar>(v: ArrayView1<'_, T>) -> T {
    v.dot(&v).sqrt()
}

/// Scales `v` to unit L2 norm.
pub fn length_normalize<T: Scalar>(v: &IVector<T>) -> Result<IVector<T>> {
    normalize_view(v.view()).map(|values| IVector { values })
}

pub(crate) fn normalize_view<T: Scalar>(v: ArrayView1<'_, T>) -> Result<Array1<T>> {
    let norm = l2_norm(v);
    if norm == T::zero() {
        return Err(Error::ZeroVector);
    }
    if !norm.is_finite() {
        return Err(Error::NonFinite("vector norm".into()));
    }
    Ok(v.mapv(|x| x / norm))
}

/// `1 - cos(a, b)`, in `[0, 2]`.
pub fn cosine_distance<T: Scalar>(a: &IVector<T>, b: &IVector<T>) -> Result<T> {
    cosine_distance_view(a.view(), b.view())
}

pub(crate) fn cosine_distance_view<T: Scalar>(a: ArrayView1<'_, T>, b: ArrayView1<'_, T>) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == T::zero() || nb == T::zero() {
        return Err(Error::ZeroNorm);
    }
    // rounding can push |cos| a hair past 1
    let cos = (a.dot(&b) / (na * nb)).max(-T::one()).min(T::one());
    Ok(T::one() - cos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(values: &[f64]) -> IVector<f64> {
        IVector::from_vec(values.to_vec()).unwrap()
    }

    #[test]
    fn normalizes_three_four() {
        let n = length_normalize(&v(&[3.0, 4.0])).unwrap();
        assert!((n.as_array()[0] - 0.6).abs() < 1e-15);
        assert!((n.as_array()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn unit_vector_is_fixed_point() {
        let u = v(&[0.6, 0.0, -0.8]);
        let n = length_normalize(&u).unwrap();
        for (a, b) in u.view().iter().zip(n.view().iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_vector_is_rejected() {
        let err = length_normalize(&v(&[0.0, 0.0])).unwrap_err();
        assert_eq!(err.to_string(), "cannot normalize zero vector");
    }

    #[test]
    fn non_finite_components_are_rejected() {
        assert!(IVector::from_vec(vec![1.0, f64::NAN]).is_err());
        assert!(IVector::<f64>::from_vec(vec![]).is_err());
    }

    #[test]
    fn cosine_reference_values() {
        let a = v(&[1.0, 2.0, -0.5]);
        assert!(cosine_distance(&a, &a).unwrap().abs() < 1e-15);
        let neg = a.scaled(-1.0).unwrap();
        assert!((cosine_distance(&a, &neg).unwrap() - 2.0).abs() < 1e-15);
        let x = v(&[1.0, 0.0]);
        let y = v(&[0.0, 3.0]);
        assert_eq!(cosine_distance(&x, &y).unwrap(), 1.0);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(
            cosine_distance(&v(&[1.0, 0.0]), &v(&[1.0, 0.0, 0.0])),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            cosine_distance(&v(&[1.0, 0.0]), &v(&[0.0, 0.0])),
            Err(Error::ZeroNorm)
        ));
    }

    #[test]
    fn works_in_single_precision() {
        let n = length_normalize(&IVector::from_vec(vec![3.0f32, 4.0]).unwrap()).unwrap();
        assert!((n.norm() - 1.0).abs() < 1e-6);
    }

    fn nonzero_vec(dim: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, dim)
            .prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-6)
    }

    proptest! {
        #[test]
        fn normalize_is_scale_invariant(values in nonzero_vec(7), s in 1e-3f64..1e3) {
            let a = v(&values);
            let n1 = length_normalize(&a).unwrap();
            let n2 = length_normalize(&a.scaled(s).unwrap()).unwrap();
            prop_assert!((n1.norm() - 1.0).abs() < 1e-12);
            for (x, y) in n1.view().iter().zip(n2.view().iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn cosine_is_symmetric_scale_invariant_and_bounded(
            a in nonzero_vec(5), b in nonzero_vec(5), s in 1e-2f64..1e2, t in 1e-2f64..1e2
        ) {
            let (a, b) = (v(&a), v(&b));
            let d = cosine_distance(&a, &b).unwrap();
            prop_assert!((0.0..=2.0).contains(&d));
            prop_assert!((d - cosine_distance(&b, &a).unwrap()).abs() < 1e-12);
            let scaled = cosine_distance(&a.scaled(s).unwrap(), &b.scaled(t).unwrap()).unwrap();
            prop_assert!((d - scaled).abs() < 1e-12);
        }
    }
}
