use crate::error::{Error, Result};
use crate::tensor::{macs, Float, Tensor};

/// `C (m×n) = op(A) · op(B)` (or `+=` when `accumulate`), where `op(A)` is
/// `m×k` and `ta` means `a` is stored as `k×m`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    macs::record((m * k * n) as u64);
    // SAFETY: bounds asserted above; strides describe row-major storage.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn dims2<T: Float>(t: &Tensor<T>, transposed: bool) -> Option<(usize, usize)> {
    match *t.shape() {
        [r, c] if transposed => Some((c, r)),
        [r, c] => Some((r, c)),
        _ => None,
    }
}

impl<T: Float> Tensor<T> {
    /// Matrix product `a · b` of `m×k` and `k×n`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.matmul_ex(false, other, false)
    }

    /// `aᵀ · b`.
    pub fn matmul_tn(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.matmul_ex(true, other, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.matmul_ex(false, other, true)
    }

    /// Product of optionally transposed 2-D operands.
    pub fn matmul_ex(&self, ta: bool, other: &Tensor<T>, tb: bool) -> Result<Tensor<T>> {
        let mismatch = || {
            Error::shape(
                "matmul",
                format!(
                    "{:?}{} x {:?}{}",
                    self.shape(),
                    if ta { "ᵀ" } else { "" },
                    other.shape(),
                    if tb { "ᵀ" } else { "" }
                ),
            )
        };
        let (m, k) = dims2(self, ta).ok_or_else(mismatch)?;
        let (k2, n) = dims2(other, tb).ok_or_else(mismatch)?;
        if k != k2 {
            return Err(mismatch());
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, &self.data(), ta, &other.data(), tb, &mut out, false);
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            "matmul",
            vec![self.clone(), other.clone()],
            move |g, _, inp| {
                let a = inp[0].data();
                let b = inp[1].data();
                let ga = inp[0].requires_grad().then(|| {
                    let mut da = vec![T::zero(); m * k];
                    if ta {
                        // stored k×m: op(B) · dCᵀ
                        gemm(k, n, m, &b, tb, g, true, &mut da, false);
                    } else {
                        gemm(m, n, k, g, false, &b, !tb, &mut da, false);
                    }
                    da
                });
                let gb = inp[1].requires_grad().then(|| {
                    let mut db = vec![T::zero(); k * n];
                    if tb {
                        // stored n×k: dCᵀ · op(A)
                        gemm(n, m, k, g, true, &a, ta, &mut db, false);
                    } else {
                        gemm(k, m, n, &a, !ta, g, false, &mut db, false);
                    }
                    db
                });
                vec![ga, gb]
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_times_m_is_m() {
        let i = Tensor::<f32>::from_vec(&[2, 2], vec![1., 0., 0., 1.]).unwrap();
        let m = Tensor::<f32>::from_vec(&[2, 2], vec![3., -1., 2.5, 7.]).unwrap();
        assert_eq!(i.matmul(&m).unwrap().to_vec(), m.to_vec());
    }

    #[test]
    fn hand_multiplication() {
        let a = Tensor::<f32>::from_vec(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::<f32>::from_vec(&[2, 1], vec![5., 6.]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.to_vec(), vec![17., 39.]);
    }

    #[test]
    fn inner_dim_mismatch_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]).unwrap();
        let b = Tensor::<f32>::zeros(&[2, 3]).unwrap();
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn transposed_variants_agree_with_explicit_transpose() {
        let a = Tensor::<f64>::from_vec(&[3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::<f64>::from_vec(&[3, 4], (0..12).map(|v| v as f64).collect()).unwrap();
        let at = a.transpose().unwrap();
        assert_eq!(a.matmul_tn(&b).unwrap().to_vec(), at.matmul(&b).unwrap().to_vec());
        let bt = b.transpose().unwrap();
        assert_eq!(at.matmul_nt(&bt).unwrap().to_vec(), at.matmul(&b).unwrap().to_vec());
    }

    #[test]
    fn matmul_counts_macs() {
        let a = Tensor::<f32>::zeros(&[3, 5]).unwrap();
        let b = Tensor::<f32>::zeros(&[5, 7]).unwrap();
        let (_, n) = macs::measure(|| a.matmul(&b).unwrap());
        assert_eq!(n, 3 * 5 * 7);
    }
}
