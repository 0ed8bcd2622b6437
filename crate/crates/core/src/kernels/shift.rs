use ndarray::{Array1, ArrayView1, Zip};

use super::{check_len, vec_mat, LoraParams, ShiftMix, ShiftParams};
use crate::error::dim_err;
use crate::{Error, Real, Result};

/// Data-independent token shift: `(μ ⊙ x_t + (1 − μ) ⊙ x_prev) · W`.
///
/// `μ` is not clamped; values outside `[0, 1]` extrapolate.
pub fn token_shift_di<T: Real>(
    x_t: ArrayView1<'_, T>,
    x_prev: ArrayView1<'_, T>,
    p: &ShiftParams<'_, T>,
) -> Result<Array1<T>> {
    const OP: &str = "token_shift_di";
    let ShiftMix::Static { mu } = p.mix else {
        return Err(Error::Config(
            "token_shift_di called with data-dependent shift parameters".into(),
        ));
    };
    let d = x_t.len();
    check_len(OP, "x_prev", &x_prev, d)?;
    check_len(OP, "mu", &mu, d)?;
    if p.w.nrows() != d {
        return Err(dim_err(
            OP,
            format!("W has {} rows, expected {d}", p.w.nrows()),
        ));
    }
    let mixed = Zip::from(&x_t)
        .and(&x_prev)
        .and(&mu)
        .map_collect(|&x, &xp, &m| m * x + (T::one() - m) * xp);
    Ok(vec_mat(mixed.view(), p.w))
}

/// `λ + tanh(x·A)·B`
pub fn lora_eval<T: Real>(x: ArrayView1<'_, T>, p: &LoraParams<'_, T>) -> Result<Array1<T>> {
    const OP: &str = "lora_eval";
    p.check(OP)?;
    check_len(OP, "x", &x, p.dim())?;
    let hidden = vec_mat(x, p.a).mapv(|h| h.tanh());
    Ok(vec_mat(hidden.view(), p.b) + &p.lambda)
}

/// `a + (b − a) ⊙ lora(a + (b − a) ⊙ μ_x)`
pub fn ddlerp<T: Real>(
    a: ArrayView1<'_, T>,
    b: ArrayView1<'_, T>,
    mu_x: ArrayView1<'_, T>,
    p: &LoraParams<'_, T>,
) -> Result<Array1<T>> {
    const OP: &str = "ddlerp";
    let d = a.len();
    check_len(OP, "b", &b, d)?;
    check_len(OP, "mu_x", &mu_x, d)?;
    let delta = &b - &a;
    let inner = &a + &(&delta * &mu_x);
    let gate = lora_eval(inner.view(), p)?;
    Ok(&a + &(&delta * &gate))
}

/// Data-dependent token shift: `ddlerp(x_t, x_prev) · W`.
pub fn token_shift_dd<T: Real>(
    x_t: ArrayView1<'_, T>,
    x_prev: ArrayView1<'_, T>,
    p: &ShiftParams<'_, T>,
) -> Result<Array1<T>> {
    const OP: &str = "token_shift_dd";
    let ShiftMix::Dynamic { mu_x, lora } = p.mix else {
        return Err(Error::Config(
            "token_shift_dd requires lora parameters".into(),
        ));
    };
    if p.w.nrows() != x_t.len() {
        return Err(dim_err(
            OP,
            format!("W has {} rows, expected {}", p.w.nrows(), x_t.len()),
        ));
    }
    let mixed = ddlerp(x_t, x_prev, mu_x, &lora)?;
    Ok(vec_mat(mixed.view(), p.w))
}

/// Dispatches on the branch's mix kind.
pub fn token_shift<T: Real>(
    x_t: ArrayView1<'_, T>,
    x_prev: ArrayView1<'_, T>,
    p: &ShiftParams<'_, T>,
) -> Result<Array1<T>> {
    match p.mix {
        ShiftMix::Static { .. } => token_shift_di(x_t, x_prev, p),
        ShiftMix::Dynamic { .. } => token_shift_dd(x_t, x_prev, p),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr1, arr2, Array2};

    fn identity(n: usize) -> Array2<f64> {
        Array2::eye(n)
    }

    #[test]
    fn midpoint_shift_with_identity_projection() {
        let mu = arr1(&[0.5, 0.5]);
        let w = identity(2);
        let p = ShiftParams {
            mix: ShiftMix::Static { mu: mu.view() },
            w: w.view(),
        };
        let y = token_shift_di(arr1(&[2.0, 4.0]).view(), arr1(&[0.0, 2.0]).view(), &p).unwrap();
        assert_eq!(y, arr1(&[1.0, 3.0]));
    }

    #[test]
    fn degenerate_mix_ratios_select_one_input() {
        let w = arr2(&[[1.0, 2.0, 0.5], [-1.0, 0.25, 3.0]]);
        let x_t = arr1(&[0.3, -1.7]);
        let x_prev = arr1(&[2.5, 0.9]);
        let ones = arr1(&[1.0, 1.0]);
        let zeros = arr1(&[0.0, 0.0]);
        let current = ShiftParams {
            mix: ShiftMix::Static { mu: ones.view() },
            w: w.view(),
        };
        let previous = ShiftParams {
            mix: ShiftMix::Static { mu: zeros.view() },
            w: w.view(),
        };
        assert_eq!(
            token_shift_di(x_t.view(), x_prev.view(), &current).unwrap(),
            x_t.dot(&w)
        );
        assert_eq!(
            token_shift_di(x_t.view(), x_prev.view(), &previous).unwrap(),
            x_prev.dot(&w)
        );
    }

    #[test]
    fn shift_rejects_mismatched_shapes() {
        let mu = arr1(&[0.5, 0.5]);
        let w = identity(3);
        let p = ShiftParams {
            mix: ShiftMix::Static { mu: mu.view() },
            w: w.view(),
        };
        let err = token_shift_di(arr1(&[1.0, 2.0]).view(), arr1(&[1.0, 2.0]).view(), &p);
        assert!(matches!(err, Err(Error::Dimension { .. })));
    }

    #[test]
    fn lora_of_zero_input_is_lambda() {
        let lambda = arr1(&[0.1, -0.2, 0.3]);
        let a = arr2(&[[0.4], [0.5], [-0.6]]);
        let b = arr2(&[[1.0, 2.0, 3.0]]);
        let p = LoraParams {
            lambda: lambda.view(),
            a: a.view(),
            b: b.view(),
        };
        assert_eq!(
            lora_eval(arr1(&[0.0, 0.0, 0.0]).view(), &p).unwrap(),
            lambda
        );
        let zero_a = Array2::zeros((3, 1));
        let annihilated = LoraParams {
            a: zero_a.view(),
            ..p
        };
        assert_eq!(
            lora_eval(arr1(&[5.0, -2.0, 1.0]).view(), &annihilated).unwrap(),
            lambda
        );
    }

    #[test]
    fn lora_scalar_value() {
        let lambda = arr1(&[0.5]);
        let a = arr2(&[[1.0]]);
        let b = arr2(&[[2.0]]);
        let p = LoraParams {
            lambda: lambda.view(),
            a: a.view(),
            b: b.view(),
        };
        let y = lora_eval(arr1(&[1.0]).view(), &p).unwrap();
        // 0.5 + 2·tanh(1)
        assert_abs_diff_eq!(y[0], 0.5 + 2.0 * 1f64.tanh(), epsilon = 1e-15);
        assert_abs_diff_eq!(y[0], 2.023_188_311_911_53, epsilon = 1e-12);
    }

    #[test]
    fn lora_rank_must_fit_dimension() {
        let lambda = arr1(&[0.0]);
        let a = Array2::zeros((1, 2));
        let b = Array2::zeros((2, 1));
        let p = LoraParams {
            lambda: lambda.view(),
            a: a.view(),
            b: b.view(),
        };
        assert!(lora_eval(arr1(&[1.0]).view(), &p).is_err());
    }

    #[test]
    fn ddlerp_gates() {
        let a = arr1(&[1.0, -2.0]);
        let b = arr1(&[3.0, 5.0]);
        let mu_x = arr1(&[0.3, 0.7]);
        let zero_a = Array2::zeros((2, 1));
        let b_mat = arr2(&[[4.0, -4.0]]);
        let zeros = arr1(&[0.0, 0.0]);
        let ones = arr1(&[1.0, 1.0]);
        for (lambda, expected) in [(&zeros, &a), (&ones, &b)] {
            let gate = LoraParams {
                lambda: lambda.view(),
                a: zero_a.view(),
                b: b_mat.view(),
            };
            assert_eq!(
                ddlerp(a.view(), b.view(), mu_x.view(), &gate).unwrap(),
                *expected
            );
        }
        // Fixed point for arbitrary parameters.
        let a_mat = arr2(&[[0.9], [-1.3]]);
        let lam = arr1(&[0.2, 1.7]);
        let p = LoraParams {
            lambda: lam.view(),
            a: a_mat.view(),
            b: b_mat.view(),
        };
        assert_eq!(ddlerp(a.view(), a.view(), mu_x.view(), &p).unwrap(), a);
    }

    #[test]
    fn token_shift_dd_values() {
        let w = arr2(&[[1.0]]);
        let mu_x = arr1(&[0.5]);
        let lambda = arr1(&[0.25]);
        let zero_a = Array2::zeros((1, 1));
        let b = arr2(&[[1.0]]);
        let p = ShiftParams {
            mix: ShiftMix::Dynamic {
                mu_x: mu_x.view(),
                lora: LoraParams {
                    lambda: lambda.view(),
                    a: zero_a.view(),
                    b: b.view(),
                },
            },
            w: w.view(),
        };
        let y = token_shift_dd(arr1(&[1.0]).view(), arr1(&[3.0]).view(), &p).unwrap();
        assert_eq!(y, arr1(&[1.5]));

        let v = arr1(&[-0.75]);
        assert_eq!(token_shift_dd(v.view(), v.view(), &p).unwrap(), v);

        let zero_lambda = arr1(&[0.0]);
        let gated = ShiftParams {
            mix: ShiftMix::Dynamic {
                mu_x: mu_x.view(),
                lora: LoraParams {
                    lambda: zero_lambda.view(),
                    a: zero_a.view(),
                    b: b.view(),
                },
            },
            w: w.view(),
        };
        let y = token_shift_dd(arr1(&[1.0]).view(), arr1(&[3.0]).view(), &gated).unwrap();
        assert_eq!(y, arr1(&[1.0]));
    }

    #[test]
    fn variant_mismatch_is_a_configuration_error() {
        let mu = arr1(&[0.5]);
        let w = arr2(&[[1.0]]);
        let p = ShiftParams {
            mix: ShiftMix::Static { mu: mu.view() },
            w: w.view(),
        };
        assert!(matches!(
            token_shift_dd(arr1(&[1.0]).view(), arr1(&[1.0]).view(), &p),
            Err(Error::Config(_))
        ));
    }
}
