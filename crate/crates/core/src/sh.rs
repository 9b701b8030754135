//! Real spherical harmonics up to degree 3 for view-dependent color.
//!
//! Coefficient ordering is the usual one: degree 0, then degree 1
//! (Y_1^-1, Y_1^0, Y_1^1), degree 2, degree 3.

use nalgebra::Vector3;

pub const MAX_DEGREE: usize = 3;

/// Y_0^0.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;

const C1: f64 = 0.488_602_511_902_919_92;
const C2_0: f64 = 1.092_548_430_592_079_2;
const C2_1: f64 = 0.315_391_565_252_520_05;
const C2_2: f64 = 0.546_274_215_296_039_6;
const C3_0: f64 = 0.590_043_589_926_643_5;
const C3_1: f64 = 2.890_611_442_640_554;
const C3_2: f64 = 0.457_045_799_464_465_76;
const C3_3: f64 = 0.373_176_332_590_115_4;
const C3_4: f64 = 1.445_305_721_320_277;

/// Number of coefficients for a given maximum degree.
pub const fn coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Evaluate the real SH basis at a unit direction, up to `degree`.
pub fn basis(degree: usize, dir: &Vector3<f64>) -> Vec<f64> {
    assert!(degree <= MAX_DEGREE, "SH degree > {MAX_DEGREE} unsupported");
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let mut b = Vec::with_capacity(coeff_count(degree));
    b.push(SH_C0);
    if degree >= 1 {
        b.push(C1 * y);
        b.push(C1 * z);
        b.push(C1 * x);
    }
    if degree >= 2 {
        let (x2, y2, z2) = (x * x, y * y, z * z);
        b.push(C2_0 * x * y);
        b.push(C2_0 * y * z);
        b.push(C2_1 * (3.0 * z2 - 1.0));
        b.push(C2_0 * x * z);
        b.push(C2_2 * (x2 - y2));
        if degree >= 3 {
            b.push(C3_0 * y * (3.0 * x2 - y2));
            b.push(C3_1 * x * y * z);
            b.push(C3_2 * y * (5.0 * z2 - 1.0));
            b.push(C3_3 * z * (5.0 * z2 - 3.0));
            b.push(C3_2 * x * (5.0 * z2 - 1.0));
            b.push(C3_4 * z * (x2 - y2));
            b.push(C3_0 * x * (x2 - 3.0 * y2));
        }
    }
    b
}

/// Partial derivatives of every basis function with respect to the direction
/// components. Returns one gradient vector per coefficient.
pub fn basis_grad(degree: usize, dir: &Vector3<f64>) -> Vec<Vector3<f64>> {
    assert!(degree <= MAX_DEGREE);
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let mut g = Vec::with_capacity(coeff_count(degree));
    g.push(Vector3::zeros());
    if degree >= 1 {
        g.push(Vector3::new(0.0, C1, 0.0));
        g.push(Vector3::new(0.0, 0.0, C1));
        g.push(Vector3::new(C1, 0.0, 0.0));
    }
    if degree >= 2 {
        g.push(Vector3::new(C2_0 * y, C2_0 * x, 0.0));
        g.push(Vector3::new(0.0, C2_0 * z, C2_0 * y));
        g.push(Vector3::new(0.0, 0.0, C2_1 * 6.0 * z));
        g.push(Vector3::new(C2_0 * z, 0.0, C2_0 * x));
        g.push(Vector3::new(C2_2 * 2.0 * x, -C2_2 * 2.0 * y, 0.0));
        if degree >= 3 {
            g.push(Vector3::new(C3_0 * 6.0 * x * y, C3_0 * (3.0 * x * x - 3.0 * y * y), 0.0));
            g.push(Vector3::new(C3_1 * y * z, C3_1 * x * z, C3_1 * x * y));
            g.push(Vector3::new(0.0, C3_2 * (5.0 * z * z - 1.0), C3_2 * 10.0 * y * z));
            g.push(Vector3::new(0.0, 0.0, C3_3 * (15.0 * z * z - 3.0)));
            g.push(Vector3::new(C3_2 * (5.0 * z * z - 1.0), 0.0, C3_2 * 10.0 * x * z));
            g.push(Vector3::new(C3_4 * 2.0 * x * z, -C3_4 * 2.0 * y * z, C3_4 * (x * x - y * y)));
            g.push(Vector3::new(C3_0 * (3.0 * x * x - 3.0 * y * y), -C3_0 * 6.0 * x * y, 0.0));
        }
    }
    g
}

/// View-dependent color: basis dot coefficients, +0.5 offset, clamped to >= 0.
/// `coeffs` holds one RGB triple per basis function.
pub fn eval_color(coeffs: &[Vector3<f64>], dir: &Vector3<f64>) -> Vector3<f64> {
    let degree = degree_for_count(coeffs.len());
    let b = basis(degree, dir);
    let mut c = Vector3::new(0.5, 0.5, 0.5);
    for (bk, yk) in b.iter().zip(coeffs) {
        c += *bk * yk;
    }
    c.map(|v| v.max(0.0))
}

/// Inverse of `eval_color` for a direction-independent color: the DC
/// coefficient reproducing `color` when all other bands are zero.
pub fn dc_from_color(color: Vector3<f64>) -> Vector3<f64> {
    (color - Vector3::new(0.5, 0.5, 0.5)) / SH_C0
}

pub fn degree_for_count(count: usize) -> usize {
    match count {
        1 => 0,
        4 => 1,
        9 => 2,
        16 => 3,
        n => panic!("not an SH coefficient count: {n}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_dir(rng: &mut impl Rng) -> Vector3<f64> {
        loop {
            let v = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 1e-3 && n < 1.0 {
                return v / n;
            }
        }
    }

    /// Independent oracle: associated Legendre recurrences and explicit
    /// normalization, evaluated in spherical coordinates. Uses the graphics
    /// convention (no Condon-Shortley phase), matching the renderer.
    fn reference_sh(l: i32, m: i32, dir: &Vector3<f64>) -> f64 {
        fn factorial(n: i32) -> f64 {
            (1..=n).map(|k| k as f64).product()
        }
        // P_l^m(x) by the standard recurrence, m >= 0, phase omitted.
        fn legendre(l: i32, m: i32, x: f64) -> f64 {
            let mut pmm = 1.0;
            if m > 0 {
                let somx2 = ((1.0 - x) * (1.0 + x)).sqrt();
                let mut fact = 1.0;
                for _ in 1..=m {
                    pmm *= fact * somx2;
                    fact += 2.0;
                }
            }
            if l == m {
                return pmm;
            }
            let mut pmmp1 = x * (2.0 * m as f64 + 1.0) * pmm;
            if l == m + 1 {
                return pmmp1;
            }
            let mut pll = 0.0;
            for ll in (m + 2)..=l {
                pll = (x * (2.0 * ll as f64 - 1.0) * pmmp1 - (ll + m - 1) as f64 * pmm)
                    / (ll - m) as f64;
                pmm = pmmp1;
                pmmp1 = pll;
            }
            pll
        }
        let theta = dir.z.acos();
        let phi = dir.y.atan2(dir.x);
        let ma = m.abs();
        let norm = ((2.0 * l as f64 + 1.0) / (4.0 * std::f64::consts::PI)
            * factorial(l - ma)
            / factorial(l + ma))
        .sqrt();
        let p = legendre(l, ma, theta.cos());
        if m > 0 {
            std::f64::consts::SQRT_2 * norm * p * (ma as f64 * phi).cos()
        } else if m < 0 {
            std::f64::consts::SQRT_2 * norm * p * (ma as f64 * phi).sin()
        } else {
            norm * p
        }
    }

    #[test]
    fn dc_only_color_is_constant() {
        let mut coeffs = vec![Vector3::zeros(); 4];
        coeffs[0] = Vector3::new(1.0, 0.5, -0.2);
        for dir in [Vector3::x(), Vector3::y(), Vector3::z(), -Vector3::x()] {
            let c = eval_color(&coeffs, &dir);
            assert_relative_eq!(c.x, SH_C0 + 0.5, epsilon = 1e-12);
            assert_relative_eq!(c.y, 0.5 * SH_C0 + 0.5, epsilon = 1e-12);
            assert_relative_eq!(c.z, (-0.2 * SH_C0 + 0.5).max(0.0), epsilon = 1e-12);
        }
    }

    #[test]
    fn band1_flips_sign_with_direction() {
        // Band-1 basis functions are odd in their axis.
        for (idx, axis) in [(1usize, Vector3::y()), (2, Vector3::z()), (3, Vector3::x())] {
            let b_pos = basis(1, &axis);
            let b_neg = basis(1, &-axis);
            assert_relative_eq!(b_pos[idx], -b_neg[idx], epsilon = 1e-15);
            assert!(b_pos[idx].abs() > 0.1);
        }
    }

    #[test]
    fn matches_reference_basis_at_random_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let lm: [(i32, i32); 16] = [
            (0, 0),
            (1, -1),
            (1, 0),
            (1, 1),
            (2, -2),
            (2, -1),
            (2, 0),
            (2, 1),
            (2, 2),
            (3, -3),
            (3, -2),
            (3, -1),
            (3, 0),
            (3, 1),
            (3, 2),
            (3, 3),
        ];
        for _ in 0..100 {
            let dir = random_dir(&mut rng);
            let b = basis(3, &dir);
            for (k, &(l, m)) in lm.iter().enumerate() {
                let r = reference_sh(l, m, &dir);
                assert!(
                    (b[k] - r).abs() < 1e-10,
                    "basis {k} (l={l}, m={m}): ours {} vs reference {r}",
                    b[k]
                );
            }
        }
    }

    #[test]
    fn basis_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let eps = 1e-6;
        for _ in 0..20 {
            let dir = random_dir(&mut rng);
            let grads = basis_grad(3, &dir);
            for axis in 0..3 {
                let mut dp = dir;
                let mut dm = dir;
                dp[axis] += eps;
                dm[axis] -= eps;
                // Note: not renormalized — the gradient is with respect to the
                // raw components; normalization is chained separately.
                let bp = basis(3, &dp);
                let bm = basis(3, &dm);
                for k in 0..16 {
                    let fd = (bp[k] - bm[k]) / (2.0 * eps);
                    assert!(
                        (grads[k][axis] - fd).abs() < 1e-7,
                        "coeff {k} axis {axis}: {} vs fd {fd}",
                        grads[k][axis]
                    );
                }
            }
        }
    }
}
