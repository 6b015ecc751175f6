//! Shared numerical utilities: the standard normal quantile, least squares
//! with a minimum-norm fallback, the Bartlett lag window, seeded random
//! streams and Toeplitz-correlated Gaussian draws.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Two-sided 95% normal critical value.
pub const Z_975: f64 = 1.959_963_984_540_054;

/// Inverse of the standard normal CDF.
///
/// Wichura's AS 241 (PPND16) rational approximations; relative accuracy is
/// about 1e-16 over the whole open unit interval.
pub fn normal_quantile(q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Domain(format!(
            "normal quantile requires 0 < q < 1, got {q}"
        )));
    }
    let dev = q - 0.5;
    if dev.abs() <= 0.425 {
        let r = 0.180625 - dev * dev;
        return Ok(dev * horner(&CENTRAL_NUM, r) / horner(&CENTRAL_DEN, r));
    }
    let tail = if dev < 0.0 { q } else { 1.0 - q };
    let r = (-tail.ln()).sqrt();
    let value = if r <= 5.0 {
        let r = r - 1.6;
        horner(&NEAR_NUM, r) / horner(&NEAR_DEN, r)
    } else {
        let r = r - 5.0;
        horner(&FAR_NUM, r) / horner(&FAR_DEN, r)
    };
    Ok(if dev < 0.0 { -value } else { value })
}

// Coefficients in increasing powers.
const CENTRAL_NUM: [f64; 8] = [
    3.387_132_872_796_366_5,
    1.331_416_678_917_843_8e2,
    1.971_590_950_306_551_3e3,
    1.373_169_376_550_946e4,
    4.592_195_393_154_987e4,
    6.726_577_092_700_87e4,
    3.343_057_558_358_813e4,
    2.509_080_928_730_122_7e3,
];
const CENTRAL_DEN: [f64; 8] = [
    1.0,
    4.231_333_070_160_091e1,
    6.871_870_074_920_579e2,
    5.394_196_021_424_751e3,
    2.121_379_430_158_659_7e4,
    3.930_789_580_009_271e4,
    2.872_908_573_572_194_3e4,
    5.226_495_278_852_854_5e3,
];
const NEAR_NUM: [f64; 8] = [
    1.423_437_110_749_683_5,
    4.630_337_846_156_545,
    5.769_497_221_460_691,
    3.647_848_324_763_204_5,
    1.270_458_252_452_368_4,
    2.417_807_251_774_506e-1,
    2.272_384_498_926_918_4e-2,
    7.745_450_142_783_414e-4,
];
const NEAR_DEN: [f64; 8] = [
    1.0,
    2.053_191_626_637_758_8,
    1.676_384_830_183_803_8,
    6.897_673_349_851e-1,
    1.481_039_764_274_800_8e-1,
    1.519_866_656_361_645_7e-2,
    5.475_938_084_995_345e-4,
    1.050_750_071_644_416_9e-9,
];
const FAR_NUM: [f64; 8] = [
    6.657_904_643_501_103,
    5.463_784_911_164_114,
    1.784_826_539_917_291_3,
    2.965_605_718_285_048_7e-1,
    2.653_218_952_657_612_4e-2,
    1.242_660_947_388_078_4e-3,
    2.711_555_568_743_487_6e-5,
    2.010_334_399_292_288_1e-7,
];
const FAR_DEN: [f64; 8] = [
    1.0,
    5.998_322_065_558_88e-1,
    1.369_298_809_227_358e-1,
    1.487_536_129_085_061_5e-2,
    7.868_691_311_456_133e-4,
    1.846_318_317_510_054_8e-5,
    1.421_511_758_316_446e-7,
    2.044_263_103_389_939_7e-15,
];

fn horner(coefficients: &[f64], x: f64) -> f64 {
    coefficients.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

/// Bartlett lag window `k(x) = max(1 - |x|, 0)`.
#[inline]
pub fn bartlett(x: f64) -> f64 {
    (1.0 - x.abs()).max(0.0)
}

/// Bartlett weight for an integer lag at bandwidth `m`, i.e. `k(lag / m)`.
#[inline]
pub fn bartlett_weight(lag: usize, bandwidth: usize) -> f64 {
    bartlett(lag as f64 / bandwidth as f64)
}

/// Least-squares solution of `design * b ≈ response`.
#[derive(Debug, Clone)]
pub struct OlsFit {
    pub coefficients: DVector<f64>,
    pub rank: usize,
    /// Set when the design is rank deficient and the minimum-norm solution
    /// was returned.
    pub rank_deficient: bool,
}

/// Ordinary least squares.
///
/// Full-rank designs are solved through a Cholesky factorisation of the
/// normal equations; anything that looks rank deficient is handed to an SVD
/// and the minimum-norm solution is returned with `rank_deficient` set.
pub fn ols(design: &DMatrix<f64>, response: &DVector<f64>) -> OlsFit {
    let cols = design.ncols();
    if cols == 0 {
        return OlsFit {
            coefficients: DVector::zeros(0),
            rank: 0,
            rank_deficient: false,
        };
    }
    let gram = design.tr_mul(design);
    let rhs = design.tr_mul(response);
    solve_normal_equations(&gram, &rhs, design.nrows())
}

/// Solves `gram * b = rhs` where `gram = X'X` for some design with `n_rows`
/// rows, returning the minimum-norm solution when `gram` is singular.
pub fn solve_normal_equations(gram: &DMatrix<f64>, rhs: &DVector<f64>, n_rows: usize) -> OlsFit {
    let cols = gram.ncols();
    if cols == 0 {
        return OlsFit {
            coefficients: DVector::zeros(0),
            rank: 0,
            rank_deficient: false,
        };
    }
    let max_diag = gram.diagonal().iter().cloned().fold(0.0_f64, f64::max);
    if cols <= n_rows && max_diag > 0.0 {
        if let Some(chol) = gram.clone().cholesky() {
            let l = chol.l_dirty();
            let min_pivot = (0..cols).map(|j| l[(j, j)] * l[(j, j)]).fold(f64::INFINITY, f64::min);
            // Pivots this small relative to the largest column norm mean the
            // factorisation is dominated by rounding.
            if min_pivot > max_diag * 1e-11 {
                return OlsFit {
                    coefficients: chol.solve(rhs),
                    rank: cols,
                    rank_deficient: false,
                };
            }
        }
    }
    min_norm_solve(gram, rhs)
}

fn min_norm_solve(gram: &DMatrix<f64>, rhs: &DVector<f64>) -> OlsFit {
    let cols = gram.ncols();
    let svd = gram.clone().svd(true, true);
    let max_sv = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    // Singular values of X'X are squared singular values of X, so the
    // cut-off is the square of the usual sqrt(eps)-scale threshold.
    let cutoff = max_sv * 1e-12 * cols as f64;
    let rank = svd.singular_values.iter().filter(|&&s| s > cutoff).count();
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let projected = u.tr_mul(rhs);
    let mut scaled = DVector::zeros(cols);
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff {
            scaled[k] = projected[k] / s;
        }
    }
    OlsFit {
        coefficients: v_t.tr_mul(&scaled),
        rank,
        rank_deficient: rank < cols,
    }
}

/// Sample variance with the `n - 1` denominator; zero for fewer than two values.
pub fn sample_variance(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut n = 0usize;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for x in values {
        n += 1;
        let delta = x - mean;
        mean += delta / n as f64;
        m2 += delta * (x - mean);
    }
    if n < 2 {
        0.0
    } else {
        m2 / (n - 1) as f64
    }
}

/// A reproducible random stream identified by a base seed and a stream index.
///
/// Streams with the same base seed and different ids never overlap, so
/// per-replication or per-fold work can draw independently regardless of
/// execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    pub base_seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(base_seed: u64, stream_id: u64) -> Self {
        Self {
            base_seed,
            stream_id,
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.base_seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

/// Draws a mean-zero Gaussian vector with covariance `base^|j-k|`.
///
/// Uses the stationary AR(1) recursion, which reproduces that covariance
/// exactly in O(p).
pub fn toeplitz_gaussian<R: Rng + ?Sized>(p: usize, base: f64, rng: &mut R) -> Vec<f64> {
    let mut out = Vec::with_capacity(p);
    fill_toeplitz_gaussian(&mut out, p, base, rng);
    out
}

pub(crate) fn fill_toeplitz_gaussian<R: Rng + ?Sized>(
    out: &mut Vec<f64>,
    p: usize,
    base: f64,
    rng: &mut R,
) {
    let innovation_sd = (1.0 - base * base).sqrt();
    let mut prev = 0.0;
    for j in 0..p {
        let z: f64 = rng.sample(StandardNormal);
        prev = if j == 0 { z } else { base * prev + innovation_sd * z };
        out.push(prev);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_center_and_symmetry() {
        assert_eq!(normal_quantile(0.5).unwrap(), 0.0);
        for &q in &[2f64.powi(-40), 2f64.powi(-20), 0.0078125, 0.125, 0.3125, 0.4375] {
            let lo = normal_quantile(q).unwrap();
            let hi = normal_quantile(1.0 - q).unwrap();
            assert!((lo + hi).abs() < 1e-12 * hi.abs().max(1.0), "q={q}");
        }
    }

    #[test]
    fn quantile_matches_high_precision_reference() {
        // Reference values from an arbitrary-precision erfinv.
        let cases = [
            (0.975, 1.959_963_984_540_054_2),
            (0.9, 1.281_551_565_544_600_5),
            (0.3, -0.524_400_512_708_040_8),
            (0.92, 1.405_071_560_309_632_6),
            (0.001, -3.090_232_306_167_813_5),
            (1e-10, -6.361_340_902_404_056),
        ];
        for (q, expected) in cases {
            let got = normal_quantile(q).unwrap();
            assert!((got - expected).abs() <= 1e-14 * expected.abs(), "q={q}: {got} vs {expected}");
        }
        assert!((normal_quantile(0.975).unwrap() - Z_975).abs() < 1e-15);
    }

    #[test]
    fn quantile_rejects_boundary() {
        assert!(normal_quantile(0.0).is_err());
        assert!(normal_quantile(1.0).is_err());
        assert!(normal_quantile(f64::NAN).is_err());
    }

    #[test]
    fn bartlett_values() {
        assert_eq!(bartlett(0.0), 1.0);
        assert_eq!(bartlett_weight(4, 4), 0.0);
        assert_eq!(bartlett_weight(2, 4), 0.5);
        assert_eq!(bartlett_weight(7, 4), 0.0);
    }

    #[test]
    fn ols_identity_design() {
        let x = DMatrix::<f64>::identity(3, 3);
        let y = DVector::from_vec(vec![1.0, -2.0, 3.5]);
        let fit = ols(&x, &y);
        assert!((fit.coefficients - &y).norm() < 1e-14);
        assert!(!fit.rank_deficient);
    }

    #[test]
    fn ols_two_by_two() {
        // 2b0 + b1 = 5, b0 + 3b1 = 10  =>  b0 = 1, b1 = 3
        let x = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let y = DVector::from_vec(vec![5.0, 10.0]);
        let fit = ols(&x, &y);
        assert!((fit.coefficients[0] - 1.0).abs() < 1e-12);
        assert!((fit.coefficients[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn ols_duplicated_column_is_min_norm() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0]);
        let y = DVector::from_vec(vec![2.0, 4.0, 6.0, 8.0]);
        let fit = ols(&x, &y);
        assert!(fit.rank_deficient);
        assert_eq!(fit.rank, 1);
        // Minimum-norm solution splits the coefficient 2 evenly.
        assert!((fit.coefficients[0] - 1.0).abs() < 1e-8);
        assert!((fit.coefficients[1] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn ols_residual_orthogonality() {
        let mut rng = RngStream::new(3, 0).rng();
        let n = 40;
        let p = 6;
        let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let fit = ols(&x, &y);
        let r = &y - &x * &fit.coefficients;
        let lhs = x.tr_mul(&r).norm();
        assert!(lhs <= 1e-8 * x.norm() * r.norm() + 1e-10);
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let draw = |stream| {
            let mut rng = RngStream::new(9, stream).rng();
            (0..4).map(|_| rng.gen::<u64>()).collect::<Vec<_>>()
        };
        assert_eq!(draw(1), draw(1));
        assert_ne!(draw(1), draw(2));
    }

    #[test]
    fn toeplitz_base_zero_and_p_one() {
        let mut r1 = RngStream::new(1, 0).rng();
        let mut r2 = RngStream::new(1, 0).rng();
        let draw = toeplitz_gaussian(1, 0.5, &mut r1);
        let z: f64 = r2.sample(StandardNormal);
        assert_eq!(draw, vec![z]);

        let mut r1 = RngStream::new(2, 0).rng();
        let mut r2 = RngStream::new(2, 0).rng();
        let draw = toeplitz_gaussian(5, 0.0, &mut r1);
        let direct: Vec<f64> = (0..5).map(|_| r2.sample(StandardNormal)).collect();
        assert_eq!(draw, direct);
    }
}
