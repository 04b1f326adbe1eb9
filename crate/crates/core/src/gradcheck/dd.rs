//! Double-double arithmetic: an unevaluated sum `hi + lo` with `|lo| ≤ ulp(hi)/2`,
//! about 106 significant bits. Only what the reference evaluator needs.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

#[derive(Debug, Clone, Copy, Default, PartialEq, PartialOrd)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// Requires `|a| ≥ |b|` or `a = 0`.
#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

#[inline]
fn norm((hi, lo): (f64, f64)) -> Dd {
    Dd { hi, lo }
}

const LN2: Dd = Dd {
    hi: 0.6931471805599453,
    lo: 2.3190468138462996e-17,
};
const TWO_OVER_SQRT_PI: Dd = Dd {
    hi: 1.1283791670955126,
    lo: 1.533545961316588e-17,
};
const FRAC_1_SQRT_2: Dd = Dd {
    hi: 0.7071067811865476,
    lo: -4.833646656726457e-17,
};
/// Series terms below this (relative) are dropped.
const SERIES_CUTOFF: f64 = 1e-36;

impl From<f64> for Dd {
    fn from(v: f64) -> Self {
        Dd { hi: v, lo: 0.0 }
    }
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    pub fn is_positive(self) -> bool {
        self.hi > 0.0 || (self.hi == 0.0 && self.lo > 0.0)
    }

    pub fn abs(self) -> Dd {
        if self.hi < 0.0 || (self.hi == 0.0 && self.lo < 0.0) {
            -self
        } else {
            self
        }
    }

    pub fn relu(self) -> Dd {
        if self.is_positive() {
            self
        } else {
            Dd::ZERO
        }
    }

    /// Exact scaling by `2^k`; `|k| ≤ 1022`.
    fn ldexp(self, k: i32) -> Dd {
        let s = 2f64.powi(k);
        Dd {
            hi: self.hi * s,
            lo: self.lo * s,
        }
    }

    pub fn sqrt(self) -> Dd {
        if self.hi <= 0.0 {
            return if self.hi == 0.0 { Dd::ZERO } else { Dd::from(f64::NAN) };
        }
        // a·x + (a − (a·x)²)·x/2 with x ≈ 1/√a
        let x = 1.0 / self.hi.sqrt();
        let ax = self.hi * x;
        let diff = (self - norm(two_prod(ax, ax))).hi * x * 0.5;
        norm(quick_two_sum(ax, diff))
    }

    pub fn exp(self) -> Dd {
        if self.hi > 709.0 {
            return Dd::from(f64::INFINITY);
        }
        if self.hi < -700.0 {
            return Dd::ZERO;
        }
        // x = k·ln2 + r, |r| ≤ ln2/2; exp(r) = (1 + expm1(r/1024))^1024
        let k = (self.hi / LN2.hi).round();
        let r = (self - LN2 * k).ldexp(-10);
        let mut term = r;
        let mut sum = r;
        for n in 2..30 {
            term = term * r / n as f64;
            sum += term;
            if term.hi.abs() < SERIES_CUTOFF {
                break;
            }
        }
        for _ in 0..10 {
            sum = sum * (sum + 2.0);
        }
        (sum + 1.0).ldexp(k as i32)
    }

    /// Natural log by Newton refinement of the `f64` value.
    pub fn ln(self) -> Dd {
        if self.hi <= 0.0 {
            return Dd::from(if self.hi == 0.0 { f64::NEG_INFINITY } else { f64::NAN });
        }
        let mut y = Dd::from(self.hi.ln());
        for _ in 0..2 {
            y = y + self * (-y).exp() - 1.0;
        }
        y
    }

    /// Absolute error ~1e-31 over the whole line.
    pub fn erf(self) -> Dd {
        if self.hi < 0.0 {
            return -(-self).erf();
        }
        if self.hi > 27.0 {
            return Dd::ONE;
        }
        let x2 = self * self;
        if self.hi < 2.5 {
            // Σ (−1)^n x^(2n+1) / (n!·(2n+1))
            let mut term = self;
            let mut sum = self;
            for n in 1..200 {
                term = -(term * x2) / n as f64;
                let add = term / (2 * n + 1) as f64;
                sum += add;
                if add.hi.abs() < SERIES_CUTOFF {
                    break;
                }
            }
            return sum * TWO_OVER_SQRT_PI;
        }
        // x·e^(−x²)·Σ (2x²)^n / (2n+1)!!, all terms positive
        let two_x2 = x2 * 2.0;
        let mut term = Dd::ONE;
        let mut sum = Dd::ONE;
        for n in 1..2000 {
            term = term * two_x2 / (2 * n + 1) as f64;
            sum += term;
            if term.hi < SERIES_CUTOFF * sum.hi {
                break;
            }
        }
        sum * self * (-x2).exp() * TWO_OVER_SQRT_PI
    }

    /// `x·Φ(x)`.
    pub fn gelu(self) -> Dd {
        self * ((self * FRAC_1_SQRT_2).erf() + 1.0) * 0.5
    }

    /// `ln(1 + eˣ)`.
    pub fn softplus(self) -> Dd {
        (self.exp() + 1.0).ln()
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, b: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, b.hi);
        let (t, f) = two_sum(self.lo, b.lo);
        let (s, e) = quick_two_sum(s, e + t);
        norm(quick_two_sum(s, e + f))
    }
}

impl Add<f64> for Dd {
    type Output = Dd;
    fn add(self, b: f64) -> Dd {
        let (s, e) = two_sum(self.hi, b);
        norm(quick_two_sum(s, e + self.lo))
    }
}

impl AddAssign for Dd {
    fn add_assign(&mut self, b: Dd) {
        *self = *self + b;
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, b: Dd) -> Dd {
        self + (-b)
    }
}

impl Sub<f64> for Dd {
    type Output = Dd;
    fn sub(self, b: f64) -> Dd {
        self + (-b)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, b: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, b.hi);
        norm(quick_two_sum(p, e + (self.hi * b.lo + self.lo * b.hi)))
    }
}

impl Mul<f64> for Dd {
    type Output = Dd;
    fn mul(self, b: f64) -> Dd {
        let (p, e) = two_prod(self.hi, b);
        norm(quick_two_sum(p, e + self.lo * b))
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, b: Dd) -> Dd {
        let q1 = self.hi / b.hi;
        let r = self - b * q1;
        let q2 = r.hi / b.hi;
        let r = r - b * q2;
        let q3 = r.hi / b.hi;
        norm(quick_two_sum(q1, q2)) + q3
    }
}

impl Div<f64> for Dd {
    type Output = Dd;
    fn div(self, b: f64) -> Dd {
        self / Dd::from(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dd(hi: f64, lo: f64) -> Dd {
        Dd { hi, lo }
    }

    fn close(got: Dd, want: Dd, rel: f64) {
        let err = (got - want).to_f64().abs();
        assert!(err <= rel * want.hi.abs().max(1e-300), "{got:?} vs {want:?}: {err:e}");
    }

    #[test]
    fn arithmetic() {
        let third = Dd::ONE / 3.0;
        close(third, dd(0.3333333333333333, 1.850371707708594e-17), 1e-31);
        close(third * 3.0, Dd::ONE, 1e-31);
        close(Dd::from(2.0).sqrt(), dd(1.4142135623730951, -9.667293313452913e-17), 1e-31);
        // 1 + 2^-80 survives in lo
        let tiny = 2f64.powi(-80);
        assert_eq!(((Dd::ONE + tiny) - 1.0).to_f64(), tiny);
    }

    // 250-bit evaluations at the exact binary inputs, rounded to hi + lo
    #[test]
    fn exp_reference_values() {
        let cases = [
            (0.3, dd(1.3498588075760032, -9.447314673432387e-17)),
            (-1.7, dd(0.18268352405273466, -5.430659906894856e-18)),
            (2.5, dd(12.182493960703473, 2.0334002173348147e-16)),
            (-0.01, dd(0.9900498337491681, -5.331017426972769e-17)),
            (5.0, dd(148.4131591025766, 3.4863514900464198e-15)),
            (-30.5, dd(5.675685232632723e-14, -2.744021414416088e-30)),
        ];
        for (x, want) in cases {
            close(Dd::from(x).exp(), want, 1e-29);
        }
    }

    #[test]
    fn ln_reference_values() {
        let cases = [
            (0.3, dd(-1.2039728043259361, 8.935521583403776e-17)),
            (1.7, dd(0.5306282510621704, -5.076541175216476e-18)),
            (2.5, dd(0.9162907318741551, -4.141195369011963e-17)),
            (1e-5, dd(-11.512925464970229, 2.790027459050308e-16)),
            (148.4, dd(4.99991133073328, 2.4401582819489927e-16)),
        ];
        for (x, want) in cases {
            close(Dd::from(x).ln(), want, 1e-29);
        }
    }

    #[test]
    fn erf_and_gelu_reference_values() {
        let cases = [
            (0.1, dd(0.1124629160182849, 9.255497413884101e-19)),
            (-0.9, dd(-0.7969082124228322, 2.3193178035628794e-17)),
            (2.4, dd(0.999311486103355, -4.118150262075508e-17)),
            (2.6, dd(0.9997639655834707, -4.196501214677855e-17)),
            (-4.1, dd(-0.9999999932999724, 1.0282631893969006e-17)),
            (6.3, dd(1.0, -5.124221687395715e-19)),
        ];
        for (x, want) in cases {
            let err = (Dd::from(x).erf() - want).to_f64().abs();
            assert!(err < 1e-30, "erf({x}): {err:e}");
        }
        let cases = [
            (0.3, dd(0.1853734266566858, -1.3825715649133605e-17)),
            (-1.2, dd(-0.13808360426604993, 3.899525607862983e-18)),
            (3.7, dd(3.699601140986134, 4.508646681830469e-17)),
            (-6.5, dd(-2.6104003795084267e-10, 8.602101029158462e-27)),
        ];
        for (x, want) in cases {
            let err = (Dd::from(x).gelu() - want).to_f64().abs();
            assert!(err < 1e-29, "gelu({x}): {err:e}");
        }
    }

    #[test]
    fn ordering_and_relu() {
        assert!(dd(1.0, 1e-20) > Dd::ONE);
        assert_eq!(dd(0.0, -1e-40).relu(), Dd::ZERO);
        assert_eq!(dd(-2.0, 1e-17).abs(), dd(2.0, -1e-17));
    }
}
