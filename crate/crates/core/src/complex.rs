//! Extended complex numbers: the complex plane plus a single point at infinity.
//!
//! Arithmetic follows the Riemann-sphere conventions (`z/0 = ∞`, `z/∞ = 0`)
//! and reports the genuinely indeterminate forms `∞ − ∞`, `0·∞`, `0/0` and
//! `∞/∞` as errors instead of producing NaN.

use std::fmt;

use crate::error::{Error, Result};

/// Magnitude bound for finite components. Anything at or above it is treated
/// as the point at infinity by arithmetic and rejected by [`ExtendedComplex::new`].
pub const OVERFLOW_GUARD: f64 = 1e300;

/// A point of the extended complex plane.
///
/// The infinite point is canonical: its stored components are always `(0, 0)`.
#[derive(Clone, Copy, PartialEq)]
pub struct ExtendedComplex {
    re: f64,
    im: f64,
    infinite: bool,
}

impl ExtendedComplex {
    pub const ZERO: Self = Self { re: 0.0, im: 0.0, infinite: false };
    pub const ONE: Self = Self { re: 1.0, im: 0.0, infinite: false };
    pub const I: Self = Self { re: 0.0, im: 1.0, infinite: false };
    pub const INFINITY: Self = Self { re: 0.0, im: 0.0, infinite: true };

    /// Finite value; rejects NaN, infinities and components beyond [`OVERFLOW_GUARD`].
    pub fn new(re: f64, im: f64) -> Result<Self> {
        if !re.is_finite() || !im.is_finite() || re.abs() >= OVERFLOW_GUARD || im.abs() >= OVERFLOW_GUARD
        {
            return Err(Error::InvalidComplex(format!("({re}, {im})")));
        }
        Ok(Self { re, im, infinite: false })
    }

    /// Real value.
    pub fn real(re: f64) -> Result<Self> {
        Self::new(re, 0.0)
    }

    pub fn from_polar(r: f64, theta: f64) -> Result<Self> {
        Self::new(r * theta.cos(), r * theta.sin())
    }

    /// Result of an arithmetic kernel: overflow lands on the point at infinity.
    pub(crate) fn from_parts(re: f64, im: f64) -> Self {
        if re.is_nan() || im.is_nan() {
            // only reachable through inf/inf inside a kernel, i.e. an overflowed operand
            return Self::INFINITY;
        }
        if re.abs() >= OVERFLOW_GUARD || im.abs() >= OVERFLOW_GUARD {
            Self::INFINITY
        } else {
            Self { re, im, infinite: false }
        }
    }

    pub fn re(&self) -> f64 {
        self.re
    }

    pub fn im(&self) -> f64 {
        self.im
    }

    pub fn is_infinity(&self) -> bool {
        self.infinite
    }

    pub fn is_zero(&self) -> bool {
        !self.infinite && self.re == 0.0 && self.im == 0.0
    }

    /// Modulus; `f64::INFINITY` for the point at infinity.
    pub fn abs(&self) -> f64 {
        if self.infinite {
            f64::INFINITY
        } else {
            self.re.hypot(self.im)
        }
    }

    pub fn norm_sqr(&self) -> f64 {
        if self.infinite {
            f64::INFINITY
        } else {
            self.re * self.re + self.im * self.im
        }
    }

    pub fn arg(&self) -> f64 {
        self.im.atan2(self.re)
    }

    pub fn conj(&self) -> Self {
        if self.infinite {
            *self
        } else {
            Self { re: self.re, im: -self.im, infinite: false }
        }
    }

    pub fn neg(&self) -> Self {
        if self.infinite {
            *self
        } else {
            Self { re: -self.re, im: -self.im, infinite: false }
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        if self.infinite {
            *self
        } else {
            Self::from_parts(self.re * s, self.im * s)
        }
    }

    /// Principal square root, branch cut along the negative real axis.
    pub fn sqrt(&self) -> Self {
        if self.infinite {
            return *self;
        }
        let (re, im) = principal_sqrt(self.re, self.im);
        Self::from_parts(re, im)
    }

    pub fn exp(&self) -> Self {
        if self.infinite {
            return *self;
        }
        let m = self.re.exp();
        Self::from_parts(m * self.im.cos(), m * self.im.sin())
    }

    /// Distance on the plane; infinite if exactly one side is ∞, zero if both are.
    pub fn dist(&self, other: &Self) -> f64 {
        match (self.infinite, other.infinite) {
            (true, true) => 0.0,
            (false, false) => (self.re - other.re).hypot(self.im - other.im),
            _ => f64::INFINITY,
        }
    }
}

/// Principal square root on raw components.
pub(crate) fn principal_sqrt(re: f64, im: f64) -> (f64, f64) {
    if re == 0.0 && im == 0.0 {
        return (0.0, 0.0);
    }
    let m = re.hypot(im);
    if re >= 0.0 {
        let t = ((m + re) * 0.5).sqrt();
        (t, im / (2.0 * t))
    } else {
        let t = ((m - re) * 0.5).sqrt();
        let s = if im >= 0.0 { t } else { -t };
        (im.abs() / (2.0 * t), s)
    }
}

/// Smith's scaled complex division of finite components.
pub(crate) fn smith_div(a: f64, b: f64, c: f64, d: f64) -> (f64, f64) {
    if c.abs() >= d.abs() {
        let r = d / c;
        let den = c + d * r;
        ((a + b * r) / den, (b - a * r) / den)
    } else {
        let r = c / d;
        let den = c * r + d;
        ((a * r + b) / den, (b * r - a) / den)
    }
}

pub fn c_add(x: ExtendedComplex, y: ExtendedComplex) -> Result<ExtendedComplex> {
    match (x.infinite, y.infinite) {
        (true, true) => Err(Error::IndeterminateForm("∞ + ∞")),
        (true, false) | (false, true) => Ok(ExtendedComplex::INFINITY),
        (false, false) => Ok(ExtendedComplex::from_parts(x.re + y.re, x.im + y.im)),
    }
}

pub fn c_sub(x: ExtendedComplex, y: ExtendedComplex) -> Result<ExtendedComplex> {
    match (x.infinite, y.infinite) {
        (true, true) => Err(Error::IndeterminateForm("∞ − ∞")),
        (true, false) | (false, true) => Ok(ExtendedComplex::INFINITY),
        (false, false) => Ok(ExtendedComplex::from_parts(x.re - y.re, x.im - y.im)),
    }
}

pub fn c_mul(x: ExtendedComplex, y: ExtendedComplex) -> Result<ExtendedComplex> {
    match (x.infinite, y.infinite) {
        (true, _) if y.is_zero() => Err(Error::IndeterminateForm("∞ · 0")),
        (_, true) if x.is_zero() => Err(Error::IndeterminateForm("0 · ∞")),
        (true, _) | (_, true) => Ok(ExtendedComplex::INFINITY),
        (false, false) => Ok(ExtendedComplex::from_parts(
            x.re * y.re - x.im * y.im,
            x.re * y.im + x.im * y.re,
        )),
    }
}

pub fn c_div(x: ExtendedComplex, y: ExtendedComplex) -> Result<ExtendedComplex> {
    if x.infinite && y.infinite {
        return Err(Error::IndeterminateForm("∞ / ∞"));
    }
    if x.is_zero() && y.is_zero() {
        return Err(Error::IndeterminateForm("0 / 0"));
    }
    if x.infinite || y.is_zero() {
        return Ok(ExtendedComplex::INFINITY);
    }
    if y.infinite {
        return Ok(ExtendedComplex::ZERO);
    }
    let (re, im) = smith_div(x.re, x.im, y.re, y.im);
    Ok(ExtendedComplex::from_parts(re, im))
}

impl fmt::Debug for ExtendedComplex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl fmt::Display for ExtendedComplex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.infinite {
            write!(f, "inf")
        } else if self.im >= 0.0 || self.im.is_nan() {
            write!(f, "{}+{}i", self.re, self.im)
        } else {
            write!(f, "{}-{}i", self.re, -self.im)
        }
    }
}

/// Parses the command-line complex literal grammar: `R`, `Ri`, `i`, `-i`,
/// `R+Si`, `R-Si`, and `inf`.
pub fn parse_complex(s: &str) -> Result<ExtendedComplex> {
    let t: String = s.chars().filter(|c| !c.is_whitespace()).collect();
    let err = || Error::Parse(format!("malformed complex literal '{s}'"));
    if t.is_empty() {
        return Err(err());
    }
    if t == "inf" || t == "∞" {
        return Ok(ExtendedComplex::INFINITY);
    }
    let Some(body) = t.strip_suffix('i') else {
        let re: f64 = t.parse().map_err(|_| err())?;
        return ExtendedComplex::new(re, 0.0).map_err(|_| err());
    };
    // split at the last sign that is not the leading sign or part of an exponent
    let bytes = body.as_bytes();
    let mut split = None;
    for k in (1..bytes.len()).rev() {
        if (bytes[k] == b'+' || bytes[k] == b'-') && !matches!(bytes[k - 1], b'e' | b'E') {
            split = Some(k);
            break;
        }
    }
    let coef = |c: &str| -> Result<f64> {
        match c {
            "" | "+" => Ok(1.0),
            "-" => Ok(-1.0),
            _ => c.parse().map_err(|_| err()),
        }
    };
    let (re, im) = match split {
        Some(k) => (body[..k].parse::<f64>().map_err(|_| err())?, coef(&body[k..])?),
        None => (0.0, coef(body)?),
    };
    ExtendedComplex::new(re, im).map_err(|_| err())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> ExtendedComplex {
        ExtendedComplex::new(re, im).unwrap()
    }

    #[test]
    fn basic_arithmetic() {
        assert_eq!(c_mul(c(1.0, 2.0), c(3.0, -1.0)).unwrap(), c(5.0, 5.0));
        assert_eq!(c_add(c(1.5, -2.0), ExtendedComplex::ZERO).unwrap(), c(1.5, -2.0));
        assert_eq!(c_div(c(1.0, 1.0), c(1.0, -1.0)).unwrap(), c(0.0, 1.0));
    }

    #[test]
    fn infinity_rules() {
        let inf = ExtendedComplex::INFINITY;
        assert!(matches!(c_mul(inf, ExtendedComplex::ZERO), Err(Error::IndeterminateForm(_))));
        assert!(matches!(c_sub(inf, inf), Err(Error::IndeterminateForm(_))));
        assert!(matches!(
            c_div(ExtendedComplex::ZERO, ExtendedComplex::ZERO),
            Err(Error::IndeterminateForm(_))
        ));
        assert!(matches!(c_div(inf, inf), Err(Error::IndeterminateForm(_))));
        assert!(c_div(c(5.0, 0.0), ExtendedComplex::ZERO).unwrap().is_infinity());
        assert!(c_div(c(5.0, 0.0), inf).unwrap().is_zero());
        assert!(c_add(inf, c(3.0, 1.0)).unwrap().is_infinity());
        assert!(c_mul(inf, c(0.0, 2.0)).unwrap().is_infinity());
    }

    #[test]
    fn constructor_guards() {
        assert!(ExtendedComplex::new(f64::NAN, 0.0).is_err());
        assert!(ExtendedComplex::new(0.0, f64::INFINITY).is_err());
        assert!(ExtendedComplex::new(2e300, 0.0).is_err());
        let inf = ExtendedComplex::INFINITY;
        assert_eq!((inf.re(), inf.im()), (0.0, 0.0));
    }

    #[test]
    fn smith_division_avoids_overflow() {
        // naive |y|^2 would overflow
        let q = c_div(c(1e200, 1e200), c(1e200, 1e200)).unwrap();
        assert!((q.re() - 1.0).abs() < 1e-15 && q.im().abs() < 1e-15);
        let q = c_div(c(1.0, 0.0), c(1e-170, 1e-170)).unwrap();
        assert!((q.re() - 0.5e170).abs() / 0.5e170 < 1e-14);
    }

    #[test]
    fn principal_sqrt_branch() {
        let r = c(-4.0, 0.0).sqrt();
        assert!((r.re()).abs() < 1e-15 && (r.im() - 2.0).abs() < 1e-15);
        let r = c(3.0, 4.0).sqrt();
        assert!((r.re() - 2.0).abs() < 1e-15 && (r.im() - 1.0).abs() < 1e-15);
        let r = c(0.0, -2.0).sqrt();
        assert!((r.re() - 1.0).abs() < 1e-15 && (r.im() + 1.0).abs() < 1e-15);
        assert!(r.re() >= 0.0);
    }

    #[test]
    fn literal_grammar() {
        assert_eq!(parse_complex("3").unwrap(), c(3.0, 0.0));
        assert_eq!(parse_complex("2.5i").unwrap(), c(0.0, 2.5));
        assert_eq!(parse_complex("i").unwrap(), c(0.0, 1.0));
        assert_eq!(parse_complex("-i").unwrap(), c(0.0, -1.0));
        assert_eq!(parse_complex("1+2i").unwrap(), c(1.0, 2.0));
        assert_eq!(parse_complex("-1-0.5i").unwrap(), c(-1.0, -0.5));
        assert_eq!(parse_complex("1e-3+2e+1i").unwrap(), c(1e-3, 20.0));
        assert!(parse_complex("inf").unwrap().is_infinity());
        assert!(parse_complex("1+").is_err());
        assert!(parse_complex("abc").is_err());
        assert!(parse_complex("").is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn rel(a: ExtendedComplex, b: ExtendedComplex) -> f64 {
            a.dist(&b) / a.abs().max(b.abs()).max(1.0)
        }

        fn arb() -> impl Strategy<Value = ExtendedComplex> {
            (-10.0f64..10.0, -10.0f64..10.0).prop_map(|(r, i)| ExtendedComplex::new(r, i).unwrap())
        }

        proptest! {
            #[test]
            fn field_laws(x in arb(), y in arb(), z in arb()) {
                let add = |a, b| c_add(a, b).unwrap();
                let mul = |a, b| c_mul(a, b).unwrap();
                prop_assert!(rel(add(x, y), add(y, x)) < 1e-12);
                prop_assert!(rel(mul(x, y), mul(y, x)) < 1e-12);
                prop_assert!(rel(add(add(x, y), z), add(x, add(y, z))) < 1e-12);
                prop_assert!(rel(mul(mul(x, y), z), mul(x, mul(y, z))) < 1e-12);
                let scale = (x.abs() * (y.abs() + z.abs())).max(1.0);
                prop_assert!(mul(x, add(y, z)).dist(&add(mul(x, y), mul(x, z))) / scale < 1e-12);
            }

            #[test]
            fn division_inverts_multiplication(x in arb(), y in arb()) {
                prop_assume!(y.abs() > 1e-6);
                let back = c_div(c_mul(x, y).unwrap(), y).unwrap();
                prop_assert!(back.dist(&x) / x.abs().max(1e-300) < 1e-10 || back.dist(&x) < 1e-14);
            }
        }
    }
}
