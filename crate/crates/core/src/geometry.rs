//! Möbius transformations `z ↦ (az + b)/(cz + d)` on the extended complex plane:
//! evaluation, group operations, fixed points, geometry classification, the
//! characteristic constant, orbit generation and stereographic projection.
//!
//! Classification works on the determinant-normalized matrix and reads the
//! class off the squared trace `τ = (tr M)²`:
//!
//! | class      | condition on τ          |
//! |------------|-------------------------|
//! | Parabolic  | τ = 4 (Identity if M = ±I) |
//! | Circular   | τ = 0                   |
//! | Elliptic   | 0 < τ < 4               |
//! | Hyperbolic | τ > 4                   |
//! | Loxodromic | τ ∉ [0, 4] otherwise (complex, or real negative) |
//!
//! The discriminant `Δ = τ − 4` (for `det M = 1`) is `−4` for a circular map,
//! not `0`: a circular map is the elliptic rotation by π and has two fixed
//! points. The class boundaries above therefore follow the τ conditions only.

use std::fmt;
use std::str::FromStr;

use crate::complex::{c_div, ExtendedComplex as C};
use crate::error::{Error, Result};

/// Minimum `|ad − bc|` for a matrix to count as invertible.
pub const DET_EPS: f64 = 1e-12;
/// Classification tolerance for exactly specified matrices.
pub const DEFAULT_TOL: f64 = 1e-9;
/// Classification tolerance for learned, noisy parameters.
pub const CENSUS_TOL: f64 = 1e-3;

// raw component helpers; MobiusParams entries are always finite
#[inline]
fn mul(x: (f64, f64), y: (f64, f64)) -> (f64, f64) {
    (x.0 * y.0 - x.1 * y.1, x.0 * y.1 + x.1 * y.0)
}
#[inline]
fn add(x: (f64, f64), y: (f64, f64)) -> (f64, f64) {
    (x.0 + y.0, x.1 + y.1)
}
#[inline]
fn sub(x: (f64, f64), y: (f64, f64)) -> (f64, f64) {
    (x.0 - y.0, x.1 - y.1)
}
#[inline]
fn div(x: (f64, f64), y: (f64, f64)) -> (f64, f64) {
    crate::complex::smith_div(x.0, x.1, y.0, y.1)
}
#[inline]
fn modulus(x: (f64, f64)) -> f64 {
    x.0.hypot(x.1)
}
#[inline]
fn parts(z: C) -> (f64, f64) {
    (z.re(), z.im())
}
#[inline]
fn csqrt(x: (f64, f64)) -> (f64, f64) {
    crate::complex::principal_sqrt(x.0, x.1)
}

/// The matrix `[[a, b], [c, d]]` of a Möbius map. Entries are finite and the
/// determinant is bounded away from zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MobiusParams {
    a: C,
    b: C,
    c: C,
    d: C,
}

impl MobiusParams {
    pub fn new(a: C, b: C, c: C, d: C) -> Result<Self> {
        if [a, b, c, d].iter().any(C::is_infinity) {
            return Err(Error::InvalidComplex("Mobius coefficients must be finite".into()));
        }
        let m = Self { a, b, c, d };
        let det = modulus(m.det_parts());
        if !(det > DET_EPS) {
            return Err(Error::InvalidMobius(det));
        }
        Ok(m)
    }

    /// Convenience constructor from `(re, im)` pairs.
    pub fn from_parts(a: (f64, f64), b: (f64, f64), c: (f64, f64), d: (f64, f64)) -> Result<Self> {
        Self::new(C::new(a.0, a.1)?, C::new(b.0, b.1)?, C::new(c.0, c.1)?, C::new(d.0, d.1)?)
    }

    /// Real-entried matrix.
    pub fn real(a: f64, b: f64, c: f64, d: f64) -> Result<Self> {
        Self::from_parts((a, 0.0), (b, 0.0), (c, 0.0), (d, 0.0))
    }

    pub fn identity() -> Self {
        Self { a: C::ONE, b: C::ZERO, c: C::ZERO, d: C::ONE }
    }

    pub fn a(&self) -> C {
        self.a
    }
    pub fn b(&self) -> C {
        self.b
    }
    pub fn c(&self) -> C {
        self.c
    }
    pub fn d(&self) -> C {
        self.d
    }

    fn entries(&self) -> [(f64, f64); 4] {
        [parts(self.a), parts(self.b), parts(self.c), parts(self.d)]
    }

    fn from_raw(e: [(f64, f64); 4]) -> Result<Self> {
        Self::from_parts(e[0], e[1], e[2], e[3])
    }

    fn det_parts(&self) -> (f64, f64) {
        let [a, b, c, d] = self.entries();
        sub(mul(a, d), mul(b, c))
    }

    pub fn det(&self) -> C {
        let (r, i) = self.det_parts();
        C::from_parts(r, i)
    }

    pub fn trace(&self) -> C {
        C::from_parts(self.a.re() + self.d.re(), self.a.im() + self.d.im())
    }

    /// `λ·M`, the same map.
    pub fn scale(&self, lambda: C) -> Result<Self> {
        let l = parts(lambda);
        let [a, b, c, d] = self.entries();
        Self::from_raw([mul(l, a), mul(l, b), mul(l, c), mul(l, d)])
    }

    /// Adjugate `[[d, −b], [−c, a]]`, a representative of the inverse map.
    pub fn inverse(&self) -> Self {
        Self { a: self.d, b: self.b.neg(), c: self.c.neg(), d: self.a }
    }

    /// Entrywise distance to `λ·I` for the best λ; zero iff the map is the identity.
    fn identity_defect(&self) -> f64 {
        let [a, b, c, d] = self.entries();
        modulus(b).max(modulus(c)).max(modulus(sub(a, d)))
    }
}

impl fmt::Display for MobiusParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[[{}, {}], [{}, {}]]", self.a, self.b, self.c, self.d)
    }
}

/// Evaluates `(az + b)/(cz + d)` with `∞ ↦ a/c` and the pole `−d/c ↦ ∞`.
pub fn apply_mobius(m: &MobiusParams, z: C) -> Result<C> {
    let [a, b, c, d] = m.entries();
    if z.is_infinity() {
        return if c == (0.0, 0.0) {
            Ok(C::INFINITY)
        } else {
            let (r, i) = div(a, c);
            Ok(C::from_parts(r, i))
        };
    }
    let zz = parts(z);
    let num = add(mul(a, zz), b);
    let den = add(mul(c, zz), d);
    c_div(C::from_parts(num.0, num.1), C::from_parts(den.0, den.1))
}

/// Matrix product `m1·m2`, i.e. the map `z ↦ m1(m2(z))`.
pub fn compose(m1: &MobiusParams, m2: &MobiusParams) -> Result<MobiusParams> {
    let [a1, b1, c1, d1] = m1.entries();
    let [a2, b2, c2, d2] = m2.entries();
    MobiusParams::from_raw([
        add(mul(a1, a2), mul(b1, c2)),
        add(mul(a1, b2), mul(b1, d2)),
        add(mul(c1, a2), mul(d1, c2)),
        add(mul(c1, b2), mul(d1, d2)),
    ])
}

/// Divides by the principal square root of the determinant so that `det = 1`.
pub fn normalize_det(m: &MobiusParams) -> Result<MobiusParams> {
    let det = m.det_parts();
    if !(modulus(det) > DET_EPS) {
        return Err(Error::InvalidMobius(modulus(det)));
    }
    let s = csqrt(det);
    let [a, b, c, d] = m.entries();
    MobiusParams::from_raw([div(a, s), div(b, s), div(c, s), div(d, s)])
}

/// Squared trace `(tr M)²` of the determinant-normalized matrix,
/// i.e. `(a + d)² / (ad − bc)`.
pub fn squared_trace(m: &MobiusParams) -> C {
    let [a, _, _, d] = m.entries();
    let t = add(a, d);
    let (r, i) = div(mul(t, t), m.det_parts());
    C::from_parts(r, i)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GeometryClass {
    Identity,
    Parabolic,
    Circular,
    Elliptic,
    Hyperbolic,
    Loxodromic,
}

impl GeometryClass {
    pub const ALL: [GeometryClass; 6] = [
        GeometryClass::Identity,
        GeometryClass::Parabolic,
        GeometryClass::Circular,
        GeometryClass::Elliptic,
        GeometryClass::Hyperbolic,
        GeometryClass::Loxodromic,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            GeometryClass::Identity => "Identity",
            GeometryClass::Parabolic => "Parabolic",
            GeometryClass::Circular => "Circular",
            GeometryClass::Elliptic => "Elliptic",
            GeometryClass::Hyperbolic => "Hyperbolic",
            GeometryClass::Loxodromic => "Loxodromic",
        }
    }
}

impl fmt::Display for GeometryClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GeometryClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Parse(format!("unknown geometry class '{s}'")))
    }
}

/// Class implied by a squared trace alone (never `Identity`, which needs the matrix).
pub fn classify_tau(tau: C, tol: f64) -> GeometryClass {
    if tau.is_infinity() || tau.im().abs() > tol {
        return GeometryClass::Loxodromic;
    }
    let t = tau.re();
    if (t - 4.0).abs() <= tol {
        GeometryClass::Parabolic
    } else if t.abs() <= tol {
        GeometryClass::Circular
    } else if t > tol && t < 4.0 - tol {
        GeometryClass::Elliptic
    } else if t > 4.0 + tol {
        GeometryClass::Hyperbolic
    } else {
        GeometryClass::Loxodromic
    }
}

pub fn classify(m: &MobiusParams, tol: f64) -> Result<GeometryClass> {
    let n = normalize_det(m)?;
    let class = classify_tau(squared_trace(&n), tol);
    if class == GeometryClass::Parabolic {
        let [a, b, c, d] = n.entries();
        let near = |s: f64| {
            modulus(sub(a, (s, 0.0))) <= tol
                && modulus(b) <= tol
                && modulus(c) <= tol
                && modulus(sub(d, (s, 0.0))) <= tol
        };
        if near(1.0) || near(-1.0) {
            return Ok(GeometryClass::Identity);
        }
    }
    Ok(class)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FixedPoints {
    pub gamma1: C,
    pub gamma2: C,
    /// 1 when the two fixed points coincide (then `gamma2 == gamma1`).
    pub multiplicity: u8,
}

impl FixedPoints {
    fn single(g: C) -> Self {
        Self { gamma1: g, gamma2: g, multiplicity: 1 }
    }

    /// Distinct fixed points.
    pub fn points(&self) -> Vec<C> {
        if self.multiplicity == 1 {
            vec![self.gamma1]
        } else {
            vec![self.gamma1, self.gamma2]
        }
    }
}

/// Solves `M(γ) = γ`, i.e. `cγ² + (d − a)γ − b = 0`.
///
/// With `c ≠ 0` the roots are `((a − d) ± √Δ)/(2c)`, evaluated in the
/// cancellation-free form (larger-magnitude numerator first, the other root
/// from the product `−b/c`). With `c = 0` one fixed point is `∞`, the other is
/// `b/(d − a)` unless `a = d`.
pub fn fixed_points(m: &MobiusParams) -> Result<FixedPoints> {
    let n = normalize_det(m)?;
    if n.identity_defect() <= DET_EPS {
        return Err(Error::IdentityMap);
    }
    let [a, b, c, d] = n.entries();
    let amd = sub(a, d);
    if c == (0.0, 0.0) {
        if modulus(amd) <= DEFAULT_TOL {
            return Ok(FixedPoints::single(C::INFINITY));
        }
        let (r, i) = div(b, sub(d, a));
        return Ok(FixedPoints { gamma1: C::INFINITY, gamma2: C::from_parts(r, i), multiplicity: 2 });
    }
    let two_c = (2.0 * c.0, 2.0 * c.1);
    let delta = add(mul(amd, amd), (4.0 * mul(b, c).0, 4.0 * mul(b, c).1));
    if modulus(delta) <= DEFAULT_TOL {
        let (r, i) = div(amd, two_c);
        return Ok(FixedPoints::single(C::from_parts(r, i)));
    }
    let s = csqrt(delta);
    let plus = add(amd, s);
    let minus = sub(amd, s);
    let (big, big_is_plus) = if modulus(plus) >= modulus(minus) { (plus, true) } else { (minus, false) };
    let g_big = div(big, two_c);
    let g_small = div((-2.0 * b.0, -2.0 * b.1), big);
    let (g1, g2) = if big_is_plus { (g_big, g_small) } else { (g_small, g_big) };
    Ok(FixedPoints {
        gamma1: C::from_parts(g1.0, g1.1),
        gamma2: C::from_parts(g2.0, g2.1),
        multiplicity: 2,
    })
}

/// Eigenvalue ratio `k = λ₁/λ₂` of the normalized matrix with `|k| ≥ 1`.
pub fn characteristic_constant(m: &MobiusParams) -> Result<C> {
    let n = normalize_det(m)?;
    let [a, _, _, d] = n.entries();
    let t = add(a, d);
    let disc = sub(mul(t, t), (4.0, 0.0));
    if modulus(disc) <= DEFAULT_TOL {
        return Err(Error::ParabolicMap);
    }
    let s = csqrt(disc);
    let l1 = (0.5 * (t.0 + s.0), 0.5 * (t.1 + s.1));
    let l2 = (0.5 * (t.0 - s.0), 0.5 * (t.1 - s.1));
    let mut k = div(l1, l2);
    if modulus(k) < 1.0 - DEFAULT_TOL {
        k = div(l2, l1);
    }
    Ok(C::from_parts(k.0, k.1))
}

/// Orbit `[z0, M(z0), M(M(z0)), …]` of length `steps + 1`; the sequence stops
/// early once it reaches `∞`.
pub fn flow_trajectory(m: &MobiusParams, z0: C, steps: usize) -> Result<Vec<C>> {
    if steps == 0 {
        return Err(Error::Config("flow needs at least one step".into()));
    }
    let mut out = Vec::with_capacity(steps + 1);
    out.push(z0);
    let mut z = z0;
    for _ in 0..steps {
        if z.is_infinity() {
            break;
        }
        z = apply_mobius(m, z)?;
        out.push(z);
    }
    Ok(out)
}

/// Stereographic projection onto the unit sphere with `0` at the south pole
/// `(0, 0, −1)` and `∞` at the north pole `(0, 0, 1)`.
pub fn stereographic_project(z: C) -> [f64; 3] {
    if z.is_infinity() {
        return [0.0, 0.0, 1.0];
    }
    let n2 = z.norm_sqr();
    let den = 1.0 + n2;
    [2.0 * z.re() / den, 2.0 * z.im() / den, (n2 - 1.0) / den]
}

/// Inverse of [`stereographic_project`]. Points are assumed to lie on the sphere.
pub fn inverse_stereographic(p: [f64; 3]) -> C {
    let [x, y, w] = p;
    let rho2 = x * x + y * y;
    if w >= 1.0 || (w > 0.0 && rho2 == 0.0) {
        return C::INFINITY;
    }
    if w > 0.0 {
        // 1/(1 − w) = (1 + w)/(x² + y²) avoids cancellation near the north pole
        let f = (1.0 + w) / rho2;
        C::from_parts(x * f, y * f)
    } else {
        C::from_parts(x / (1.0 - w), y / (1.0 - w))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn c(re: f64, im: f64) -> C {
        C::new(re, im).unwrap()
    }

    fn diag(x: (f64, f64), y: (f64, f64)) -> MobiusParams {
        MobiusParams::from_parts(x, (0.0, 0.0), (0.0, 0.0), y).unwrap()
    }

    fn polar(r: f64, t: f64) -> (f64, f64) {
        (r * t.cos(), r * t.sin())
    }

    #[test]
    fn apply_examples() {
        let t = MobiusParams::real(1.0, 2.0, 0.0, 1.0).unwrap();
        assert_eq!(apply_mobius(&t, c(1.0, 0.0)).unwrap(), c(3.0, 0.0));
        let inv = MobiusParams::real(0.0, 1.0, 1.0, 0.0).unwrap();
        assert_eq!(apply_mobius(&inv, c(2.0, 0.0)).unwrap(), c(0.5, 0.0));
        let z = c(-0.3, 7.25);
        assert_eq!(apply_mobius(&MobiusParams::identity(), z).unwrap(), z);
        let m = MobiusParams::real(2.0, 1.0, 1.0, 1.0).unwrap();
        assert_eq!(apply_mobius(&m, C::INFINITY).unwrap(), c(2.0, 0.0));
        assert!(apply_mobius(&m, c(-1.0, 0.0)).unwrap().is_infinity());
        assert!(apply_mobius(&t, C::INFINITY).unwrap().is_infinity());
    }

    #[test]
    fn singular_matrix_rejected() {
        assert!(matches!(MobiusParams::real(1.0, 2.0, 2.0, 4.0), Err(Error::InvalidMobius(_))));
        assert!(matches!(MobiusParams::real(0.0, 0.0, 0.0, 0.0), Err(Error::InvalidMobius(_))));
    }

    #[test]
    fn compose_examples() {
        let m = MobiusParams::from_parts((1.0, 2.0), (0.5, 0.0), (-1.0, 0.3), (2.0, -1.0)).unwrap();
        assert_eq!(compose(&MobiusParams::identity(), &m).unwrap(), m);
        let p = compose(&m, &m.inverse()).unwrap();
        assert!(p.identity_defect() < 1e-12);
        assert!(p.a().abs() > 0.1);
    }

    #[test]
    fn normalize_examples() {
        let n = normalize_det(&diag((2.0, 0.0), (2.0, 0.0))).unwrap();
        assert_eq!(n, MobiusParams::identity());
        let m = MobiusParams::real(2.0, 1.0, 1.0, 1.0).unwrap();
        assert_eq!(normalize_det(&m).unwrap(), m);
    }

    #[test]
    fn fixed_point_examples() {
        let fp = fixed_points(&diag(polar(1.0, PI / 6.0), polar(1.0, -PI / 6.0))).unwrap();
        assert_eq!(fp.multiplicity, 2);
        assert!(fp.gamma1.is_infinity());
        assert!(fp.gamma2.abs() < 1e-15);

        let fp = fixed_points(&MobiusParams::real(1.0, 3.0, 0.0, 1.0).unwrap()).unwrap();
        assert_eq!(fp.multiplicity, 1);
        assert!(fp.gamma1.is_infinity());

        let m = MobiusParams::real(2.0, 1.0, 1.0, 1.0).unwrap();
        let fp = fixed_points(&m).unwrap();
        let golden = (1.0 + 5f64.sqrt()) / 2.0;
        assert!((fp.gamma1.re() - golden).abs() < 1e-12);
        assert!((fp.gamma2.re() - (1.0 - 5f64.sqrt()) / 2.0).abs() < 1e-12);
        for g in fp.points() {
            assert!(apply_mobius(&m, g).unwrap().dist(&g) < 1e-12);
        }
        assert!(matches!(fixed_points(&diag((3.0, 1.0), (3.0, 1.0))), Err(Error::IdentityMap)));
    }

    #[test]
    fn classify_table_representatives() {
        use GeometryClass::*;
        let tol = DEFAULT_TOL;
        assert_eq!(classify(&MobiusParams::real(1.0, 3.0, 0.0, 1.0).unwrap(), tol).unwrap(), Parabolic);
        assert_eq!(classify(&diag((0.0, 1.0), (0.0, -1.0)), tol).unwrap(), Circular);
        assert_eq!(classify(&diag(polar(1.0, PI / 8.0), polar(1.0, -PI / 8.0)), tol).unwrap(), Elliptic);
        assert_eq!(classify(&diag((0.5f64.exp(), 0.0), ((-0.5f64).exp(), 0.0)), tol).unwrap(), Hyperbolic);
        let k = polar(1.2, PI / 6.0);
        let kinv = div((1.0, 0.0), k);
        assert_eq!(classify(&diag(k, kinv), tol).unwrap(), Loxodromic);
        assert_eq!(classify(&MobiusParams::identity(), tol).unwrap(), Identity);
        assert_eq!(classify(&diag((-2.0, 0.0), (-2.0, 0.0)), tol).unwrap(), Identity);
    }

    #[test]
    fn loxodromic_example_agrees_with_eigenvalue_oracle() {
        // eigenvalues of a diagonal matrix are its entries; k = λ1/λ2 = 1.44 e^{iπ/3}
        let k = polar(1.2, PI / 6.0);
        let m = diag(k, div((1.0, 0.0), k));
        let tau = squared_trace(&m);
        assert!(tau.im().abs() > 0.1);
        let kk = characteristic_constant(&m).unwrap();
        assert!((kk.abs() - 1.44).abs() < 1e-12);
        assert!((kk.arg() - PI / 3.0).abs() < 1e-12);
    }

    #[test]
    fn characteristic_constant_examples() {
        let k = characteristic_constant(&diag((2.0, 0.0), (0.5, 0.0))).unwrap();
        assert!(k.dist(&c(4.0, 0.0)) < 1e-12);
        let theta = 0.7;
        let k = characteristic_constant(&diag(polar(1.0, theta / 2.0), polar(1.0, -theta / 2.0))).unwrap();
        assert!((k.abs() - 1.0).abs() < 1e-12);
        assert!((k.arg() - theta).abs() < 1e-12);
        let k = characteristic_constant(&MobiusParams::real(2.0, 1.0, 1.0, 1.0).unwrap()).unwrap();
        // oracle: eigenvalues of [[2,1],[1,1]] by the characteristic polynomial
        let (l1, l2) = ((3.0 + 5f64.sqrt()) / 2.0, (3.0 - 5f64.sqrt()) / 2.0);
        assert!((k.re() - l1 / l2).abs() < 1e-10 && k.im().abs() < 1e-12);
        assert!((k.re() - 6.854_101_966).abs() < 1e-8);
        assert!(matches!(
            characteristic_constant(&MobiusParams::real(1.0, 3.0, 0.0, 1.0).unwrap()),
            Err(Error::ParabolicMap)
        ));
    }

    #[test]
    fn flow_examples() {
        let z0 = c(1.0, 1.0);
        let traj = flow_trajectory(&MobiusParams::identity(), z0, 3).unwrap();
        assert_eq!(traj, vec![z0; 4]);
        let traj = flow_trajectory(&MobiusParams::real(1.0, 1.0, 0.0, 1.0).unwrap(), C::ZERO, 3).unwrap();
        let re: Vec<f64> = traj.iter().map(C::re).collect();
        assert_eq!(re, vec![0.0, 1.0, 2.0, 3.0]);
        let h = diag((0.1f64.exp(), 0.0), ((-0.1f64).exp(), 0.0));
        let traj = flow_trajectory(&h, C::ONE, 50).unwrap();
        assert!(traj.windows(2).all(|w| w[1].abs() > w[0].abs()));
        // hits ∞ then stops
        let inv = MobiusParams::real(0.0, 1.0, 1.0, 0.0).unwrap();
        let traj = flow_trajectory(&inv, C::ZERO, 5).unwrap();
        assert_eq!(traj.len(), 2);
        assert!(traj[1].is_infinity());
        assert!(flow_trajectory(&inv, C::ZERO, 0).is_err());
    }

    #[test]
    fn stereographic_examples() {
        assert_eq!(stereographic_project(C::INFINITY), [0.0, 0.0, 1.0]);
        assert_eq!(stereographic_project(C::ZERO), [0.0, 0.0, -1.0]);
        assert_eq!(stereographic_project(C::ONE), [1.0, 0.0, 0.0]);
        assert!(inverse_stereographic([0.0, 0.0, 1.0]).is_infinity());
    }

    #[test]
    fn class_names_round_trip() {
        for c in GeometryClass::ALL {
            assert_eq!(c.name().parse::<GeometryClass>().unwrap(), c);
        }
        assert!("Spiral".parse::<GeometryClass>().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn entry() -> impl Strategy<Value = (f64, f64)> {
            (-2.0f64..2.0, -2.0f64..2.0)
        }

        fn arb_mobius() -> impl Strategy<Value = MobiusParams> {
            (entry(), entry(), entry(), entry())
                .prop_filter_map("invertible", |(a, b, c, d)| {
                    let m = MobiusParams::from_parts(a, b, c, d).ok()?;
                    (modulus(m.det_parts()) > 1e-2).then_some(m)
                })
        }

        fn close(x: C, y: C, tol: f64) -> bool {
            x.dist(&y) <= tol * x.abs().max(1.0) || (x.is_infinity() && y.is_infinity())
        }

        proptest! {
            #[test]
            fn projective_invariance(m in arb_mobius(), l in entry(), z in entry()) {
                prop_assume!(modulus(l) > 1e-2);
                let lm = m.scale(C::new(l.0, l.1).unwrap()).unwrap();
                let z = C::new(z.0, z.1).unwrap();
                let den = add(mul(parts(m.c()), parts(z)), parts(m.d()));
                prop_assume!(modulus(den) > 1e-3);
                prop_assert!(close(apply_mobius(&lm, z).unwrap(), apply_mobius(&m, z).unwrap(), 1e-9));
                prop_assert_eq!(classify(&lm, 1e-6).unwrap(), classify(&m, 1e-6).unwrap());
            }

            #[test]
            fn conjugation_invariance(m in arb_mobius(), g in arb_mobius()) {
                let conj = compose(&compose(&g, &m).unwrap(), &g.inverse()).unwrap();
                let t1 = squared_trace(&m);
                let t2 = squared_trace(&conj);
                prop_assert!(t1.dist(&t2) < 1e-9 * t1.abs().max(1.0));
                // only compare labels when τ is safely away from every boundary
                let margin = [t1.im().abs(), (t1.re() - 4.0).abs(), t1.re().abs()]
                    .into_iter().fold(f64::INFINITY, f64::min);
                prop_assume!(margin > 1e-6);
                prop_assert_eq!(classify(&conj, 1e-9).unwrap(), classify(&m, 1e-9).unwrap());
            }

            #[test]
            fn fixed_points_are_fixed(m in arb_mobius()) {
                if let Ok(fp) = fixed_points(&m) {
                    for g in fp.points() {
                        let mg = apply_mobius(&m, g).unwrap();
                        if g.is_infinity() {
                            prop_assert!(mg.is_infinity());
                        } else {
                            prop_assert!(mg.dist(&g) < 1e-8 * g.abs().max(1.0));
                        }
                    }
                }
            }

            #[test]
            fn composition_is_function_composition(m1 in arb_mobius(), m2 in arb_mobius(), z in entry()) {
                let z = C::new(z.0, z.1).unwrap();
                let inner = apply_mobius(&m2, z).unwrap();
                prop_assume!(!inner.is_infinity() && inner.abs() < 1e3);
                let den = add(mul(parts(m1.c()), parts(inner)), parts(m1.d()));
                prop_assume!(modulus(den) > 1e-3);
                let lhs = apply_mobius(&compose(&m1, &m2).unwrap(), z).unwrap();
                let rhs = apply_mobius(&m1, inner).unwrap();
                prop_assert!(close(lhs, rhs, 1e-9));
            }

            #[test]
            fn normalization_preserves_map(m in arb_mobius(), z in entry()) {
                let z = C::new(z.0, z.1).unwrap();
                let den = add(mul(parts(m.c()), parts(z)), parts(m.d()));
                prop_assume!(modulus(den) > 1e-3);
                let n = normalize_det(&m).unwrap();
                prop_assert!(n.det().dist(&C::ONE) < 1e-12);
                prop_assert!(close(apply_mobius(&n, z).unwrap(), apply_mobius(&m, z).unwrap(), 1e-10));
            }

            #[test]
            fn sphere_round_trip(r in 0.0f64..6.0, t in 0.0f64..std::f64::consts::TAU, s in -1.0f64..1.0) {
                let z = C::from_polar(10f64.powf(r) * s.abs(), t).unwrap();
                prop_assume!(z.abs() < 1e6);
                let p = stereographic_project(z);
                prop_assert!((p[0] * p[0] + p[1] * p[1] + p[2] * p[2] - 1.0).abs() < 1e-12);
                let back = inverse_stereographic(p);
                prop_assert!(back.dist(&z) <= 1e-12 * z.abs().max(1.0));
            }
        }
    }
}
