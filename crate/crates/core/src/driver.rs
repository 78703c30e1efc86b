//! Drivers `g(t, y, z)` and the wrappers the solvers need: masking by an
//! event, freezing at a given state, and the sign flip for upper barriers.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filtration::FiltrationTree;

/// Where a driver is evaluated: the post-node `node` of stage `stage`, at time `t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Site {
    pub stage: usize,
    pub node: usize,
    pub t: f64,
}

impl Site {
    pub fn at_time(t: f64) -> Self {
        Site { stage: 0, node: 0, t }
    }
}

/// A Lipschitz generator as seen by the solvers.
pub trait Generator: Sync {
    fn eval(&self, site: Site, y: f64, z: f64) -> f64;
    /// Lipschitz constant in `(y, z)`.
    fn lipschitz(&self) -> f64;
}

impl<G: Generator + ?Sized> Generator for &G {
    fn eval(&self, site: Site, y: f64, z: f64) -> f64 {
        (**self).eval(site, y, z)
    }

    fn lipschitz(&self) -> f64 {
        (**self).lipschitz()
    }
}

/// Serialized form: `{"name": "...", "params": {...}}`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriverSpec {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

impl DriverSpec {
    pub fn new(name: &str, params: &[(&str, f64)]) -> Self {
        DriverSpec { name: name.to_string(), params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect() }
    }
}

pub const REGISTRY: &[&str] = &["zero", "affine", "discount", "ambiguity"];

#[derive(Clone, Copy, Debug, PartialEq)]
enum Kind {
    Zero,
    /// `a + a_t t + b y + c z`
    Affine {
        a: f64,
        a_t: f64,
        b: f64,
        c: f64,
    },
    /// `-ρ y + κ |z|`; discount is the case `κ = 0`.
    Ambiguity {
        rho: f64,
        kappa: f64,
    },
}

/// A registry driver.
#[derive(Clone, Debug, PartialEq)]
pub struct Driver {
    spec: DriverSpec,
    kind: Kind,
}

impl Driver {
    pub fn zero() -> Self {
        Driver { spec: DriverSpec::new("zero", &[]), kind: Kind::Zero }
    }

    pub fn affine(a: f64, b: f64, c: f64) -> Self {
        Self::from_spec(&DriverSpec::new("affine", &[("a", a), ("b", b), ("c", c)])).expect("finite coefficients")
    }

    pub fn discount(rho: f64) -> Self {
        Self::from_spec(&DriverSpec::new("discount", &[("rho", rho)])).expect("finite rate")
    }

    pub fn ambiguity(rho: f64, kappa: f64) -> Self {
        Self::from_spec(&DriverSpec::new("ambiguity", &[("rho", rho), ("kappa", kappa)])).expect("finite coefficients")
    }

    pub fn from_spec(spec: &DriverSpec) -> Result<Self> {
        let allowed: &[&str] = match spec.name.as_str() {
            "zero" => &[],
            "affine" => &["a", "a_t", "b", "c"],
            "discount" => &["rho"],
            "ambiguity" => &["rho", "kappa"],
            _ => {
                return Err(Error::UnknownDriver { name: spec.name.clone(), known: REGISTRY.join(", ") });
            }
        };
        for (key, value) in &spec.params {
            if !allowed.contains(&key.as_str()) {
                return Err(Error::InvalidDriver(format!(
                    "driver '{}' has no parameter '{key}' (accepted: {})",
                    spec.name,
                    allowed.join(", ")
                )));
            }
            if !value.is_finite() {
                return Err(Error::InvalidDriver(format!("parameter '{key}' must be finite")));
            }
        }
        let p = |key: &str| spec.params.get(key).copied().unwrap_or(0.0);
        let kind = match spec.name.as_str() {
            "zero" => Kind::Zero,
            "affine" => Kind::Affine { a: p("a"), a_t: p("a_t"), b: p("b"), c: p("c") },
            "discount" => Kind::Ambiguity { rho: p("rho"), kappa: 0.0 },
            _ => {
                if p("kappa") < 0.0 {
                    return Err(Error::InvalidDriver("kappa must be nonnegative".into()));
                }
                Kind::Ambiguity { rho: p("rho"), kappa: p("kappa") }
            }
        };
        Ok(Driver { spec: spec.clone(), kind })
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn spec(&self) -> &DriverSpec {
        &self.spec
    }

    pub fn g(&self, t: f64, y: f64, z: f64) -> f64 {
        match self.kind {
            Kind::Zero => 0.0,
            Kind::Affine { a, a_t, b, c } => a + a_t * t + b * y + c * z,
            Kind::Ambiguity { rho, kappa } => -rho * y + kappa * z.abs(),
        }
    }

    /// True when `g` does not depend on `(y, z)`.
    pub fn is_state_free(&self) -> bool {
        match self.kind {
            Kind::Zero => true,
            Kind::Affine { b, c, .. } => b == 0.0 && c == 0.0,
            Kind::Ambiguity { rho, kappa } => rho == 0.0 && kappa == 0.0,
        }
    }

    /// True when `g(t, 0, 0) = 0` for every `t`.
    pub fn vanishes_at_origin(&self) -> bool {
        match self.kind {
            Kind::Affine { a, a_t, .. } => a == 0.0 && a_t == 0.0,
            _ => true,
        }
    }
}

impl Generator for Driver {
    fn eval(&self, site: Site, y: f64, z: f64) -> f64 {
        self.g(site.t, y, z)
    }

    fn lipschitz(&self) -> f64 {
        match self.kind {
            Kind::Zero => 0.0,
            Kind::Affine { b, c, .. } => b.abs() + c.abs(),
            Kind::Ambiguity { rho, kappa } => rho.abs() + kappa,
        }
    }
}

/// Samples pairs of states on a seeded grid and checks the Lipschitz bound
/// together with finiteness of `g(t, 0, 0)`.
pub fn check_lipschitz<G: Generator + ?Sized>(g: &G, horizon: f64, seed: u64, probes: usize) -> Result<()> {
    let k = g.lipschitz();
    if !(k.is_finite() && k >= 0.0) {
        return Err(Error::InvalidDriver(format!("Lipschitz constant {k} is not a nonnegative number")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..probes {
        let site = Site::at_time(rng.gen_range(0.0..=horizon));
        if !g.eval(site, 0.0, 0.0).is_finite() {
            return Err(Error::InvalidDriver(format!("g({}, 0, 0) is not finite", site.t)));
        }
        let (y1, z1, y2, z2): (f64, f64, f64, f64) =
            (rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0));
        let lhs = (g.eval(site, y1, z1) - g.eval(site, y2, z2)).abs();
        let rhs = k * ((y1 - y2).abs() + (z1 - z2).abs()) * (1.0 + 1e-9);
        if lhs > rhs {
            return Err(Error::InvalidDriver(format!("Lipschitz bound {k} violated at t={}: |Δg| = {lhs:e} > {rhs:e}", site.t)));
        }
    }
    Ok(())
}

/// `1_A g`, with `A` given as a flag per post-node of every stage.
pub struct Masked<'a, G: ?Sized> {
    inner: &'a G,
    mask: Vec<Vec<bool>>,
}

impl<'a, G: Generator + ?Sized> Masked<'a, G> {
    /// `A` is a union of `G_s` atoms, given by `in_a` over the pre-nodes of
    /// stage `s`. The mask is the indicator of `A` on post-nodes of stages `>= s`
    /// and zero before.
    pub fn on_event(tree: &FiltrationTree, inner: &'a G, s: usize, in_a: &[bool]) -> Self {
        let n = tree.stage_count();
        let mut mask: Vec<Vec<bool>> = (0..=n).map(|k| vec![false; tree.post(k).len()]).collect();
        if s <= n {
            let mut pre_flags = in_a.to_vec();
            for k in s..=n {
                mask[k] = tree.post(k).iter().map(|w| pre_flags[w.parent]).collect();
                if k < n {
                    pre_flags = tree.pre(k + 1).iter().map(|v| mask[k][v.parent]).collect();
                }
            }
        }
        Masked { inner, mask }
    }
}

impl<G: Generator + ?Sized> Generator for Masked<'_, G> {
    fn eval(&self, site: Site, y: f64, z: f64) -> f64 {
        if self.mask[site.stage][site.node] {
            self.inner.eval(site, y, z)
        } else {
            0.0
        }
    }

    fn lipschitz(&self) -> f64 {
        self.inner.lipschitz()
    }
}

/// A driver frozen at a fixed state, one value per post-node.
pub struct Frozen {
    pub values: Vec<Vec<f64>>,
}

impl Generator for Frozen {
    fn eval(&self, site: Site, _y: f64, _z: f64) -> f64 {
        self.values[site.stage][site.node]
    }

    fn lipschitz(&self) -> f64 {
        0.0
    }
}

/// `(t, y, z) ↦ -g(t, -y, -z)`.
pub struct Negated<'a, G: ?Sized>(pub &'a G);

impl<G: Generator + ?Sized> Generator for Negated<'_, G> {
    fn eval(&self, site: Site, y: f64, z: f64) -> f64 {
        -self.0.eval(site, -y, -z)
    }

    fn lipschitz(&self) -> f64 {
        self.0.lipschitz()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filtration::build_lattice;

    #[test]
    fn registry_rejects_unknown_names() {
        let err = Driver::from_spec(&DriverSpec::new("quadratic", &[])).unwrap_err();
        match err {
            Error::UnknownDriver { known, .. } => assert_eq!(known, "zero, affine, discount, ambiguity"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(Driver::from_spec(&DriverSpec::new("discount", &[("kappa", 1.0)])), Err(Error::InvalidDriver(_))));
    }

    #[test]
    fn registry_values_and_constants() {
        let d = Driver::affine(1.0, -0.5, 0.25);
        assert_eq!(d.g(0.0, 2.0, 4.0), 1.0);
        assert_eq!(d.lipschitz(), 0.75);
        let a = Driver::ambiguity(0.1, 0.2);
        assert_eq!(a.g(0.0, 1.0, -1.0), -0.1 + 0.2);
        assert_eq!(a.lipschitz(), 0.30000000000000004);
        assert_eq!(Driver::discount(0.1).g(0.0, 0.5, 9.0), -0.05);
        assert!(Driver::zero().is_state_free());
        assert!(!Driver::discount(0.1).is_state_free());
    }

    #[test]
    fn registry_drivers_pass_the_probe() {
        for d in [Driver::zero(), Driver::affine(0.3, -0.2, 0.4), Driver::discount(-0.3), Driver::ambiguity(0.2, 0.5)] {
            check_lipschitz(&d, 2.0, 11, 500).unwrap();
        }
    }

    struct Liar;
    impl Generator for Liar {
        fn eval(&self, _site: Site, y: f64, _z: f64) -> f64 {
            y * y
        }
        fn lipschitz(&self) -> f64 {
            1.0
        }
    }

    #[test]
    fn probe_catches_a_wrong_constant() {
        assert!(check_lipschitz(&Liar, 1.0, 3, 200).is_err());
    }

    #[test]
    fn masked_driver_follows_descendants() {
        let s = 1.0_f64;
        let t = build_lattice(2, 1.0, &[(s, 0.5), (-s, 0.5)], &[("x", 1.0)]).unwrap();
        let d = Driver::affine(1.0, 0.0, 0.0);
        let m = Masked::on_event(&t, &d, 1, &[true, false]);
        let at = |stage, node| m.eval(Site { stage, node, t: 0.0 }, 0.0, 0.0);
        assert_eq!(at(0, 0), 0.0);
        assert_eq!((at(1, 0), at(1, 1)), (1.0, 0.0));
        assert_eq!((at(2, 0), at(2, 1), at(2, 2), at(2, 3)), (1.0, 1.0, 0.0, 0.0));
    }

    #[test]
    fn negation_flips_signs() {
        let d = Driver::affine(1.0, 2.0, 0.0);
        let n = Negated(&d);
        assert_eq!(n.eval(Site::at_time(0.0), 1.0, 0.0), -(1.0 - 2.0));
    }
}
