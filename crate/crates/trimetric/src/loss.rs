//! Margin loss functions and their derivatives for the soft-margin
//! objective. The argument is `z = <A_r, X> - rho`: negative `z` means the
//! triplet violates the margin.

use crate::error::{Error, Result};

/// Loss applied to each triplet's margin slack.
///
/// `Hinge` is kept for reference and oracle use; it is not differentiable at
/// zero, so the solver refuses it unless explicitly allowed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    Hinge,
    SquaredHinge,
    Huber { h: f64 },
}

impl LossKind {
    /// Builds a Huber loss, validating its width parameter. Values outside
    /// `[0.01, 0.5]` are accepted with a warning; non-positive values are
    /// rejected.
    pub fn huber(h: f64) -> Result<Self> {
        if !(h > 0.0) {
            return Err(Error::Config(format!(
                "huber parameter h must be positive, got {h}"
            )));
        }
        if !(0.01..=0.5).contains(&h) {
            log::warn!("huber parameter h = {h} is outside the usual range [0.01, 0.5]");
        }
        Ok(LossKind::Huber { h })
    }

    /// Parses a loss by config name: "hinge", "squared_hinge" or "huber"
    /// (with optional width, default 0.5).
    pub fn from_name(name: &str, h: Option<f64>) -> Result<Self> {
        match name {
            "hinge" => Ok(LossKind::Hinge),
            "squared_hinge" => Ok(LossKind::SquaredHinge),
            "huber" => LossKind::huber(h.unwrap_or(0.5)),
            other => Err(Error::Config(format!(
                "unknown loss '{other}' (expected hinge | squared_hinge | huber)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Hinge => "hinge",
            LossKind::SquaredHinge => "squared_hinge",
            LossKind::Huber { .. } => "huber",
        }
    }

    /// True when the loss is continuously differentiable everywhere.
    pub fn is_smooth(&self) -> bool {
        !matches!(self, LossKind::Hinge)
    }

    /// Loss value at `z`.
    pub fn value(&self, z: f64) -> f64 {
        debug_assert!(z.is_finite());
        match *self {
            LossKind::Hinge => (-z).max(0.0),
            LossKind::SquaredHinge => {
                if z >= 0.0 {
                    0.0
                } else {
                    z * z
                }
            }
            LossKind::Huber { h } => {
                if z >= h {
                    0.0
                } else if z <= -h {
                    -z
                } else {
                    let t = h - z;
                    t * t / (4.0 * h)
                }
            }
        }
    }

    /// Derivative at `z`. The hinge derivative at exactly `z = 0` is taken
    /// as 0 by convention.
    pub fn derivative(&self, z: f64) -> f64 {
        debug_assert!(z.is_finite());
        match *self {
            LossKind::Hinge => {
                if z < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            LossKind::SquaredHinge => {
                if z < 0.0 {
                    2.0 * z
                } else {
                    0.0
                }
            }
            LossKind::Huber { h } => {
                if z >= h {
                    0.0
                } else if z <= -h {
                    -1.0
                } else {
                    -(h - z) / (2.0 * h)
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn spot_values() {
        assert_eq!(LossKind::SquaredHinge.value(0.0), 0.0);
        assert_eq!(LossKind::SquaredHinge.value(-1.0), 1.0);
        assert_eq!(LossKind::Hinge.value(-2.0), 2.0);
        let huber = LossKind::huber(0.5).unwrap();
        assert_eq!(huber.value(-0.5), 0.5);
        assert_eq!(huber.value(0.0), 0.125);
        assert_eq!(huber.value(1.0), 0.0);
    }

    #[test]
    fn spot_derivatives() {
        assert_eq!(LossKind::SquaredHinge.derivative(-1.0), -2.0);
        let huber = LossKind::huber(0.5).unwrap();
        assert_eq!(huber.derivative(0.0), -0.5);
        assert_eq!(huber.derivative(1.0), 0.0);
        assert_eq!(huber.derivative(-0.75), -1.0);
        assert_eq!(LossKind::Hinge.derivative(0.0), 0.0);
    }

    #[test]
    fn value_nonnegative_and_flat_region() {
        let kinds = [
            LossKind::Hinge,
            LossKind::SquaredHinge,
            LossKind::huber(0.25).unwrap(),
        ];
        for kind in kinds {
            for i in 0..=600 {
                let z = -3.0 + i as f64 * 0.01;
                assert!(kind.value(z) >= 0.0);
            }
            let flat_from = match kind {
                LossKind::Huber { h } => h,
                _ => 0.0,
            };
            for i in 0..=100 {
                let z = flat_from + i as f64 * 0.05;
                assert_eq!(kind.value(z), 0.0);
            }
        }
    }

    #[test]
    fn derivative_matches_central_differences() {
        let delta = 1e-5;
        for kind in [
            LossKind::SquaredHinge,
            LossKind::huber(0.01).unwrap(),
            LossKind::huber(0.1).unwrap(),
            LossKind::huber(0.5).unwrap(),
        ] {
            for i in 0..1000 {
                let z = -3.0 + 6.0 * (i as f64 + 0.5) / 1000.0;
                let fd = (kind.value(z + delta) - kind.value(z - delta)) / (2.0 * delta);
                assert!(
                    (kind.derivative(z) - fd).abs() <= 1e-6,
                    "{:?} at z={z}: {} vs {fd}",
                    kind,
                    kind.derivative(z)
                );
            }
        }
    }

    #[test]
    fn convexity_midpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for kind in [
            LossKind::Hinge,
            LossKind::SquaredHinge,
            LossKind::huber(0.5).unwrap(),
        ] {
            for _ in 0..1000 {
                let a = rng.gen_range(-4.0..4.0);
                let b = rng.gen_range(-4.0..4.0);
                let mid = kind.value(0.5 * (a + b));
                let avg = 0.5 * (kind.value(a) + kind.value(b));
                assert!(mid <= avg + 1e-12);
            }
        }
    }

    #[test]
    fn huber_approaches_hinge() {
        let sup_gap = |h: f64| {
            let huber = LossKind::huber(h).unwrap();
            let mut worst = 0.0f64;
            for i in 0..=2000 {
                let z = -3.0 + 6.0 * i as f64 / 2000.0;
                worst = worst.max((huber.value(z) - LossKind::Hinge.value(z)).abs());
            }
            worst
        };
        let gaps = [sup_gap(0.5), sup_gap(0.1), sup_gap(0.01)];
        assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2]);
        assert!(gaps[2] < 0.01);
    }

    #[test]
    fn huber_parameter_validation() {
        assert!(LossKind::huber(0.0).is_err());
        assert!(LossKind::huber(-0.1).is_err());
        assert!(LossKind::huber(0.7).is_ok()); // warns, does not fail
        assert!(LossKind::from_name("nope", None).is_err());
        assert_eq!(
            LossKind::from_name("huber", None).unwrap(),
            LossKind::Huber { h: 0.5 }
        );
    }
}
