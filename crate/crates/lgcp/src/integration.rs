//! Numerical integration of intensity surfaces over the window, plus the
//! closed-form integral over nonspatial covariate ranges.
//!
//! The spatial integral uses a quasi-Monte-Carlo scheme: integration points
//! are placed unit by unit (every areal unit gets at least one), each point
//! carrying the weight `unit area / points in unit`, so
//! `sum_j w_j exp(f(s_j))` estimates `int exp(f(s)) ds`.

use crate::error::{Error, Result};
use crate::geometry::{ArealPartition, GridField, Location};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Integration points with weights and the index of the areal unit (or grid
/// cell) each point was placed in.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntegrationScheme {
    points: Vec<Location>,
    weights: Vec<f64>,
    unit_index: Vec<usize>,
}

impl IntegrationScheme {
    /// Raw constructor used by file ingest; validates lengths and weights.
    pub fn from_parts(
        points: Vec<Location>,
        weights: Vec<f64>,
        unit_index: Vec<usize>,
    ) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("integration scheme needs at least one point"));
        }
        if weights.len() != points.len() || unit_index.len() != points.len() {
            return Err(Error::invalid("integration scheme columns differ in length"));
        }
        if !weights.iter().all(|w| w.is_finite() && *w > 0.0) {
            return Err(Error::invalid("integration weights must be finite and positive"));
        }
        Ok(IntegrationScheme {
            points,
            weights,
            unit_index,
        })
    }

    /// Builds a scheme over an areal partition. `budget` points are shared
    /// out proportionally to unit area, with every unit receiving at least
    /// one; points are placed uniformly inside their unit.
    pub fn from_partition<R: Rng>(
        partition: &ArealPartition,
        budget: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let units = partition.units();
        if budget < units.len() {
            return Err(Error::InsufficientBudget {
                budget,
                units: units.len(),
            });
        }
        let areas: Vec<f64> = units.iter().map(|u| u.polygon.area()).collect();
        let counts = allocate_counts(&areas, budget);
        let mut points = Vec::with_capacity(budget);
        let mut weights = Vec::with_capacity(budget);
        let mut unit_index = Vec::with_capacity(budget);
        for (u, (unit, &count)) in units.iter().zip(counts.iter()).enumerate() {
            let w = unit.polygon.area() / count as f64;
            for _ in 0..count {
                points.push(unit.polygon.sample_uniform(rng));
                weights.push(w);
                unit_index.push(u);
            }
        }
        IntegrationScheme::from_parts(points, weights, unit_index)
    }

    /// Builds a scheme over a grid: `per_cell` points uniform in each cell,
    /// each weighted by `cell area / per_cell`. Cell (ix, iy) is unit
    /// `iy * nx + ix`.
    pub fn from_grid<R: Rng>(grid: &GridField, per_cell: usize, rng: &mut R) -> Result<Self> {
        if per_cell == 0 {
            return Err(Error::invalid("per-cell point count must be positive"));
        }
        let (nx, ny) = grid.shape();
        let (dx, dy) = grid.cell_size();
        let w = dx * dy / per_cell as f64;
        let mut points = Vec::with_capacity(nx * ny * per_cell);
        let mut weights = Vec::with_capacity(points.capacity());
        let mut unit_index = Vec::with_capacity(points.capacity());
        for iy in 0..ny {
            for ix in 0..nx {
                let c = grid.cell_center(ix, iy);
                for _ in 0..per_cell {
                    points.push(Location::new(
                        c.x + dx * (rng.random::<f64>() - 0.5),
                        c.y + dy * (rng.random::<f64>() - 0.5),
                    ));
                    weights.push(w);
                    unit_index.push(iy * nx + ix);
                }
            }
        }
        IntegrationScheme::from_parts(points, weights, unit_index)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Location] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn unit_index(&self) -> &[usize] {
        &self.unit_index
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// `sum_j w_j exp(f_j)` for log-intensity values aligned with the
    /// scheme's points.
    pub fn integrate_log_values(&self, log_vals: &[f64]) -> Result<f64> {
        if log_vals.len() != self.points.len() {
            return Err(Error::invalid(format!(
                "{} log-intensity values for {} integration points",
                log_vals.len(),
                self.points.len()
            )));
        }
        let mut acc = 0.0;
        for (j, (&f, &w)) in log_vals.iter().zip(self.weights.iter()).enumerate() {
            let v = f.exp();
            if !v.is_finite() {
                let s = self.points[j];
                return Err(Error::NonFiniteIntensity { x: s.x, y: s.y });
            }
            acc += w * v;
        }
        Ok(acc)
    }

    /// Integrates `exp(log_intensity(s))` over the window.
    pub fn integrate_intensity(&self, log_intensity: impl Fn(&Location) -> f64) -> Result<f64> {
        let vals: Vec<f64> = self.points.iter().map(|s| log_intensity(s)).collect();
        self.integrate_log_values(&vals)
    }
}

/// Shares `budget` points across units proportionally to area, at least one
/// each (so the total may exceed the budget slightly after rounding).
pub fn allocate_counts(areas: &[f64], budget: usize) -> Vec<usize> {
    let total: f64 = areas.iter().sum();
    areas
        .iter()
        .map(|a| ((budget as f64 * a / total).round() as usize).max(1))
        .collect()
}

/// Integration range of one nonspatial covariate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NonspatialBound {
    /// Continuous covariate supported on `[lower, upper]`.
    Continuous { lower: f64, upper: f64 },
    /// Binary covariate taking values 0 and 1.
    Binary,
}

impl NonspatialBound {
    pub fn validate(&self, index: usize) -> Result<()> {
        if let NonspatialBound::Continuous { lower, upper } = self {
            if !(lower.is_finite() && upper.is_finite() && lower < upper) {
                return Err(Error::UnboundedCovariate { index });
            }
        }
        Ok(())
    }
}

// Coefficients this close to zero use the exact zero-coefficient limit.
const ALPHA_ZERO_TOL: f64 = 1e-10;

/// Closed-form integral of `exp(nu' alpha)` over the covariate ranges:
/// the product over covariates of `(exp(u a) - exp(l a)) / a` for continuous
/// ranges (limit `u - l` as `a -> 0`) and `exp(a) + 1` for binary ones.
pub fn nonspatial_integral(bounds: &[NonspatialBound], alpha: &[f64]) -> Result<f64> {
    if bounds.len() != alpha.len() {
        return Err(Error::invalid(format!(
            "{} coefficient(s) for {} nonspatial covariate range(s)",
            alpha.len(),
            bounds.len()
        )));
    }
    let mut acc = 1.0;
    for (j, (b, &a)) in bounds.iter().zip(alpha.iter()).enumerate() {
        b.validate(j)?;
        acc *= match *b {
            NonspatialBound::Continuous { lower, upper } => {
                if a.abs() < ALPHA_ZERO_TOL {
                    upper - lower
                } else {
                    // (exp(u a) - exp(l a)) / a rewritten around the midpoint;
                    // stable for small |a (u - l)|
                    let x = a * (upper - lower) / 2.0;
                    (a * (upper + lower) / 2.0).exp() * (upper - lower) * x.sinh() / x
                }
            }
            NonspatialBound::Binary => a.exp() + 1.0,
        };
    }
    if !acc.is_finite() {
        return Err(Error::invalid(
            "nonspatial integral overflowed; check coefficient scales",
        ));
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ArealUnit, Polygon};
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn counts_proportional_with_floor() {
        assert_eq!(allocate_counts(&[1.0, 1.0, 2.0], 8), vec![2, 2, 4]);
        // tiny unit still receives one point
        assert_eq!(allocate_counts(&[100.0, 0.001], 10), vec![10, 1]);
    }

    fn two_unit_partition() -> ArealPartition {
        let window = Polygon::rectangle(0.0, 0.0, 4.0, 1.0).unwrap();
        let units = vec![
            ArealUnit {
                polygon: Polygon::rectangle(0.0, 0.0, 1.0, 1.0).unwrap(),
                z: vec![1.0],
            },
            ArealUnit {
                polygon: Polygon::rectangle(1.0, 0.0, 4.0, 1.0).unwrap(),
                z: vec![2.0],
            },
        ];
        ArealPartition::new(units, vec!["v".into()], window).unwrap()
    }

    #[test]
    fn partition_scheme_counts_weights_containment() {
        let p = two_unit_partition();
        let mut rng = StdRng::seed_from_u64(9);
        let s = IntegrationScheme::from_partition(&p, 8, &mut rng).unwrap();
        assert_eq!(s.len(), 8);
        assert_eq!(s.unit_index().iter().filter(|&&u| u == 0).count(), 2);
        assert_eq!(s.unit_index().iter().filter(|&&u| u == 1).count(), 6);
        for (pt, &u) in s.points().iter().zip(s.unit_index()) {
            assert!(p.units()[u].polygon.contains(pt));
        }
        // weights reproduce the unit areas and hence the window area
        assert_relative_eq!(s.total_weight(), 4.0, max_relative = 1e-12);
    }

    #[test]
    fn budget_below_unit_count_is_rejected() {
        let p = two_unit_partition();
        let mut rng = StdRng::seed_from_u64(9);
        let err = IntegrationScheme::from_partition(&p, 1, &mut rng).unwrap_err();
        assert!(matches!(err, Error::InsufficientBudget { budget: 1, units: 2 }));
    }

    #[test]
    fn grid_scheme_places_points_in_cells() {
        let g = GridField::new(
            Location::new(0.5, 0.5),
            1.0,
            1.0,
            2,
            2,
            vec!["a".into()],
            vec![0.0; 4],
        )
        .unwrap();
        let mut rng = StdRng::seed_from_u64(3);
        let s = IntegrationScheme::from_grid(&g, 2, &mut rng).unwrap();
        assert_eq!(s.len(), 8);
        assert!(s.weights().iter().all(|&w| w == 0.5));
        assert_relative_eq!(s.total_weight(), 4.0);
        for (pt, &u) in s.points().iter().zip(s.unit_index()) {
            let (ix, iy) = (u % 2, u / 2);
            let c = g.cell_center(ix, iy);
            assert!((pt.x - c.x).abs() <= 0.5 && (pt.y - c.y).abs() <= 0.5);
        }
    }

    #[test]
    fn constant_intensity_integrates_exactly() {
        let p = two_unit_partition();
        let mut rng = StdRng::seed_from_u64(1);
        let s = IntegrationScheme::from_partition(&p, 50, &mut rng).unwrap();
        // log intensity ln(3): integral is 3 * |W| = 12 up to weight rounding
        let got = s.integrate_intensity(|_| 3.0f64.ln()).unwrap();
        assert_relative_eq!(got, 12.0, max_relative = 1e-12);
    }

    #[test]
    fn smooth_intensity_integrates_close() {
        // exp(x) over the unit square integrates to e - 1
        let window = Polygon::rectangle(0.0, 0.0, 1.0, 1.0).unwrap();
        let units = vec![ArealUnit {
            polygon: window.clone(),
            z: vec![],
        }];
        let p = ArealPartition::new(units, vec![], window).unwrap();
        let mut rng = StdRng::seed_from_u64(14);
        let s = IntegrationScheme::from_partition(&p, 4000, &mut rng).unwrap();
        let got = s.integrate_intensity(|s| s.x).unwrap();
        assert_relative_eq!(got, std::f64::consts::E - 1.0, max_relative = 0.02);
    }

    #[test]
    fn overflowing_intensity_reports_location() {
        let p = two_unit_partition();
        let mut rng = StdRng::seed_from_u64(2);
        let s = IntegrationScheme::from_partition(&p, 4, &mut rng).unwrap();
        let err = s.integrate_intensity(|_| 1e300).unwrap_err();
        assert!(matches!(err, Error::NonFiniteIntensity { .. }));
    }

    #[test]
    fn nonspatial_integral_closed_forms() {
        let e = std::f64::consts::E;
        // single continuous covariate on [0, 1] with unit coefficient
        let got = nonspatial_integral(
            &[NonspatialBound::Continuous { lower: 0.0, upper: 1.0 }],
            &[1.0],
        )
        .unwrap();
        assert_relative_eq!(got, e - 1.0, max_relative = 1e-12);

        // zero coefficient contributes the plain range length
        let got = nonspatial_integral(
            &[
                NonspatialBound::Continuous { lower: 0.0, upper: 1.0 },
                NonspatialBound::Continuous { lower: 0.0, upper: 2.0 },
            ],
            &[1.0, 0.0],
        )
        .unwrap();
        assert_relative_eq!(got, (e - 1.0) * 2.0, max_relative = 1e-12);

        // binary covariate contributes exp(a) + 1
        let got = nonspatial_integral(
            &[
                NonspatialBound::Continuous { lower: 0.0, upper: 1.0 },
                NonspatialBound::Binary,
            ],
            &[1.0, 1.0],
        )
        .unwrap();
        assert_relative_eq!(got, e * e - 1.0, max_relative = 1e-12);

        // no nonspatial covariates at all: empty product
        assert_eq!(nonspatial_integral(&[], &[]).unwrap(), 1.0);
    }

    #[test]
    fn nonspatial_integral_continuous_at_zero_coefficient() {
        let b = [NonspatialBound::Continuous { lower: 0.0, upper: 1.0 }];
        let at_zero = nonspatial_integral(&b, &[0.0]).unwrap();
        let just_above = nonspatial_integral(&b, &[1e-9]).unwrap();
        let just_below = nonspatial_integral(&b, &[-1e-9]).unwrap();
        assert_relative_eq!(at_zero, 1.0);
        assert_relative_eq!(just_above, 1.0, max_relative = 1e-8);
        assert_relative_eq!(just_below, 1.0, max_relative = 1e-8);
    }

    #[test]
    fn nonspatial_integral_validates() {
        // dimension mismatch
        assert!(nonspatial_integral(&[NonspatialBound::Binary], &[]).is_err());
        // inverted range
        let err = nonspatial_integral(
            &[NonspatialBound::Continuous { lower: 2.0, upper: 1.0 }],
            &[0.3],
        )
        .unwrap_err();
        assert!(matches!(err, Error::UnboundedCovariate { index: 0 }));
    }
}
