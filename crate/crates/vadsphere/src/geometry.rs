//! Valence/arousal/dominance geometry.
//!
//! Raw annotations arrive on a 7-point scale per dimension. This module
//! normalizes them to the `[-1, 1]` cube, decomposes the normalized vector
//! into spherical coordinates (magnitude, azimuth in the valence-arousal
//! plane, elevation from the +dominance pole), and assigns each point to one
//! cell of an angular grid. Region identity depends only on the two angles,
//! never on the magnitude.
//!
//! Conventions, pinned by the tests in this file:
//! - azimuth `phi` lives in `[0, 360)` degrees, elevation `theta` in `[0, 180]`;
//! - a partition of angular width `A` has `360/A` azimuth cells and `180/A`
//!   elevation cells, so `A = 90/60/45` gives `N = 8/18/32`;
//! - the origin (`r < 1e-9`) canonicalizes to `phi = 0, theta = 0`, a valid
//!   point that lands in region 0, because an all-neutral annotation is
//!   legitimate input, not an error.

use thiserror::Error;

/// Magnitudes below this canonicalize to the degenerate origin point.
pub const DEGENERATE_RADIUS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("{dim} component {value} outside [{lo}, {hi}]")]
    ComponentOutOfRange {
        dim: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("expected a point on the {expected:?} scale, got {got:?}")]
    WrongScale { expected: VadScale, got: VadScale },
    #[error("angle {angle}° does not divide 180° evenly; nearest valid angles are {below}° and {above}°")]
    InvalidAngle { angle: f64, below: f64, above: f64 },
    #[error("negative radius {0}")]
    NegativeRadius(f64),
    #[error("elevation {0}° outside [0, 180]")]
    ElevationOutOfRange(f64),
    #[error("region label {index} out of range for {n_regions} regions")]
    LabelOutOfRange { index: usize, n_regions: usize },
}

/// Scale a [`VadPoint`] is expressed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VadScale {
    /// Raw 7-point annotation scale, each component in `[1, 7]`.
    Raw17,
    /// Normalized scale, each component in `[-1, 1]`.
    NormUnit,
}

/// A (valence, arousal, dominance) triple on a known scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VadPoint {
    pub v: f64,
    pub a: f64,
    pub d: f64,
    pub scale: VadScale,
}

impl VadPoint {
    /// Raw-scale point; every component must lie in `[1, 7]`.
    pub fn raw(v: f64, a: f64, d: f64) -> Result<Self, GeometryError> {
        check_bounds(v, a, d, 1.0, 7.0)?;
        Ok(VadPoint {
            v,
            a,
            d,
            scale: VadScale::Raw17,
        })
    }

    /// Normalized point; every component must lie in `[-1, 1]`.
    pub fn normalized(v: f64, a: f64, d: f64) -> Result<Self, GeometryError> {
        check_bounds(v, a, d, -1.0, 1.0)?;
        Ok(VadPoint {
            v,
            a,
            d,
            scale: VadScale::NormUnit,
        })
    }

    pub fn components(&self) -> [f64; 3] {
        [self.v, self.a, self.d]
    }
}

fn check_bounds(v: f64, a: f64, d: f64, lo: f64, hi: f64) -> Result<(), GeometryError> {
    for (dim, value) in [("valence", v), ("arousal", a), ("dominance", d)] {
        if !(lo..=hi).contains(&value) || value.is_nan() {
            return Err(GeometryError::ComponentOutOfRange { dim, value, lo, hi });
        }
    }
    Ok(())
}

fn expect_scale(p: &VadPoint, expected: VadScale) -> Result<(), GeometryError> {
    if p.scale != expected {
        return Err(GeometryError::WrongScale {
            expected,
            got: p.scale,
        });
    }
    Ok(())
}

/// Spherical decomposition of a normalized VAD vector.
///
/// `azimuth_deg` is the angle in the valence-arousal plane measured from +v
/// toward +a; `elevation_deg` is the polar angle from the +d axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalPoint {
    pub r: f64,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
}

impl SphericalPoint {
    /// Canonicalizes the azimuth into `[0, 360)` and validates the rest.
    pub fn new(r: f64, azimuth_deg: f64, elevation_deg: f64) -> Result<Self, GeometryError> {
        if r < 0.0 || r.is_nan() {
            return Err(GeometryError::NegativeRadius(r));
        }
        if !(0.0..=180.0).contains(&elevation_deg) || elevation_deg.is_nan() {
            return Err(GeometryError::ElevationOutOfRange(elevation_deg));
        }
        let mut az = azimuth_deg.rem_euclid(360.0);
        // rem_euclid of a tiny negative angle can round up to exactly 360.
        if az >= 360.0 {
            az = 0.0;
        }
        Ok(SphericalPoint {
            r,
            azimuth_deg: az,
            elevation_deg,
        })
    }

    /// Rescales the magnitude, keeping both angles.
    pub fn with_radius(&self, r: f64) -> Result<Self, GeometryError> {
        SphericalPoint::new(r, self.azimuth_deg, self.elevation_deg)
    }
}

/// Maps a raw-scale point onto `[-1, 1]^3` via `x -> (x - 4) / 3`.
pub fn normalize_vad(p: &VadPoint) -> Result<VadPoint, GeometryError> {
    expect_scale(p, VadScale::Raw17)?;
    check_bounds(p.v, p.a, p.d, 1.0, 7.0)?;
    VadPoint::normalized((p.v - 4.0) / 3.0, (p.a - 4.0) / 3.0, (p.d - 4.0) / 3.0)
}

/// Inverse of [`normalize_vad`]: `x -> 3x + 4`.
pub fn denormalize_vad(p: &VadPoint) -> Result<VadPoint, GeometryError> {
    expect_scale(p, VadScale::NormUnit)?;
    check_bounds(p.v, p.a, p.d, -1.0, 1.0)?;
    VadPoint::raw(3.0 * p.v + 4.0, 3.0 * p.a + 4.0, 3.0 * p.d + 4.0)
}

/// Decomposes a normalized point into magnitude and angles.
///
/// Points with `r < DEGENERATE_RADIUS` canonicalize to `(r, 0, 0)`.
pub fn to_spherical(p: &VadPoint) -> Result<SphericalPoint, GeometryError> {
    expect_scale(p, VadScale::NormUnit)?;
    let r = (p.v * p.v + p.a * p.a + p.d * p.d).sqrt();
    if r < DEGENERATE_RADIUS {
        return SphericalPoint::new(r, 0.0, 0.0);
    }
    let azimuth = p.a.atan2(p.v).to_degrees();
    let elevation = (p.d / r).clamp(-1.0, 1.0).acos().to_degrees();
    SphericalPoint::new(r, azimuth, elevation)
}

/// Inverse of [`to_spherical`].
pub fn to_cartesian(s: &SphericalPoint) -> Result<VadPoint, GeometryError> {
    if s.r < 0.0 {
        return Err(GeometryError::NegativeRadius(s.r));
    }
    let phi = s.azimuth_deg.to_radians();
    let theta = s.elevation_deg.to_radians();
    let (sin_theta, cos_theta) = theta.sin_cos();
    let (sin_phi, cos_phi) = phi.sin_cos();
    Ok(VadPoint {
        v: s.r * sin_theta * cos_phi,
        a: s.r * sin_theta * sin_phi,
        d: s.r * cos_theta,
        scale: VadScale::NormUnit,
    })
}

/// Angular grid over (azimuth, elevation) with `n_phi * n_theta` cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionPartition {
    pub n_phi: usize,
    pub n_theta: usize,
}

impl RegionPartition {
    pub fn n_regions(&self) -> usize {
        self.n_phi * self.n_theta
    }

    pub fn azimuth_width_deg(&self) -> f64 {
        360.0 / self.n_phi as f64
    }

    pub fn elevation_width_deg(&self) -> f64 {
        180.0 / self.n_theta as f64
    }
}

/// Discrete region index in `[0, n_regions)`, laid out azimuth-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RegionLabel(pub usize);

/// Builds the partition whose cells are `angle_deg` wide on both axes.
///
/// Valid angles divide 180° evenly (which makes the azimuth count the even
/// number `2 * 180/angle` automatically): 90° -> 8 regions, 60° -> 18,
/// 45° -> 32.
pub fn make_partition(angle_deg: f64) -> Result<RegionPartition, GeometryError> {
    let invalid = |angle: f64| {
        // Valid angles are 180/k for integer k >= 1; suggest the bracketing pair.
        let k = (180.0 / angle).max(1.0);
        let below = 180.0 / k.ceil();
        let above = 180.0 / k.floor().max(1.0);
        GeometryError::InvalidAngle {
            angle,
            below,
            above,
        }
    };
    if !(angle_deg > 0.0) || angle_deg > 180.0 {
        return Err(invalid(angle_deg.clamp(f64::MIN_POSITIVE, 180.0)));
    }
    let n_theta = 180.0 / angle_deg;
    if (n_theta - n_theta.round()).abs() > 1e-9 {
        return Err(invalid(angle_deg));
    }
    let n_theta = n_theta.round() as usize;
    Ok(RegionPartition {
        n_phi: 2 * n_theta,
        n_theta,
    })
}

/// Assigns the region whose half-open angular cell contains the point.
///
/// Cells are `[lo, hi)` with the final cell closed (indices clamp), so the
/// assignment is total and deterministic for every valid point.
pub fn assign_region(part: &RegionPartition, s: &SphericalPoint) -> RegionLabel {
    let a_idx = ((s.azimuth_deg / part.azimuth_width_deg()) as usize).min(part.n_phi - 1);
    let e_idx = ((s.elevation_deg / part.elevation_width_deg()) as usize).min(part.n_theta - 1);
    RegionLabel(a_idx * part.n_theta + e_idx)
}

/// Midpoint of a region's angular cell at the given magnitude.
pub fn region_centroid(
    part: &RegionPartition,
    label: RegionLabel,
    r: f64,
) -> Result<SphericalPoint, GeometryError> {
    if label.0 >= part.n_regions() {
        return Err(GeometryError::LabelOutOfRange {
            index: label.0,
            n_regions: part.n_regions(),
        });
    }
    let a_idx = label.0 / part.n_theta;
    let e_idx = label.0 % part.n_theta;
    SphericalPoint::new(
        r,
        (a_idx as f64 + 0.5) * part.azimuth_width_deg(),
        (e_idx as f64 + 0.5) * part.elevation_width_deg(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn normalize_midpoint_and_endpoints() {
        let p = normalize_vad(&VadPoint::raw(4.0, 4.0, 4.0).unwrap()).unwrap();
        assert_eq!(p.components(), [0.0, 0.0, 0.0]);
        let p = normalize_vad(&VadPoint::raw(7.0, 1.0, 4.0).unwrap()).unwrap();
        assert_eq!(p.components(), [1.0, -1.0, 0.0]);
        let p = normalize_vad(&VadPoint::raw(5.5, 2.5, 4.0).unwrap()).unwrap();
        assert_eq!(p.components(), [0.5, -0.5, 0.0]);
    }

    #[test]
    fn normalize_names_offending_dimension() {
        let bad = VadPoint {
            v: 4.0,
            a: 8.0,
            d: 4.0,
            scale: VadScale::Raw17,
        };
        match normalize_vad(&bad) {
            Err(GeometryError::ComponentOutOfRange { dim, value, .. }) => {
                assert_eq!(dim, "arousal");
                assert_eq!(value, 8.0);
            }
            other => panic!("expected out-of-range error, got {other:?}"),
        }
    }

    #[test]
    fn denormalize_examples() {
        let p = denormalize_vad(&VadPoint::normalized(0.0, 0.0, 0.0).unwrap()).unwrap();
        assert_eq!(p.components(), [4.0, 4.0, 4.0]);
        let p = denormalize_vad(&VadPoint::normalized(1.0, 1.0, 1.0).unwrap()).unwrap();
        assert_eq!(p.components(), [7.0, 7.0, 7.0]);
        let p =
            denormalize_vad(&VadPoint::normalized(-1.0 / 3.0, 1.0 / 3.0, 0.0).unwrap()).unwrap();
        assert_close(p.v, 3.0, 1e-12);
        assert_close(p.a, 5.0, 1e-12);
        assert_close(p.d, 4.0, 1e-12);
        assert!(denormalize_vad(&VadPoint {
            v: 1.5,
            a: 0.0,
            d: 0.0,
            scale: VadScale::NormUnit
        })
        .is_err());
    }

    #[test]
    fn normalization_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let p = VadPoint::raw(
                rng.gen_range(1.0..=7.0),
                rng.gen_range(1.0..=7.0),
                rng.gen_range(1.0..=7.0),
            )
            .unwrap();
            let back = denormalize_vad(&normalize_vad(&p).unwrap()).unwrap();
            assert_close(back.v, p.v, 1e-12);
            assert_close(back.a, p.a, 1e-12);
            assert_close(back.d, p.d, 1e-12);
        }
    }

    #[test]
    fn spherical_axes() {
        let s = to_spherical(&VadPoint::normalized(1.0, 0.0, 0.0).unwrap()).unwrap();
        assert_close(s.r, 1.0, 1e-12);
        assert_close(s.azimuth_deg, 0.0, 1e-12);
        assert_close(s.elevation_deg, 90.0, 1e-12);

        let s = to_spherical(&VadPoint::normalized(0.0, 0.0, 1.0).unwrap()).unwrap();
        assert_close(s.r, 1.0, 1e-12);
        assert_eq!(s.azimuth_deg, 0.0);
        assert_close(s.elevation_deg, 0.0, 1e-12);
    }

    #[test]
    fn spherical_diagonal() {
        let s = to_spherical(&VadPoint::normalized(1.0, 1.0, 1.0).unwrap()).unwrap();
        assert_close(s.r, 1.7320508075688772, 1e-12);
        assert_close(s.azimuth_deg, 45.0, 1e-10);
        assert_close(s.elevation_deg, 54.735610317245346, 1e-10);
    }

    #[test]
    fn degenerate_origin_is_canonical() {
        let s = to_spherical(&VadPoint::normalized(0.0, 0.0, 0.0).unwrap()).unwrap();
        assert_eq!((s.azimuth_deg, s.elevation_deg), (0.0, 0.0));
        let part = make_partition(90.0).unwrap();
        assert_eq!(assign_region(&part, &s), RegionLabel(0));
    }

    #[test]
    fn cartesian_examples() {
        let p = to_cartesian(&SphericalPoint::new(0.0, 0.0, 0.0).unwrap()).unwrap();
        assert_eq!(p.components(), [0.0, 0.0, 0.0]);

        let p = to_cartesian(&SphericalPoint::new(1.0, 90.0, 90.0).unwrap()).unwrap();
        assert_close(p.v, 0.0, 1e-12);
        assert_close(p.a, 1.0, 1e-12);
        assert_close(p.d, 0.0, 1e-12);

        let p =
            to_cartesian(&SphericalPoint::new(1.7320508075688772, 45.0, 54.7356).unwrap()).unwrap();
        assert_close(p.v, 1.0, 1e-4);
        assert_close(p.a, 1.0, 1e-4);
        assert_close(p.d, 1.0, 1e-4);

        assert_eq!(
            to_cartesian(&SphericalPoint {
                r: -1.0,
                azimuth_deg: 0.0,
                elevation_deg: 0.0
            }),
            Err(GeometryError::NegativeRadius(-1.0))
        );
    }

    #[test]
    fn round_trip_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..10_000 {
            let p = VadPoint::normalized(
                rng.gen_range(-1.0..=1.0),
                rng.gen_range(-1.0..=1.0),
                rng.gen_range(-1.0..=1.0),
            )
            .unwrap();
            let r = (p.v * p.v + p.a * p.a + p.d * p.d).sqrt();
            if r < 1e-6 {
                continue;
            }
            let back = to_cartesian(&to_spherical(&p).unwrap()).unwrap();
            assert_close(back.v, p.v, 1e-9);
            assert_close(back.a, p.a, 1e-9);
            assert_close(back.d, p.d, 1e-9);
        }
    }

    #[test]
    fn partition_counts_match_angles() {
        for (angle, n_phi, n_theta, n) in [(90.0, 4, 2, 8), (60.0, 6, 3, 18), (45.0, 8, 4, 32)] {
            let part = make_partition(angle).unwrap();
            assert_eq!(part.n_phi, n_phi);
            assert_eq!(part.n_theta, n_theta);
            assert_eq!(part.n_regions(), n);
        }
    }

    #[test]
    fn partition_rejects_non_divisors() {
        match make_partition(50.0) {
            Err(GeometryError::InvalidAngle { below, above, .. }) => {
                assert_eq!(below, 45.0);
                assert_eq!(above, 60.0);
            }
            other => panic!("expected invalid angle, got {other:?}"),
        }
        assert!(make_partition(0.0).is_err());
        assert!(make_partition(-90.0).is_err());
        assert!(make_partition(360.0).is_err());
    }

    #[test]
    fn assign_first_and_last_cells() {
        let part = make_partition(90.0).unwrap();
        let s = SphericalPoint::new(1.0, 0.0, 0.0).unwrap();
        assert_eq!(assign_region(&part, &s), RegionLabel(0));
        let s = SphericalPoint::new(1.0, 359.9, 179.9).unwrap();
        assert_eq!(assign_region(&part, &s), RegionLabel(7));
        // Exact upper elevation boundary clamps into the last elevation cell.
        let s = SphericalPoint::new(1.0, 0.0, 180.0).unwrap();
        assert_eq!(assign_region(&part, &s), RegionLabel(1));
    }

    #[test]
    fn assignment_is_total_and_hits_every_cell() {
        let part = make_partition(90.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen = vec![0usize; part.n_regions()];
        for _ in 0..10_000 {
            let p = VadPoint::normalized(
                rng.gen_range(-1.0..=1.0),
                rng.gen_range(-1.0..=1.0),
                rng.gen_range(-1.0..=1.0),
            )
            .unwrap();
            let label = assign_region(&part, &to_spherical(&p).unwrap());
            assert!(label.0 < part.n_regions());
            seen[label.0] += 1;
        }
        assert!(seen.iter().all(|&c| c > 0), "empty cells: {seen:?}");
    }

    #[test]
    fn labels_are_scale_invariant() {
        let part = make_partition(60.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let s = SphericalPoint::new(
                rng.gen_range(1e-6..2.0),
                rng.gen_range(0.0..360.0),
                rng.gen_range(0.0..=180.0),
            )
            .unwrap();
            let scaled = s.with_radius(s.r * rng.gen_range(0.01..100.0)).unwrap();
            assert_eq!(assign_region(&part, &s), assign_region(&part, &scaled));
        }
    }

    #[test]
    fn centroid_midpoints_and_round_trip() {
        let part = make_partition(90.0).unwrap();
        let c = region_centroid(&part, RegionLabel(0), 1.0).unwrap();
        assert_eq!((c.azimuth_deg, c.elevation_deg), (45.0, 45.0));
        let c = region_centroid(&part, RegionLabel(7), 1.0).unwrap();
        assert_eq!((c.azimuth_deg, c.elevation_deg), (315.0, 135.0));

        let part = make_partition(60.0).unwrap();
        for index in 0..part.n_regions() {
            let c = region_centroid(&part, RegionLabel(index), 1.0).unwrap();
            assert_eq!(assign_region(&part, &c), RegionLabel(index));
        }
        assert!(region_centroid(&part, RegionLabel(18), 1.0).is_err());
    }

    #[test]
    fn azimuth_wraps_into_range() {
        let s = SphericalPoint::new(1.0, -90.0, 90.0).unwrap();
        assert_close(s.azimuth_deg, 270.0, 1e-12);
        let s = SphericalPoint::new(1.0, 720.0, 90.0).unwrap();
        assert_eq!(s.azimuth_deg, 0.0);
        // A tiny negative angle must not canonicalize to 360.
        let s = SphericalPoint::new(1.0, -1e-17, 90.0).unwrap();
        assert!(s.azimuth_deg < 360.0);
    }
}
