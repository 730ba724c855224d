//! Synthetic datasets used by the experiments.

use std::f64::consts::PI;

use gpgh::kernels::PointSet;
use gpgh::reduced_bo::{seed_points, BoConfig, CanyonObjective, RelaxOutput};
use gpgh::{Error, Result};

/// Points on the unit circle with a gap of `gap_deg` degrees centred on
/// angle π.  Returns the points and their angles in `(π + g/2, 3π − g/2)`.
pub fn circle_gap(n: usize, gap_deg: f64) -> Result<(PointSet, Vec<f64>)> {
    if n == 0 {
        return Err(Error::Parameter("circle needs at least one point".into()));
    }
    if !(0.0..360.0).contains(&gap_deg) {
        return Err(Error::Parameter(format!("gap must lie in [0, 360) degrees, got {gap_deg}")));
    }
    let g = gap_deg.to_radians();
    let start = PI + g / 2.0;
    let span = 2.0 * PI - g;
    let angles: Vec<f64> = (0..n)
        .map(|k| start + (k as f64 + 0.5) * span / n as f64)
        .collect();
    let rows: Vec<[f64; 2]> = angles.iter().map(|t| [t.cos(), t.sin()]).collect();
    Ok((PointSet::from_rows(&rows)?, angles))
}

/// `sin(π ω x)`.
pub fn sine(freq: f64) -> impl Fn(f64) -> f64 {
    move |x| (PI * freq * x).sin()
}

/// `m` equally spaced points on each of `[−2, −1]` and `[1, 2]`, labelled by
/// `target`.
pub fn two_segment<F: Fn(f64) -> f64>(m: usize, target: F) -> Result<(Vec<f64>, Vec<f64>)> {
    if m < 2 {
        return Err(Error::Parameter(format!("each segment needs at least 2 points, got {m}")));
    }
    let seg = |a: f64| (0..m).map(move |i| a + i as f64 / (m - 1) as f64);
    let xs: Vec<f64> = seg(-2.0).chain(seg(1.0)).collect();
    let ys = xs.iter().map(|&x| target(x)).collect();
    Ok((xs, ys))
}

/// Relaxed Metropolis–Hastings seeds of the canyon objective.
pub fn canyon(obj: &CanyonObjective, cfg: &BoConfig) -> Result<RelaxOutput> {
    cfg.validate()?;
    Ok(seed_points(obj, cfg)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use gpgh::kernels::squared_distance;

    #[test]
    fn full_circle_spacing() {
        let n = 37;
        let (ps, _) = circle_gap(n, 0.0).unwrap();
        let expect = 2.0 * (PI / n as f64).sin();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            let nn = (0..n)
                .filter(|&j| j != i)
                .map(|j| squared_distance(ps.point(i), ps.point(j)).sqrt())
                .fold(f64::INFINITY, f64::min);
            worst = worst.max(nn);
        }
        assert!((worst - expect).abs() < 1e-12);
    }

    #[test]
    fn gap_is_empty() {
        let (_, angles) = circle_gap(120, 60.0).unwrap();
        for t in angles {
            let off = (t - PI).rem_euclid(2.0 * PI);
            let off = off.min(2.0 * PI - off);
            assert!(off > 30f64.to_radians());
        }
        assert!(circle_gap(10, 360.0).is_err());
    }

    #[test]
    fn segment_labels() {
        let f = sine(0.25);
        let (xs, ys) = two_segment(20, &f).unwrap();
        assert_eq!(xs.len(), 40);
        assert_eq!(xs[0], -2.0);
        assert_eq!(xs[19], -1.0);
        assert_eq!(xs[20], 1.0);
        assert_eq!(xs[39], 2.0);
        for (x, y) in xs.iter().zip(&ys) {
            assert_eq!(*y, (PI * x / 4.0).sin());
        }
    }
}
