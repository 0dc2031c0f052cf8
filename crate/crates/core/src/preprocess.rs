//! Signal cleanup and alignment onto the normalized-capacity grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Median of a slice; even lengths average the two middle values.
///
/// Panics on an empty slice.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn check_window(len: usize, window: usize) -> Result<()> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::InvalidWindow(window));
    }
    if len < window {
        return Err(Error::SignalTooShort { len, window });
    }
    Ok(())
}

/// Centered rolling median. Edge windows are truncated to the samples that
/// exist, so the first output uses `r[0..=window/2]`.
pub fn rolling_median(r: &[f64], window: usize) -> Result<Vec<f64>> {
    check_window(r.len(), window)?;
    let half = window / 2;
    Ok((0..r.len())
        .map(|t| {
            let lo = t.saturating_sub(half);
            let hi = (t + half + 1).min(r.len());
            median(&r[lo..hi])
        })
        .collect())
}

/// Centered rolling median whose edge windows shrink symmetrically, so every
/// window is centered on its sample. A monotone signal maps to itself.
fn symmetric_rolling_median(r: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    let n = r.len();
    (0..n)
        .map(|t| {
            let reach = half.min(t).min(n - 1 - t);
            median(&r[t - reach..=t + reach])
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    /// Flag samples far from their local median.
    DeviationBased,
    /// The three-line rolling-median rule applied exactly as written.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterParams {
    pub window: usize,
    pub mode: FilterMode,
    pub spike_factor: f64,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            window: 5,
            mode: FilterMode::DeviationBased,
            spike_factor: 3.0,
        }
    }
}

impl FilterParams {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(Error::InvalidWindow(self.window));
        }
        if !(self.spike_factor > 0.0 && self.spike_factor.is_finite()) {
            return Err(Error::Config(format!(
                "spike_factor must be positive, got {}",
                self.spike_factor
            )));
        }
        Ok(())
    }
}

/// Floor applied to the median deviation so a perfectly clean signal still
/// flags any strictly positive outlier.
const MEDIAN_FLOOR: f64 = 1e-12;

/// Replaces spikes by the local median.
///
/// `DeviationBased` flags `t` when `|r_t - M_t| > k * median(|r - M|)`, where
/// `M` is a centered rolling median whose edge windows shrink symmetrically
/// (the two endpoint samples are therefore never replaced). `Literal`
/// uses `M = rolling_median(r)`, `dM = |rolling_median(M)|` and flags
/// `dM_t > k * median(dM)`. Unflagged samples are returned untouched.
pub fn despike(r: &[f64], params: &FilterParams) -> Result<Vec<f64>> {
    params.validate()?;
    check_window(r.len(), params.window)?;
    let (reference, score) = match params.mode {
        FilterMode::DeviationBased => {
            let m = symmetric_rolling_median(r, params.window);
            let d: Vec<f64> = r.iter().zip(&m).map(|(x, m)| (x - m).abs()).collect();
            (m, d)
        }
        FilterMode::Literal => {
            let m = rolling_median(r, params.window)?;
            let dm: Vec<f64> = rolling_median(&m, params.window)?
                .into_iter()
                .map(f64::abs)
                .collect();
            (m, dm)
        }
    };
    let threshold = params.spike_factor * median(&score).max(MEDIAN_FLOOR);
    Ok(r.iter()
        .zip(reference.iter().zip(&score))
        .map(|(&x, (&m, &s))| if s > threshold { m } else { x })
        .collect())
}

/// `Q_i = clamp(capacity_i / nominal, 0, 1)`.
pub fn normalize_capacity(capacities: &[f64], nominal_capacity: f64) -> Result<Vec<f64>> {
    if !(nominal_capacity > 0.0) {
        return Err(Error::NonPositiveCapacity(nominal_capacity));
    }
    Ok(capacities
        .iter()
        .map(|c| (c / nominal_capacity).clamp(0.0, 1.0))
        .collect())
}

/// Uniform grid over `[0, 1]` including both endpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QGrid {
    values: Vec<f64>,
}

impl QGrid {
    pub fn uniform(points: usize) -> Result<Self> {
        if points < 2 {
            return Err(Error::Config(format!("Q grid needs at least 2 points, got {points}")));
        }
        let last = (points - 1) as f64;
        let mut values: Vec<f64> = (0..points).map(|i| i as f64 / last).collect();
        values[points - 1] = 1.0;
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Piecewise-linear resampling of `(Q, value)` points onto `grid`.
///
/// Points are sorted by Q and values sharing a Q are averaged. Outside the
/// observed Q range the nearest endpoint value is held.
pub fn interp_to_grid(points: &[(f64, f64)], grid: &QGrid) -> Result<Vec<f64>> {
    let mut sorted: Vec<(f64, f64)> = points.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(sorted.len());
    let mut i = 0;
    while i < sorted.len() {
        let q = sorted[i].0;
        let mut j = i;
        let mut sum = 0.0;
        while j < sorted.len() && sorted[j].0 == q {
            sum += sorted[j].1;
            j += 1;
        }
        curve.push((q, sum / (j - i) as f64));
        i = j;
    }
    if curve.len() < 2 {
        return Err(Error::DegenerateCurve {
            distinct: curve.len(),
        });
    }

    let (q_first, v_first) = curve[0];
    let (q_last, v_last) = curve[curve.len() - 1];
    let mut seg = 0;
    Ok(grid
        .values()
        .iter()
        .map(|&q| {
            if q <= q_first {
                return v_first;
            }
            if q >= q_last {
                return v_last;
            }
            while curve[seg + 1].0 < q {
                seg += 1;
            }
            let (q0, v0) = curve[seg];
            let (q1, v1) = curve[seg + 1];
            let t = (q - q0) / (q1 - q0);
            v0 + t * (v1 - v0)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_window_median(r: &[f64], t: usize, half: usize) -> f64 {
        let lo = t.saturating_sub(half);
        let hi = (t + half).min(r.len() - 1);
        let mut w: Vec<f64> = r[lo..=hi].to_vec();
        w.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if w.len() % 2 == 1 {
            w[w.len() / 2]
        } else {
            (w[w.len() / 2 - 1] + w[w.len() / 2]) / 2.0
        }
    }

    #[test]
    fn rolling_median_examples() {
        assert_eq!(rolling_median(&[1.0; 5], 3).unwrap(), vec![1.0; 5]);
        assert_eq!(
            rolling_median(&[0.0, 0.0, 10.0, 0.0, 0.0], 3).unwrap(),
            vec![0.0; 5]
        );
        assert_eq!(
            rolling_median(&[1.0, 2.0, 3.0, 4.0, 5.0], 3).unwrap(),
            vec![1.5, 2.0, 3.0, 4.0, 4.5]
        );
    }

    #[test]
    fn rolling_median_rejects_short_signal_and_even_window() {
        assert!(matches!(
            rolling_median(&[1.0, 2.0], 3),
            Err(Error::SignalTooShort { len: 2, window: 3 })
        ));
        assert!(matches!(rolling_median(&[1.0; 8], 4), Err(Error::InvalidWindow(4))));
    }

    #[test]
    fn despike_leaves_clean_ramp_unchanged() {
        let ramp: Vec<f64> = (1..=10).map(f64::from).collect();
        let p = FilterParams {
            window: 3,
            ..Default::default()
        };
        assert_eq!(despike(&ramp, &p).unwrap(), ramp);
    }

    #[test]
    fn despike_removes_isolated_spike() {
        let r = [5.0, 5.0, 5.0, 50.0, 5.0, 5.0, 5.0];
        let p = FilterParams {
            window: 3,
            ..Default::default()
        };
        assert_eq!(despike(&r, &p).unwrap(), vec![5.0; 7]);
    }

    #[test]
    fn despike_literal_matches_hand_evaluation() {
        // Independent evaluation of M, dM and the replacement rule.
        let r = [5.0, 5.0, 5.0, 50.0, 5.0, 5.0, 5.0];
        let m: Vec<f64> = (0..7).map(|t| naive_window_median(&r, t, 1)).collect();
        assert_eq!(m, vec![5.0; 7]);
        let dm: Vec<f64> = (0..7).map(|t| naive_window_median(&m, t, 1).abs()).collect();
        let mut sorted = dm.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let threshold = 3.0 * sorted[3];
        let expected: Vec<f64> = (0..7)
            .map(|t| if dm[t] > threshold { m[t] } else { r[t] })
            .collect();
        // dM is flat at 5, nothing exceeds 15, so the spike survives.
        assert_eq!(expected, r.to_vec());
        let p = FilterParams {
            window: 3,
            mode: FilterMode::Literal,
            ..Default::default()
        };
        assert_eq!(despike(&r, &p).unwrap(), expected);
    }

    #[test]
    fn despike_keeps_steps() {
        let r = [1.0, 1.0, 1.0, 1.0, 3.0, 3.0, 3.0, 3.0];
        let p = FilterParams::default();
        assert_eq!(despike(&r, &p).unwrap(), r.to_vec());
    }

    #[test]
    fn filter_params_validate() {
        let bad = FilterParams {
            window: 1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = FilterParams {
            spike_factor: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn normalize_capacity_examples() {
        assert_eq!(
            normalize_capacity(&[0.0, 0.55, 1.1], 1.1).unwrap(),
            vec![0.0, 0.5, 1.0]
        );
        assert_eq!(normalize_capacity(&[1.2], 1.1).unwrap(), vec![1.0]);
        assert_eq!(normalize_capacity(&[0.0, 1.1], 2.2).unwrap(), vec![0.0, 0.5]);
        assert!(normalize_capacity(&[1.0], 0.0).is_err());
        assert!(normalize_capacity(&[1.0], -1.0).is_err());
    }

    #[test]
    fn grid_endpoints() {
        let g = QGrid::uniform(7).unwrap();
        assert_eq!(g.values()[0], 0.0);
        assert_eq!(g.values()[6], 1.0);
        assert!(g.values().windows(2).all(|w| w[1] > w[0]));
        assert!(QGrid::uniform(1).is_err());
    }

    #[test]
    fn interp_examples() {
        let g3 = QGrid::uniform(3).unwrap();
        assert_eq!(interp_to_grid(&[(0.0, 2.0), (1.0, 4.0)], &g3).unwrap(), vec![2.0, 3.0, 4.0]);
        assert_eq!(
            interp_to_grid(&[(0.25, 1.0), (0.75, 1.0)], &g3).unwrap(),
            vec![1.0, 1.0, 1.0]
        );
        let g5 = QGrid::uniform(5).unwrap();
        assert_eq!(
            interp_to_grid(&[(0.0, 0.0), (0.5, 1.0), (1.0, 0.0)], &g5).unwrap(),
            vec![0.0, 0.5, 1.0, 0.5, 0.0]
        );
    }

    #[test]
    fn interp_sorts_and_averages_duplicates() {
        let g3 = QGrid::uniform(3).unwrap();
        let pts = [(1.0, 4.0), (0.0, 1.0), (0.0, 3.0)];
        assert_eq!(interp_to_grid(&pts, &g3).unwrap(), vec![2.0, 3.0, 4.0]);
        assert!(matches!(
            interp_to_grid(&[(0.5, 1.0), (0.5, 2.0)], &g3),
            Err(Error::DegenerateCurve { distinct: 1 })
        ));
    }

    #[test]
    fn truncated_edges_keep_moving_monotone_input() {
        // Even-sized edge windows average their two samples, so a second pass
        // keeps pulling the endpoints inward.
        let once = rolling_median(&[1.0, 2.0, 3.0, 4.0, 5.0], 3).unwrap();
        let twice = rolling_median(&once, 3).unwrap();
        assert_eq!(twice[0], 1.75);
        assert_eq!(&twice[1..4], &once[1..4]);
    }

    proptest! {
        #[test]
        fn rolling_median_matches_naive(r in prop::collection::vec(-100.0f64..100.0, 5..40), half in 0usize..3) {
            let w = 2 * half + 1;
            let fast = rolling_median(&r, w).unwrap();
            for (t, &f) in fast.iter().enumerate() {
                prop_assert_eq!(f, naive_window_median(&r, t, half));
            }
        }

        #[test]
        fn rolling_median_idempotent_on_constant(c in -100.0f64..100.0, n in 5usize..40, half in 1usize..3) {
            let r = vec![c; n];
            let once = rolling_median(&r, 2 * half + 1).unwrap();
            prop_assert_eq!(&once, &r);
            prop_assert_eq!(rolling_median(&once, 2 * half + 1).unwrap(), once);
        }

        #[test]
        fn symmetric_median_fixes_monotone(mut r in prop::collection::vec(-100.0f64..100.0, 5..40)) {
            r.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let once = symmetric_rolling_median(&r, 5);
            prop_assert_eq!(&once, &r);
            prop_assert_eq!(symmetric_rolling_median(&once, 5), once);
        }

        #[test]
        fn despike_only_touches_flagged_samples(r in prop::collection::vec(-10.0f64..10.0, 5..60)) {
            let p = FilterParams::default();
            let out = despike(&r, &p).unwrap();
            let m = symmetric_rolling_median(&r, p.window);
            for t in 0..r.len() {
                prop_assert!(out[t] == r[t] || out[t] == m[t]);
            }
        }

        #[test]
        fn despike_fixes_monotone_signals(mut r in prop::collection::vec(-10.0f64..10.0, 5..60)) {
            r.sort_by(|a, b| a.partial_cmp(b).unwrap());
            prop_assert_eq!(despike(&r, &FilterParams::default()).unwrap(), r);
        }

        #[test]
        fn interp_reproduces_affine(
            slope in -5.0f64..5.0,
            offset in -5.0f64..5.0,
            mut qs in prop::collection::vec(0.0f64..1.0, 2..30),
            w in 2usize..200,
        ) {
            qs.push(0.0);
            qs.push(1.0);
            let pts: Vec<(f64, f64)> = qs.iter().map(|&q| (q, slope * q + offset)).collect();
            let grid = QGrid::uniform(w).unwrap();
            let out = interp_to_grid(&pts, &grid).unwrap();
            for (q, v) in grid.values().iter().zip(out) {
                prop_assert!((v - (slope * q + offset)).abs() <= 1e-12);
            }
        }

        #[test]
        fn normalized_capacity_in_unit_interval(caps in prop::collection::vec(-10.0f64..10.0, 0..20), nominal in 0.01f64..5.0) {
            for q in normalize_capacity(&caps, nominal).unwrap() {
                prop_assert!((0.0..=1.0).contains(&q));
            }
        }
    }
}
