#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

/// Intelligent driver model parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdmParams {
    /// Maximum acceleration `a` (m/s²).
    pub a_max: f64,
    /// Comfortable deceleration `b` (m/s²).
    pub b: f64,
    /// Jam distance `s₀` (m).
    pub s0: f64,
    /// Time headway `T` (s).
    pub time_headway: f64,
    /// Desired speed `v₀` (m/s).
    pub v0: f64,
    pub delta: f64,
    /// Deceleration applied when the gap is already closed.
    pub max_decel: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        IdmParams {
            a_max: 1.0,
            b: 1.5,
            s0: 2.0,
            time_headway: 1.0,
            v0: 30.0,
            delta: 4.0,
            max_decel: 3.0,
        }
    }
}

/// IDM acceleration for speed `v` behind a leader at speed `v_leader` with
/// bumper-to-bumper `gap`. An infinite gap means a free road.
pub fn idm_accel(p: &IdmParams, v: f64, v_leader: f64, gap: f64) -> f64 {
    let free = p.a_max * (1.0 - (v / p.v0).powf(p.delta));
    if gap.is_infinite() {
        return free;
    }
    if gap <= 0.0 {
        return -p.max_decel;
    }
    let dv = v - v_leader;
    let s_star = p.s0 + (v * p.time_headway + v * dv / (2.0 * (p.a_max * p.b).sqrt())).max(0.0);
    free - p.a_max * (s_star / gap).powi(2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn free_road_from_rest() {
        let p = IdmParams::default();
        assert_eq!(idm_accel(&p, 0.0, 0.0, f64::INFINITY), p.a_max);
        let a = idm_accel(&p, 0.0, 0.0, 1e6);
        assert_abs_diff_eq!(a, p.a_max, epsilon = 1e-9);
    }

    #[test]
    fn desired_speed_equilibrium() {
        let p = IdmParams::default();
        let a = idm_accel(&p, p.v0, p.v0, 1e6);
        assert!(a <= 0.0 && a > -1e-6);
    }

    #[test]
    fn closing_on_leader_matches_formula() {
        let p = IdmParams {
            a_max: 1.0,
            b: 1.5,
            s0: 2.0,
            time_headway: 1.0,
            v0: 30.0,
            delta: 4.0,
            max_decel: 3.0,
        };
        // s* = 2 + 15·1 + 15·5/(2√1.5)
        let s_star = 17.0 + 75.0 / (2.0 * 1.5f64.sqrt());
        let want = 1.0 * (1.0 - (15.0f64 / 30.0).powi(4) - (s_star / 20.0).powi(2));
        assert_abs_diff_eq!(idm_accel(&p, 15.0, 10.0, 20.0), want, epsilon = 1e-12);
        assert_abs_diff_eq!(want, -4.731_332_851_707_127, epsilon = 1e-9);
    }

    #[test]
    fn closed_gap_brakes() {
        let p = IdmParams::default();
        assert_eq!(idm_accel(&p, 10.0, 10.0, 0.0), -p.max_decel);
        assert_eq!(idm_accel(&p, 10.0, 10.0, -1.0), -p.max_decel);
    }
}
