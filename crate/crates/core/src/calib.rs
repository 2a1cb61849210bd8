//! Calibration of the propagation and power-control defaults against a
//! reference field-measurement table: uplink transmit power and RSRP recorded
//! at six distances from a commercial macro cell.
//!
//! Two independent least-squares fits pin the defaults:
//!  * RSRP vs log-distance gives the path-loss intercept/exponent,
//!  * transmit power vs path loss gives the open-loop power-control pair.
//!
//! The fitted values are frozen as constants so every run uses the same
//! calibration; a test re-runs the fit and checks the constants still match.

/// One row of the reference table.
#[derive(Debug, Clone, Copy)]
pub struct FieldMeasurement {
    pub distance_m: f64,
    pub tx_power_dbm: f64,
    pub rsrp_dbm: f64,
}

/// Drive-test medians from a commercial macro cell.
pub const REFERENCE_POWER_TABLE: [FieldMeasurement; 6] = [
    FieldMeasurement { distance_m: 10.0, tx_power_dbm: -7.04, rsrp_dbm: -62.37 },
    FieldMeasurement { distance_m: 30.0, tx_power_dbm: 0.49, rsrp_dbm: -73.43 },
    FieldMeasurement { distance_m: 50.0, tx_power_dbm: 5.05, rsrp_dbm: -78.91 },
    FieldMeasurement { distance_m: 70.0, tx_power_dbm: 7.65, rsrp_dbm: -85.36 },
    FieldMeasurement { distance_m: 90.0, tx_power_dbm: 7.20, rsrp_dbm: -86.45 },
    FieldMeasurement { distance_m: 110.0, tx_power_dbm: 7.56, rsrp_dbm: -87.60 },
];

/// Downlink reference transmit power assumed when converting the table's RSRP
/// column into path loss. Any constant works — it shifts pl0 and p0 by the
/// same amount everywhere — but it must be used consistently.
pub const MACRO_ENB_REF_TX_DBM: f64 = 30.0;

// Frozen outputs of the two fits below (d0 = 1 m).
pub const MACRO_PL0_DB: f64 = 66.75957108703915;
pub const MACRO_PATH_LOSS_EXPONENT: f64 = 2.531366838243638;
pub const MACRO_P0_DBM: f64 = -60.62182744865135;
pub const MACRO_ALPHA: f64 = 0.5880281365680732;

/// Ordinary least squares for y = slope * x + intercept.
pub fn linear_fit(points: &[(f64, f64)]) -> (f64, f64) {
    assert!(points.len() >= 2, "fit needs at least two points");
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

#[derive(Debug, Clone)]
pub struct PathLossFit {
    pub pl0_db: f64,
    pub exponent: f64,
    /// Per-row RSRP prediction errors, table order.
    pub residuals_db: Vec<f64>,
    pub max_abs_residual_db: f64,
}

/// Fits RSRP(d) = ref_tx - pl0 - 10 n log10(d) over the reference table.
pub fn fit_path_loss(enb_ref_tx_dbm: f64) -> PathLossFit {
    let pts: Vec<(f64, f64)> = REFERENCE_POWER_TABLE
        .iter()
        .map(|m| (m.distance_m.log10(), m.rsrp_dbm))
        .collect();
    let (slope, intercept) = linear_fit(&pts);
    let exponent = -slope / 10.0;
    let pl0_db = enb_ref_tx_dbm - intercept;
    let residuals_db: Vec<f64> = REFERENCE_POWER_TABLE
        .iter()
        .map(|m| intercept + slope * m.distance_m.log10() - m.rsrp_dbm)
        .collect();
    let max_abs_residual_db = residuals_db.iter().fold(0.0f64, |a, r| a.max(r.abs()));
    PathLossFit { pl0_db, exponent, residuals_db, max_abs_residual_db }
}

#[derive(Debug, Clone)]
pub struct PowerControlFit {
    pub p0_dbm: f64,
    pub alpha: f64,
    /// Per-row transmit-power prediction errors, table order.
    pub residuals_db: Vec<f64>,
    pub max_abs_residual_db: f64,
}

/// Fits TxPWR = p0 + alpha * PL over the reference table, with PL derived from
/// the RSRP column and `enb_ref_tx_dbm`.
pub fn fit_power_control(enb_ref_tx_dbm: f64) -> PowerControlFit {
    let pts: Vec<(f64, f64)> = REFERENCE_POWER_TABLE
        .iter()
        .map(|m| (enb_ref_tx_dbm - m.rsrp_dbm, m.tx_power_dbm))
        .collect();
    let (alpha, p0_dbm) = linear_fit(&pts);
    let residuals_db: Vec<f64> = pts.iter().map(|&(pl, tx)| p0_dbm + alpha * pl - tx).collect();
    let max_abs_residual_db = residuals_db.iter().fold(0.0f64, |a, r| a.max(r.abs()));
    PowerControlFit { p0_dbm, alpha, residuals_db, max_abs_residual_db }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_constants_match_the_fit() {
        let pl = fit_path_loss(MACRO_ENB_REF_TX_DBM);
        assert!((pl.pl0_db - MACRO_PL0_DB).abs() < 1e-9, "pl0 {}", pl.pl0_db);
        assert!((pl.exponent - MACRO_PATH_LOSS_EXPONENT).abs() < 1e-9, "n {}", pl.exponent);
        let pc = fit_power_control(MACRO_ENB_REF_TX_DBM);
        assert!((pc.p0_dbm - MACRO_P0_DBM).abs() < 1e-9, "p0 {}", pc.p0_dbm);
        assert!((pc.alpha - MACRO_ALPHA).abs() < 1e-9, "alpha {}", pc.alpha);
    }

    // Independent oracle: a coarse-to-fine grid search over the residual sum
    // of squares must land on the closed-form solution.
    fn grid_min<F: Fn(f64, f64) -> f64>(sse: F, mut a: (f64, f64), mut b: (f64, f64)) -> (f64, f64) {
        let (mut best_a, mut best_b) = ((a.0 + a.1) / 2.0, (b.0 + b.1) / 2.0);
        for _ in 0..40 {
            let mut best = f64::INFINITY;
            let steps = 24;
            let (mut na, mut nb) = (best_a, best_b);
            for i in 0..=steps {
                let x = a.0 + (a.1 - a.0) * i as f64 / steps as f64;
                for j in 0..=steps {
                    let y = b.0 + (b.1 - b.0) * j as f64 / steps as f64;
                    let v = sse(x, y);
                    if v < best {
                        best = v;
                        na = x;
                        nb = y;
                    }
                }
            }
            best_a = na;
            best_b = nb;
            let aw = (a.1 - a.0) / 4.0;
            let bw = (b.1 - b.0) / 4.0;
            a = (best_a - aw, best_a + aw);
            b = (best_b - bw, best_b + bw);
        }
        (best_a, best_b)
    }

    #[test]
    fn least_squares_agrees_with_grid_search_oracle() {
        let sse_pl = |n: f64, pl0: f64| -> f64 {
            REFERENCE_POWER_TABLE
                .iter()
                .map(|m| {
                    let pred = MACRO_ENB_REF_TX_DBM - pl0 - 10.0 * n * m.distance_m.log10();
                    (pred - m.rsrp_dbm).powi(2)
                })
                .sum()
        };
        let (n, pl0) = grid_min(sse_pl, (1.0, 4.0), (40.0, 90.0));
        assert!((n - MACRO_PATH_LOSS_EXPONENT).abs() < 1e-3, "oracle n {n}");
        assert!((pl0 - MACRO_PL0_DB).abs() < 1e-2, "oracle pl0 {pl0}");

        let sse_pc = |alpha: f64, p0: f64| -> f64 {
            REFERENCE_POWER_TABLE
                .iter()
                .map(|m| {
                    let pl = MACRO_ENB_REF_TX_DBM - m.rsrp_dbm;
                    (p0 + alpha * pl - m.tx_power_dbm).powi(2)
                })
                .sum()
        };
        let (alpha, p0) = grid_min(sse_pc, (0.0, 1.0), (-90.0, -30.0));
        assert!((alpha - MACRO_ALPHA).abs() < 1e-3, "oracle alpha {alpha}");
        assert!((p0 - MACRO_P0_DBM).abs() < 1e-1, "oracle p0 {p0}");
    }

    #[test]
    fn residuals_stay_inside_reproduction_tolerances() {
        let pl = fit_path_loss(MACRO_ENB_REF_TX_DBM);
        assert!(pl.max_abs_residual_db < 2.0, "rsrp residual {}", pl.max_abs_residual_db);
        let pc = fit_power_control(MACRO_ENB_REF_TX_DBM);
        assert!(pc.max_abs_residual_db < 3.0, "tx residual {}", pc.max_abs_residual_db);
    }

    #[test]
    fn alpha_is_a_valid_compensation_fraction() {
        assert!(MACRO_ALPHA > 0.0 && MACRO_ALPHA <= 1.0);
    }
}
