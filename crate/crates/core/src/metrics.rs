//! Depth error metrics on the ground-truth valid mask.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::DepthMap;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse: f64,
    pub rmse: f64,
    pub mae: f64,
    pub are: f64,
    /// `+inf` when the prediction is exact.
    pub psnr: f64,
    pub median_err: f64,
    pub n_valid: usize,
    /// Largest valid ground-truth depth, the PSNR peak.
    pub peak_used: f64,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Compares `pred` with `gt` on pixels where `gt` is valid and positive.
pub fn evaluate(pred: &DepthMap, gt: &DepthMap) -> Result<MetricReport> {
    if pred.dims() != gt.dims() {
        return Err(Error::dims(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let mut abs_err = Vec::with_capacity(gt.valid_count());
    let (mut se, mut ae, mut re, mut peak) = (0.0, 0.0, 0.0, 0.0f64);
    for ((&p, &g), &ok) in pred.values().iter().zip(gt.values()).zip(gt.valid()) {
        if !ok || g <= 0.0 {
            continue;
        }
        let e = (p - g).abs();
        se += e * e;
        ae += e;
        re += e / g;
        peak = peak.max(g);
        abs_err.push(e);
    }
    let n = abs_err.len();
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let nf = n as f64;
    let mse = se / nf;
    Ok(MetricReport {
        mse,
        rmse: mse.sqrt(),
        mae: ae / nf,
        are: re / nf,
        psnr: if mse == 0.0 { f64::INFINITY } else { 10.0 * (peak * peak / mse).log10() },
        median_err: median(&mut abs_err),
        n_valid: n,
        peak_used: peak,
    })
}

/// Unweighted mean of per-image metrics; pixel counts are summed.
pub fn aggregate(reports: &[MetricReport]) -> Result<MetricReport> {
    if reports.is_empty() {
        return Err(Error::Contract("cannot aggregate an empty report list".into()));
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Ok(MetricReport {
        mse: mean(|r| r.mse),
        rmse: mean(|r| r.rmse),
        mae: mean(|r| r.mae),
        are: mean(|r| r.are),
        psnr: mean(|r| r.psnr),
        median_err: mean(|r| r.median_err),
        n_valid: reports.iter().map(|r| r.n_valid).sum(),
        peak_used: mean(|r| r.peak_used),
    })
}

/// Fixed-width table with one row per labelled report.
pub fn format_table(rows: &[(String, MetricReport)]) -> String {
    let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(6);
    let mut s = format!(
        "{:<label_w$}  {:>10} {:>10} {:>10} {:>10} {:>9} {:>10} {:>9}\n",
        "case", "MSE", "rMSE", "MAE", "ARE", "PSNR", "ME", "pixels"
    );
    for (label, r) in rows {
        s.push_str(&format!(
            "{:<label_w$}  {:>10.6} {:>10.6} {:>10.6} {:>10.6} {:>9.3} {:>10.6} {:>9}\n",
            label, r.mse, r.rmse, r.mae, r.are, r.psnr, r.median_err, r.n_valid
        ));
    }
    s
}

/// One JSON object per line; infinite PSNR is written as the string "inf".
pub fn report_json(label: &str, r: &MetricReport) -> String {
    let psnr = if r.psnr.is_finite() {
        serde_json::json!(r.psnr)
    } else {
        serde_json::json!("inf")
    };
    serde_json::json!({
        "case": label,
        "mse": r.mse,
        "rmse": r.rmse,
        "mae": r.mae,
        "are": r.are,
        "psnr": psnr,
        "median_err": r.median_err,
        "n_valid": r.n_valid,
        "peak_used": r.peak_used,
    })
    .to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, n: usize) -> DepthMap {
        DepthMap::new(n, n, (0..n * n).map(|_| rng.random_range(0.5..5.0)).collect()).unwrap()
    }

    #[test]
    fn exact_prediction() {
        let d = DepthMap::constant(4, 4, 2.0);
        let r = evaluate(&d, &d).unwrap();
        assert_eq!((r.mse, r.rmse, r.mae, r.are, r.median_err), (0.0, 0.0, 0.0, 0.0, 0.0));
        assert_eq!(r.psnr, f64::INFINITY);
    }

    #[test]
    fn one_meter_offset() {
        let gt = DepthMap::constant(4, 4, 2.0);
        let r = evaluate(&gt.map_values(|v| v + 1.0), &gt).unwrap();
        assert_eq!((r.mse, r.mae, r.are, r.median_err, r.peak_used), (1.0, 1.0, 0.5, 1.0, 2.0));
        assert!((r.psnr - 6.0206).abs() < 1e-3);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let gt = DepthMap::with_mask(2, 2, vec![0.0; 4], vec![false; 4]).unwrap();
        assert!(matches!(evaluate(&gt, &gt), Err(Error::EmptyMask)));
        assert!(matches!(evaluate(&DepthMap::constant(2, 3, 1.0), &gt), Err(Error::Dimension(_))));
    }

    #[test]
    fn aggregate_examples() {
        let gt = DepthMap::constant(4, 4, 2.0);
        let a = evaluate(&gt.map_values(|v| v + 1.0), &gt).unwrap();
        assert_eq!(aggregate(&[a]).unwrap(), a);
        let two = aggregate(&[a, a]).unwrap();
        assert_eq!((two.mae, two.n_valid), (a.mae, 32));
        let b = evaluate(&gt.map_values(|v| v + 3.0), &gt).unwrap();
        assert_eq!(aggregate(&[a, b]).unwrap().mae, 2.0);
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn outputs_are_formatted() {
        let gt = DepthMap::constant(4, 4, 2.0);
        let r = evaluate(&gt, &gt).unwrap();
        let t = format_table(&[("ramp".into(), r)]);
        assert!(t.lines().count() == 2 && t.contains("rMSE"));
        let j: serde_json::Value = serde_json::from_str(&report_json("ramp", &r)).unwrap();
        assert_eq!(j["psnr"], "inf");
    }

    proptest! {
        #[test]
        fn scale_relations(seed in any::<u64>(), a in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_map(&mut rng, 8);
            let g = random_map(&mut rng, 8);
            let r = evaluate(&p, &g).unwrap();
            let s = evaluate(&p.map_values(|v| a * v), &g.map_values(|v| a * v)).unwrap();
            let close = |x: f64, y: f64| (x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1.0);
            prop_assert!(close(s.mse, a * a * r.mse));
            prop_assert!(close(s.mae, a * r.mae));
            prop_assert!(close(s.rmse, a * r.rmse));
            prop_assert!(close(s.median_err, a * r.median_err));
            prop_assert!(close(s.are, r.are));
            prop_assert!(close(s.psnr, r.psnr));
            prop_assert!(r.mae <= r.rmse + 1e-15);
            prop_assert!((r.rmse - r.mse.sqrt()).abs() < 1e-9);
        }

        #[test]
        fn median_ignores_pixel_order(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_map(&mut rng, 6);
            let g = random_map(&mut rng, 6);
            let r = evaluate(&p, &g).unwrap();
            let pv: Vec<f64> = p.values().iter().rev().cloned().collect();
            let gv: Vec<f64> = g.values().iter().rev().cloned().collect();
            let rr = evaluate(&DepthMap::new(6, 6, pv).unwrap(), &DepthMap::new(6, 6, gv).unwrap()).unwrap();
            prop_assert_eq!(r.median_err, rr.median_err);
        }
    }
}
