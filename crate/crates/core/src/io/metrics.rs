//! Flow and rigidity evaluation.

use crate::error::{Error, Result};
use crate::field::{ensure_same_dims, BinaryMask, FlowField};

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub epe_mean: f64,
    /// EPE over ground-truth rigid pixels, when a ground-truth mask is given.
    pub epe_rigid: Option<f64>,
    pub epe_moving: Option<f64>,
    /// Fraction of pixels with error above 3 px and above 5% of the
    /// ground-truth magnitude.
    pub pct_bad: f64,
    pub rigidity_accuracy: Option<f64>,
    pub rigidity_tpr_rigid: Option<f64>,
    pub rigidity_tpr_moving: Option<f64>,
    pub valid_pixels: usize,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn compute_metrics(
    flow: &FlowField,
    gt: &FlowField,
    gt_rigidity: Option<&BinaryMask>,
    est_rigidity: Option<&BinaryMask>,
    valid: Option<&BinaryMask>,
) -> Result<MetricReport> {
    let dims = gt.dims();
    ensure_same_dims(dims, flow.dims())?;
    for m in [gt_rigidity, est_rigidity, valid].into_iter().flatten() {
        ensure_same_dims(dims, m.dims())?;
    }
    let (mut n, mut sum, mut bad) = (0usize, 0.0, 0usize);
    let (mut n_r, mut sum_r, mut n_m, mut sum_m) = (0usize, 0.0, 0usize, 0.0);
    let (mut correct, mut rr, mut mm) = (0usize, 0usize, 0usize);
    for i in 0..dims.0 * dims.1 {
        if valid.is_some_and(|v| !v.data()[i]) {
            continue;
        }
        let (f, g) = (flow.data()[i], gt.data()[i]);
        let err = (f[0] - g[0]).hypot(f[1] - g[1]);
        n += 1;
        sum += err;
        if err > 3.0 && err > 0.05 * g[0].hypot(g[1]) {
            bad += 1;
        }
        if let Some(gr) = gt_rigidity {
            let rigid = gr.data()[i];
            if rigid {
                n_r += 1;
                sum_r += err;
            } else {
                n_m += 1;
                sum_m += err;
            }
            if let Some(er) = est_rigidity {
                let est = er.data()[i];
                correct += (est == rigid) as usize;
                rr += (rigid && est) as usize;
                mm += (!rigid && !est) as usize;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyValidSet);
    }
    let with_est = gt_rigidity.is_some() && est_rigidity.is_some();
    Ok(MetricReport {
        epe_mean: sum / n as f64,
        epe_rigid: gt_rigidity.and_then(|_| (n_r > 0).then(|| sum_r / n_r as f64)),
        epe_moving: gt_rigidity.and_then(|_| (n_m > 0).then(|| sum_m / n_m as f64)),
        pct_bad: bad as f64 / n as f64,
        rigidity_accuracy: if with_est { ratio(correct, n) } else { None },
        rigidity_tpr_rigid: if with_est { ratio(rr, n_r) } else { None },
        rigidity_tpr_moving: if with_est { ratio(mm, n_m) } else { None },
        valid_pixels: n,
    })
}

/// Mean endpoint error over `mask` (all pixels when `None`).
pub fn epe(flow: &FlowField, gt: &FlowField, mask: Option<&BinaryMask>) -> Result<f64> {
    Ok(compute_metrics(flow, gt, None, None, mask)?.epe_mean)
}
