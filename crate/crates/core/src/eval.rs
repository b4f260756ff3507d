//! Evaluation harness: degrade held-out images at fixed quality factors,
//! run a restorer over them, and report PSNR / MSE / perceptual distance /
//! L1 per image, per quality factor, and overall.

use ndarray::Zip;

use crate::image::{image_to_nchw, ImageTensor};
use crate::jpeg::{degrade, Subsample};
use crate::losses::DistsLite;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Anything that maps a degraded image back toward its original. The
/// quality factor is advisory; restorers that estimate it themselves may
/// ignore it.
pub trait Restorer {
    fn restore(&self, image_id: &str, lq: &ImageTensor, qf: u8) -> Result<ImageTensor>;
}

/// Returns its input untouched. Restored metrics then equal the degraded
/// baseline metrics exactly, which pins the metric wiring.
pub struct IdentityRestorer;

impl Restorer for IdentityRestorer {
    fn restore(&self, _id: &str, lq: &ImageTensor, _qf: u8) -> Result<ImageTensor> {
        Ok(lq.clone())
    }
}

/// Mean squared error over all pixels and channels of [0,1] images.
pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    if a.data.shape() != b.data.shape() {
        return Err(Error::Shape(format!(
            "image {:?} vs image {:?}",
            a.data.shape(),
            b.data.shape()
        )));
    }
    let mut acc = 0.0;
    Zip::from(&a.data).and(&b.data).for_each(|&x, &y| {
        let d = x - y;
        acc += d * d;
    });
    Ok(acc / a.data.len() as f64)
}

/// PSNR in dB against peak 1.0; infinite for an exact match.
pub fn psnr(mse: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

fn l1(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let mut acc = 0.0;
    Zip::from(&a.data).and(&b.data).for_each(|&x, &y| {
        acc += (x - y).abs();
    });
    acc / a.data.len() as f64
}

#[derive(Debug, Clone)]
pub struct ImageEval {
    pub id: String,
    pub qf: u8,
    pub psnr: f64,
    pub mse: f64,
    pub dists: f64,
    pub l1: f64,
    /// Baseline: PSNR of the degraded input against the original.
    pub psnr_lq: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Aggregates {
    pub count: usize,
    pub psnr: f64,
    pub mse: f64,
    pub dists: f64,
    pub l1: f64,
    pub psnr_lq: f64,
}

impl Aggregates {
    fn of(rows: &[&ImageEval]) -> Self {
        let n = rows.len() as f64;
        let mut a = Aggregates {
            count: rows.len(),
            ..Default::default()
        };
        for r in rows {
            a.psnr += r.psnr;
            a.mse += r.mse;
            a.dists += r.dists;
            a.l1 += r.l1;
            a.psnr_lq += r.psnr_lq;
        }
        if rows.is_empty() {
            return a;
        }
        a.psnr /= n;
        a.mse /= n;
        a.dists /= n;
        a.l1 /= n;
        a.psnr_lq /= n;
        a
    }
}

#[derive(Debug)]
pub struct EvalReport {
    pub rows: Vec<ImageEval>,
    pub per_qf: Vec<(u8, Aggregates)>,
    pub overall: Aggregates,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,qf,psnr,mse,dists,l1,psnr_lq\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.id, r.qf, r.psnr, r.mse, r.dists, r.l1, r.psnr_lq
            ));
        }
        out
    }

    /// One table row per quality factor plus an overall row, metric per
    /// column, higher-PSNR-is-better noted in the header.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from(
            "| QF | images | PSNR (dB) | input PSNR | MSE | DISTS-lite | L1 |\n\
             |---:|-------:|----------:|-----------:|----:|-----------:|---:|\n",
        );
        let fmt = |label: String, a: &Aggregates| {
            format!(
                "| {label} | {} | {:.4} | {:.4} | {:.6} | {:.6} | {:.6} |\n",
                a.count, a.psnr, a.psnr_lq, a.mse, a.dists, a.l1
            )
        };
        for (qf, agg) in &self.per_qf {
            out.push_str(&fmt(qf.to_string(), agg));
        }
        out.push_str(&fmt("all".into(), &self.overall));
        out
    }
}

/// Degrade every image at every quality factor, restore, measure. Images
/// must be RGB; quality factors must be in [1, 100] and distinct.
pub fn evaluate(
    restorer: &dyn Restorer,
    images: &[(String, ImageTensor)],
    qfs: &[u8],
) -> Result<EvalReport> {
    if images.is_empty() {
        return Err(Error::Domain("no evaluation images".into()));
    }
    if qfs.is_empty() {
        return Err(Error::Domain("no quality factors requested".into()));
    }
    for (i, &qf) in qfs.iter().enumerate() {
        if qf == 0 || qf > 100 {
            return Err(Error::Domain(format!("quality factor {qf} outside [1, 100]")));
        }
        if qfs[..i].contains(&qf) {
            return Err(Error::Domain(format!("duplicate quality factor {qf}")));
        }
    }

    let extractor = DistsLite::new();
    let mut rows = Vec::with_capacity(images.len() * qfs.len());
    for &qf in qfs {
        for (id, hq) in images {
            let lq = degrade(hq, u32::from(qf), Subsample::S420)?;
            let restored = restorer.restore(id, &lq, qf)?;
            if restored.data.shape() != hq.data.shape() {
                return Err(Error::Shape(format!(
                    "restorer changed the shape of {id:?}: {:?} -> {:?}",
                    hq.data.shape(),
                    restored.data.shape()
                )));
            }
            let m = mse(&restored, hq)?;
            let d = extractor
                .forward(
                    &Tensor::constant(image_to_nchw(&restored)),
                    &Tensor::constant(image_to_nchw(hq)),
                )?
                .value()[[]];
            rows.push(ImageEval {
                id: id.clone(),
                qf,
                psnr: psnr(m),
                mse: m,
                dists: d,
                l1: l1(&restored, hq),
                psnr_lq: psnr(mse(&lq, hq)?),
            });
        }
    }

    let per_qf = qfs
        .iter()
        .map(|&qf| {
            let subset: Vec<&ImageEval> = rows.iter().filter(|r| r.qf == qf).collect();
            (qf, Aggregates::of(&subset))
        })
        .collect();
    let all: Vec<&ImageEval> = rows.iter().collect();
    Ok(EvalReport {
        per_qf,
        overall: Aggregates::of(&all),
        rows,
    })
}
