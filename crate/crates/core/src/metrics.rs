//! Video-level counting metrics and report files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Crowd-size bucket boundaries on the ground-truth total.
pub const DENSITY_BOUNDARIES: [f64; 4] = [50.0, 100.0, 150.0, 200.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoResult {
    pub id: String,
    pub predicted: usize,
    pub ground_truth: usize,
    /// Number of sampled frames.
    pub length: usize,
}

impl VideoResult {
    pub fn error(&self) -> f64 {
        self.predicted as f64 - self.ground_truth as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MseConvention {
    /// Root of the mean squared error.
    #[default]
    Root,
    Squared,
}

pub fn mae_mse(results: &[VideoResult], convention: MseConvention) -> Result<(f64, f64)> {
    if results.is_empty() {
        return Err(Error::Validation("no video results to score".into()));
    }
    let n = results.len() as f64;
    let mae = results.iter().map(|r| r.error().abs()).sum::<f64>() / n;
    let ms = results.iter().map(|r| r.error().powi(2)).sum::<f64>() / n;
    let mse = match convention {
        MseConvention::Root => ms.sqrt(),
        MseConvention::Squared => ms,
    };
    Ok((mae, mse))
}

/// Length-weighted relative absolute error, in percent.
pub fn wrae(results: &[VideoResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Validation("no video results to score".into()));
    }
    if let Some(r) = results.iter().find(|r| r.ground_truth == 0) {
        return Err(Error::Validation(format!("video {} has a ground-truth total of 0", r.id)));
    }
    if let Some(r) = results.iter().find(|r| r.length == 0) {
        return Err(Error::Validation(format!("video {} has length 0", r.id)));
    }
    let total_len: usize = results.iter().map(|r| r.length).sum();
    let s: f64 = results
        .iter()
        .map(|r| r.length as f64 * r.error().abs() / r.ground_truth as f64)
        .sum();
    Ok(100.0 * s / total_len as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketMae {
    pub bucket: usize,
    pub lower: f64,
    /// `None` for the open last bucket.
    pub upper: Option<f64>,
    pub videos: usize,
    pub mae: f64,
}

impl BucketMae {
    pub fn label(&self) -> String {
        match self.upper {
            Some(u) => format!("D{} [{}, {})", self.bucket, self.lower, u),
            None => format!("D{} [{}, inf)", self.bucket, self.lower),
        }
    }
}

/// Index of the half-open bucket holding `total`.
pub fn bucket_of(total: f64, boundaries: &[f64]) -> usize {
    boundaries.iter().take_while(|&&b| total >= b).count()
}

/// MAE per non-empty bucket, keyed on the ground-truth total.
pub fn density_breakdown(results: &[VideoResult], boundaries: &[f64]) -> Result<Vec<BucketMae>> {
    if boundaries.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("bucket boundaries must be strictly increasing".into()));
    }
    let mut out = Vec::new();
    for b in 0..=boundaries.len() {
        let members: Vec<&VideoResult> = results
            .iter()
            .filter(|r| bucket_of(r.ground_truth as f64, boundaries) == b)
            .collect();
        if members.is_empty() {
            continue;
        }
        out.push(BucketMae {
            bucket: b,
            lower: if b == 0 { 0.0 } else { boundaries[b - 1] },
            upper: boundaries.get(b).copied(),
            videos: members.len(),
            mae: members.iter().map(|r| r.error().abs()).sum::<f64>() / members.len() as f64,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub mse: f64,
    pub mse_convention: MseConvention,
    pub wrae: f64,
    pub buckets: Vec<BucketMae>,
    pub videos: Vec<VideoResult>,
}

impl MetricsReport {
    pub fn new(results: Vec<VideoResult>, convention: MseConvention) -> Result<Self> {
        let (mae, mse) = mae_mse(&results, convention)?;
        Ok(MetricsReport {
            mae,
            mse,
            mse_convention: convention,
            wrae: wrae(&results)?,
            buckets: density_breakdown(&results, &DENSITY_BOUNDARIES)?,
            videos: results,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Per-video rows `id,predicted,ground_truth,length,abs_error`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut text = String::from("id,predicted,ground_truth,length,abs_error\n");
        for v in &self.videos {
            text.push_str(&format!(
                "{},{},{},{},{}\n",
                v.id,
                v.predicted,
                v.ground_truth,
                v.length,
                v.error().abs()
            ));
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Bar chart of per-bucket MAE.
    pub fn write_svg(&self, path: &Path) -> Result<()> {
        std::fs::write(path, bucket_svg(&self.buckets)).map_err(|e| Error::io(path, e))
    }
}

pub fn bucket_svg(buckets: &[BucketMae]) -> String {
    let (w, h, pad, bar) = (480.0, 260.0, 40.0, 60.0);
    let top = buckets.iter().map(|b| b.mae).fold(1e-9, f64::max);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <text x=\"{pad}\" y=\"20\">MAE per crowd-size bucket</text>\n\
         <line x1=\"{pad}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n",
        y0 = h - pad,
        x1 = w - pad / 2.0
    );
    for (k, b) in buckets.iter().enumerate() {
        let bh = (h - 2.5 * pad) * b.mae / top;
        let x = pad + k as f64 * (bar + 20.0) + 10.0;
        let y = h - pad - bh;
        svg.push_str(&format!(
            "<rect x=\"{x}\" y=\"{y:.2}\" width=\"{bar}\" height=\"{bh:.2}\" fill=\"steelblue\"/>\n\
             <text x=\"{x}\" y=\"{ty:.2}\">{mae:.2}</text>\n\
             <text x=\"{x}\" y=\"{ly}\">D{bucket} (n={n})</text>\n",
            ty = y - 4.0,
            mae = b.mae,
            ly = h - pad + 14.0,
            bucket = b.bucket,
            n = b.videos
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vr(pred: usize, gt: usize, len: usize) -> VideoResult {
        VideoResult {
            id: format!("v{gt}-{pred}"),
            predicted: pred,
            ground_truth: gt,
            length: len,
        }
    }

    #[test]
    fn mae_mse_examples() {
        assert_eq!(mae_mse(&[vr(5, 5, 1), vr(9, 9, 2)], MseConvention::Root).unwrap(), (0.0, 0.0));
        let (mae, mse) = mae_mse(&[vr(13, 10, 1), vr(16, 20, 1)], MseConvention::Root).unwrap();
        assert!((mae - 3.5).abs() < 1e-12 && (mse - 12.5f64.sqrt()).abs() < 1e-12);
        let (_, sq) = mae_mse(&[vr(13, 10, 1), vr(16, 20, 1)], MseConvention::Squared).unwrap();
        assert!((sq - 12.5).abs() < 1e-12);
        assert_eq!(mae_mse(&[vr(10, 3, 4)], MseConvention::Root).unwrap(), (7.0, 7.0));
        assert!(mae_mse(&[], MseConvention::Root).is_err());
    }

    #[test]
    fn wrae_examples() {
        assert_eq!(wrae(&[vr(5, 5, 3)]).unwrap(), 0.0);
        let w = wrae(&[vr(110, 100, 10), vr(190, 200, 30)]).unwrap();
        assert!((w - 6.25).abs() < 1e-12);
        let eq = wrae(&[vr(110, 100, 7), vr(150, 200, 7)]).unwrap();
        assert!((eq - (10.0 + 25.0) / 2.0).abs() < 1e-12);
        assert!(wrae(&[vr(3, 0, 1)]).is_err());
    }

    #[test]
    fn bucket_boundaries() {
        assert_eq!(bucket_of(49.0, &DENSITY_BOUNDARIES), 0);
        assert_eq!(bucket_of(50.0, &DENSITY_BOUNDARIES), 1);
        assert_eq!(bucket_of(250.0, &DENSITY_BOUNDARIES), 4);
        let results = vec![vr(10, 20, 1), vr(30, 40, 1), vr(44, 45, 1)];
        let b = density_breakdown(&results, &DENSITY_BOUNDARIES).unwrap();
        assert_eq!(b.len(), 1);
        let (mae, _) = mae_mse(&results, MseConvention::Root).unwrap();
        assert!((b[0].mae - mae).abs() < 1e-12);
        assert!(density_breakdown(&results, &[100.0, 50.0]).is_err());
    }

    #[test]
    fn report_files() {
        let dir = tempfile::tempdir().unwrap();
        let report = MetricsReport::new(vec![vr(60, 55, 10), vr(210, 230, 20)], MseConvention::Root).unwrap();
        report.write_json(&dir.path().join("m.json")).unwrap();
        report.write_csv(&dir.path().join("m.csv")).unwrap();
        report.write_svg(&dir.path().join("m.svg")).unwrap();
        let back: MetricsReport =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("m.json")).unwrap()).unwrap();
        assert_eq!(back, report);
        assert_eq!(back.buckets.len(), 2);
        let svg = std::fs::read_to_string(dir.path().join("m.svg")).unwrap();
        assert_eq!(svg.matches("<rect").count(), 2);
    }

    proptest! {
        #[test]
        fn properties(
            rows in proptest::collection::vec((1usize..300, 0usize..400, 1usize..50), 1..12),
            c in 1usize..6,
        ) {
            let results: Vec<VideoResult> = rows.iter().map(|&(gt, pred, len)| vr(pred, gt, len)).collect();
            let (mae, rmse) = mae_mse(&results, MseConvention::Root).unwrap();
            prop_assert!(mae <= rmse + 1e-9);
            let scaled: Vec<VideoResult> = rows.iter().map(|&(gt, pred, len)| vr(pred * c, gt * c, len)).collect();
            prop_assert!((wrae(&results).unwrap() - wrae(&scaled).unwrap()).abs() < 1e-9);
            let total: usize = results.iter().map(|r| r.length).sum();
            let wsum: f64 = results.iter().map(|r| r.length as f64 / total as f64).sum();
            prop_assert!((wsum - 1.0).abs() < 1e-12);
        }
    }
}
