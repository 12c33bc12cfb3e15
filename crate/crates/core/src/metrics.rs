//! Segmentation evaluation: Dice score and volumetric similarity.

use crate::volume::MaskVolume;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("shape mismatch: pred {pred:?} vs gt {gt:?}")]
    ShapeMismatch {
        pred: (usize, usize, usize),
        gt: (usize, usize, usize),
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

pub fn confusion(pred: &MaskVolume, gt: &MaskVolume) -> Result<ConfusionCounts, MetricsError> {
    if pred.shape() != gt.shape() {
        return Err(MetricsError::ShapeMismatch {
            pred: pred.shape(),
            gt: gt.shape(),
        });
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data.iter().zip(gt.data.iter()) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

/// Dice similarity coefficient, 2TP / (2TP + FP + FN).
/// Empty-vs-empty is defined as 1.
pub fn dsc(c: &ConfusionCounts) -> f32 {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        return 1.0;
    }
    (2 * c.tp) as f32 / denom as f32
}

/// Volumetric similarity, 1 - |FN - FP| / (2TP + FP + FN).
/// Empty-vs-empty is defined as 1.
pub fn vs(c: &ConfusionCounts) -> f32 {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        return 1.0;
    }
    1.0 - c.fp.abs_diff(c.fn_) as f32 / denom as f32
}

/// One evaluated volume.
#[derive(Debug, Clone)]
pub struct VolumeScore {
    pub id: String,
    pub dsc: f32,
    pub vs: f32,
}

/// Per-volume scores plus the dataset mean and standard deviation.
#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub scores: Vec<VolumeScore>,
    pub config_echo: String,
}

impl EvalReport {
    pub fn mean_std(values: &[f32]) -> (f32, f32) {
        if values.is_empty() {
            return (0.0, 0.0);
        }
        let n = values.len() as f64;
        let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = values
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        (mean as f32, var.sqrt() as f32)
    }

    pub fn dsc_mean_std(&self) -> (f32, f32) {
        let v: Vec<f32> = self.scores.iter().map(|s| s.dsc).collect();
        Self::mean_std(&v)
    }

    pub fn vs_mean_std(&self) -> (f32, f32) {
        let v: Vec<f32> = self.scores.iter().map(|s| s.vs).collect();
        Self::mean_std(&v)
    }

    /// Human-readable table; scores are scaled to percent for parity with
    /// the usual mean±std presentation.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str("id                          DSC(%)   VS(%)\n");
        for s in &self.scores {
            out.push_str(&format!(
                "{:<26} {:>7.2} {:>7.2}\n",
                s.id,
                s.dsc * 100.0,
                s.vs * 100.0
            ));
        }
        let (dm, ds) = self.dsc_mean_std();
        let (vm, vsd) = self.vs_mean_std();
        out.push_str(&format!(
            "mean±std                   {:>6.2}±{:.2} {:>6.2}±{:.2}\n",
            dm * 100.0,
            ds * 100.0,
            vm * 100.0,
            vsd * 100.0
        ));
        out
    }

    /// Machine-readable rows: `id,dsc,vs` with a trailing summary row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,dsc,vs\n");
        for s in &self.scores {
            out.push_str(&format!("{},{:.6},{:.6}\n", s.id, s.dsc, s.vs));
        }
        let (dm, ds) = self.dsc_mean_std();
        let (vm, vsd) = self.vs_mean_std();
        out.push_str(&format!(
            "summary_mean,{dm:.6},{vm:.6}\nsummary_std,{ds:.6},{vsd:.6}\n"
        ));
        out
    }
}
