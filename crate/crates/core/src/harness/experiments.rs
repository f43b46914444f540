//! Table-producing experiments: recalibration sweep, component ablation and
//! modulation-function comparison. Scores are percentages; reference columns
//! carry the published VOC numbers for comparison of ordering only.

use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::eval::{cam_outputs, evaluate, evaluate_cams, MetricsReport};
use crate::harness::train::train;
use crate::harness::RunConfig;
use crate::modulation::{ModulationFn, ThresholdLevel};
use crate::network::AmrModel;
use crate::synthdata::Dataset;

pub const SWEEP_XIS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];
const SWEEP_REFERENCE: [f64; 5] = [49.2, 53.4, 56.8, 54.5, 50.7];

/// A CSV-shaped result: a header and one row per variant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    /// Value of `column` in the row whose first cell is `key`.
    pub fn get(&self, key: &str, column: &str) -> Option<&str> {
        let c = self.header.iter().position(|h| h == column)?;
        self.rows.iter().find(|r| r[0] == key).map(|r| r[c].as_str())
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.into_inner()
            .map_err(|e| Error::Format(format!("flushing CSV: {}", e.error())))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let bytes = self.to_csv()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

fn pct(v: f64) -> String {
    format!("{:.4}", v * 100.0)
}

fn reference(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.1}"))
}

/// Variant-level metrics: overall scores for each CAM kind.
pub fn report_table(report: &MetricsReport) -> Table {
    let mut t = Table::new(&["cam", "miou", "precision", "recall"]);
    let mut add = |name: &str, m: &crate::harness::BranchMetrics| {
        t.push(vec![name.into(), pct(m.miou), pct(m.precision), pct(m.recall)]);
    };
    add("spotlight", &report.spotlight);
    if let Some(c) = &report.compensation {
        add("compensation", c);
    }
    add("weighted", &report.weighted);
    t
}

/// Per-class IoU of each CAM kind; background is column `iou_bg`.
pub fn class_iou_table(report: &MetricsReport) -> Table {
    let n = report.weighted.per_class_iou.len();
    let mut header = vec!["cam".to_string(), "iou_bg".to_string()];
    header.extend((1..n).map(|c| format!("iou_class{}", c - 1)));
    let mut t = Table {
        header,
        rows: Vec::new(),
    };
    let mut add = |name: &str, m: &crate::harness::BranchMetrics| {
        let mut row = vec![name.to_string()];
        row.extend(m.per_class_iou.iter().map(|v| v.map_or_else(String::new, pct)));
        t.push(row);
    };
    add("spotlight", &report.spotlight);
    if let Some(c) = &report.compensation {
        add("compensation", c);
    }
    add("weighted", &report.weighted);
    t
}

/// One evaluation per `xi`, sharing a single set of forward passes.
pub fn xi_sweep(model: &AmrModel<f32>, config: &RunConfig, data: &Dataset, xis: &[f64]) -> Result<Table> {
    if let Some(bad) = xis.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::Argument(format!("xi {bad} outside [0,1]")));
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let outputs = cam_outputs(model, config, data, &indices)?;
    let mut t = Table::new(&["xi", "miou_weighted", "precision_weighted", "recall_weighted", "reference_miou"]);
    for &xi in xis {
        let r = evaluate_cams(&outputs, data, xi, config.bg_threshold)?;
        let published = SWEEP_XIS.iter().position(|&x| x == xi).map(|i| SWEEP_REFERENCE[i]);
        t.push(vec![
            xi.to_string(),
            pct(r.weighted.miou),
            pct(r.weighted.precision),
            pct(r.weighted.recall),
            reference(published),
        ]);
    }
    Ok(t)
}

/// A named configuration with its published reference score.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub config: RunConfig,
    pub reference_miou: Option<f64>,
}

fn variant(name: &str, config: RunConfig, published: Option<f64>) -> Variant {
    Variant {
        name: name.into(),
        config,
        reference_miou: published,
    }
}

/// The five component rows, all sharing the base seed.
pub fn ablation_variants(base: &RunConfig) -> Vec<Variant> {
    let b = base.baseline();
    vec![
        variant("baseline", b.clone(), Some(48.3)),
        variant("amm_c", RunConfig { use_amm_c: true, ..b.clone() }, Some(52.9)),
        variant("amm_s", RunConfig { use_amm_s: true, ..b.clone() }, Some(53.5)),
        variant(
            "amm_c+amm_s",
            RunConfig {
                use_amm_c: true,
                use_amm_s: true,
                ..b.clone()
            },
            Some(54.9),
        ),
        variant(
            "full",
            RunConfig {
                use_amm_c: true,
                use_amm_s: true,
                use_cps: true,
                ..b
            },
            Some(56.8),
        ),
    ]
}

/// Baseline, then the full model under each modulation function.
pub fn modfn_variants(base: &RunConfig, include_identity: bool) -> Vec<Variant> {
    let full = RunConfig {
        use_amm_c: true,
        use_amm_s: true,
        use_cps: true,
        ..base.clone()
    };
    let with = |f: ModulationFn| RunConfig {
        modulation: f,
        ..full.clone()
    };
    let mut v = vec![
        variant("baseline", base.baseline(), Some(48.3)),
        variant("threshold", with(ModulationFn::threshold(ThresholdLevel::MapMean)), Some(50.1)),
        variant("gaussian", with(ModulationFn::gaussian()), Some(56.8)),
    ];
    if include_identity {
        v.push(variant("identity", with(ModulationFn::identity()), None));
    }
    v
}

/// Fits every variant with `fit`, evaluates it on `val` and tabulates the
/// result.
pub fn run_variants(
    variants: &[Variant],
    val: &Dataset,
    mut fit: impl FnMut(&RunConfig) -> Result<AmrModel<f32>>,
) -> Result<Table> {
    let mut t = Table::new(&[
        "variant",
        "use_amm_c",
        "use_amm_s",
        "use_cps",
        "modulation",
        "amm_params",
        "miou_spotlight",
        "miou_compensation",
        "miou_weighted",
        "recall_weighted",
        "reference_miou",
    ]);
    for v in variants {
        let model = fit(&v.config)?;
        let r = evaluate(&model, &v.config, val)?;
        let c = &v.config;
        log::info!("{}: weighted mIoU {}", v.name, pct(r.weighted.miou));
        t.push(vec![
            v.name.clone(),
            c.use_amm_c.to_string(),
            c.use_amm_s.to_string(),
            c.use_cps.to_string(),
            c.modulation.to_string(),
            model.num_amm_params().to_string(),
            pct(r.spotlight.miou),
            r.compensation.as_ref().map_or_else(String::new, |m| pct(m.miou)),
            pct(r.weighted.miou),
            pct(r.weighted.recall),
            reference(v.reference_miou),
        ]);
    }
    Ok(t)
}

/// Trains and evaluates the five component rows.
pub fn ablate(base: &RunConfig, train_data: &Dataset, val: &Dataset) -> Result<Table> {
    run_variants(&ablation_variants(base), val, |c| Ok(train(c, train_data)?.model))
}

/// Trains and evaluates the modulation-function rows.
pub fn modfn_compare(base: &RunConfig, train_data: &Dataset, val: &Dataset, include_identity: bool) -> Result<Table> {
    run_variants(&modfn_variants(base, include_identity), val, |c| {
        Ok(train(c, train_data)?.model)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let mut t = Table::new(&["a", "b"]);
        t.push(vec!["x".into(), "1.5".into()]);
        assert_eq!(String::from_utf8(t.to_csv().unwrap()).unwrap(), "a,b\nx,1.5\n");
        assert_eq!(t.get("x", "b"), Some("1.5"));
        assert_eq!(t.get("y", "b"), None);
    }

    #[test]
    fn ablation_rows() {
        let v = ablation_variants(&RunConfig::default());
        let flags: Vec<_> = v
            .iter()
            .map(|v| (v.config.use_amm_c, v.config.use_amm_s, v.config.use_cps))
            .collect();
        assert_eq!(
            flags,
            vec![
                (false, false, false),
                (true, false, false),
                (false, true, false),
                (true, true, false),
                (true, true, true)
            ]
        );
        assert!(v.iter().all(|x| x.config.seed == 0));
    }

    #[test]
    fn modulation_rows() {
        let v = modfn_variants(&RunConfig::default(), true);
        let names: Vec<_> = v.iter().map(|v| v.name.as_str()).collect();
        assert_eq!(names, ["baseline", "threshold", "gaussian", "identity"]);
        assert!(!v[0].config.has_compensation());
    }
}
