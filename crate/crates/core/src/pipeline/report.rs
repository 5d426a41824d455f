//! Baseline-vs-augmented tables rendered from a manifest alone.

use std::fmt::Write as _;

use serde::Serialize;

use super::run::{CurationSummary, EvalRecord, RunManifest, StageStatus, STAGES};
use crate::error::{Error, Result};

/// Name of the stage that writes the report; it is never part of the report.
const REPORT_STAGE: &str = "report";

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub text: String,
    pub json: String,
}

#[derive(Serialize)]
struct Row {
    train_size: usize,
    dice: f64,
    iou: f64,
}

#[derive(Serialize)]
struct StageRow<'a> {
    name: &'a str,
    status: StageStatus,
    seconds: f64,
}

#[derive(Serialize)]
struct ReportJson<'a> {
    dataset: &'a str,
    seed: u64,
    baseline: Row,
    augmented: Row,
    delta_dice: f64,
    delta_iou: f64,
    curation: CurationJson,
    test_hash: &'a str,
    stages: Vec<StageRow<'a>>,
}

#[derive(Serialize)]
struct CurationJson {
    generated: usize,
    kept: usize,
    rejected: usize,
    too_similar: usize,
    too_dissimilar: usize,
}

struct Parts<'a> {
    baseline: &'a EvalRecord,
    augmented: &'a EvalRecord,
    curation: CurationSummary,
}

fn parts(m: &RunManifest) -> Result<Parts<'_>> {
    if let Some(e) = &m.error {
        return Err(Error::IncompleteManifest(format!("run failed: {e}")));
    }
    for name in STAGES.iter().filter(|n| **n != REPORT_STAGE) {
        match m.stage(name) {
            None => return Err(Error::IncompleteManifest(format!("stage `{name}` missing"))),
            Some(s) if s.status == StageStatus::Failed => {
                return Err(Error::IncompleteManifest(format!("stage `{name}` failed")))
            }
            Some(_) => {}
        }
    }
    let missing = |what: &str| Error::IncompleteManifest(format!("{what} missing"));
    Ok(Parts {
        baseline: m.baseline.as_ref().ok_or_else(|| missing("baseline evaluation"))?,
        augmented: m.augmented.as_ref().ok_or_else(|| missing("augmented evaluation"))?,
        curation: m.curation.ok_or_else(|| missing("curation summary"))?,
    })
}

fn stage_rows(m: &RunManifest) -> Vec<StageRow<'_>> {
    m.stages
        .iter()
        .filter(|s| s.name != REPORT_STAGE)
        .map(|s| StageRow { name: &s.name, status: s.status, seconds: s.seconds })
        .collect()
}

fn text_of(m: &RunManifest, p: &Parts<'_>) -> String {
    let (b, a) = (&p.baseline.test, &p.augmented.test);
    let c = p.curation;
    let mut s = String::new();
    let _ = writeln!(s, "dataset {}  seed {}", m.dataset.name, m.config.seed);
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<34} {:>6} {:>8} {:>8}", "training set", "pairs", "dice", "iou");
    let _ = writeln!(s, "{:<34} {:>6} {:>8.4} {:>8.4}", "original", p.baseline.train_size, b.dice, b.iou);
    let label = format!("original + {} generated", c.kept);
    let _ = writeln!(s, "{:<34} {:>6} {:>8.4} {:>8.4}", label, p.augmented.train_size, a.dice, a.iou);
    let _ = writeln!(s, "{:<34} {:>6} {:>+8.4} {:>+8.4}", "delta", "", a.dice - b.dice, a.iou - b.iou);
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "curation: generated {}  kept {}  rejected {} (too similar {}, too dissimilar {})",
        c.generated,
        c.kept,
        c.rejected(),
        c.too_similar,
        c.too_dissimilar
    );
    let _ = writeln!(s, "test split: {} images, hash {}", b.n_images, p.baseline.test_hash);
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<22} {:<10} {:>9}", "stage", "status", "seconds");
    for r in stage_rows(m) {
        let status = serde_json::to_value(r.status).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
        let _ = writeln!(s, "{:<22} {:<10} {:>9.1}", r.name, status, r.seconds);
    }
    s
}

fn render_json(m: &RunManifest) -> Result<String> {
    let p = parts(m)?;
    let (b, a) = (&p.baseline.test, &p.augmented.test);
    let c = p.curation;
    let out = ReportJson {
        dataset: &m.dataset.name,
        seed: m.config.seed,
        baseline: Row { train_size: p.baseline.train_size, dice: b.dice, iou: b.iou },
        augmented: Row { train_size: p.augmented.train_size, dice: a.dice, iou: a.iou },
        delta_dice: a.dice - b.dice,
        delta_iou: a.iou - b.iou,
        curation: CurationJson {
            generated: c.generated,
            kept: c.kept,
            rejected: c.rejected(),
            too_similar: c.too_similar,
            too_dissimilar: c.too_dissimilar,
        },
        test_hash: &p.baseline.test_hash,
        stages: stage_rows(m),
    };
    Ok(serde_json::to_string_pretty(&out)?)
}

/// Text and JSON tables for a finished run.
pub fn report(manifest: &RunManifest) -> Result<Report> {
    let p = parts(manifest)?;
    Ok(Report { text: text_of(manifest, &p), json: render_json(manifest)? })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::pipeline::config::PipelineConfig;
    use crate::pipeline::run::{DatasetInfo, StageRecord, MANIFEST_VERSION};
    use crate::seg::SegMetrics;

    fn fake_manifest(base: f64, aug: f64) -> RunManifest {
        let eval = |dice: f64, train_size| EvalRecord {
            train_size,
            best_epoch: 3,
            val: SegMetrics { dice, iou: dice / (2.0 - dice), n_images: 4 },
            test: SegMetrics { dice, iou: dice / (2.0 - dice), n_images: 4 },
            test_hash: "abc".into(),
        };
        RunManifest {
            version: MANIFEST_VERSION,
            config: PipelineConfig::toy(1),
            seeds: BTreeMap::new(),
            dataset: DatasetInfo {
                name: "toy".into(),
                n_pairs: 20,
                n_backgrounds: 0,
                split_sizes: BTreeMap::new(),
                split_hashes: BTreeMap::new(),
            },
            stages: STAGES
                .iter()
                .map(|n| StageRecord {
                    name: n.to_string(),
                    status: StageStatus::Completed,
                    seconds: 1.5,
                    artifacts: vec![],
                    note: None,
                })
                .collect(),
            quality_report: None,
            curation: Some(CurationSummary { generated: 10, kept: 7, too_similar: 1, too_dissimilar: 2 }),
            baseline: Some(eval(base, 12)),
            augmented: Some(eval(aug, 19)),
            error: None,
        }
    }

    #[test]
    fn delta_row_and_counts() {
        let r = report(&fake_manifest(0.70, 0.73)).unwrap();
        let delta = r.text.lines().find(|l| l.starts_with("delta")).unwrap();
        assert!(delta.contains("+0.0300"), "{delta}");
        assert!(r.text.contains("rejected 3 (too similar 1, too dissimilar 2)"));
        let v: serde_json::Value = serde_json::from_str(&r.json).unwrap();
        assert_eq!(v["curation"]["rejected"], 3);
        assert!((v["delta_dice"].as_f64().unwrap() - 0.03).abs() < 1e-12);
    }

    #[test]
    fn pure_function_of_manifest() {
        let m = fake_manifest(0.5, 0.6);
        let round: RunManifest = serde_json::from_str(&m.to_json().unwrap()).unwrap();
        assert_eq!(report(&m).unwrap(), report(&round).unwrap());
    }

    #[test]
    fn incomplete_manifest_rejected() {
        let mut m = fake_manifest(0.5, 0.6);
        m.augmented = None;
        assert!(matches!(report(&m), Err(Error::IncompleteManifest(_))));
        let mut m = fake_manifest(0.5, 0.6);
        m.stages.retain(|s| s.name != "curate");
        assert!(matches!(report(&m), Err(Error::IncompleteManifest(_))));
    }
}
