use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::grid::write_json;
use super::{RunRecord, SilverSize, TeacherSummary};
use crate::error::{Error, Result};

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

fn sorted_entries(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io_at(dir, e))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io_at(dir, e))?;
    paths.sort();
    Ok(paths)
}

/// RunRecords under `<dir>/records` and teacher summaries under
/// `<dir>/teacher_*/summary.json`, in grid order.
pub fn read_records(dir: &Path) -> Result<(Vec<RunRecord>, Vec<TeacherSummary>)> {
    let mut records: Vec<RunRecord> = Vec::new();
    for p in sorted_entries(&dir.join("records"))? {
        if p.extension().is_some_and(|e| e == "json") {
            let r: RunRecord = read_json(&p)?;
            if !r.aggregates_consistent() {
                return Err(Error::Validation(format!(
                    "{}: stored mean/std disagree with the per-seed runs",
                    p.display()
                )));
            }
            records.push(r);
        }
    }
    if records.is_empty() {
        return Err(Error::Validation(format!("no RunRecords under {}", dir.join("records").display())));
    }
    records.sort_by(|a, b| {
        (a.cell.gold_train, a.cell.gold_dev, a.cell.silver)
            .cmp(&(b.cell.gold_train, b.cell.gold_dev, b.cell.silver))
            .then(a.cell.lambda_kl.total_cmp(&b.cell.lambda_kl))
    });
    let mut teachers = Vec::new();
    for p in sorted_entries(dir)? {
        let summary = p.join("summary.json");
        let is_teacher = p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("teacher_"));
        if is_teacher && summary.is_file() {
            teachers.push(read_json(&summary)?);
        }
    }
    Ok((records, teachers))
}

fn cell_text(mean: f64, std: f64) -> String {
    format!("{:.2} ± {:.2}", 100.0 * mean, 100.0 * std)
}

/// Per gold split: the teacher, then silver size × λ_KL tables of test F1
/// and Perfect (mean ± std over seeds, in points).
pub fn render_report(records: &[RunRecord], teachers: &[TeacherSummary]) -> String {
    let mut out = String::new();
    let golds: BTreeSet<(usize, usize)> = records.iter().map(|r| (r.cell.gold_train, r.cell.gold_dev)).collect();
    let lambdas: Vec<f64> = {
        let mut v: Vec<f64> = records.iter().map(|r| r.cell.lambda_kl).collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    };
    for (gt, gd) in golds {
        let _ = writeln!(out, "== gold {gt}/{gd} ==");
        if let Some(t) = teachers.iter().find(|t| (t.gold_train, t.gold_dev) == (gt, gd)) {
            let _ = writeln!(
                out,
                "teacher: test F1 {:.2}  Perfect {:.2}  (best dev F1 {:.2} at epoch {})",
                100.0 * t.test.f1,
                100.0 * t.test.perfect,
                100.0 * t.training.best_dev_f1,
                t.training.best_epoch
            );
        }
        let rows: Vec<&RunRecord> = records.iter().filter(|r| (r.cell.gold_train, r.cell.gold_dev) == (gt, gd)).collect();
        let sizes: BTreeSet<SilverSize> = rows.iter().map(|r| r.cell.silver).collect();
        for (title, pick) in [
            ("test F1", (|r: &RunRecord| (r.mean_f1, r.std_f1)) as fn(&RunRecord) -> (f64, f64)),
            ("Perfect", |r: &RunRecord| (r.mean_perfect, r.std_perfect)),
        ] {
            let _ = writeln!(out, "\n{title}");
            let _ = write!(out, "{:<8}", "|S|");
            for l in &lambdas {
                let _ = write!(out, " {:>16}", format!("λ_KL={l}"));
            }
            out.push('\n');
            for s in &sizes {
                let _ = write!(out, "{:<8}", s.to_string());
                for l in &lambdas {
                    let cell = rows
                        .iter()
                        .find(|r| r.cell.silver == *s && r.cell.lambda_kl == *l)
                        .map(|r| {
                            let (m, sd) = pick(r);
                            cell_text(m, sd)
                        })
                        .unwrap_or_else(|| "-".into());
                    let _ = write!(out, " {cell:>16}");
                }
                out.push('\n');
            }
        }
        out.push('\n');
    }
    out
}

/// One row per (gold split, silver size, λ_KL), for F1-vs-silver-size plots.
pub fn report_csv(records: &[RunRecord]) -> String {
    let mut out = String::from("gold_train,gold_dev,silver_size,silver_count,lambda_kl,mean_f1,std_f1,mean_perfect,std_perfect,seeds\n");
    for r in records {
        let c = &r.cell;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            c.gold_train,
            c.gold_dev,
            c.silver,
            c.silver_count,
            c.lambda_kl,
            r.mean_f1,
            r.std_f1,
            r.mean_perfect,
            r.std_perfect,
            r.runs.len()
        );
    }
    out
}

/// Reads an experiment directory and writes `report.txt`, `curve.csv` and
/// `summary.json` into `out`.
pub fn write_report(experiment_dir: &Path, out: &Path) -> Result<String> {
    let (records, teachers) = read_records(experiment_dir)?;
    fs::create_dir_all(out).map_err(|e| Error::io_at(out, e))?;
    let text = render_report(&records, &teachers);
    let txt = out.join("report.txt");
    fs::write(&txt, &text).map_err(|e| Error::io_at(&txt, e))?;
    let csv = out.join("curve.csv");
    fs::write(&csv, report_csv(&records)).map_err(|e| Error::io_at(&csv, e))?;
    let rows: Vec<_> = records
        .iter()
        .map(|r| {
            serde_json::json!({
                "cell": r.cell,
                "mean_f1": r.mean_f1,
                "std_f1": r.std_f1,
                "mean_perfect": r.mean_perfect,
                "std_perfect": r.std_perfect,
            })
        })
        .collect();
    write_json(&out.join("summary.json"), &rows)?;
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::TrainReport;
    use crate::harness::{Cell, SeedRun};
    use crate::metrics::evaluate_tags;
    use crate::sbio::SbioTag;

    fn record(silver: usize, lambda_kl: f64, f1s: &[bool]) -> RunRecord {
        let gold = vec![SbioTag::label("A")];
        let runs = f1s
            .iter()
            .enumerate()
            .map(|(i, &hit)| {
                let pred = if hit { gold.clone() } else { vec![SbioTag::Outside] };
                SeedRun {
                    seed: i as u64,
                    student_seed: 0,
                    silver_seed: 0,
                    test: evaluate_tags([("s", gold.as_slice(), pred.as_slice())]).unwrap(),
                    training: TrainReport::default(),
                }
            })
            .collect();
        RunRecord::new(
            "f".into(),
            Cell {
                gold_train: 10,
                gold_dev: 5,
                silver: SilverSize::Count(silver),
                silver_count: silver,
                lambda_kl,
            },
            runs,
        )
    }

    #[test]
    fn csv_has_one_row_per_cell_and_round_trips_records() {
        let recs = vec![
            record(0, 0.0, &[true, false]),
            record(0, 1.0, &[true, true]),
            record(5, 0.0, &[false, false]),
            record(5, 1.0, &[true, false]),
        ];
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("records")).unwrap();
        for r in recs.iter().rev() {
            write_json(&dir.path().join("records").join(format!("{}.json", r.cell.file_stem())), r).unwrap();
        }
        let (back, teachers) = read_records(dir.path()).unwrap();
        assert_eq!(back, recs);
        assert!(teachers.is_empty());
        let csv = report_csv(&back);
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.lines().nth(1).unwrap().starts_with("10,5,0,0,0,0.5,"));
        let text = render_report(&back, &teachers);
        assert!(text.contains("50.00 ± 70.71"), "{text}");

        let mut tampered = recs[0].clone();
        tampered.mean_f1 = 0.9;
        write_json(&dir.path().join("records").join(format!("{}.json", tampered.cell.file_stem())), &tampered).unwrap();
        assert!(matches!(read_records(dir.path()), Err(Error::Validation(_))));
    }
}
