use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AblationTable, RegionScores};
use crate::error::{Error, Result};

/// Provenance written alongside every report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub seed: u64,
    /// SHA-256 of the resolved configuration text.
    pub config_hash: String,
    /// Free-form remarks, one bullet each in the markdown.
    pub notes: Vec<String>,
}

/// One `results.csv` line: a table row restricted to one region.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub skip: usize,
    pub model: String,
    pub loss: String,
    pub region: String,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub folds: Vec<Option<f64>>,
}

pub struct ReportFiles {
    pub csv: PathBuf,
    pub markdown: PathBuf,
    pub json: PathBuf,
}

#[derive(Serialize)]
struct JsonReport<'a> {
    meta: &'a ReportMeta,
    table: &'a AblationTable,
}

pub fn config_hash(config_text: &str) -> String {
    Sha256::digest(config_text.as_bytes())
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

const REGION_ORDER: [&str; 3] = ["ET", "TC", "WT"];

fn region_value(s: &RegionScores, region: &str) -> f64 {
    match region {
        "ET" => s.et,
        "TC" => s.tc,
        _ => s.wt,
    }
}

impl AblationTable {
    /// Rows as written to `results.csv`, three regions per entry.
    pub fn result_rows(&self) -> Vec<ResultRow> {
        let mut out = Vec::with_capacity(3 * self.entries.len());
        for e in &self.entries {
            for region in REGION_ORDER {
                let summary = e.summary.as_ref();
                out.push(ResultRow {
                    skip: e.row.skip_connections,
                    model: e.row.model.label().to_string(),
                    loss: e.row.loss.label().to_string(),
                    region: region.to_string(),
                    mean: summary.map(|s| region_value(&s.mean, region)),
                    std: summary.map(|s| region_value(&s.std_folds, region)),
                    folds: (0..self.folds)
                        .map(|k| summary.and_then(|s| s.folds.get(k)).map(|f| region_value(f, region)))
                        .collect(),
                });
            }
        }
        out
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_cell(raw: &str, path: &Path) -> Result<Option<f64>> {
    if raw.is_empty() {
        return Ok(None);
    }
    raw.parse().map(Some).map_err(|_| Error::Ingestion {
        path: path.to_path_buf(),
        reason: format!("`{raw}` is not a number"),
    })
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Ingestion {
            path: path.to_path_buf(),
            reason: format!("{other:?}"),
        },
    }
}

fn write_csv(path: &Path, table: &AblationTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header: Vec<String> = ["skip", "model", "loss", "region", "mean", "std"]
        .map(String::from)
        .to_vec();
    header.extend((0..table.folds).map(|k| format!("fold{k}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for r in table.result_rows() {
        let mut rec = vec![r.skip.to_string(), r.model, r.loss, r.region, cell(r.mean), cell(r.std)];
        rec.extend(r.folds.into_iter().map(cell));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a `results.csv` written by [`emit_report`].
pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let folds = r.headers().map_err(|e| csv_err(path, e))?.len().saturating_sub(6);
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let skip = rec[0].parse().map_err(|_| Error::Ingestion {
            path: path.to_path_buf(),
            reason: format!("bad skip value `{}`", &rec[0]),
        })?;
        rows.push(ResultRow {
            skip,
            model: rec[1].to_string(),
            loss: rec[2].to_string(),
            region: rec[3].to_string(),
            mean: parse_cell(&rec[4], path)?,
            std: parse_cell(&rec[5], path)?,
            folds: (0..folds)
                .map(|k| parse_cell(&rec[6 + k], path))
                .collect::<Result<_>>()?,
        });
    }
    Ok(rows)
}

fn markdown(table: &AblationTable, meta: &ReportMeta) -> String {
    let mut md = String::new();
    let _ = writeln!(md, "# Loss-term ablation\n");
    let _ = writeln!(md, "- seed: {}", meta.seed);
    let _ = writeln!(md, "- config hash (SHA-256): `{}`", meta.config_hash);
    let _ = writeln!(md, "- folds: {}\n", table.folds);
    let _ = writeln!(md, "| Skip connections | Model | Loss | ET | TC | WT |");
    let _ = writeln!(md, "|---|---|---|---|---|---|");
    for e in &table.entries {
        let scores = match &e.summary {
            Some(s) => REGION_ORDER
                .iter()
                .map(|r| format!("{:.2} ± {:.2}", region_value(&s.mean, r), region_value(&s.std_folds, r)))
                .collect::<Vec<_>>()
                .join(" | "),
            None => format!(
                "failed: {} | - | -",
                e.error.as_deref().unwrap_or("unknown error").replace('|', "/")
            ),
        };
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} |",
            e.row.skip_connections,
            e.row.model.label(),
            e.row.loss.label(),
            scores
        );
    }
    let _ = writeln!(
        md,
        "\nDice in percent, mean ± std over folds. Std over pooled subjects is in results.json."
    );
    for note in &meta.notes {
        let _ = writeln!(md, "- {note}");
    }
    md
}

/// Writes `results.csv`, `results.md` and `results.json` into `out_dir`.
pub fn emit_report(table: &AblationTable, meta: &ReportMeta, out_dir: &Path) -> Result<ReportFiles> {
    fs::create_dir_all(out_dir)?;
    let files = ReportFiles {
        csv: out_dir.join("results.csv"),
        markdown: out_dir.join("results.md"),
        json: out_dir.join("results.json"),
    };
    write_csv(&files.csv, table)?;
    fs::write(&files.markdown, markdown(table, meta))?;
    let json = serde_json::to_string_pretty(&JsonReport { meta, table }).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(&files.json, json)?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{AblationEntry, AblationSpec, ScoreSummary};

    fn table() -> AblationTable {
        let spec = AblationSpec::loss_terms(4);
        let summary = ScoreSummary {
            folds: vec![
                RegionScores::from_array([77.0, 80.25, 68.1]),
                RegionScores::from_array([78.5, 81.0, 69.0]),
                RegionScores::from_array([76.0, 79.0, 67.2 + 1e-9]),
            ],
            mean: RegionScores::from_array([77.1666, 80.0833, 68.1]),
            std_folds: RegionScores::from_array([1.03, 0.83, 0.73]),
            std_subjects: RegionScores::from_array([5.0, 6.0, 7.0]),
        };
        let entries = spec
            .rows
            .iter()
            .enumerate()
            .map(|(i, row)| AblationEntry {
                row: *row,
                summary: (i != 3).then(|| summary.clone()),
                error: (i == 3).then(|| "teacher | missing".to_string()),
            })
            .collect();
        AblationTable { folds: 3, entries }
    }

    fn meta() -> ReportMeta {
        ReportMeta {
            seed: 7,
            config_hash: config_hash("[training]\nseed = 7\n"),
            notes: vec!["evaluated at training resolution".into()],
        }
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let t = table();
        let files = emit_report(&t, &meta(), dir.path()).unwrap();
        let header = fs::read_to_string(&files.csv).unwrap();
        assert!(header.starts_with("skip,model,loss,region,mean,std,fold0,fold1,fold2\n"));
        assert_eq!(read_results_csv(&files.csv).unwrap(), t.result_rows());
        assert_eq!(t.result_rows().len(), 30);
    }

    #[test]
    fn markdown_layout_and_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let m = meta();
        let files = emit_report(&table(), &m, dir.path()).unwrap();
        let md = fs::read_to_string(&files.markdown).unwrap();
        assert!(md.contains("seed: 7") && md.contains(&m.config_hash));
        let rows: Vec<&str> = md.lines().filter(|l| l.starts_with('|')).collect();
        assert_eq!(rows.len(), 2 + 10);
        assert!(
            rows[2].starts_with("| 4 | Baseline | GT | 68.10 ± 0.73 |"),
            "{}",
            rows[2]
        );
        assert!(rows[5].contains("failed: teacher / missing"));
        assert!(rows.iter().all(|r| r.matches('|').count() == 7));
    }

    #[test]
    fn hash_is_stable() {
        assert_eq!(
            config_hash(""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn unwritable_directory() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("plain");
        fs::write(&file, "x").unwrap();
        assert!(matches!(emit_report(&table(), &meta(), &file), Err(Error::Io(_))));
    }
}
