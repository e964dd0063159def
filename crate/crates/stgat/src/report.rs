//! Report files: `report.csv` for machines and `report.txt` for people.
//!
//! CSV columns: `method,rmse_mean,rmse_std,mae_mean,mae_std,num_runs,seeds`.
//! Numbers are written in the shortest form that reads back to the same
//! `f64`; a missing standard deviation (single run) is an empty cell and
//! seeds are joined with `;`.

use std::io::{Read, Write};
use std::path::Path;

use stgat_core::eval::ReportRow;

use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 7] = ["method", "rmse_mean", "rmse_std", "mae_mean", "mae_std", "num_runs", "seeds"];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_csv_to<W: Write>(writer: W, rows: &[ReportRow]) -> Result<()> {
    let fmt_err = |e: csv::Error| Error::Format(e.to_string());
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_HEADER).map_err(fmt_err)?;
    for r in rows {
        let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
        w.write_record([
            r.method.clone(),
            r.rmse_mean.to_string(),
            opt(r.rmse_std),
            r.mae_mean.to_string(),
            opt(r.mae_std),
            r.num_runs.to_string(),
            seeds.join(";"),
        ])
        .map_err(fmt_err)?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))
}

pub fn read_csv_from<R: Read>(reader: R) -> Result<Vec<ReportRow>> {
    let bad = |m: String| Error::Format(format!("report: {m}"));
    let mut rdr = csv::Reader::from_reader(reader);
    let header = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(bad(format!("unexpected header {:?}", header)));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("`{s}` is not a number")));
    let opt_num = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let seeds = rec[6]
            .split(';')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<u64>().map_err(|_| bad(format!("bad seed `{s}`"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(ReportRow {
            method: rec[0].to_string(),
            rmse_mean: num(&rec[1])?,
            rmse_std: opt_num(&rec[2])?,
            mae_mean: num(&rec[3])?,
            mae_std: opt_num(&rec[4])?,
            num_runs: rec[5].parse().map_err(|_| bad(format!("bad run count `{}`", &rec[5])))?,
            seeds,
        });
    }
    Ok(rows)
}

/// Aligned table in the layout of the published comparison tables:
/// one row per method, RMSE and MAE as "mean ± std".
pub fn render_text(title: &str, rows: &[ReportRow]) -> String {
    let cells: Vec<[String; 3]> = rows.iter().map(|r| [r.method.clone(), r.rmse_cell(), r.mae_cell()]).collect();
    let head = ["Method", "RMSE (µg/m³)", "MAE (µg/m³)"];
    let width = |i: usize| {
        cells
            .iter()
            .map(|c| c[i].chars().count())
            .chain([head[i].chars().count()])
            .max()
            .unwrap_or(0)
    };
    let widths = [width(0), width(1), width(2)];
    let line = |c: [&str; 3]| {
        let pad = |s: &str, w: usize| format!("{s}{}", " ".repeat(w - s.chars().count()));
        format!("{}  {}  {}", pad(c[0], widths[0]), pad(c[1], widths[1]), pad(c[2], widths[2]))
            .trim_end()
            .to_string()
    };
    let runs = rows.iter().map(|r| r.num_runs).max().unwrap_or(0);
    let mut out = String::new();
    out.push_str(title);
    out.push('\n');
    out.push_str(&format!(
        "mean ± population std over up to {runs} runs; rows without ± are single runs\n\n"
    ));
    out.push_str(&line(head));
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 4));
    out.push('\n');
    for c in &cells {
        out.push_str(&line([&c[0], &c[1], &c[2]]));
        out.push('\n');
    }
    out
}

/// Writes `report.csv` and `report.txt` into `dir`; returns both paths.
pub fn write_reports(dir: &Path, title: &str, rows: &[ReportRow]) -> Result<[std::path::PathBuf; 2]> {
    let csv_path = dir.join("report.csv");
    let txt_path = dir.join("report.txt");
    let mut buf = Vec::new();
    write_csv_to(&mut buf, rows)?;
    std::fs::write(&csv_path, buf).map_err(|e| Error::io(&csv_path, e))?;
    std::fs::write(&txt_path, render_text(title, rows)).map_err(|e| Error::io(&txt_path, e))?;
    Ok([csv_path, txt_path])
}
