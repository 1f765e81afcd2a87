//! CSV exchange formats and the static score report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::gradcamo::{summarize, AuditSummary, ScoreRecord};

pub const SCORE_HEADER: [&str; 7] = ["cell_id", "label", "pred", "prob", "gradcamo", "degenerate", "keep"];
const HIST_BINS: usize = 10;

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        kind => Error::Csv { line, reason: format!("{}: {kind:?}", path.display()) },
    }
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, name: &str, path: &Path) -> Result<T> {
    let line = rec.position().map(|p| p.line()).unwrap_or(0);
    let raw = rec
        .get(i)
        .ok_or_else(|| Error::Csv { line, reason: format!("{}: missing column {name}", path.display()) })?;
    raw.trim()
        .parse()
        .map_err(|_| Error::Csv { line, reason: format!("{}: bad {name} value '{raw}'", path.display()) })
}

fn check_header(rdr: &mut csv::Reader<impl Read>, expected: &[&str], path: &Path) -> Result<()> {
    let header = rdr.headers().map_err(|e| csv_err(path, e))?;
    let got: Vec<&str> = header.iter().take(expected.len()).collect();
    if got != expected {
        return Err(Error::Csv { line: 1, reason: format!("{}: expected header {expected:?}, found {got:?}", path.display()) });
    }
    Ok(())
}

pub fn write_scores(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(SCORE_HEADER).map_err(|e| csv_err(path, e))?;
    for r in records {
        w.write_record([
            r.cell_id.clone(),
            r.label.to_string(),
            r.pred.to_string(),
            format!("{:.6}", r.prob),
            format!("{:.6}", r.gradcamo),
            r.degenerate.to_string(),
            r.keep.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a scores CSV. Well and site are not part of the format and come
/// back empty; see [`attach_metadata`].
pub fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    check_header(&mut rdr, &SCORE_HEADER, path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let r = ScoreRecord {
            cell_id: field(&rec, 0, "cell_id", path)?,
            label: field(&rec, 1, "label", path)?,
            pred: field(&rec, 2, "pred", path)?,
            prob: field(&rec, 3, "prob", path)?,
            gradcamo: field(&rec, 4, "gradcamo", path)?,
            degenerate: field(&rec, 5, "degenerate", path)?,
            keep: field(&rec, 6, "keep", path)?,
            well: String::new(),
            site: 0,
        };
        if !(0.0..=1.0).contains(&r.gradcamo) || !(0.0..=1.0).contains(&r.prob) {
            return Err(Error::Csv { line, reason: format!("{}: value outside [0, 1]", path.display()) });
        }
        out.push(r);
    }
    Ok(out)
}

/// Fills well and site of each record from the feature table.
pub fn attach_metadata(records: &mut [ScoreRecord], features: &FeatureMatrix) -> Result<()> {
    let index: BTreeMap<&str, usize> = features.cell_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    for r in records {
        let &i = index
            .get(r.cell_id.as_str())
            .ok_or_else(|| Error::invalid(format!("cell {} is missing from the feature table", r.cell_id)))?;
        r.well = features.wells[i].clone();
        r.site = features.sites[i];
    }
    Ok(())
}

pub fn write_features(path: &Path, fm: &FeatureMatrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["cell_id".to_string(), "label".into(), "well".into(), "site".into()];
    header.extend((0..fm.d).map(|j| format!("f{j}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for i in 0..fm.rows() {
        let mut row = vec![fm.cell_ids[i].clone(), fm.labels[i].to_string(), fm.wells[i].clone(), fm.sites[i].to_string()];
        row.extend(fm.row(i).iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    check_header(&mut rdr, &["cell_id", "label", "well", "site"], path)?;
    let d = rdr.headers().map_err(|e| csv_err(path, e))?.len().saturating_sub(4);
    if d == 0 {
        return Err(Error::Csv { line: 1, reason: format!("{}: no feature columns", path.display()) });
    }
    let (mut ids, mut labels, mut wells, mut sites, mut values) = (vec![], vec![], vec![], vec![], vec![]);
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        ids.push(field(&rec, 0, "cell_id", path)?);
        labels.push(field(&rec, 1, "label", path)?);
        wells.push(field(&rec, 2, "well", path)?);
        sites.push(field(&rec, 3, "site", path)?);
        for j in 0..d {
            let v: f64 = field(&rec, 4 + j, &format!("f{j}"), path)?;
            values.push(v);
        }
    }
    FeatureMatrix::from_rows(ids, labels, wells, sites, d, values)
}

/// `cell_id,label,pc1,pc2`.
pub fn write_pca(path: &Path, fm: &FeatureMatrix, proj: &[f64]) -> Result<()> {
    if proj.len() != 2 * fm.rows() {
        return Err(Error::shape(format!("{} projected values for {} rows", proj.len(), fm.rows())));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["cell_id", "label", "pc1", "pc2"]).map_err(|e| csv_err(path, e))?;
    for i in 0..fm.rows() {
        w.write_record([fm.cell_ids[i].clone(), fm.labels[i].to_string(), proj[2 * i].to_string(), proj[2 * i + 1].to_string()])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Counts over `HIST_BINS` equal bins of `[0, 1]`; 1.0 falls in the last bin.
pub fn histogram(scores: &[f64]) -> [usize; HIST_BINS] {
    let mut bins = [0; HIST_BINS];
    for &s in scores {
        let b = ((s * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
        bins[b] += 1;
    }
    bins
}

pub fn histogram_svg(title: &str, scores: &[f64], cutoff: f64) -> String {
    let bins = histogram(scores);
    let (w, h, pad) = (320.0, 180.0, 28.0);
    let top = bins.iter().copied().max().unwrap_or(0).max(1) as f64;
    let bw = (w - 2.0 * pad) / HIST_BINS as f64;
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{pad}" y="16" font-family="sans-serif" font-size="12">{title} (n={})</text>"#, scores.len());
    for (i, &c) in bins.iter().enumerate() {
        let bh = (h - 2.0 * pad) * c as f64 / top;
        let x = pad + i as f64 * bw;
        let y = h - pad - bh;
        let _ = writeln!(svg, r##"<rect x="{x:.1}" y="{y:.1}" width="{:.1}" height="{bh:.1}" fill="#4a7ab7"/>"##, bw - 1.0);
    }
    let cx = pad + cutoff.clamp(0.0, 1.0) * (w - 2.0 * pad);
    let _ = writeln!(svg, r##"<line x1="{cx:.1}" y1="{pad}" x2="{cx:.1}" y2="{:.1}" stroke="#c0392b" stroke-dasharray="4 3"/>"##, h - pad);
    let _ = writeln!(svg, r#"<line x1="{pad}" y1="{0:.1}" x2="{1:.1}" y2="{0:.1}" stroke="black"/>"#, h - pad, w - pad);
    for t in [0.0, 0.5, 1.0] {
        let x = pad + t * (w - 2.0 * pad);
        let _ = writeln!(svg, r#"<text x="{x:.1}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="middle">{t}</text>"#, h - pad + 14.0);
    }
    svg.push_str("</svg>\n");
    svg
}

fn stats_table(title: &str, groups: &BTreeMap<String, crate::gradcamo::GroupStats>) -> String {
    let mut md = format!("## {title}\n\n| group | n | mean | std | kept | accuracy |\n|---|---:|---:|---:|---:|---:|\n");
    for (k, g) in groups {
        let _ = writeln!(md, "| {k} | {} | {:.3} | {:.3} | {:.3} | {:.3} |", g.count, g.mean, g.std, g.frac_kept, g.accuracy);
    }
    md.push('\n');
    md
}

/// Markdown body of the report.
pub fn markdown(summary: &AuditSummary) -> String {
    let o = &summary.overall;
    let mut md = String::from("# Grad-CAMO report\n\n");
    let _ = writeln!(md, "Overall mean score ŝ = {:.4} ± {:.4} over {} cells.", o.mean, o.std, o.count);
    let _ = writeln!(md, "{:.1}% of cells reach the cutoff {}; accuracy {:.3}.\n", 100.0 * o.frac_kept, summary.cutoff, o.accuracy);
    md.push_str(&stats_table("By dose", &summary.by_dose));
    md.push_str(&stats_table("By dose and site", &summary.by_dose_site));
    md.push_str(&stats_table("By well", &summary.by_well));
    md.push_str("## Histograms\n\n");
    for k in summary.by_dose_site.keys() {
        let _ = writeln!(md, "![{k}](hist/{}.svg)", file_key(k));
    }
    md
}

fn file_key(group: &str) -> String {
    group.replace(['/', '='], "_")
}

/// Writes `report.md`, `summary.json` and one histogram per (dose, site).
pub fn write_report(dir: &Path, records: &[ScoreRecord], cutoff: f64) -> Result<AuditSummary> {
    let summary = summarize(records, cutoff);
    let hist = dir.join("hist");
    fs::create_dir_all(&hist).map_err(|e| Error::io(&hist, e))?;
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in records {
        groups.entry(format!("dose={}/site={}", r.label, r.site)).or_default().push(r.gradcamo);
    }
    for (k, scores) in &mut groups {
        scores.sort_by(f64::total_cmp);
        let path = hist.join(format!("{}.svg", file_key(k)));
        fs::write(&path, histogram_svg(k, scores, cutoff)).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join("report.md");
    fs::write(&path, markdown(&summary)).map_err(|e| Error::io(&path, e))?;
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

pub fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let text = serde_json::to_string_pretty(value)? + "\n";
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
