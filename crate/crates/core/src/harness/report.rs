use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::Value;

use super::pipeline::{Stage, Workspace};
use super::{EvaluationReport, MetricsReport};
use crate::datamodel::{create_dir, read_json};
use crate::error::{Error, Result};

const STAGES: [Stage; 6] = [
    Stage::TrainNetgen,
    Stage::TrainEncoder,
    Stage::TrainVae,
    Stage::TrainRnn,
    Stage::Predict,
    Stage::Interpret,
];

fn stage_json(ws: &Workspace, s: Stage) -> Option<Value> {
    read_json(&ws.path(s.dir()).join(format!("{}.json", s.name()))).ok()
}

/// Every `{train_loss, val_loss}` object inside `v`, keyed by its path.
fn histories(prefix: &str, v: &Value, out: &mut Vec<(String, Vec<f64>, Vec<f64>)>) {
    if let Value::Object(m) = v {
        if let (Some(Value::Array(t)), Some(Value::Array(va))) = (m.get("train_loss"), m.get("val_loss")) {
            let f = |a: &Vec<Value>| a.iter().filter_map(Value::as_f64).collect();
            out.push((prefix.to_string(), f(t), f(va)));
            return;
        }
        for (k, x) in m {
            let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            histories(&p, x, out);
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn metrics_line(r: &MetricsReport) -> String {
    let a = &r.aggregate;
    format!(
        "| {} | {} | {} | {} | {:.4} | {}/{}/{}/{} |\n",
        r.task, a.accuracy, a.sensitivity, a.specificity, r.mean_accuracy, a.tp, a.tn, a.fp, a.fn_
    )
}

/// Collects stage outputs into `report/`: loss-curve data files, a
/// markdown summary and SVG renderings.
pub fn write_report(ws: &Workspace) -> Result<PathBuf> {
    let dir = ws.path(Stage::Report.dir());
    create_dir(&dir)?;
    let mut md = String::from("# trajnet run report\n\n");
    let mut curves = Vec::new();
    md.push_str("## Stages\n\n| stage | seconds |\n|---|---|\n");
    for s in STAGES {
        if let Some(v) = stage_json(ws, s) {
            let secs = v.get("seconds").and_then(Value::as_f64).unwrap_or(f64::NAN);
            writeln!(md, "| {} | {secs:.1} |", s.name()).ok();
            let mut h = Vec::new();
            histories("", &v, &mut h);
            for (path, t, va) in h {
                let name = if path.is_empty() { s.name().to_string() } else { format!("{}.{path}", s.name()) };
                curves.push((name, t, va));
            }
        }
    }
    for (name, t, va) in &curves {
        let mut tsv = String::from("epoch\ttrain_loss\tval_loss\n");
        for (e, (a, b)) in t.iter().zip(va).enumerate() {
            writeln!(tsv, "{e}\t{a:.9e}\t{b:.9e}").ok();
        }
        write(&dir.join(format!("loss_{}.tsv", name.replace('.', "_"))), &tsv)?;
    }
    if let Ok(eval) = read_json::<EvaluationReport>(&ws.path("evaluation/metrics.json")) {
        md.push_str("\n## Cross-validated metrics\n\n| task | accuracy | sensitivity | specificity | mean fold accuracy | TP/TN/FP/FN |\n|---|---|---|---|---|---|\n");
        md.push_str(&metrics_line(&eval.conversion));
        if let Some(s) = &eval.shuffled_conversion {
            md.push_str(&metrics_line(s));
        }
        if let Some(e) = &eval.encoder {
            md.push_str(&metrics_line(e));
        }
        if let Some(v) = &eval.vae {
            writeln!(
                md,
                "\n## Ageing model\n\nMedian one-step error ratio on withheld CN subjects: {:.4} over {} pairs.",
                v.median_ratio, v.pairs
            )
            .ok();
        }
        let r = &eval.residuals;
        writeln!(
            md,
            "\n## Residuals\n\nMedian residual norm after onset: converters {:.4}, stable {:.4} (ratio {:.3}); AUC {:.4}.",
            r.median_converter_norm, r.median_stable_norm, r.ratio, r.auc
        )
        .ok();
    }
    if let Ok(v) = read_json::<Value>(&ws.path("interpret/summary.json")) {
        writeln!(md, "\n## Interpretation\n\n```json\n{}\n```", serde_json::to_string_pretty(&v).unwrap_or_default()).ok();
    }
    write(&dir.join("report.md"), &md)?;
    render_svg(ws)?;
    Ok(dir)
}

fn read_table(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .skip(1)
        .map(|l| l.split('\t').filter_map(|c| c.parse().ok()).collect())
        .collect())
}

fn svg_frame(title: &str, body: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"400\" viewBox=\"0 0 640 400\">\n\
         <rect width=\"640\" height=\"400\" fill=\"white\"/>\n\
         <text x=\"320\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">{title}</text>\n\
         <line x1=\"60\" y1=\"360\" x2=\"620\" y2=\"360\" stroke=\"black\"/>\n\
         <line x1=\"60\" y1=\"40\" x2=\"60\" y2=\"360\" stroke=\"black\"/>\n{body}</svg>\n"
    )
}

fn polyline(ys: &[f64], lo: f64, hi: f64, color: &str) -> String {
    let n = ys.len().max(2) - 1;
    let span = if hi > lo { hi - lo } else { 1.0 };
    let pts: Vec<String> = ys
        .iter()
        .enumerate()
        .filter(|(_, y)| y.is_finite())
        .map(|(i, y)| format!("{:.1},{:.1}", 60.0 + 560.0 * i as f64 / n as f64, 360.0 - 320.0 * (y - lo) / span))
        .collect();
    format!("<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n", pts.join(" "))
}

/// Renders every `loss_*.tsv` and the edge residual histogram under
/// `report/` as SVG.
pub fn render_svg(ws: &Workspace) -> Result<usize> {
    let dir = ws.path(Stage::Report.dir());
    create_dir(&dir)?;
    let mut n = 0;
    let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut files: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    files.sort();
    for p in files {
        let name = p.file_name().and_then(|s| s.to_str()).unwrap_or("").to_string();
        if !(name.starts_with("loss_") && name.ends_with(".tsv")) {
            continue;
        }
        let rows = read_table(&p)?;
        let train: Vec<f64> = rows.iter().filter_map(|r| r.get(1).copied()).collect();
        let val: Vec<f64> = rows.iter().filter_map(|r| r.get(2).copied()).collect();
        let all = train.iter().chain(&val).filter(|v| v.is_finite());
        let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
        let body = format!(
            "{}{}<text x=\"520\" y=\"60\" font-family=\"sans-serif\" font-size=\"12\" fill=\"steelblue\">train</text>\n\
             <text x=\"520\" y=\"76\" font-family=\"sans-serif\" font-size=\"12\" fill=\"darkorange\">validation</text>\n\
             <text x=\"56\" y=\"44\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">{hi:.3}</text>\n\
             <text x=\"56\" y=\"360\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">{lo:.3}</text>\n",
            polyline(&train, lo, hi, "steelblue"),
            polyline(&val, lo, hi, "darkorange"),
        );
        let title = name.trim_start_matches("loss_").trim_end_matches(".tsv");
        write(&p.with_extension("svg"), &svg_frame(&format!("loss: {title}"), &body))?;
        n += 1;
    }
    let hist = ws.path("interpret/edge_histogram.tsv");
    if hist.exists() {
        let rows = read_table(&hist)?;
        let max = rows.iter().filter_map(|r| r.get(2).copied()).fold(1.0, f64::max);
        let w = 560.0 / rows.len().max(1) as f64;
        let mut body = String::new();
        for (i, r) in rows.iter().enumerate() {
            let h = 320.0 * r.get(2).copied().unwrap_or(0.0) / max;
            writeln!(
                body,
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{h:.1}\" fill=\"steelblue\"/>",
                60.0 + i as f64 * w,
                360.0 - h,
                (w - 1.0).max(0.5)
            )
            .ok();
        }
        write(&dir.join("edge_histogram.svg"), &svg_frame("edge residual histogram", &body))?;
        n += 1;
    }
    Ok(n)
}
