//! Metrics files, loss-curve SVGs, and run comparisons.
//!
//! A metrics file is CSV with a commented config header:
//!
//! ```text
//! # lowcomm metrics v1
//! # algo = dlc-md
//! # ...
//! t,inner_steps,train_loss,eval_loss,perplexity,bytes_sent,bytes_recv,drift,wall_ms
//! 1,8,0.6931,0.6925,1.9987,5376,5376,0.0012,0
//! ```
//!
//! Floats are written in shortest round-trip form, so reading a file back
//! yields the exact values that were recorded.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::trainer::MetricsRecord;

pub const METRICS_MAGIC_LINE: &str = "# lowcomm metrics v1";
pub const METRICS_COLUMNS: &str = "t,inner_steps,train_loss,eval_loss,perplexity,bytes_sent,bytes_recv,drift,wall_ms";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("config header: {0}")]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("runs `{a}` and `{b}` are on different tasks ({task_a} vs {task_b})")]
    MismatchedTasks {
        a: String,
        b: String,
        task_a: String,
        task_b: String,
    },
    #[error("{0} has no records")]
    Empty(String),
}

pub type Result<T> = std::result::Result<T, ReportError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Streams records to a metrics file, flushing after each row.
pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut out: W, cfg: &RunConfig) -> io::Result<Self> {
        writeln!(out, "{METRICS_MAGIC_LINE}")?;
        for line in cfg.experiment_text().lines() {
            writeln!(out, "# {line}")?;
        }
        writeln!(out, "{METRICS_COLUMNS}")?;
        out.flush()?;
        Ok(Self { out })
    }

    pub fn push(&mut self, r: &MetricsRecord) -> io::Result<()> {
        writeln!(self.out, "{}", format_record(r))?;
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

fn format_record(r: &MetricsRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{}",
        r.t, r.inner_steps, r.train_loss, r.eval_loss, r.perplexity, r.bytes_sent, r.bytes_recv, r.drift, r.wall_ms
    )
}

/// Metrics file contents as a string.
pub fn metrics_to_string(cfg: &RunConfig, records: &[MetricsRecord]) -> String {
    let mut w = MetricsWriter::new(Vec::new(), cfg).expect("writing to a Vec");
    for r in records {
        w.push(r).expect("writing to a Vec");
    }
    String::from_utf8(w.into_inner()).expect("ascii")
}

pub fn write_metrics(path: &Path, cfg: &RunConfig, records: &[MetricsRecord]) -> Result<()> {
    fs::write(path, metrics_to_string(cfg, records)).map_err(io_err(path))
}

/// A parsed metrics file.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsFile {
    pub config: RunConfig,
    pub records: Vec<MetricsRecord>,
}

impl MetricsFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, l)) if l == METRICS_MAGIC_LINE => {}
            _ => {
                return Err(ReportError::Malformed {
                    line: 1,
                    reason: format!("expected `{METRICS_MAGIC_LINE}`"),
                })
            }
        }
        let mut header = String::new();
        let mut records = Vec::new();
        let mut seen_columns = false;
        for (n, line) in lines {
            if !seen_columns {
                if let Some(rest) = line.strip_prefix('#') {
                    header.push_str(rest.trim());
                    header.push('\n');
                    continue;
                }
                if line != METRICS_COLUMNS {
                    return Err(ReportError::Malformed {
                        line: n,
                        reason: format!("expected column header `{METRICS_COLUMNS}`"),
                    });
                }
                seen_columns = true;
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            records.push(parse_record(line, n)?);
        }
        if !seen_columns {
            return Err(ReportError::Malformed {
                line: text.lines().count(),
                reason: "missing column header".into(),
            });
        }
        Ok(Self {
            config: RunConfig::parse_str(&header)?,
            records,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text).map_err(|e| match e {
            ReportError::Malformed { line, reason } => ReportError::Malformed {
                line,
                reason: format!("{}: {reason}", path.display()),
            },
            other => other,
        })
    }

    pub fn last(&self) -> Option<&MetricsRecord> {
        self.records.last()
    }
}

fn parse_record(line: &str, n: usize) -> Result<MetricsRecord> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 9 {
        return Err(ReportError::Malformed {
            line: n,
            reason: format!("expected 9 fields, found {}", fields.len()),
        });
    }
    fn num<T: std::str::FromStr>(s: &str, col: &str, n: usize) -> Result<T> {
        s.trim().parse().map_err(|_| ReportError::Malformed {
            line: n,
            reason: format!("bad {col} `{s}`"),
        })
    }
    Ok(MetricsRecord {
        t: num(fields[0], "t", n)?,
        inner_steps: num(fields[1], "inner_steps", n)?,
        train_loss: num(fields[2], "train_loss", n)?,
        eval_loss: num(fields[3], "eval_loss", n)?,
        perplexity: num(fields[4], "perplexity", n)?,
        bytes_sent: num(fields[5], "bytes_sent", n)?,
        bytes_recv: num(fields[6], "bytes_recv", n)?,
        drift: num(fields[7], "drift", n)?,
        wall_ms: num(fields[8], "wall_ms", n)?,
    })
}

/// A run with a display label, usually the metrics file stem.
#[derive(Debug, Clone)]
pub struct LabeledRun {
    pub label: String,
    pub file: MetricsFile,
}

impl LabeledRun {
    pub fn read(path: &Path) -> Result<Self> {
        let label = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(Self {
            label,
            file: MetricsFile::read(path)?,
        })
    }

    fn last(&self) -> Result<&MetricsRecord> {
        self.file.last().ok_or_else(|| ReportError::Empty(self.label.clone()))
    }
}

/// Data range padded by 5% of its span on each side. A flat range is padded
/// by 5% of its magnitude, or by 0.05 around zero.
pub fn padded_range(values: impl IntoIterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .into_iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo > hi {
        return (0.0, 1.0);
    }
    let span = hi - lo;
    let pad = if span > 0.0 {
        0.05 * span
    } else if lo != 0.0 {
        0.05 * lo.abs()
    } else {
        0.05
    };
    (lo - pad, hi + pad)
}

const PALETTE: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];
const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 20.0;
const BOTTOM: f64 = 50.0;

/// Training loss against cumulative inner steps, one polyline per run.
/// Identical inputs give identical bytes.
pub fn loss_svg(runs: &[LabeledRun]) -> Result<String> {
    for r in runs {
        r.last()?;
    }
    let points = runs.iter().flat_map(|r| r.file.records.iter());
    let (x0, x1) = padded_range(points.clone().map(|r| r.inner_steps as f64));
    let (y0, y1) = padded_range(points.map(|r| r.train_loss));
    let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (y1 - y) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<g id="axes" data-x-min="{x0}" data-x-max="{x1}" data-y-min="{y0}" data-y-max="{y1}" stroke="black" fill="none">"#
    );
    let _ = writeln!(s, r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}"/>"#);
    let _ = writeln!(s, "</g>");
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(
            s,
            r#"<line x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}" stroke="black"/><text x="{px:.2}" y="{:.2}" text-anchor="middle">{xv:.0}</text>"#,
            TOP + ph,
            TOP + ph + 4.0,
            TOP + ph + 16.0
        );
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{py:.2}" x2="{LEFT}" y2="{py:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            LEFT - 4.0,
            LEFT - 6.0,
            py + 4.0,
            tick_label(yv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">inner steps</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.2}" text-anchor="middle" transform="rotate(-90 14 {:.2})">train loss</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );
    for (i, run) in runs.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = run
            .file
            .records
            .iter()
            .map(|r| format!("{:.2},{:.2}", sx(r.inner_steps as f64), sy(r.train_loss)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline class="run" data-label="{}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            xml_escape(&run.label),
            pts.join(" ")
        );
        let ly = TOP + 10.0 + 16.0 * i as f64;
        let lx = WIDTH - RIGHT + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 18.0,
            lx + 22.0,
            ly + 4.0,
            xml_escape(&run.label)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn tick_label(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// One row per run with its final record.
pub fn summary_csv(runs: &[LabeledRun]) -> Result<String> {
    let mut s = String::from(
        "label,algo,workers,rounds,inner_steps,train_loss,eval_loss,perplexity,bytes_sent,bytes_recv,total_bytes,drift\n",
    );
    for run in runs {
        let r = run.last()?;
        let c = &run.file.config;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            csv_field(&run.label),
            c.algo,
            c.workers,
            r.t,
            r.inner_steps,
            r.train_loss,
            r.eval_loss,
            r.perplexity,
            r.bytes_sent,
            r.bytes_recv,
            r.total_bytes(),
            r.drift
        );
    }
    Ok(s)
}

/// What two runs must share to be comparable: the model and the data, but
/// not the seed or the method.
pub fn task_key(cfg: &RunConfig) -> String {
    let data = match &cfg.dataset {
        Some(p) => p.display().to_string(),
        None => format!("{}[{}]", cfg.task().name(), cfg.data_size),
    };
    format!("{:?} on {data}", cfg.arch())
}

/// How many times less `method` communicated than `baseline`.
///
/// ```
/// // 94.0 GB against 6.7 GB is about a 14x reduction
/// let r = lowcomm::report::reduction_ratio(94.0, 6.7);
/// assert!((r - 14.03).abs() < 0.01);
/// ```
pub fn reduction_ratio(baseline: f64, method: f64) -> f64 {
    baseline / method
}

/// Output of [`compare`].
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    /// One row per run: method, final eval loss and perplexity, bytes.
    pub table: String,
    /// One row per ordered pair `i < j`: bytes of run i over bytes of run j.
    /// Empty apart from the header for a single run.
    pub ratios: String,
}

/// Method-by-metric table plus pairwise communication-reduction ratios.
pub fn compare(runs: &[LabeledRun]) -> Result<Comparison> {
    if let Some(first) = runs.first() {
        let key = task_key(&first.file.config);
        for r in &runs[1..] {
            let other = task_key(&r.file.config);
            if other != key {
                return Err(ReportError::MismatchedTasks {
                    a: first.label.clone(),
                    b: r.label.clone(),
                    task_a: key,
                    task_b: other,
                });
            }
        }
    }
    let mut table =
        String::from("label,algo,workers,inner_steps,topk,alpha,seed,rounds,eval_loss,perplexity,total_bytes\n");
    for run in runs {
        let r = run.last()?;
        let c = &run.file.config;
        let _ = writeln!(
            table,
            "{},{},{},{},{},{},{},{},{},{},{}",
            csv_field(&run.label),
            c.algo,
            c.workers,
            c.inner_steps,
            c.topk,
            c.alpha,
            c.seed,
            r.t,
            r.eval_loss,
            r.perplexity,
            r.total_bytes()
        );
    }
    let mut ratios = String::from("baseline,method,baseline_bytes,method_bytes,reduction\n");
    for (i, a) in runs.iter().enumerate() {
        for b in &runs[i + 1..] {
            let (ba, bb) = (a.last()?.total_bytes(), b.last()?.total_bytes());
            let _ = writeln!(
                ratios,
                "{},{},{ba},{bb},{}",
                csv_field(&a.label),
                csv_field(&b.label),
                reduction_ratio(ba as f64, bb as f64)
            );
        }
    }
    Ok(Comparison { table, ratios })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Algorithm;

    fn record(t: u32, loss: f64) -> MetricsRecord {
        MetricsRecord {
            t,
            inner_steps: 8 * t as u64,
            train_loss: loss,
            eval_loss: loss * 1.1,
            perplexity: (loss * 1.1).exp(),
            bytes_sent: 100 * t as u64,
            bytes_recv: 100 * t as u64,
            drift: 0.1 / 3.0,
            wall_ms: 0,
        }
    }

    fn run(label: &str, cfg: RunConfig, losses: &[f64]) -> LabeledRun {
        let records = losses.iter().enumerate().map(|(i, &l)| record(i as u32 + 1, l)).collect();
        LabeledRun {
            label: label.into(),
            file: MetricsFile { config: cfg, records },
        }
    }

    #[test]
    fn metrics_round_trip_is_exact() {
        let cfg = RunConfig {
            alpha: 0.25,
            ..RunConfig::default()
        };
        let recs = vec![record(1, 0.693_147_180_559_945_3), record(2, 1.0 / 3.0)];
        let text = metrics_to_string(&cfg, &recs);
        let back = MetricsFile::parse(&text).unwrap();
        assert_eq!(back.records, recs);
        assert_eq!(back.config, cfg);
        assert_eq!(metrics_to_string(&back.config, &back.records), text);
    }

    #[test]
    fn malformed_rows_are_reported() {
        let good = metrics_to_string(&RunConfig::default(), &[record(1, 0.5)]);
        let bad = good.replace("\n1,8,", "\n1,x,");
        let err = MetricsFile::parse(&bad).unwrap_err();
        assert!(matches!(err, ReportError::Malformed { .. }), "{err}");
        assert!(MetricsFile::parse("t,inner_steps\n").is_err());
        let short = format!("{good}1,2,3\n");
        assert!(MetricsFile::parse(&short).is_err());
    }

    #[test]
    fn padded_range_examples() {
        assert_eq!(padded_range([0.0, 10.0]), (-0.5, 10.5));
        assert_eq!(padded_range([2.0, 2.0]), (1.9, 2.1));
        assert_eq!(padded_range([0.0]), (-0.05, 0.05));
    }

    #[test]
    fn svg_single_run_has_one_polyline() {
        let svg = loss_svg(&[run("a", RunConfig::default(), &[1.0, 0.5, 0.25])]).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert!(svg.contains(r#"data-label="a""#));
    }

    #[test]
    fn svg_is_deterministic() {
        let r = run("a", RunConfig::default(), &[1.0, 0.5]);
        let mut b = r.clone();
        b.label = "b".into();
        let s1 = loss_svg(&[r.clone(), b.clone()]).unwrap();
        let s2 = loss_svg(&[r, b]).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(s1.matches("<polyline").count(), 2);
    }

    #[test]
    fn compare_single_run_has_no_ratios() {
        let c = compare(&[run("a", RunConfig::default(), &[1.0])]).unwrap();
        assert_eq!(c.table.lines().count(), 2);
        assert_eq!(c.ratios.lines().count(), 1);
    }

    #[test]
    fn compare_ratio_is_byte_quotient() {
        let a = run("ddp", RunConfig { algo: Algorithm::Ddp, ..RunConfig::default() }, &[1.0, 0.9]);
        let mut b = run("dlc", RunConfig::default(), &[1.0, 0.8]);
        b.file.records[1].bytes_sent = 40;
        b.file.records[1].bytes_recv = 10;
        let c = compare(&[a, b]).unwrap();
        let row = c.ratios.lines().nth(1).unwrap();
        assert_eq!(row, "ddp,dlc,400,50,8");
    }

    #[test]
    fn compare_rejects_mismatched_tasks() {
        let a = run("a", RunConfig::default(), &[1.0]);
        let b = run("b", RunConfig { dim: 8, ..RunConfig::default() }, &[1.0]);
        assert!(matches!(compare(&[a, b]), Err(ReportError::MismatchedTasks { .. })));
    }

    #[test]
    fn empty_run_is_an_error() {
        let a = run("a", RunConfig::default(), &[]);
        assert!(matches!(summary_csv(&[a]), Err(ReportError::Empty(_))));
    }
}
