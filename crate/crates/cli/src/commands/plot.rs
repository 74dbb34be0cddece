use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::ValueEnum;

use crate::error::{CliError, CliResult};
use crate::io::write;
use crate::svg::{Figure, Mark, Series};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    Curve,
    Scatter,
    Hist,
}

#[derive(clap::Args, Debug)]
pub struct Args {
    /// CSV with a header row.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum)]
    kind: Kind,
    /// SVG file to write.
    #[arg(long)]
    out: PathBuf,
    /// Horizontal column [default: first column; scatter: first feature].
    #[arg(long)]
    x: Option<String>,
    /// Vertical columns, comma separated [default: the remaining numeric columns].
    #[arg(long, value_delimiter = ',')]
    y: Vec<String>,
    /// Column whose values split the rows into series [default for scatter
    /// and hist: `class` when present].
    #[arg(long)]
    group: Option<String>,
    /// Column to bin for histograms [default: first numeric column].
    #[arg(long)]
    column: Option<String>,
    #[arg(long, default_value_t = 20)]
    bins: usize,
    #[arg(long)]
    title: Option<String>,
}

struct Table {
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn read(path: &Path) -> CliResult<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        let headers: Vec<String> = rdr
            .headers()
            .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| CliError::input(format!("{} row {}: {e}", path.display(), i + 1)))?;
            rows.push(rec.iter().map(str::to_string).collect());
        }
        if rows.is_empty() {
            return Err(CliError::input(format!("{} has no rows to plot", path.display())));
        }
        Ok(Self { headers, rows })
    }

    fn index(&self, name: &str) -> CliResult<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::input(format!("no column {name}")))
    }

    fn numeric(&self, j: usize) -> bool {
        self.rows
            .iter()
            .all(|r| r[j].trim().parse::<f64>().is_ok_and(f64::is_finite))
    }

    fn value(&self, i: usize, j: usize) -> CliResult<f64> {
        self.rows[i][j]
            .trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| {
                CliError::input(format!(
                    "row {}: {:?} in column {} is not a number",
                    i + 1,
                    self.rows[i][j],
                    self.headers[j]
                ))
            })
    }

    /// Row indices per group value, in first-appearance order.
    fn groups(&self, by: Option<usize>) -> Vec<(String, Vec<usize>)> {
        let Some(g) = by else {
            return vec![(String::new(), (0..self.rows.len()).collect())];
        };
        let mut order: Vec<String> = Vec::new();
        let mut members: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.rows.iter().enumerate() {
            if !members.contains_key(&r[g]) {
                order.push(r[g].clone());
            }
            members.entry(r[g].clone()).or_default().push(i);
        }
        order
            .into_iter()
            .map(|k| {
                let rows = members.remove(&k).unwrap_or_default();
                (k, rows)
            })
            .collect()
    }
}

fn label(group: &str, column: &str, many_columns: bool) -> String {
    match (group.is_empty(), many_columns) {
        (true, _) => column.to_string(),
        (false, false) => group.to_string(),
        (false, true) => format!("{column} {group}"),
    }
}

fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<(f64, f64, f64)> {
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &v in values {
        let k = (((v - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    counts
        .iter()
        .enumerate()
        .map(|(k, &c)| (lo + k as f64 * width, lo + (k + 1) as f64 * width, c as f64))
        .collect()
}

pub fn run(args: &Args) -> CliResult<()> {
    let t = Table::read(&args.input)?;
    let group = match (&args.group, args.kind) {
        (Some(g), _) => Some(t.index(g)?),
        (None, Kind::Scatter | Kind::Hist) => t.headers.iter().position(|h| h == "class"),
        (None, Kind::Curve) => None,
    };
    let numeric: Vec<usize> = (0..t.headers.len())
        .filter(|&j| Some(j) != group && t.numeric(j))
        .collect();
    let groups = t.groups(group);
    let mut series = Vec::new();
    let (x_label, y_label) = match args.kind {
        Kind::Curve | Kind::Scatter => {
            let x = match &args.x {
                Some(name) => t.index(name)?,
                None if args.kind == Kind::Curve => 0,
                None => *numeric.first().ok_or_else(|| CliError::input("no numeric columns"))?,
            };
            let ys: Vec<usize> = if args.y.is_empty() {
                let rest: Vec<usize> = numeric.iter().copied().filter(|&j| j != x).collect();
                if args.kind == Kind::Scatter {
                    rest.into_iter().take(1).collect()
                } else {
                    rest
                }
            } else {
                args.y.iter().map(|n| t.index(n)).collect::<CliResult<_>>()?
            };
            if ys.is_empty() {
                return Err(CliError::input("no column to plot against x"));
            }
            for &y in &ys {
                for (g, rows) in &groups {
                    let pts = rows
                        .iter()
                        .map(|&i| Ok((t.value(i, x)?, t.value(i, y)?)))
                        .collect::<CliResult<Vec<_>>>()?;
                    let mark = if args.kind == Kind::Curve {
                        Mark::Line(pts)
                    } else {
                        Mark::Points(pts)
                    };
                    series.push(Series {
                        label: label(g, &t.headers[y], ys.len() > 1),
                        mark,
                    });
                }
            }
            let y_label = ys.iter().map(|&j| t.headers[j].as_str()).collect::<Vec<_>>().join(", ");
            (t.headers[x].clone(), y_label)
        }
        Kind::Hist => {
            if args.bins == 0 {
                return Err(CliError::input("--bins must be at least 1"));
            }
            let c = match &args.column {
                Some(name) => t.index(name)?,
                None => *numeric.first().ok_or_else(|| CliError::input("no numeric columns"))?,
            };
            let all = (0..t.rows.len())
                .map(|i| t.value(i, c))
                .collect::<CliResult<Vec<f64>>>()?;
            let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for (g, rows) in &groups {
                let v: Vec<f64> = rows.iter().map(|&i| all[i]).collect();
                series.push(Series {
                    label: label(g, &t.headers[c], false),
                    mark: Mark::Bars(histogram(&v, lo, hi, args.bins)),
                });
            }
            (t.headers[c].clone(), "count".to_string())
        }
    };
    let title = args.title.clone().unwrap_or_else(|| {
        args.input
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    let fig = Figure {
        title,
        x_label,
        y_label,
        series,
    };
    write(&args.out, &fig.render())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_counts_every_value() {
        let v = [0.0, 0.1, 0.5, 0.99, 1.0];
        let h = histogram(&v, 0.0, 1.0, 4);
        assert_eq!(h.iter().map(|b| b.2).sum::<f64>(), 5.0);
        assert_eq!(h[0], (0.0, 0.25, 2.0));
        assert_eq!(h[3].2, 2.0);
    }
}
