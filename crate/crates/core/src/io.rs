//! Panel files, the CIDR transform, run configuration and output writers.
//!
//! Two CSV layouts are understood, both with a header row:
//!
//! * long: `subject,time,gridpoint,value`, one row per cell, `gridpoint`
//!   being the 0-based grid index;
//! * wide: `subject,time,<g_0>,…,<g_{G-1}>`, one row per curve. Numeric
//!   column names in `[0, 1]` are taken as the grid.
//!
//! Subject and time labels are arbitrary strings. They are ordered
//! numerically when every label parses as a number and lexicographically
//! otherwise, so the row order of the file does not matter.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::cusum::{CXi, PeVariant};
use crate::error::{invalid, Error, Result};
use crate::nulldist::NullControls;
use crate::panel::{make_uniform_grid, FunctionalPanel, Grid};

const MAX_LISTED_CELLS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Long,
    Wide,
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "long" => Ok(Layout::Long),
            "wide" => Ok(Layout::Wide),
            other => Err(invalid(format!("unknown layout {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelSource {
    pub path: PathBuf,
    pub layout: Layout,
    /// Overrides the grid from the header (wide) or the uniform default.
    pub grid: Option<Vec<f64>>,
}

impl PanelSource {
    pub fn new(path: impl Into<PathBuf>, layout: Layout) -> Self {
        Self {
            path: path.into(),
            layout,
            grid: None,
        }
    }
}

/// A panel and the labels of its subjects and times.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPanel {
    pub panel: FunctionalPanel,
    pub subjects: Vec<String>,
    pub times: Vec<String>,
}

impl LabeledPanel {
    /// Labels `1..=N` and `1..=T`.
    pub fn numbered(panel: FunctionalPanel) -> Self {
        let subjects = (1..=panel.n_subjects()).map(|i| i.to_string()).collect();
        let times = (1..=panel.n_times()).map(|t| t.to_string()).collect();
        Self {
            panel,
            subjects,
            times,
        }
    }
}

fn label_order(labels: &[String]) -> Vec<String> {
    let mut v = labels.to_vec();
    v.sort();
    v.dedup();
    let numeric: Option<Vec<f64>> = v.iter().map(|s| s.trim().parse::<f64>().ok()).collect();
    if let Some(keys) = numeric {
        let mut paired: Vec<(f64, String)> = keys.into_iter().zip(v).collect();
        paired.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
        paired.into_iter().map(|p| p.1).collect()
    } else {
        v
    }
}

fn index_of(order: &[String]) -> HashMap<&str, usize> {
    order.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect()
}

fn parse_value(s: &str, row: usize, what: &str) -> Result<f64> {
    let v: f64 = s.trim().parse().map_err(|_| Error::Parse {
        row,
        message: format!("{what} {s:?} is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            row,
            message: format!("{what} {s:?} is not finite"),
        });
    }
    Ok(v)
}

fn open_csv(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

/// One parsed row: subject, time, grid index, value.
type Cell = (String, String, usize, f64);

fn read_long(path: &Path) -> Result<(Vec<Cell>, Option<usize>, Option<Vec<f64>>)> {
    let mut rd = open_csv(path)?;
    let mut cells = Vec::new();
    for (ix, rec) in rd.records().enumerate() {
        let row = ix + 2;
        let rec = rec?;
        if rec.len() != 4 {
            return Err(Error::Parse {
                row,
                message: format!("expected 4 fields, found {}", rec.len()),
            });
        }
        let j = rec[2].parse::<usize>().map_err(|_| Error::Parse {
            row,
            message: format!("gridpoint {:?} is not a nonnegative integer", &rec[2]),
        })?;
        let v = parse_value(&rec[3], row, "value")?;
        cells.push((rec[0].to_string(), rec[1].to_string(), j, v));
    }
    let g = cells.iter().map(|c| c.2 + 1).max();
    Ok((cells, g, None))
}

fn read_wide(path: &Path) -> Result<(Vec<Cell>, Option<usize>, Option<Vec<f64>>)> {
    let mut rd = open_csv(path)?;
    let header = rd.headers()?.clone();
    if header.len() < 4 {
        return Err(Error::Parse {
            row: 1,
            message: "wide layout needs subject, time and at least two value columns".into(),
        });
    }
    let g = header.len() - 2;
    let header_grid: Option<Vec<f64>> = header
        .iter()
        .skip(2)
        .map(|s| s.parse::<f64>().ok().filter(|v| (0.0..=1.0).contains(v)))
        .collect();
    let header_grid = header_grid.filter(|p| p.windows(2).all(|w| w[0] < w[1]));
    let mut cells = Vec::new();
    for (ix, rec) in rd.records().enumerate() {
        let row = ix + 2;
        let rec = rec?;
        if rec.len() != g + 2 {
            return Err(Error::Parse {
                row,
                message: format!("expected {} fields, found {}", g + 2, rec.len()),
            });
        }
        for j in 0..g {
            let v = parse_value(&rec[j + 2], row, "value")?;
            cells.push((rec[0].to_string(), rec[1].to_string(), j, v));
        }
    }
    Ok((cells, Some(g), header_grid))
}

/// Reads a panel file; every (subject, time, grid point) cell must be present exactly once.
pub fn load_panel(src: &PanelSource) -> Result<LabeledPanel> {
    let (cells, g_seen, header_grid) = match src.layout {
        Layout::Long => read_long(&src.path)?,
        Layout::Wide => read_wide(&src.path)?,
    };
    if cells.is_empty() {
        return Err(Error::InsufficientData("panel file has no data rows".into()));
    }
    let grid = match (&src.grid, header_grid) {
        (Some(points), _) => Grid::new(points.clone())?,
        (None, Some(points)) => Grid::new(points)?,
        (None, None) => make_uniform_grid(g_seen.unwrap_or(0))?,
    };
    let g = grid.len();
    if let Some(seen) = g_seen {
        if seen > g {
            return Err(invalid(format!(
                "file has {seen} grid points but the grid has {g}"
            )));
        }
    }
    let subj_labels: Vec<String> = cells.iter().map(|c| c.0.clone()).collect();
    let time_labels: Vec<String> = cells.iter().map(|c| c.1.clone()).collect();
    let subjects = label_order(&subj_labels);
    let times = label_order(&time_labels);
    let (n, t) = (subjects.len(), times.len());
    let si = index_of(&subjects);
    let ti = index_of(&times);
    let mut data = vec![f64::NAN; n * t * g];
    let mut filled = vec![false; n * t * g];
    for (ix, (s, tl, j, v)) in cells.iter().enumerate() {
        let pos = (si[s.as_str()] * t + ti[tl.as_str()]) * g + j;
        if filled[pos] {
            return Err(Error::Parse {
                row: ix / if src.layout == Layout::Wide { g } else { 1 } + 2,
                message: format!("duplicate cell (subject {s}, time {tl}, gridpoint {j})"),
            });
        }
        filled[pos] = true;
        data[pos] = *v;
    }
    let missing: Vec<usize> = (0..filled.len()).filter(|&p| !filled[p]).collect();
    if !missing.is_empty() {
        let cells: Vec<String> = missing
            .iter()
            .take(MAX_LISTED_CELLS)
            .map(|&p| {
                let (i, rest) = (p / (t * g), p % (t * g));
                format!("({}, {}, {})", subjects[i], times[rest / g], rest % g)
            })
            .collect();
        return Err(Error::Incomplete {
            total: missing.len(),
            shown: cells.len(),
            cells: cells.join(", "),
        });
    }
    let panel = FunctionalPanel::new(n, t, grid, data)?;
    Ok(LabeledPanel {
        panel,
        subjects,
        times,
    })
}

/// Seventeen significant digits; round-trips every finite `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes `bytes` to a temporary file next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io_err = |source: io::Error| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    tmp.write_all(bytes).map_err(io_err)?;
    tmp.as_file().sync_all().map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}

/// Panel as CSV in the given layout. The wide header carries the grid.
pub fn panel_to_csv(lp: &LabeledPanel, layout: Layout) -> Result<Vec<u8>> {
    let p = &lp.panel;
    let g = p.grid_len();
    let mut w = csv::Writer::from_writer(Vec::new());
    match layout {
        Layout::Long => {
            w.write_record(["subject", "time", "gridpoint", "value"])?;
            for i in 0..p.n_subjects() {
                for t0 in 0..p.n_times() {
                    for (j, v) in p.curve(i, t0).iter().enumerate() {
                        w.write_record([
                            lp.subjects[i].as_str(),
                            lp.times[t0].as_str(),
                            &j.to_string(),
                            &fmt_f64(*v),
                        ])?;
                    }
                }
            }
        }
        Layout::Wide => {
            let mut header = vec!["subject".to_string(), "time".to_string()];
            header.extend(p.grid().points().iter().map(|u| fmt_f64(*u)));
            w.write_record(&header)?;
            for i in 0..p.n_subjects() {
                for t0 in 0..p.n_times() {
                    let mut row = vec![lp.subjects[i].clone(), lp.times[t0].clone()];
                    row.extend(p.curve(i, t0).iter().map(|v| fmt_f64(*v)));
                    debug_assert_eq!(row.len(), g + 2);
                    w.write_record(&row)?;
                }
            }
        }
    }
    w.into_inner().map_err(|e| Error::Io {
        path: PathBuf::from("<csv>"),
        source: e.into_error(),
    })
}

pub fn save_panel(lp: &LabeledPanel, path: &Path, layout: Layout) -> Result<()> {
    write_atomic(path, &panel_to_csv(lp, layout)?)
}

/// Cumulative intraday returns: `100 (ln P(u_j) - ln P(u_1))` for each of `T` rows of `G` prices.
///
/// With `drop_first` the identically-zero first column is removed.
pub fn cidr_transform(prices: &[f64], g: usize, drop_first: bool) -> Result<Vec<f64>> {
    if g < 2 || prices.len() % g != 0 {
        return Err(Error::Shape {
            expected: g,
            actual: prices.len(),
        });
    }
    let out_g = if drop_first { g - 1 } else { g };
    let mut out = Vec::with_capacity(prices.len() / g * out_g);
    for (t0, row) in prices.chunks_exact(g).enumerate() {
        if let Some((j, &value)) = row.iter().enumerate().find(|(_, p)| !(**p > 0.0) || !p.is_finite()) {
            return Err(Error::Domain {
                time: t0 + 1,
                grid_index: j,
                value,
            });
        }
        let base = row[0].ln();
        let start = usize::from(drop_first);
        out.extend(row[start..].iter().map(|p| 100.0 * (p.ln() - base)));
    }
    Ok(out)
}

/// [`cidr_transform`] applied to every subject of a price panel.
pub fn cidr_panel(prices: &LabeledPanel, drop_first: bool) -> Result<LabeledPanel> {
    let p = &prices.panel;
    let g = p.grid_len();
    let grid = if drop_first {
        Grid::new(p.grid().points()[1..].to_vec())?
    } else {
        p.grid().clone()
    };
    let mut data = Vec::with_capacity(p.n_subjects() * p.n_times() * grid.len());
    for i in 0..p.n_subjects() {
        data.extend(cidr_transform(p.subject(i), g, drop_first)?);
    }
    Ok(LabeledPanel {
        panel: FunctionalPanel::new(p.n_subjects(), p.n_times(), grid, data)?,
        subjects: prices.subjects.clone(),
        times: prices.times.clone(),
    })
}

/// Settings shared by the `test`, `breaks`, `cluster` and `null` commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub variant: PeVariant,
    pub c_xi: CXi,
    pub alphas: Vec<f64>,
    pub null: NullControls,
    /// Defaults to `(N ∨ T)^{-1/2} ln(N ∨ T)`.
    pub rho: Option<f64>,
    /// Defaults to `min(10, |Ĉ•|)`.
    pub k_bar: Option<usize>,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: PeVariant::Xi2,
            c_xi: CXi::LeadingEigenRoot,
            alphas: vec![0.01, 0.05, 0.10],
            null: NullControls::default(),
            rho: None,
            k_bar: None,
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() || self.alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(Error::Config("alpha levels must lie in (0, 1)".into()));
        }
        if let Some(r) = self.rho {
            if !(r > 0.0) || !r.is_finite() {
                return Err(Error::Config(format!("rho must be positive, got {r}")));
            }
        }
        if self.k_bar == Some(0) {
            return Err(Error::Config("k_bar must be positive".into()));
        }
        if let CXi::Fixed(c) = self.c_xi {
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::Config(format!("c_xi must be positive, got {c}")));
            }
        }
        if self.null.n_draws == 0 || self.null.bridge_grid == 0 {
            return Err(Error::Config("null draws and bridge grid must be positive".into()));
        }
        if !(self.null.trace_share > 0.0 && self.null.trace_share <= 1.0) {
            return Err(Error::Config("trace_share must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Parses a TOML file into `T`, with config errors naming the file.
pub fn load_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Pretty JSON whose floats carry 17 significant digits.
struct Fmt17<'a>(PrettyFormatter<'a>);

impl Formatter for Fmt17<'_> {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        writer.write_all(fmt_f64(value).as_bytes())
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, f64::from(value))
    }

    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }

    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }

    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }

    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }

    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }

    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }

    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

pub fn to_json_string<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Fmt17(PrettyFormatter::new()));
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

pub fn write_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<()> {
    write_atomic(path, to_json_string(value)?.as_bytes())
}

/// Label lookup for 0-based indices, used to annotate reports.
pub fn label_map(labels: &[String], indices: impl IntoIterator<Item = usize>) -> BTreeMap<usize, String> {
    indices
        .into_iter()
        .filter_map(|i| labels.get(i).map(|l| (i + 1, l.clone())))
        .collect()
}
