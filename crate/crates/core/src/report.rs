//! Report bundles: a run manifest, named CSV tables, and a summary of
//! declarative aggregates that the verifier recomputes from the tables.
//!
//! Bundle bytes are a pure function of the run's inputs. Wall-clock time is
//! the one nondeterministic quantity and lives in `timing.json`, which no
//! digest covers.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::restorer::sha256_hex;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TIMING_FILE: &str = "timing.json";
pub const TOOL: &str = "resbound";
pub const RNG_NAME: &str = "splitmix64 keyed streams";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path, recorded_as: impl Into<String>) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(FileDigest { path: recorded_as.into(), sha256: sha256_hex(&bytes) })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    /// Fully resolved: every default is written out.
    pub config: Value,
    pub base_seed: Option<u64>,
    pub rng: String,
    pub inputs: Vec<FileDigest>,
    /// Paths relative to the bundle directory.
    pub outputs: Vec<FileDigest>,
}

impl RunManifest {
    pub fn new(subcommand: &str, config: Value, base_seed: Option<u64>, inputs: Vec<FileDigest>) -> Self {
        RunManifest {
            tool: TOOL.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: subcommand.into(),
            config,
            base_seed,
            rng: RNG_NAME.into(),
            inputs,
            outputs: Vec::new(),
        }
    }
}

/// String cells; floats are written with `{}`, the shortest representation
/// that parses back to the same value.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Table { name: name.into(), columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.columns.len(), "row width for table {}", self.name);
        self.rows.push(row);
    }

    pub fn file_name(&self) -> String {
        format!("{}.csv", self.name)
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Report(format!("table {} has no column {name}", self.name)))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
        w.write_record(&self.columns)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(name: &str, path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let columns = r.headers()?.iter().map(String::from).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|rec| rec.iter().map(String::from).collect()))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Table { name: name.into(), columns, rows })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggOp {
    Mean,
    /// Population standard deviation.
    Std,
    Min,
    Max,
    Sum,
    /// Rows passing the filter; the column is ignored.
    Count,
    /// Share of cells equal to `true`.
    TrueRate,
    /// Share of cells strictly greater than zero.
    PositiveRate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Filter {
    pub column: String,
    pub equals: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aggregate {
    pub name: String,
    pub table: String,
    pub column: String,
    pub op: AggOp,
    /// Rows must match every filter.
    #[serde(default)]
    pub filter: Vec<Filter>,
    pub value: f64,
}

/// An aggregate before its value is computed.
#[derive(Debug, Clone, PartialEq)]
pub struct AggSpec {
    pub name: String,
    pub table: String,
    pub column: String,
    pub op: AggOp,
    pub filter: Vec<Filter>,
}

impl AggSpec {
    pub fn new(name: impl Into<String>, table: &str, column: &str, op: AggOp) -> Self {
        AggSpec { name: name.into(), table: table.into(), column: column.into(), op, filter: Vec::new() }
    }

    pub fn filter(mut self, column: &str, equals: &str) -> Self {
        self.filter.push(Filter { column: column.into(), equals: equals.into() });
        self
    }
}

fn parse_f64(table: &str, s: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::Report(format!("table {table}: {s:?} is not a number")))
}

/// Evaluates `spec` over `table`. Empty cells are skipped for every op but
/// `Count`; a selection with no values is an error.
pub fn compute(spec: &AggSpec, table: &Table) -> Result<f64> {
    let conds: Vec<(usize, &str)> =
        spec.filter.iter().map(|f| Ok((table.column(&f.column)?, f.equals.as_str()))).collect::<Result<_>>()?;
    let keep: Vec<&Vec<String>> = table.rows.iter().filter(|r| conds.iter().all(|&(c, v)| r[c] == v)).collect();
    if spec.op == AggOp::Count {
        return Ok(keep.len() as f64);
    }
    let c = table.column(&spec.column)?;
    let cells: Vec<&str> = keep.iter().map(|r| r[c].as_str()).filter(|s| !s.is_empty()).collect();
    if cells.is_empty() {
        return Err(Error::Report(format!("aggregate {} selects no values", spec.name)));
    }
    let n = cells.len() as f64;
    if spec.op == AggOp::TrueRate {
        return Ok(cells.iter().filter(|&&s| s == "true").count() as f64 / n);
    }
    let v: Vec<f64> = cells.iter().map(|s| parse_f64(&table.name, s)).collect::<Result<_>>()?;
    Ok(match spec.op {
        AggOp::Mean => v.iter().sum::<f64>() / n,
        AggOp::Std => {
            let m = v.iter().sum::<f64>() / n;
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt()
        }
        AggOp::Min => v.iter().copied().fold(f64::INFINITY, f64::min),
        AggOp::Max => v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        AggOp::Sum => v.iter().sum(),
        AggOp::PositiveRate => v.iter().filter(|&&x| x > 0.0).count() as f64 / n,
        AggOp::Count | AggOp::TrueRate => unreachable!(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    pub subcommand: String,
    pub tables: Vec<String>,
    pub aggregates: Vec<Aggregate>,
}

impl Summary {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.aggregates.iter().find(|a| a.name == name).map(|a| a.value)
    }
}

pub struct ReportBundle {
    pub manifest: RunManifest,
    pub tables: Vec<Table>,
    pub aggregates: Vec<AggSpec>,
    /// Files the subcommand already wrote into the output directory, relative
    /// to it; they are digested into the manifest.
    pub artifacts: Vec<String>,
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(v)?;
    text.push(b'\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Header { path: path.into(), message: e.to_string() })
}

/// Writes tables, `summary.json`, and `manifest.json` (last, since it holds
/// the digests of everything else). Returns the summary.
pub fn emit_report(bundle: ReportBundle, dir: &Path) -> Result<Summary> {
    if bundle.tables.is_empty() {
        return Err(Error::Report("a bundle needs at least one table".into()));
    }
    let mut by_name = BTreeMap::new();
    for t in &bundle.tables {
        if t.rows.is_empty() {
            return Err(Error::Report(format!("table {} is empty", t.name)));
        }
        if by_name.insert(t.name.as_str(), t).is_some() {
            return Err(Error::Report(format!("duplicate table {}", t.name)));
        }
    }
    let aggregates = bundle
        .aggregates
        .iter()
        .map(|s| {
            let t = by_name.get(s.table.as_str()).ok_or_else(|| Error::Report(format!("no table {}", s.table)))?;
            Ok(Aggregate {
                name: s.name.clone(),
                table: s.table.clone(),
                column: s.column.clone(),
                op: s.op,
                filter: s.filter.clone(),
                value: compute(s, t)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut outputs: Vec<String> = bundle.artifacts.clone();
    for t in &bundle.tables {
        t.write(&dir.join(t.file_name()))?;
        outputs.push(t.file_name());
    }
    let summary = Summary {
        subcommand: bundle.manifest.subcommand.clone(),
        tables: bundle.tables.iter().map(|t| t.name.clone()).collect(),
        aggregates,
    };
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    outputs.push(SUMMARY_FILE.into());

    let mut manifest = bundle.manifest;
    manifest.outputs = outputs.iter().map(|p| FileDigest::of(&dir.join(p), p.clone())).collect::<Result<_>>()?;
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(summary)
}

/// Records elapsed time beside a bundle, outside every digest.
pub fn write_timing(dir: &Path, seconds: f64) -> Result<()> {
    write_json(&dir.join(TIMING_FILE), &serde_json::json!({ "wall_clock_seconds": seconds }))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Verdict {
    pub mismatches: Vec<String>,
}

impl Verdict {
    pub fn is_clean(&self) -> bool {
        self.mismatches.is_empty()
    }
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    read_json(&dir.join(MANIFEST_FILE))
}

pub fn read_summary(dir: &Path) -> Result<Summary> {
    read_json(&dir.join(SUMMARY_FILE))
}

/// Checks every output digest and recomputes every summary aggregate. A
/// missing or unreadable manifest or summary is an error, not a verdict.
pub fn verify_report(dir: &Path) -> Result<Verdict> {
    let manifest = read_manifest(dir)?;
    let summary = read_summary(dir)?;
    let mut v = Verdict::default();

    for d in &manifest.outputs {
        let p = dir.join(&d.path);
        match fs::read(&p) {
            Ok(bytes) if sha256_hex(&bytes) == d.sha256 => {}
            Ok(_) => v.mismatches.push(format!("digest mismatch: {}", d.path)),
            Err(_) => v.mismatches.push(format!("missing output: {}", d.path)),
        }
    }
    if !manifest.outputs.iter().any(|d| d.path == SUMMARY_FILE) {
        v.mismatches.push(format!("manifest does not cover {SUMMARY_FILE}"));
    }
    if summary.subcommand != manifest.subcommand {
        v.mismatches.push(format!("summary subcommand {} differs from manifest {}", summary.subcommand, manifest.subcommand));
    }

    let mut tables: BTreeMap<String, Option<Table>> = BTreeMap::new();
    for name in &summary.tables {
        let file = format!("{name}.csv");
        if !manifest.outputs.iter().any(|d| d.path == file) {
            v.mismatches.push(format!("manifest does not cover {file}"));
        }
        let t = match Table::read(name, &dir.join(&file)) {
            Ok(t) => Some(t),
            Err(e) => {
                v.mismatches.push(format!("table {name} unreadable: {e}"));
                None
            }
        };
        tables.insert(name.clone(), t);
    }
    for a in &summary.aggregates {
        let Some(Some(t)) = tables.get(&a.table) else {
            v.mismatches.push(format!("aggregate {}: table {} unavailable", a.name, a.table));
            continue;
        };
        let spec = AggSpec { name: a.name.clone(), table: a.table.clone(), column: a.column.clone(), op: a.op, filter: a.filter.clone() };
        match compute(&spec, t) {
            Ok(x) if x.to_bits() == a.value.to_bits() => {}
            Ok(x) => v.mismatches.push(format!("aggregate {}: summary {} but tables give {x}", a.name, a.value)),
            Err(e) => v.mismatches.push(format!("aggregate {}: {e}", a.name)),
        }
    }
    Ok(v)
}

/// Relative paths of every file under `dir` with their bytes, sorted.
pub fn tree_bytes(dir: &Path) -> Result<Vec<(PathBuf, Vec<u8>)>> {
    fn walk(root: &Path, d: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) -> Result<()> {
        for e in fs::read_dir(d).map_err(|e| Error::io(d, e))? {
            let p = e.map_err(|e| Error::io(d, e))?.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else {
                let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
                out.push((p.strip_prefix(root).expect("under root").to_path_buf(), bytes));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}
