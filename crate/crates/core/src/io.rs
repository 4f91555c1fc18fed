//! File formats: atoms CSV, family specification JSON, and the JSON/CSV
//! outputs of the command-line tool.

use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::Path;

use serde::ser::Serialize;
use serde::Deserialize;
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::driver::{ProjectionResult, StageRecord};
use crate::error::{invalid, Error, Result};
use crate::measure::DiscreteMeasure;
use crate::moments::{Cdf, MomentFamily, MomentIndex, StepCdf, TailConfig};
use crate::partition::Partition;

/// Reads atoms from CSV with header `w,x1,...,xd`.
pub fn read_atoms_csv(path: impl AsRef<Path>) -> Result<DiscreteMeasure> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    parse_atoms_csv(file)
}

pub fn parse_atoms_csv<R: Read>(reader: R) -> Result<DiscreteMeasure> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse(format!("line 1: {e}")))?
        .clone();
    if headers.len() < 2 || headers.get(0) != Some("w") {
        return Err(Error::Parse("line 1: header must be `w,x1,...,xd`".into()));
    }
    let d = headers.len() - 1;
    let mut atoms = Vec::new();
    let mut weights = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            Error::Parse(format!("line {line}: {e}"))
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != d + 1 {
            return Err(Error::Parse(format!("line {line}: expected {} fields, found {}", d + 1, rec.len())));
        }
        let mut vals = Vec::with_capacity(d + 1);
        for (k, field) in rec.iter().enumerate() {
            let x: f64 = field
                .parse()
                .map_err(|_| Error::Parse(format!("line {line}, column {}: `{field}` is not a number", k + 1)))?;
            if !x.is_finite() {
                return Err(Error::Parse(format!("line {line}, column {}: value must be finite", k + 1)));
            }
            vals.push(x);
        }
        if vals[0] < 0.0 {
            return Err(Error::Parse(format!("line {line}: weight must be nonnegative")));
        }
        weights.push(vals[0]);
        atoms.push(vals[1..].to_vec());
    }
    if atoms.is_empty() {
        return Err(Error::Parse("no atoms after the header".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        log::warn!("weights sum to {total}; renormalizing");
    }
    DiscreteMeasure::new(atoms, weights)
}

pub fn write_atoms_csv(path: impl AsRef<Path>, q: &DiscreteMeasure) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let header: Vec<String> = std::iter::once("w".to_string())
        .chain((1..=q.dim()).map(|k| format!("x{k}")))
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for (a, w) in q.atoms().iter().zip(q.weights()) {
        let row: Vec<String> = std::iter::once(*w).chain(a.iter().copied()).map(fmt_f64).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Seventeen significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// JSON description of a moment family.
#[derive(Debug, Clone, PartialEq, serde::Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FamilySpec {
    UnconditionalFsd {
        lower: f64,
        upper: f64,
        #[serde(default)]
        tail: Option<TailConfig>,
    },
    ConditionalFsd {
        lower: f64,
        upper: f64,
        d_z: usize,
        #[serde(default = "default_r_max")]
        r_max: u32,
        #[serde(default)]
        tail: Option<TailConfig>,
    },
    MarginalGivenG {
        upper: f64,
        g: CdfSpec,
        #[serde(default)]
        tail: Option<TailConfig>,
    },
    /// Restriction functions `f_k` (constraint `∫ f_k dP ≤ 0`) listed per atom
    /// in the order of `support`, or of the atoms file when absent.
    Custom {
        members: Vec<Vec<f64>>,
        #[serde(default)]
        support: Option<Vec<Vec<f64>>>,
        #[serde(default)]
        tail: Option<TailConfig>,
    },
}

fn default_r_max() -> u32 {
    4
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, Deserialize)]
#[serde(untagged)]
pub enum CdfSpec {
    /// `"uniform"`.
    Named(String),
    /// `[[location, cumulative], ...]`.
    Knots(Vec<(f64, f64)>),
}

impl CdfSpec {
    pub fn build(&self) -> Result<Cdf> {
        match self {
            CdfSpec::Named(s) if s == "uniform" => Ok(Cdf::Uniform),
            CdfSpec::Named(s) => Err(invalid(format!("unknown CDF `{s}`"))),
            CdfSpec::Knots(k) => Ok(Cdf::Step(StepCdf::new(k.clone())?)),
        }
    }
}

impl FamilySpec {
    /// Builds the family; custom members without a support are tied to `q`'s
    /// atoms in order (so `q` must be the measure read from the same file).
    pub fn build(&self, q: &DiscreteMeasure) -> Result<MomentFamily> {
        let (family, tail) = match self {
            FamilySpec::UnconditionalFsd { lower, upper, tail } => (MomentFamily::unconditional_fsd(*lower, *upper)?, tail),
            FamilySpec::ConditionalFsd { lower, upper, d_z, r_max, tail } => {
                (MomentFamily::conditional_fsd(*lower, *upper, *d_z, *r_max)?, tail)
            }
            FamilySpec::MarginalGivenG { upper, g, tail } => (MomentFamily::marginal_given_g(*upper, g.build()?)?, tail),
            FamilySpec::Custom { members, support, tail } => {
                let support = support.clone().unwrap_or_else(|| q.atoms().to_vec());
                (MomentFamily::custom(support, members.clone())?, tail)
            }
        };
        match tail {
            Some(t) => family.with_tail(*t),
            None => Ok(family),
        }
    }
}

pub fn read_family_json(path: impl AsRef<Path>) -> Result<FamilySpec> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    parse_family_json(&text)
}

pub fn parse_family_json(text: &str) -> Result<FamilySpec> {
    serde_json::from_str(text).map_err(|e| Error::Parse(format!("line {}, column {}: {e}", e.line(), e.column())))
}

/// Pretty JSON whose floats are written with 17 significant digits and
/// whose non-finite floats become `null`.
struct FixedFloat<'a> {
    inner: PrettyFormatter<'a>,
}

impl Formatter for FixedFloat<'_> {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        if value.is_finite() {
            writer.write_all(fmt_f64(value).as_bytes())
        } else {
            writer.write_all(b"null")
        }
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, value as f64)
    }

    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_array(w)
    }

    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_array(w)
    }

    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.inner.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_array_value(w)
    }

    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_object(w)
    }

    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_object(w)
    }

    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.inner.begin_object_key(w, first)
    }

    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_object_value(w)
    }
}

pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let fmt = FixedFloat { inner: PrettyFormatter::with_indent(b"  ") };
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, fmt);
    value
        .serialize(&mut ser)
        .map_err(|e| invalid(format!("cannot serialize output: {e}")))?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    std::fs::write(path, to_json_string(value)?)?;
    Ok(())
}

pub fn read_result_json(path: impl AsRef<Path>) -> Result<ProjectionResult> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("line {}, column {}: {e}", e.line(), e.column())))
}

/// Per-stage CSV trace: `stage,epsilon,cells,value,iterations,duality_gap`.
pub fn trace_csv(stages: &[StageRecord]) -> String {
    let mut s = String::from("stage,epsilon,cells,value,iterations,duality_gap\n");
    for (m, st) in stages.iter().enumerate() {
        s.push_str(&format!(
            "{m},{},{},{},{},{}\n",
            fmt_f64(st.epsilon),
            st.cells,
            fmt_f64(st.value),
            st.iterations,
            fmt_f64(st.duality_gap)
        ));
    }
    s
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct CellReport {
    pub members: Vec<usize>,
    pub representative: usize,
    pub representative_index: MomentIndex,
    pub diameter: f64,
    pub rep_mean: f64,
    pub selection_fallback: bool,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct PartitionReport {
    pub epsilon: f64,
    pub achieved_epsilon: f64,
    pub exceeds_epsilon: bool,
    pub n_cells: usize,
    pub n1: usize,
    pub n2: usize,
    pub r0: Option<u32>,
    pub cut_points: Vec<f64>,
    pub grid: Vec<MomentIndex>,
    pub cells: Vec<CellReport>,
}

impl From<&Partition> for PartitionReport {
    fn from(p: &Partition) -> Self {
        Self {
            epsilon: p.epsilon,
            achieved_epsilon: p.achieved_epsilon,
            exceeds_epsilon: p.exceeds_epsilon(),
            n_cells: p.len(),
            n1: p.n1,
            n2: p.n2,
            r0: p.r0,
            cut_points: p.cut_points.clone(),
            grid: p.grid.clone(),
            cells: p
                .cells
                .iter()
                .map(|c| CellReport {
                    members: c.members.clone(),
                    representative: c.representative,
                    representative_index: p.grid[c.representative].clone(),
                    diameter: c.diameter,
                    rep_mean: c.rep_mean,
                    selection_fallback: c.selection_fallback,
                })
                .collect(),
        }
    }
}
