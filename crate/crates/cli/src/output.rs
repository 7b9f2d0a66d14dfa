//! Tabular output as CSV (6 significant digits unless asked otherwise) or
//! JSON (full precision, one object per row).

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use clap::ValueEnum;
use serde_json::{Map, Number, Value as Json};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Text(String),
    Int(i64),
    Num(f64),
    Bool(bool),
    /// Not applicable; empty in CSV.
    Missing,
    /// Not applicable in a comparison table; `-----` in CSV.
    Dash,
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Text(s.to_string())
    }
}

impl From<String> for Value {
    fn from(s: String) -> Self {
        Value::Text(s)
    }
}

impl From<f64> for Value {
    fn from(x: f64) -> Self {
        Value::Num(x)
    }
}

impl From<usize> for Value {
    fn from(n: usize) -> Self {
        Value::Int(n as i64)
    }
}

impl From<u64> for Value {
    fn from(n: u64) -> Self {
        Value::Int(n as i64)
    }
}

impl From<bool> for Value {
    fn from(b: bool) -> Self {
        Value::Bool(b)
    }
}

impl From<Option<f64>> for Value {
    fn from(x: Option<f64>) -> Self {
        x.map_or(Value::Missing, Value::Num)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

impl Table {
    pub fn new<S: Into<String>>(columns: impl IntoIterator<Item = S>) -> Self {
        Self { columns: columns.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Value>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }
}

/// `x` rounded to 6 significant digits, `%g`-style: plain decimal for
/// exponents in `-4..6`, scientific otherwise, trailing zeros trimmed.
pub fn six_significant(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    } else {
        format!("{}e{exp}", trim_zeros(mantissa))
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn csv_field(v: &Value, full_precision: bool) -> String {
    match v {
        Value::Text(s) => s.clone(),
        Value::Int(n) => n.to_string(),
        // `{}` on f64 is the shortest string that round-trips.
        Value::Num(x) if full_precision => x.to_string(),
        Value::Num(x) => six_significant(*x),
        Value::Bool(b) => b.to_string(),
        Value::Missing => String::new(),
        Value::Dash => "-----".into(),
    }
}

fn json_value(v: &Value) -> Json {
    match v {
        Value::Text(s) => Json::String(s.clone()),
        Value::Int(n) => Json::from(*n),
        Value::Num(x) => Number::from_f64(*x).map_or(Json::Null, Json::Number),
        Value::Bool(b) => Json::Bool(*b),
        Value::Missing | Value::Dash => Json::Null,
    }
}

pub fn write_csv(table: &Table, full_precision: bool, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(&table.columns)?;
    for row in &table.rows {
        w.write_record(row.iter().map(|v| csv_field(v, full_precision)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json(table: &Table, mut out: impl Write) -> Result<()> {
    let rows: Vec<Json> = table
        .rows
        .iter()
        .map(|row| {
            let obj: Map<String, Json> = table.columns.iter().cloned().zip(row.iter().map(json_value)).collect();
            Json::Object(obj)
        })
        .collect();
    serde_json::to_writer_pretty(&mut out, &rows)?;
    out.write_all(b"\n")?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Sink<'a> {
    pub format: Format,
    pub full_precision: bool,
    pub out: Option<&'a Path>,
}

impl Sink<'_> {
    pub fn emit(&self, table: &Table) -> Result<()> {
        match self.out {
            Some(path) => {
                let file = File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
                let mut w = BufWriter::new(file);
                self.write(table, &mut w)?;
                w.flush().with_context(|| format!("cannot write {}", path.display()))?;
            }
            None => {
                let stdout = io::stdout();
                let mut w = stdout.lock();
                self.write(table, &mut w)?;
                w.flush()?;
            }
        }
        Ok(())
    }

    fn write(&self, table: &Table, w: &mut impl Write) -> Result<()> {
        match self.format {
            Format::Csv => write_csv(table, self.full_precision, w),
            Format::Json => write_json(table, w),
        }
    }
}
