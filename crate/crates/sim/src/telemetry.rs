//! Per-iteration telemetry records and their CSV and JSON forms.
//!
//! Column order is fixed: `ts_iso8601, module, iter, r_in, r_gen, s_out`,
//! then for each slot K `s_slotK, v_slotK, r_slotK, live_slotK, light_slotK,
//! upright_slotK`, then `parent_ids, child_ids`. Id lists are joined with `;`.
//! Parents are written as slots (`RPN1.1`), children as `slot:child` (`1:RPN4`).

use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter};
use std::path::Path;

use chrono::{DateTime, SecondsFormat, TimeZone, Utc};
use serde_json::{Map, Value};
use vmc_core::topology::CHILD_SLOTS;

/// Version of the column layout below.
pub const SCHEMA_VERSION: u32 = 1;

const SLOT_FIELDS: [&str; 6] = ["s", "v", "r", "live", "light", "upright"];

#[derive(Debug, thiserror::Error)]
pub enum TelemetryError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("field {field}: {message}")]
    Field { field: String, message: String },
}

fn field_err(field: &str, message: impl Into<String>) -> TelemetryError {
    TelemetryError::Field { field: field.to_string(), message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotTelemetry {
    /// Successin seen on the slot (produced or relayed).
    pub s: f64,
    pub v: f64,
    /// Resource sent through the slot.
    pub r: f64,
    /// Whether a live child relays through the slot.
    pub live: bool,
    pub light: f64,
    pub upright: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TelemetryRecord {
    pub ts: DateTime<Utc>,
    pub module: String,
    pub iter: u64,
    pub r_in: f64,
    pub r_gen: f64,
    pub s_out: f64,
    pub slots: Vec<SlotTelemetry>,
    pub parent_ids: Vec<String>,
    pub child_ids: Vec<String>,
}

/// Fixed epoch of fast-forward runs, so timestamps depend only on simulated time.
pub fn sim_epoch() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2000, 1, 1, 0, 0, 0).single().expect("valid epoch")
}

pub fn format_ts(ts: &DateTime<Utc>) -> String {
    ts.to_rfc3339_opts(SecondsFormat::Micros, true)
}

pub fn parse_ts(text: &str) -> Result<DateTime<Utc>, TelemetryError> {
    DateTime::parse_from_rfc3339(text)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| field_err("ts_iso8601", e.to_string()))
}

pub fn columns() -> Vec<String> {
    let mut cols: Vec<String> =
        ["ts_iso8601", "module", "iter", "r_in", "r_gen", "s_out"].iter().map(|s| s.to_string()).collect();
    for k in 1..=CHILD_SLOTS {
        for f in SLOT_FIELDS {
            cols.push(format!("{f}_slot{k}"));
        }
    }
    cols.push("parent_ids".into());
    cols.push("child_ids".into());
    cols
}

fn join(ids: &[String]) -> String {
    ids.join(";")
}

fn split(text: &str) -> Vec<String> {
    text.split(';').filter(|s| !s.is_empty()).map(str::to_string).collect()
}

fn num(field: &str, text: &str) -> Result<f64, TelemetryError> {
    text.parse::<f64>().map_err(|e| field_err(field, e.to_string()))
}

fn flag(field: &str, text: &str) -> Result<bool, TelemetryError> {
    match text {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        other => Err(field_err(field, format!("not a flag: {other}"))),
    }
}

impl TelemetryRecord {
    /// Seconds since `epoch`.
    pub fn seconds_since(&self, epoch: &DateTime<Utc>) -> f64 {
        (self.ts - *epoch).num_microseconds().unwrap_or(i64::MAX) as f64 * 1e-6
    }

    pub fn to_csv_fields(&self) -> Vec<String> {
        let mut out = vec![
            format_ts(&self.ts),
            self.module.clone(),
            self.iter.to_string(),
            self.r_in.to_string(),
            self.r_gen.to_string(),
            self.s_out.to_string(),
        ];
        for k in 0..CHILD_SLOTS as usize {
            let s = self.slots.get(k).copied().unwrap_or(SlotTelemetry {
                s: 0.0,
                v: 0.0,
                r: 0.0,
                live: false,
                light: 0.0,
                upright: 0.0,
            });
            out.extend([
                s.s.to_string(),
                s.v.to_string(),
                s.r.to_string(),
                s.live.to_string(),
                s.light.to_string(),
                s.upright.to_string(),
            ]);
        }
        out.push(join(&self.parent_ids));
        out.push(join(&self.child_ids));
        out
    }

    pub fn from_csv_fields<'a, I: IntoIterator<Item = &'a str>>(fields: I) -> Result<Self, TelemetryError> {
        let f: Vec<&str> = fields.into_iter().collect();
        let cols = columns();
        if f.len() != cols.len() {
            return Err(field_err("row", format!("expected {} fields, found {}", cols.len(), f.len())));
        }
        let mut slots = Vec::new();
        for k in 0..CHILD_SLOTS as usize {
            let b = 6 + 6 * k;
            slots.push(SlotTelemetry {
                s: num(&cols[b], f[b])?,
                v: num(&cols[b + 1], f[b + 1])?,
                r: num(&cols[b + 2], f[b + 2])?,
                live: flag(&cols[b + 3], f[b + 3])?,
                light: num(&cols[b + 4], f[b + 4])?,
                upright: num(&cols[b + 5], f[b + 5])?,
            });
        }
        let n = cols.len();
        Ok(TelemetryRecord {
            ts: parse_ts(f[0])?,
            module: f[1].to_string(),
            iter: f[2].parse().map_err(|e: std::num::ParseIntError| field_err("iter", e.to_string()))?,
            r_in: num("r_in", f[3])?,
            r_gen: num("r_gen", f[4])?,
            s_out: num("s_out", f[5])?,
            slots,
            parent_ids: split(f[n - 2]),
            child_ids: split(f[n - 1]),
        })
    }

    /// JSON object whose keys are the CSV column names.
    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        m.insert("ts_iso8601".into(), Value::from(format_ts(&self.ts)));
        m.insert("module".into(), Value::from(self.module.clone()));
        m.insert("iter".into(), Value::from(self.iter));
        m.insert("r_in".into(), Value::from(self.r_in));
        m.insert("r_gen".into(), Value::from(self.r_gen));
        m.insert("s_out".into(), Value::from(self.s_out));
        for (k, s) in self.slots.iter().enumerate() {
            let k = k + 1;
            m.insert(format!("s_slot{k}"), Value::from(s.s));
            m.insert(format!("v_slot{k}"), Value::from(s.v));
            m.insert(format!("r_slot{k}"), Value::from(s.r));
            m.insert(format!("live_slot{k}"), Value::from(s.live));
            m.insert(format!("light_slot{k}"), Value::from(s.light));
            m.insert(format!("upright_slot{k}"), Value::from(s.upright));
        }
        m.insert("parent_ids".into(), Value::from(join(&self.parent_ids)));
        m.insert("child_ids".into(), Value::from(join(&self.child_ids)));
        Value::Object(m)
    }

    pub fn to_json_line(&self) -> String {
        self.to_json().to_string()
    }

    pub fn from_json(v: &Value) -> Result<Self, TelemetryError> {
        let obj = v.as_object().ok_or_else(|| field_err("record", "not an object"))?;
        let get = |k: &str| obj.get(k).ok_or_else(|| field_err(k, "missing"));
        let f = |k: &str| -> Result<f64, TelemetryError> {
            get(k)?.as_f64().ok_or_else(|| field_err(k, "not a number"))
        };
        let s = |k: &str| -> Result<String, TelemetryError> {
            Ok(get(k)?.as_str().ok_or_else(|| field_err(k, "not a string"))?.to_string())
        };
        let mut slots = Vec::new();
        for k in 1..=CHILD_SLOTS {
            if !obj.contains_key(&format!("s_slot{k}")) {
                break;
            }
            let live_key = format!("live_slot{k}");
            slots.push(SlotTelemetry {
                s: f(&format!("s_slot{k}"))?,
                v: f(&format!("v_slot{k}"))?,
                r: f(&format!("r_slot{k}"))?,
                live: get(&live_key)?.as_bool().ok_or_else(|| field_err(&live_key, "not a bool"))?,
                light: f(&format!("light_slot{k}"))?,
                upright: f(&format!("upright_slot{k}"))?,
            });
        }
        Ok(TelemetryRecord {
            ts: parse_ts(&s("ts_iso8601")?)?,
            module: s("module")?,
            iter: get("iter")?.as_u64().ok_or_else(|| field_err("iter", "not an integer"))?,
            r_in: f("r_in")?,
            r_gen: f("r_gen")?,
            s_out: f("s_out")?,
            slots,
            parent_ids: obj.get("parent_ids").and_then(Value::as_str).map(split).unwrap_or_default(),
            child_ids: obj.get("child_ids").and_then(Value::as_str).map(split).unwrap_or_default(),
        })
    }

    pub fn from_json_line(line: &str) -> Result<Self, TelemetryError> {
        Self::from_json(&serde_json::from_str(line)?)
    }
}

/// Append-only CSV file with a header row.
pub struct CsvLog {
    writer: csv::Writer<BufWriter<File>>,
    rows: u64,
}

impl CsvLog {
    /// Opens `path` for appending; writes the header if the file is new or empty.
    pub fn open(path: &Path) -> Result<Self, TelemetryError> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let empty = file.metadata()?.len() == 0;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(BufWriter::new(file));
        if empty {
            writer.write_record(columns())?;
            writer.flush()?;
        }
        Ok(CsvLog { writer, rows: 0 })
    }

    pub fn append(&mut self, record: &TelemetryRecord) -> Result<(), TelemetryError> {
        self.writer.write_record(record.to_csv_fields())?;
        self.rows += 1;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), TelemetryError> {
        self.writer.flush()?;
        Ok(())
    }

    /// Rows appended through this handle.
    pub fn rows(&self) -> u64 {
        self.rows
    }
}

/// Reads every record of a telemetry CSV, checking the header.
pub fn read_csv(path: &Path) -> Result<Vec<TelemetryRecord>, TelemetryError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header != columns() {
        return Err(field_err("header", format!("unexpected columns {header:?}")));
    }
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        out.push(TelemetryRecord::from_csv_fields(row.iter())?);
    }
    Ok(out)
}
