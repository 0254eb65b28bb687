//! On-disk cohort layout: one CSV per patient plus a JSON manifest.
//!
//! Patient CSVs have the header `t_index,u,<channel>...` (or `u1,u2,...`
//! for several inputs). An empty cell is a missing observation. The
//! manifest names each patient's CSV and, for synthetic cohorts, the file
//! holding its generative parameters.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::EvalCase;
use crate::model::{InfusionProtocol, VitalSignSeries};
use crate::synth::{CohortMember, GeneratorSpec, PatientTruth};
use crate::SCHEMA_VERSION;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientEntry {
    pub id: String,
    pub csv: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protocol: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub schema_version: u32,
    pub cohort_id: String,
    /// Seeds the cohort was generated from; empty for recorded data.
    #[serde(default)]
    pub seeds: Vec<u64>,
    pub dt: f64,
    pub channel_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<GeneratorSpec>,
    pub patients: Vec<PatientEntry>,
}

/// A cohort read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedCohort {
    pub manifest: CohortManifest,
    pub cases: Vec<EvalCase>,
}

fn input_header(du: usize) -> Vec<String> {
    if du == 1 {
        vec!["u".to_string()]
    } else {
        (1..=du).map(|k| format!("u{k}")).collect()
    }
}

fn is_input_column(name: &str) -> bool {
    name == "u"
        || name
            .strip_prefix('u')
            .is_some_and(|r| !r.is_empty() && r.bytes().all(|b| b.is_ascii_digit()))
}

pub fn write_series_csv<W: Write>(w: W, series: &VitalSignSeries, protocol: &InfusionProtocol) -> Result<()> {
    protocol.check_aligned(series)?;
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["t_index".to_string()];
    header.extend(input_header(protocol.input_dim()));
    header.extend(series.channel_names.iter().cloned());
    out.write_record(&header)?;
    for t in 0..series.len() {
        let mut row = vec![t.to_string()];
        row.extend((0..protocol.input_dim()).map(|k| protocol.rates[(t, k)].to_string()));
        row.extend((0..series.n_channels()).map(|j| {
            if series.is_observed(t, j) {
                series.values[(t, j)].to_string()
            } else {
                String::new()
            }
        }));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_protocol_csv<W: Write>(w: W, protocol: &InfusionProtocol) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["t_index".to_string()];
    header.extend(input_header(protocol.input_dim()));
    out.write_record(&header)?;
    for t in 0..protocol.len() {
        let mut row = vec![t.to_string()];
        row.extend((0..protocol.input_dim()).map(|k| protocol.rates[(t, k)].to_string()));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

struct Table {
    inputs: Vec<Vec<f64>>,
    channel_names: Vec<String>,
    values: Vec<Vec<Option<f64>>>,
}

fn parse_cell(s: &str, line: usize, col: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Config(format!("row {line}, column {col}: {s:?} is not a finite number")))
}

fn read_table<R: Read>(r: R) -> Result<Table> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header.first().map(String::as_str) != Some("t_index") {
        return Err(Error::Config("first CSV column must be t_index".into()));
    }
    let input_cols: Vec<usize> = (1..header.len()).filter(|&i| is_input_column(&header[i])).collect();
    if input_cols.is_empty() {
        return Err(Error::Config("CSV has no input column u".into()));
    }
    let channel_cols: Vec<usize> = (1..header.len()).filter(|i| !input_cols.contains(i)).collect();
    let mut table = Table {
        inputs: Vec::new(),
        channel_names: channel_cols.iter().map(|&i| header[i].clone()).collect(),
        values: Vec::new(),
    };
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = line + 2;
        if rec.len() != header.len() {
            return Err(Error::Config(format!(
                "row {line} has {} fields, expected {}",
                rec.len(),
                header.len()
            )));
        }
        let t = rec[0]
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("row {line}: bad t_index {:?}", &rec[0])))?;
        if t != table.inputs.len() {
            return Err(Error::Config(format!("row {line}: t_index {t} out of sequence")));
        }
        let u = input_cols
            .iter()
            .map(|&i| parse_cell(&rec[i], line, &header[i]))
            .collect::<Result<Vec<_>>>()?;
        let y = channel_cols
            .iter()
            .map(|&i| {
                if rec[i].trim().is_empty() {
                    Ok(None)
                } else {
                    parse_cell(&rec[i], line, &header[i]).map(Some)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        table.inputs.push(u);
        table.values.push(y);
    }
    if table.inputs.is_empty() {
        return Err(Error::Config("CSV has no data rows".into()));
    }
    Ok(table)
}

fn protocol_of(inputs: &[Vec<f64>], dt: f64) -> Result<InfusionProtocol> {
    let du = inputs[0].len();
    InfusionProtocol::new(dt, DMatrix::from_fn(inputs.len(), du, |t, k| inputs[t][k]))
}

pub fn read_series_csv<R: Read>(r: R, dt: f64) -> Result<(VitalSignSeries, InfusionProtocol)> {
    let table = read_table(r)?;
    if table.channel_names.is_empty() {
        return Err(Error::Config("CSV has no vital-sign columns".into()));
    }
    let protocol = protocol_of(&table.inputs, dt)?;
    let (t_len, dy) = (table.values.len(), table.channel_names.len());
    let values = DMatrix::from_fn(t_len, dy, |t, j| table.values[t][j].unwrap_or(0.0));
    let mask = DMatrix::from_fn(t_len, dy, |t, j| table.values[t][j].is_some());
    let series = VitalSignSeries::new(dt, table.channel_names, values, mask)?;
    Ok((series, protocol))
}

/// Reads the input columns of a protocol or patient CSV; other columns are ignored.
pub fn read_protocol_csv<R: Read>(r: R, dt: f64) -> Result<InfusionProtocol> {
    protocol_of(&read_table(r)?.inputs, dt)
}

/// Stable identifier of a generated cohort.
pub fn synthetic_cohort_id(seed: u64, n_patients: usize, spec: &GeneratorSpec) -> String {
    let digest = crate::hash_json(&(seed, n_patients, spec));
    format!("synth-{}", &digest[..12])
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

/// Writes a generated cohort into `dir` (created if needed) and returns its manifest.
pub fn write_cohort(dir: &Path, seed: u64, spec: &GeneratorSpec, members: &[CohortMember]) -> Result<CohortManifest> {
    fs::create_dir_all(dir)?;
    let mut patients = Vec::with_capacity(members.len());
    for m in members {
        let csv_name = format!("{}.csv", m.id);
        let truth_name = format!("{}.truth.json", m.id);
        let mut buf = Vec::new();
        write_series_csv(&mut buf, &m.series, &m.protocol)?;
        fs::write(dir.join(&csv_name), buf)?;
        write_json(&dir.join(&truth_name), &m.truth)?;
        patients.push(PatientEntry {
            id: m.id.clone(),
            csv: csv_name,
            truth: Some(truth_name),
            protocol: Some(m.truth.protocol.clone()),
        });
    }
    let manifest = CohortManifest {
        schema_version: SCHEMA_VERSION,
        cohort_id: synthetic_cohort_id(seed, members.len(), spec),
        seeds: vec![seed],
        dt: spec.dt,
        channel_names: spec.channel_names.clone(),
        spec: Some(spec.clone()),
        patients,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CohortManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let manifest: CohortManifest = serde_json::from_str(&text)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "manifest schema_version {} is not supported",
            manifest.schema_version
        )));
    }
    if manifest.patients.is_empty() {
        return Err(Error::Config("manifest lists no patients".into()));
    }
    Ok(manifest)
}

pub fn load_cohort(dir: &Path) -> Result<LoadedCohort> {
    let manifest = read_manifest(dir)?;
    let mut cases = Vec::with_capacity(manifest.patients.len());
    for p in &manifest.patients {
        let path = resolve(dir, &p.csv);
        let file = fs::File::open(&path).map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))?;
        let (series, protocol) = read_series_csv(file, manifest.dt)?;
        if series.channel_names != manifest.channel_names {
            return Err(Error::Config(format!(
                "{}: channels {:?} differ from manifest {:?}",
                p.csv, series.channel_names, manifest.channel_names
            )));
        }
        cases.push(EvalCase {
            id: p.id.clone(),
            series,
            protocol,
        });
    }
    Ok(LoadedCohort { manifest, cases })
}

/// Generative parameters of one patient, if the manifest records them.
pub fn load_truth(dir: &Path, entry: &PatientEntry) -> Result<Option<PatientTruth>> {
    let Some(name) = &entry.truth else {
        return Ok(None);
    };
    let text = fs::read_to_string(resolve(dir, name))?;
    Ok(Some(serde_json::from_str(&text)?))
}

fn resolve(dir: &Path, name: &str) -> PathBuf {
    let p = Path::new(name);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dir.join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_keeps_missing_cells() {
        let values = DMatrix::from_row_slice(3, 2, &[1.5, 2.0, 0.1, 4.25, 7.0, 8.0]);
        let mask = DMatrix::from_row_slice(3, 2, &[true, false, true, true, false, true]);
        let series = VitalSignSeries::new(15.0, vec!["BPs".into(), "BIS".into()], values, mask).unwrap();
        let protocol = InfusionProtocol::from_rates(15.0, &[0.0, 3.0, 1.0 / 3.0]).unwrap();
        let mut buf = Vec::new();
        write_series_csv(&mut buf, &series, &protocol).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t_index,u,BPs,BIS\n0,0,1.5,\n"));
        let (s2, p2) = read_series_csv(buf.as_slice(), 15.0).unwrap();
        assert_eq!(s2, series);
        assert_eq!(p2, protocol);
    }

    #[test]
    fn protocol_only_csv() {
        let p = read_protocol_csv("t_index,u\n0,1\n1,2\n".as_bytes(), 15.0).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p.rates[(1, 0)], 2.0);
        assert!(read_series_csv("t_index,u\n0,1\n".as_bytes(), 15.0).is_err());
    }

    #[test]
    fn malformed_rows_are_rejected() {
        assert!(read_protocol_csv("t,u\n0,1\n".as_bytes(), 15.0).is_err());
        assert!(read_protocol_csv("t_index,u\n1,1\n".as_bytes(), 15.0).is_err());
        assert!(read_protocol_csv("t_index,u\n0,abc\n".as_bytes(), 15.0).is_err());
        assert!(read_protocol_csv("t_index,u\n0,-1\n".as_bytes(), 15.0).is_err());
        assert!(read_protocol_csv("t_index,u\n".as_bytes(), 15.0).is_err());
    }

    #[test]
    fn input_columns_are_recognized() {
        assert!(is_input_column("u"));
        assert!(is_input_column("u2"));
        assert!(!is_input_column("u_x"));
        assert!(!is_input_column("BIS"));
    }
}
