//! Individual-level CSV format.
//!
//! Required columns are `cluster_id`, `pair_id` (may be empty), `arm`,
//! `delta` and `y` (empty exactly when `delta` is 0). Covariate columns carry
//! a prefix: `ec_` for cluster-level, `w_` for baseline individual and `m_`
//! for post-baseline individual covariates. Additional outcomes come as
//! `delta_<name>` / `y_<name>` pairs. Prefixes are stripped from the names
//! used in configurations; the primary outcome is called `y`.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::sync::Arc;

use crate::data::{ClusterData, IndividualRecord, Measurement, Schema};
use crate::error::{Error, Result};

pub const PRIMARY_OUTCOME: &str = "y";

enum Column {
    ClusterId,
    PairId,
    Arm,
    Ec(usize),
    W(usize),
    M(usize),
    Delta(usize),
    Y(usize),
}

struct Layout {
    columns: Vec<Column>,
    ec: Vec<String>,
    schema: Schema,
}

fn layout(headers: &csv::StringRecord) -> Result<Layout> {
    let mut ec = Vec::new();
    let mut schema = Schema {
        outcome_names: vec![PRIMARY_OUTCOME.into()],
        ..Schema::default()
    };
    let mut columns = Vec::with_capacity(headers.len());
    let outcome = |schema: &mut Schema, name: &str| -> usize {
        match schema.outcome_names.iter().position(|n| n == name) {
            Some(i) => i,
            None => {
                schema.outcome_names.push(name.to_string());
                schema.outcome_names.len() - 1
            }
        }
    };
    let mut seen: Vec<&str> = Vec::new();
    for h in headers.iter() {
        if seen.contains(&h) {
            return Err(Error::Schema(format!("duplicate column `{h}`")));
        }
        seen.push(h);
        let strip = |p: &str| {
            h.strip_prefix(p)
                .filter(|s| !s.is_empty())
                .map(str::to_string)
        };
        let col = match h {
            "cluster_id" => Column::ClusterId,
            "pair_id" => Column::PairId,
            "arm" => Column::Arm,
            "delta" => Column::Delta(0),
            "y" => Column::Y(0),
            _ => {
                if let Some(n) = strip("ec_") {
                    ec.push(n);
                    Column::Ec(ec.len() - 1)
                } else if let Some(n) = strip("w_") {
                    schema.w_names.push(n);
                    Column::W(schema.w_names.len() - 1)
                } else if let Some(n) = strip("m_") {
                    schema.m_names.push(n);
                    Column::M(schema.m_names.len() - 1)
                } else if let Some(n) = strip("delta_") {
                    Column::Delta(outcome(&mut schema, &n))
                } else if let Some(n) = strip("y_") {
                    Column::Y(outcome(&mut schema, &n))
                } else {
                    return Err(Error::Schema(format!("unrecognized column `{h}`")));
                }
            }
        };
        columns.push(col);
    }
    for required in ["cluster_id", "pair_id", "arm", "delta", "y"] {
        if !seen.contains(&required) {
            return Err(Error::Schema(format!(
                "missing required column `{required}`"
            )));
        }
    }
    for name in &schema.outcome_names[1..] {
        for prefix in ["delta_", "y_"] {
            if !seen.iter().any(|h| *h == format!("{prefix}{name}")) {
                return Err(Error::Schema(format!("missing column `{prefix}{name}`")));
            }
        }
    }
    let all: Vec<&String> = schema
        .w_names
        .iter()
        .chain(&schema.m_names)
        .chain(&ec)
        .collect();
    for (i, n) in all.iter().enumerate() {
        if all[..i].contains(n) {
            return Err(Error::Schema(format!(
                "covariate name `{n}` used by more than one column"
            )));
        }
    }
    Ok(Layout {
        columns,
        ec,
        schema,
    })
}

/// Reads clusters in order of first appearance.
pub fn read_individual_csv<R: Read>(reader: R) -> Result<Vec<ClusterData>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Schema(format!("header: {e}")))?
        .clone();
    let lay = layout(&headers)?;
    let schema = Arc::new(lay.schema.clone());
    let n_out = schema.outcome_names.len();

    let mut clusters: Vec<ClusterData> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (row, rec) in rdr.records().enumerate() {
        // Header is line 1.
        let line = row + 2;
        let rec = rec.map_err(|e| Error::Schema(format!("row {line}: {e}")))?;
        let err =
            |col: &str, msg: String| Error::Schema(format!("row {line}, column `{col}`: {msg}"));
        let num = |col: usize| -> Result<f64> {
            let raw = rec[col].trim();
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(&headers[col], format!("`{raw}` is not a finite number")))
        };
        let flag = |col: usize| -> Result<u8> {
            match rec[col].trim() {
                "0" => Ok(0),
                "1" => Ok(1),
                other => Err(err(&headers[col], format!("`{other}` is not 0 or 1"))),
            }
        };

        let mut id = String::new();
        let mut pair = None;
        let mut arm = 0u8;
        let mut ec = vec![0.0; lay.ec.len()];
        let mut w = vec![0.0; lay.schema.w_names.len()];
        let mut m = vec![0.0; lay.schema.m_names.len()];
        let mut deltas = vec![0u8; n_out];
        let mut ys: Vec<Option<f64>> = vec![None; n_out];
        for (c, col) in lay.columns.iter().enumerate() {
            match col {
                Column::ClusterId => {
                    id = rec[c].trim().to_string();
                    if id.is_empty() {
                        return Err(err("cluster_id", "empty".into()));
                    }
                }
                Column::PairId => {
                    let p = rec[c].trim();
                    pair = (!p.is_empty()).then(|| p.to_string());
                }
                Column::Arm => arm = flag(c)?,
                Column::Ec(k) => ec[*k] = num(c)?,
                Column::W(k) => w[*k] = num(c)?,
                Column::M(k) => m[*k] = num(c)?,
                Column::Delta(k) => deltas[*k] = flag(c)?,
                Column::Y(k) => {
                    ys[*k] = if rec[c].trim().is_empty() {
                        None
                    } else {
                        Some(num(c)?)
                    }
                }
            }
        }
        let mut outcomes = Vec::with_capacity(n_out);
        for k in 0..n_out {
            let yname = if k == 0 {
                "y".to_string()
            } else {
                format!("y_{}", schema.outcome_names[k])
            };
            outcomes.push(match (deltas[k], ys[k]) {
                (1, Some(v)) => Measurement::measured(v),
                (0, None) => Measurement::missing(),
                (1, None) => return Err(err(&yname, "empty although measured".into())),
                _ => return Err(err(&yname, "present although not measured".into())),
            });
        }

        let covariates: Vec<(String, f64)> = lay.ec.iter().cloned().zip(ec).collect();
        let person = IndividualRecord { w, m, outcomes };
        match index.get(&id) {
            Some(&i) => {
                let c = &mut clusters[i];
                if c.arm != arm {
                    return Err(err("arm", format!("differs within cluster `{id}`")));
                }
                if c.pair_id != pair {
                    return Err(err("pair_id", format!("differs within cluster `{id}`")));
                }
                if let Some(((name, _), _)) = c
                    .covariates
                    .iter()
                    .zip(&covariates)
                    .find(|((_, a), (_, b))| a.to_bits() != b.to_bits())
                {
                    return Err(err(
                        &format!("ec_{name}"),
                        format!("differs within cluster `{id}`"),
                    ));
                }
                c.individuals.push(person);
            }
            None => {
                index.insert(id.clone(), clusters.len());
                clusters.push(ClusterData {
                    id,
                    pair_id: pair,
                    arm,
                    covariates,
                    schema: Arc::clone(&schema),
                    individuals: vec![person],
                });
            }
        }
    }
    if clusters.is_empty() {
        return Err(Error::Schema("no data rows".into()));
    }
    Ok(clusters)
}

/// Writes clusters in the format read by [`read_individual_csv`]. Numbers use
/// the shortest representation that parses back to the same value.
pub fn write_individual_csv<W: Write>(clusters: &[ClusterData], out: W) -> Result<()> {
    let first = clusters
        .first()
        .ok_or_else(|| Error::EmptyData("no clusters".into()))?;
    let schema = &first.schema;
    let mut header: Vec<String> = ["cluster_id", "pair_id", "arm", "delta", "y"]
        .map(String::from)
        .to_vec();
    header.extend(first.covariates.iter().map(|(n, _)| format!("ec_{n}")));
    header.extend(schema.w_names.iter().map(|n| format!("w_{n}")));
    header.extend(schema.m_names.iter().map(|n| format!("m_{n}")));
    for n in &schema.outcome_names[1..] {
        header.push(format!("delta_{n}"));
        header.push(format!("y_{n}"));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(&header)?;
    let opt = |y: Option<f64>| y.map_or_else(String::new, |v| v.to_string());
    for c in clusters {
        for r in &c.individuals {
            let mut row = vec![
                c.id.clone(),
                c.pair_id.clone().unwrap_or_default(),
                c.arm.to_string(),
                u8::from(r.outcomes[0].delta).to_string(),
                opt(r.outcomes[0].y),
            ];
            row.extend(c.covariates.iter().map(|(_, v)| v.to_string()));
            row.extend(r.w.iter().map(f64::to_string));
            row.extend(r.m.iter().map(f64::to_string));
            for o in &r.outcomes[1..] {
                row.push(u8::from(o.delta).to_string());
                row.push(opt(o.y));
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}
