//! Snapshot files: `# key=value` metadata lines, a `v1,...,vd` header, then
//! one particle per row.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::simulator::Population;

pub fn format_snapshot(pop: &Population, spec_hash: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# d={}", pop.d);
    let _ = writeln!(s, "# P={}", pop.len());
    let _ = writeln!(s, "# t={}", pop.t);
    let _ = writeln!(s, "# step_index={}", pop.step_index);
    let _ = writeln!(s, "# seed={}", pop.seed);
    let _ = writeln!(s, "# tagged={}", pop.tagged);
    let _ = writeln!(s, "# spec_hash={spec_hash}");
    let header: Vec<String> = (1..=pop.d).map(|k| format!("v{k}")).collect();
    let _ = writeln!(s, "id,{}", header.join(","));
    for (i, id) in pop.ids.iter().enumerate() {
        let row: Vec<String> = pop.particle(i).iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{id},{}", row.join(","));
    }
    s
}

pub fn write_snapshot(path: &Path, pop: &Population, spec_hash: &str) -> Result<()> {
    fs::write(path, format_snapshot(pop, spec_hash)).map_err(|e| Error::io(path, e))
}

pub fn parse_snapshot(text: &str) -> Result<Population> {
    let mut meta = std::collections::HashMap::new();
    let mut ids = Vec::new();
    let mut positions = Vec::new();
    let mut has_id = false;
    let mut d = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.trim().split_once('=') {
                meta.insert(k.trim().to_string(), v.trim().to_string());
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.iter().any(|f| f.parse::<f64>().is_err()) {
            // column header
            has_id = fields.first() == Some(&"id");
            continue;
        }
        let values: Vec<f64> = fields.iter().map(|f| f.parse().unwrap()).collect();
        let (id, coords) = if has_id {
            (values[0] as u64, &values[1..])
        } else {
            (ids.len() as u64, &values[..])
        };
        match d {
            None => d = Some(coords.len()),
            Some(d) if d != coords.len() => {
                return Err(Error::Parse(format!("line {}: expected {d} coordinates", lineno + 1)))
            }
            _ => {}
        }
        ids.push(id);
        positions.extend_from_slice(coords);
    }
    let d = d.ok_or_else(|| Error::Parse("snapshot has no particle rows".into()))?;
    let get = |k: &str| meta.get(k).and_then(|v| v.parse::<f64>().ok());
    Ok(Population {
        d,
        t: get("t").unwrap_or(0.0),
        step_index: get("step_index").unwrap_or(0.0) as usize,
        positions,
        ids,
        tagged: get("tagged").unwrap_or(0.0) as usize,
        seed: meta.get("seed").and_then(|v| v.parse().ok()).unwrap_or(0),
    })
}

pub fn read_snapshot(path: &Path) -> Result<Population> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_snapshot(&text)
}

/// Point cloud of a snapshot or plain CSV file (optional header row).
pub fn read_points(path: &Path) -> Result<Vec<Vec<f64>>> {
    let pop = read_snapshot(path)?;
    Ok(pop.positions.chunks_exact(pop.d).map(<[f64]>::to_vec).collect())
}
