//! File formats: point-pattern CSV, gridded-covariate CSV, areal GeoJSON,
//! integration-scheme CSV, chain CSV, summary CSV, and content hashing.
//!
//! All coordinates are planar; inputs must be pre-projected (the tool never
//! touches longitude/latitude). CSVs are UTF-8 with `.` decimals. Floats are
//! written in Rust's shortest round-trip form, so export → ingest is exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{ArealPartition, ArealUnit, GridField, Location, Polygon, Window};
use crate::inference::{PosteriorChain, SummaryTable};
use crate::integration::IntegrationScheme;
use crate::simulate::{Event, PointPattern};
use sha2::{Digest, Sha256};

fn csv_error(path: &str, err: csv::Error) -> Error {
    let row = err.position().map_or(0, |p| p.line() as usize);
    let reason = err.to_string();
    match err.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(path, e),
        _ => Error::ParseError { path: path.to_string(), row, reason },
    }
}

fn parse_f64(path: &str, row: usize, column: &str, raw: &str) -> Result<f64> {
    let v: f64 = raw.parse().map_err(|_| Error::ParseError {
        path: path.to_string(),
        row,
        reason: format!("column '{column}': cannot parse '{raw}' as a number"),
    })?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::ParseError {
            path: path.to_string(),
            row,
            reason: format!("column '{column}': non-finite value '{raw}'"),
        })
    }
}

// ----- point patterns ------------------------------------------------------

/// Reads a pattern CSV with header `x,y[,mark][,nu...]`. Any column after
/// `mark` (or after `y` when there is no mark) is a nonspatial covariate;
/// the returned names preserve the header order. With `log_mark` set, marks
/// are log-transformed at ingest and must be strictly positive.
///
/// Every event must lie inside `window`; offenders are reported with their
/// file row, never snapped.
pub fn read_pattern(
    path: &str,
    window: &Window,
    log_mark: bool,
) -> Result<(PointPattern, Vec<String>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.get(0) != Some("x") || headers.get(1) != Some("y") {
        return Err(Error::ParseError {
            path: path.to_string(),
            row: 1,
            reason: "header must start with 'x,y'".to_string(),
        });
    }
    let marked = headers.get(2) == Some("mark");
    if log_mark && !marked {
        return Err(Error::invalid(format!(
            "{path}: the log-mark transform needs a 'mark' column"
        )));
    }
    let nu_start = if marked { 3 } else { 2 };
    let nu_names: Vec<String> = headers.iter().skip(nu_start).map(str::to_string).collect();

    let mut events = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let row = record.position().map_or(0, |p| p.line() as usize);
        let x = parse_f64(path, row, "x", record.get(0).unwrap_or(""))?;
        let y = parse_f64(path, row, "y", record.get(1).unwrap_or(""))?;
        let loc = Location::new(x, y);
        if !window.contains(&loc) {
            return Err(Error::DomainError {
                path: path.to_string(),
                row,
                reason: format!("event ({x}, {y}) lies outside the window"),
            });
        }
        let mark = if marked {
            let raw = record.get(2).ok_or_else(|| Error::ParseError {
                path: path.to_string(),
                row,
                reason: "missing mark value".to_string(),
            })?;
            let m = parse_f64(path, row, "mark", raw)?;
            if log_mark {
                if m <= 0.0 {
                    return Err(Error::DomainError {
                        path: path.to_string(),
                        row,
                        reason: format!(
                            "mark {m} is not positive; the log transform needs positive marks"
                        ),
                    });
                }
                Some(m.ln())
            } else {
                Some(m)
            }
        } else {
            None
        };
        let mut nu = Vec::with_capacity(nu_names.len());
        for (j, name) in nu_names.iter().enumerate() {
            let raw = record.get(nu_start + j).ok_or_else(|| Error::ParseError {
                path: path.to_string(),
                row,
                reason: format!("missing value for column '{name}'"),
            })?;
            nu.push(parse_f64(path, row, name, raw)?);
        }
        events.push(Event { loc, mark, nu });
    }
    Ok((PointPattern::new(events, window.clone())?, nu_names))
}

/// Writes a pattern as CSV `x,y[,mark][,nu...]`, the inverse of
/// [`read_pattern`] without the log transform.
pub fn write_pattern(path: &str, pattern: &PointPattern, nu_names: &[String]) -> Result<()> {
    if !pattern.is_empty() && nu_names.len() != pattern.nu_dim() {
        return Err(Error::invalid(format!(
            "{} covariate names given for {} covariate columns",
            nu_names.len(),
            pattern.nu_dim()
        )));
    }
    let mut wtr = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["x".to_string(), "y".to_string()];
    if pattern.is_marked() {
        header.push("mark".to_string());
    }
    header.extend(nu_names.iter().cloned());
    wtr.write_record(&header).map_err(|e| csv_error(path, e))?;
    for e in pattern.events() {
        let mut rec = vec![e.loc.x.to_string(), e.loc.y.to_string()];
        if let Some(m) = e.mark {
            rec.push(m.to_string());
        }
        rec.extend(e.nu.iter().map(f64::to_string));
        wtr.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

// ----- gridded covariates ----------------------------------------------------

fn infer_axis(path: &str, mut coords: Vec<f64>, axis: &str) -> Result<(f64, f64, usize)> {
    coords.sort_by(f64::total_cmp);
    coords.dedup_by(|a, b| (*a - *b).abs() <= 1e-9 * a.abs().max(1.0));
    if coords.len() < 2 {
        return Err(Error::ParseError {
            path: path.to_string(),
            row: 0,
            reason: format!("cannot infer the {axis} cell size from a single {axis} value"),
        });
    }
    let step = coords[1] - coords[0];
    for w in coords.windows(2) {
        if ((w[1] - w[0]) - step).abs() > 1e-6 * step {
            return Err(Error::ParseError {
                path: path.to_string(),
                row: 0,
                reason: format!(
                    "{axis} coordinates are not evenly spaced ({} vs step {step})",
                    w[1] - w[0]
                ),
            });
        }
    }
    Ok((coords[0], step, coords.len()))
}

/// Reads a gridded covariate field from CSV with header `x,y,var...`, one
/// row per cell center covering a full rectangle; the cell size is inferred
/// from the coordinate spacing. With `transpose` set, the `x` and `y`
/// columns are swapped at ingest (for sources whose grid was written
/// transposed).
pub fn read_grid_csv(path: &str, transpose: bool) -> Result<GridField> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.get(0) != Some("x") || headers.get(1) != Some("y") {
        return Err(Error::ParseError {
            path: path.to_string(),
            row: 1,
            reason: "header must start with 'x,y'".to_string(),
        });
    }
    let names: Vec<String> = headers.iter().skip(2).map(str::to_string).collect();
    let dim = names.len();

    let mut rows: Vec<(usize, f64, f64, Vec<f64>)> = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let row = record.position().map_or(0, |p| p.line() as usize);
        let mut x = parse_f64(path, row, "x", record.get(0).unwrap_or(""))?;
        let mut y = parse_f64(path, row, "y", record.get(1).unwrap_or(""))?;
        if transpose {
            std::mem::swap(&mut x, &mut y);
        }
        let mut vals = Vec::with_capacity(dim);
        for (j, name) in names.iter().enumerate() {
            let raw = record.get(2 + j).ok_or_else(|| Error::ParseError {
                path: path.to_string(),
                row,
                reason: format!("missing value for column '{name}'"),
            })?;
            vals.push(parse_f64(path, row, name, raw)?);
        }
        rows.push((row, x, y, vals));
    }
    if rows.is_empty() {
        return Err(Error::ParseError {
            path: path.to_string(),
            row: 0,
            reason: "grid file has no data rows".to_string(),
        });
    }

    let (x0, dx, nx) = infer_axis(path, rows.iter().map(|r| r.1).collect(), "x")?;
    let (y0, dy, ny) = infer_axis(path, rows.iter().map(|r| r.2).collect(), "y")?;
    if rows.len() != nx * ny {
        return Err(Error::ParseError {
            path: path.to_string(),
            row: 0,
            reason: format!(
                "grid has {} rows but the coordinates span {nx}x{ny} = {} cells; \
                 the rectangle must be fully covered with no duplicates",
                rows.len(),
                nx * ny
            ),
        });
    }
    let mut values = vec![f64::NAN; nx * ny * dim];
    let mut seen = vec![false; nx * ny];
    for (row, x, y, vals) in rows {
        let fx = (x - x0) / dx;
        let fy = (y - y0) / dy;
        let ix = fx.round() as usize;
        let iy = fy.round() as usize;
        if (fx - ix as f64).abs() > 1e-6 || (fy - iy as f64).abs() > 1e-6 {
            return Err(Error::ParseError {
                path: path.to_string(),
                row,
                reason: format!("cell center ({x}, {y}) is off the inferred lattice"),
            });
        }
        let cell = iy * nx + ix;
        if seen[cell] {
            return Err(Error::ParseError {
                path: path.to_string(),
                row,
                reason: format!("duplicate cell center ({x}, {y})"),
            });
        }
        seen[cell] = true;
        values[cell * dim..(cell + 1) * dim].copy_from_slice(&vals);
    }
    GridField::new(Location::new(x0, y0), dx, dy, nx, ny, names, values)
}

// ----- areal covariates -------------------------------------------------------

fn json_polygon(path: &str, geometry: &serde_json::Value) -> Result<Polygon> {
    let bad = |reason: String| Error::ParseError { path: path.to_string(), row: 0, reason };
    if geometry["type"] != "Polygon" {
        return Err(bad(format!(
            "unsupported geometry type {}; only Polygon features are accepted",
            geometry["type"]
        )));
    }
    let rings = geometry["coordinates"]
        .as_array()
        .ok_or_else(|| bad("Polygon coordinates must be an array of rings".into()))?;
    if rings.len() != 1 {
        return Err(bad(format!(
            "polygon has {} rings; holes are not supported",
            rings.len()
        )));
    }
    let mut vertices = Vec::new();
    for v in rings[0].as_array().unwrap_or(&Vec::new()) {
        let pair = v.as_array().filter(|p| p.len() == 2);
        let (x, y) = match pair {
            Some(p) => (p[0].as_f64(), p[1].as_f64()),
            None => (None, None),
        };
        match (x, y) {
            (Some(x), Some(y)) => vertices.push(Location::new(x, y)),
            _ => return Err(bad(format!("malformed coordinate pair {v}"))),
        }
    }
    Polygon::new(vertices)
}

/// Reads an areal covariate partition from a GeoJSON FeatureCollection of
/// Polygon features with numeric properties. One feature must carry the
/// property `"window": true` and describes the observation window (its other
/// properties are ignored); every other feature is one areal unit, and all
/// units must share the same numeric property keys, which become covariate
/// names in sorted order. A single-feature file doubles as its own window.
pub fn read_areal_geojson(path: &str) -> Result<ArealPartition> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let doc: serde_json::Value =
        serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::ParseError {
            path: path.to_string(),
            row: e.line(),
            reason: e.to_string(),
        })?;
    let bad = |reason: String| Error::ParseError { path: path.to_string(), row: 0, reason };
    if doc["type"] != "FeatureCollection" {
        return Err(bad("expected a FeatureCollection".into()));
    }
    let features = doc["features"]
        .as_array()
        .ok_or_else(|| bad("FeatureCollection has no features array".into()))?;

    let mut window: Option<Polygon> = None;
    let mut units: Vec<ArealUnit> = Vec::new();
    let mut names: Vec<String> = Vec::new();
    for (idx, feature) in features.iter().enumerate() {
        let polygon = json_polygon(path, &feature["geometry"])?;
        let empty = serde_json::Map::new();
        let props = feature["properties"].as_object().unwrap_or(&empty);
        if props.get("window").and_then(|v| v.as_bool()) == Some(true) {
            if window.is_some() {
                return Err(bad("more than one feature is marked as the window".into()));
            }
            window = Some(polygon);
            continue;
        }
        // serde_json maps iterate in sorted key order, which fixes the
        // covariate column order deterministically
        let keys: Vec<String> = props
            .keys()
            .filter(|k| *k != "name" && *k != "window")
            .cloned()
            .collect();
        if units.is_empty() {
            names = keys;
        } else if names != keys {
            return Err(bad(format!(
                "feature {idx} has covariate keys {keys:?}, expected {names:?}"
            )));
        }
        let mut z = Vec::with_capacity(names.len());
        for key in &names {
            let v = props[key].as_f64().ok_or_else(|| {
                bad(format!("feature {idx}: property '{key}' is not a number"))
            })?;
            z.push(v);
        }
        units.push(ArealUnit { polygon, z });
    }

    let window = match window {
        Some(w) => w,
        None if units.len() == 1 => units[0].polygon.clone(),
        None => {
            return Err(bad(
                "no feature is marked with \"window\": true; a multi-unit \
                 partition needs an explicit window polygon"
                    .into(),
            ))
        }
    };
    ArealPartition::new(units, names, window)
}

// ----- integration schemes -----------------------------------------------------

/// Writes a scheme as CSV `x,y,weight,unit` for reproducibility audits.
pub fn write_scheme_csv(path: &str, scheme: &IntegrationScheme) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    wtr.write_record(["x", "y", "weight", "unit"])
        .map_err(|e| csv_error(path, e))?;
    for i in 0..scheme.len() {
        let p = scheme.points()[i];
        wtr.write_record([
            p.x.to_string(),
            p.y.to_string(),
            scheme.weights()[i].to_string(),
            scheme.unit_index()[i].to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a scheme written by [`write_scheme_csv`].
pub fn read_scheme_csv(path: &str) -> Result<IntegrationScheme> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut points = Vec::new();
    let mut weights = Vec::new();
    let mut units = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let row = record.position().map_or(0, |p| p.line() as usize);
        points.push(Location::new(
            parse_f64(path, row, "x", record.get(0).unwrap_or(""))?,
            parse_f64(path, row, "y", record.get(1).unwrap_or(""))?,
        ));
        weights.push(parse_f64(path, row, "weight", record.get(2).unwrap_or(""))?);
        let raw = record.get(3).unwrap_or("");
        units.push(raw.parse::<usize>().map_err(|_| Error::ParseError {
            path: path.to_string(),
            row,
            reason: format!("column 'unit': cannot parse '{raw}' as an index"),
        })?);
    }
    IntegrationScheme::from_parts(points, weights, units)
}

/// Writes knot locations as CSV `x,y` (plot-ready).
pub fn write_knots_csv(path: &str, knots: &[Location]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    wtr.write_record(["x", "y"]).map_err(|e| csv_error(path, e))?;
    for k in knots {
        wtr.write_record([k.x.to_string(), k.y.to_string()])
            .map_err(|e| csv_error(path, e))?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

// ----- chains and summaries ------------------------------------------------------

/// Writes the retained samples as CSV, one row per sample, columns in
/// `param_names` order.
pub fn write_chain_csv(path: &str, chain: &PosteriorChain) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    wtr.write_record(&chain.param_names)
        .map_err(|e| csv_error(path, e))?;
    for row in &chain.samples {
        let rec: Vec<String> = row.iter().map(f64::to_string).collect();
        wtr.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a chain CSV back as `(param_names, samples)`.
pub fn read_chain_csv(path: &str) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let names: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut samples = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let row = record.position().map_or(0, |p| p.line() as usize);
        let mut sample = Vec::with_capacity(names.len());
        for (j, name) in names.iter().enumerate() {
            sample.push(parse_f64(path, row, name, record.get(j).unwrap_or(""))?);
        }
        samples.push(sample);
    }
    Ok((names, samples))
}

/// Writes a posterior summary table as CSV.
pub fn write_summary_csv(path: &str, table: &SummaryTable) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    wtr.write_record([
        "parameter",
        "mean",
        "sd",
        "q2.5",
        "q97.5",
        "excludes_zero",
        "ess",
        "mcse",
    ])
    .map_err(|e| csv_error(path, e))?;
    for r in &table.rows {
        wtr.write_record([
            r.name.clone(),
            r.mean.to_string(),
            r.sd.to_string(),
            r.lower.to_string(),
            r.upper.to_string(),
            r.excludes_zero.to_string(),
            r.ess.to_string(),
            r.mcse.to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

// ----- hashing ----------------------------------------------------------------

/// SHA-256 of a file's bytes, hex-encoded — the content hash recorded in run
/// manifests.
pub fn sha256_hex(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let mut file = File::open(path)
        .map_err(|e| Error::io(path.to_string_lossy().into_owned(), e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file
            .read(&mut buf)
            .map_err(|e| Error::io(path.to_string_lossy().into_owned(), e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

/// Writes a string to a file, creating parent directories.
pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| Error::io(parent.to_string_lossy().into_owned(), e))?;
    }
    let file = File::create(path)
        .map_err(|e| Error::io(path.to_string_lossy().into_owned(), e))?;
    let mut w = BufWriter::new(file);
    w.write_all(text.as_bytes())
        .map_err(|e| Error::io(path.to_string_lossy().into_owned(), e))?;
    w.flush()
        .map_err(|e| Error::io(path.to_string_lossy().into_owned(), e))?;
    Ok(())
}
