//! File formats: GeoJSON isolines and buildings, LOD2 height JSONL, census
//! CSV and generic JSONL artifacts.

use crate::buildings::{CensusPoint, Lod2Record};
use crate::geometry::{
    reproject_to_mercator, Crs, GeoMultiPolygon, IsolineRecord, Point, Polygon, Ring,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_owned(),
        source,
    }
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Write-to-temp-then-rename; parent directories are created.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension(format!(
        "tmp.{}.{}",
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| DataError::Parse {
            path: path.to_owned(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut s = String::new();
    for item in items {
        s.push_str(&serde_json::to_string(item).expect("serializable artifact"));
        s.push('\n');
    }
    s
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    write_atomic(path, to_jsonl(items).as_bytes()).map_err(io_err(path))
}

/// Appends one JSON line; used for resumable manifests.
pub fn append_jsonl<T: Serialize>(path: &Path, item: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(path))?;
    }
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    let mut line = serde_json::to_string(item).expect("serializable artifact");
    line.push('\n');
    f.write_all(line.as_bytes()).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| DataError::Parse {
        path: path.to_owned(),
        line: e.line(),
        message: e.to_string(),
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable artifact");
    text.push('\n');
    write_atomic(path, text.as_bytes()).map_err(io_err(path))
}

fn crs_from_member(v: &Value) -> std::result::Result<Option<Crs>, String> {
    let Some(name) = v.pointer("/properties/name").and_then(Value::as_str) else {
        return Ok(None);
    };
    if name.contains("3857") || name.contains("900913") {
        Ok(Some(Crs::WebMercator))
    } else if name.contains("4326") || name.contains("CRS84") {
        Ok(Some(Crs::Wgs84))
    } else {
        Err(format!("unsupported CRS {name}"))
    }
}

fn parse_ring(v: &Value) -> std::result::Result<Ring, String> {
    v.as_array()
        .ok_or("ring is not an array")?
        .iter()
        .map(|p| {
            let xy = p.as_array().filter(|a| a.len() >= 2).ok_or("position needs two numbers")?;
            match (xy[0].as_f64(), xy[1].as_f64()) {
                (Some(x), Some(y)) => Ok(Point::new(x, y)),
                _ => Err("non-numeric coordinate".to_string()),
            }
        })
        .collect()
}

fn parse_polygon(v: &Value) -> std::result::Result<Polygon, String> {
    let rings = v.as_array().ok_or("polygon is not an array of rings")?;
    let mut rings = rings.iter().map(parse_ring);
    let exterior = rings.next().ok_or("polygon has no rings")??;
    Ok(Polygon {
        exterior,
        holes: rings.collect::<std::result::Result<_, _>>()?,
    })
}

/// Parses a GeoJSON Polygon or MultiPolygon geometry object.
pub fn parse_geometry(v: &Value, crs: Crs) -> std::result::Result<GeoMultiPolygon, String> {
    let coords = v.get("coordinates").ok_or("geometry without coordinates")?;
    let polygons = match v.get("type").and_then(Value::as_str) {
        Some("Polygon") => vec![parse_polygon(coords)?],
        Some("MultiPolygon") => coords
            .as_array()
            .ok_or("MultiPolygon coordinates are not an array")?
            .iter()
            .map(parse_polygon)
            .collect::<std::result::Result<_, _>>()?,
        Some(other) => return Err(format!("unsupported geometry type {other}")),
        None => return Err("geometry without type".into()),
    };
    GeoMultiPolygon::new(crs, polygons).map_err(|e| e.to_string())
}

/// One feature of a collection with its resolved CRS.
#[derive(Debug, Clone)]
pub struct RawFeature {
    pub index: usize,
    pub id: Option<String>,
    pub crs: std::result::Result<Crs, String>,
    pub geometry: Option<Value>,
    pub properties: Map<String, Value>,
}

#[derive(Debug, Clone)]
pub struct FeatureCollection {
    pub crs: Crs,
    pub features: Vec<RawFeature>,
}

fn value_to_id(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

pub fn parse_feature_collection(path: &Path, text: &str) -> Result<FeatureCollection> {
    let fmt_err = |message: String| DataError::Format {
        path: path.to_owned(),
        message,
    };
    let root: Value = serde_json::from_str(text).map_err(|e| DataError::Parse {
        path: path.to_owned(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if root.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
        return Err(fmt_err("expected a GeoJSON FeatureCollection".into()));
    }
    let crs = match root.get("crs") {
        Some(c) => crs_from_member(c).map_err(fmt_err)?.unwrap_or(Crs::Wgs84),
        None => Crs::Wgs84,
    };
    let features = root
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| fmt_err("FeatureCollection without features".into()))?
        .iter()
        .enumerate()
        .map(|(index, f)| {
            let properties = f
                .get("properties")
                .and_then(Value::as_object)
                .cloned()
                .unwrap_or_default();
            let id = properties
                .get("id")
                .and_then(value_to_id)
                .or_else(|| f.get("id").and_then(value_to_id));
            let feature_crs = match f.get("crs").map(crs_from_member) {
                None | Some(Ok(None)) => Ok(crs),
                Some(Ok(Some(c))) if c == crs => Ok(c),
                Some(Ok(Some(c))) => Err(format!(
                    "mixed CRS: feature declares {c:?} but the collection is {crs:?}"
                )),
                Some(Err(e)) => Err(e),
            };
            RawFeature {
                index,
                id,
                crs: feature_crs,
                geometry: f.get("geometry").cloned(),
                properties,
            }
        })
        .collect();
    Ok(FeatureCollection { crs, features })
}

pub fn read_feature_collection(path: &Path) -> Result<FeatureCollection> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_feature_collection(path, &text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reject {
    pub index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub reason: String,
}

fn number_prop(props: &Map<String, Value>, key: &str) -> std::result::Result<Option<f64>, String> {
    match props.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => v
            .as_f64()
            .map(Some)
            .ok_or_else(|| format!("{key} is not a number")),
    }
}

fn isoline_from_feature(f: &RawFeature) -> std::result::Result<IsolineRecord, String> {
    let crs = f.crs.clone()?;
    let id = f.id.clone().ok_or("missing id")?;
    let required = |key: &str| -> std::result::Result<f64, String> {
        number_prop(&f.properties, key)?.ok_or_else(|| format!("missing {key}"))
    };
    let heat_demand_mwh_a = required("heat_demand_mwh_a")?;
    let area_m2 = required("area_m2")?;
    let perimeter_m = required("perimeter_m")?;
    let baseline_prediction_mwh_a = number_prop(&f.properties, "baseline_prediction_mwh_a")?;
    let geometry = parse_geometry(f.geometry.as_ref().ok_or("missing geometry")?, crs)?;
    let geometry = geometry.to_mercator().map_err(|e| e.to_string())?;
    let rec = IsolineRecord {
        id,
        geometry,
        heat_demand_mwh_a,
        area_m2,
        perimeter_m,
        baseline_prediction_mwh_a,
    };
    rec.validate().map_err(|e| e.to_string())?;
    Ok(rec)
}

/// Validated isolines (reprojected to Web Mercator) plus per-feature rejects.
pub fn parse_isolines(fc: &FeatureCollection) -> (Vec<IsolineRecord>, Vec<Reject>) {
    let mut records: Vec<IsolineRecord> = Vec::new();
    let mut rejects = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for f in &fc.features {
        match isoline_from_feature(f) {
            Ok(rec) if !seen.insert(rec.id.clone()) => rejects.push(Reject {
                index: f.index,
                id: Some(rec.id),
                reason: "duplicate id".into(),
            }),
            Ok(rec) => {
                if let Ok(m) = rec.area_mismatch() {
                    if m > 0.02 {
                        log::warn!(
                            "isoline {}: metadata area differs from geometry by {:.1}%",
                            rec.id,
                            m * 100.0
                        );
                    }
                }
                records.push(rec)
            }
            Err(reason) => rejects.push(Reject {
                index: f.index,
                id: f.id.clone(),
                reason,
            }),
        }
    }
    (records, rejects)
}

/// A building footprint with its OSM-style tags, in Web Mercator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildingFeature {
    pub id: String,
    pub footprint: GeoMultiPolygon,
    pub tags: BTreeMap<String, String>,
}

/// Tags come from `properties.tags` when present, else from all scalar properties.
pub fn parse_buildings(fc: &FeatureCollection) -> (Vec<BuildingFeature>, Vec<Reject>) {
    let mut out = Vec::new();
    let mut rejects = Vec::new();
    for f in &fc.features {
        let parsed = (|| -> std::result::Result<BuildingFeature, String> {
            let crs = f.crs.clone()?;
            let id = f.id.clone().unwrap_or_else(|| format!("building-{}", f.index));
            let geometry = parse_geometry(f.geometry.as_ref().ok_or("missing geometry")?, crs)?;
            let footprint = geometry.to_mercator().map_err(|e| e.to_string())?;
            let source = match f.properties.get("tags").and_then(Value::as_object) {
                Some(tags) => tags,
                None => &f.properties,
            };
            let tags = source
                .iter()
                .filter(|(k, _)| k.as_str() != "id")
                .filter_map(|(k, v)| match v {
                    Value::String(s) => Some((k.clone(), s.clone())),
                    Value::Number(n) => Some((k.clone(), n.to_string())),
                    Value::Bool(b) => Some((k.clone(), b.to_string())),
                    _ => None,
                })
                .collect();
            Ok(BuildingFeature { id, footprint, tags })
        })();
        match parsed {
            Ok(b) => out.push(b),
            Err(reason) => rejects.push(Reject {
                index: f.index,
                id: f.id.clone(),
                reason,
            }),
        }
    }
    (out, rejects)
}

pub fn read_lod2(path: &Path) -> Result<Vec<Lod2Record>> {
    read_jsonl(path)
}

#[derive(Debug, Deserialize)]
struct CensusRow {
    lon: f64,
    lat: f64,
    decade_label: String,
}

/// Census CSV with columns `lon, lat, decade_label`; ids follow row order.
pub fn read_census(path: &Path) -> Result<Vec<CensusPoint>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| DataError::Format {
            path: path.to_owned(),
            message: e.to_string(),
        })?;
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<CensusRow>().enumerate() {
        let parse_err = |message: String| DataError::Parse {
            path: path.to_owned(),
            line: i + 2,
            message,
        };
        let row = row.map_err(|e| parse_err(e.to_string()))?;
        let (x, y) = reproject_to_mercator(row.lon, row.lat).map_err(|e| parse_err(e.to_string()))?;
        out.push(CensusPoint {
            id: i,
            location: Point::new(x, y),
            decade_label: row.decade_label,
        });
    }
    Ok(out)
}
