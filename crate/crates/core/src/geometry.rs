//! Polygon representation, WGS84 ↔ Web Mercator reprojection and per-isoline
//! metrics (area, perimeter, centroid, sampling window).

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Web Mercator sphere radius (EPSG:3857), meters.
pub const EARTH_RADIUS_M: f64 = 6_378_137.0;
/// Half the Mercator world extent, meters.
pub const MERCATOR_HALF_EXTENT_M: f64 = PI * EARTH_RADIUS_M;
/// Latitude bound of the square Mercator world.
pub const MAX_MERCATOR_LAT: f64 = 85.05113;
/// Margin applied to the larger bbox side when building a sampling window.
pub const WINDOW_MARGIN: f64 = 1.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("latitude {0} outside the Web Mercator range (|lat| < {MAX_MERCATOR_LAT})")]
    LatitudeOutOfRange(f64),
    #[error("longitude {0} outside [-180, 180]")]
    LongitudeOutOfRange(f64),
    #[error("non-finite coordinate ({0}, {1})")]
    NonFinite(f64, f64),
    #[error("ring {ring} of polygon {polygon} is not closed")]
    OpenRing { polygon: usize, ring: usize },
    #[error("ring {ring} of polygon {polygon} has {len} vertices, at least 4 required")]
    ShortRing { polygon: usize, ring: usize, len: usize },
    #[error("ring {ring} of polygon {polygon} is degenerate (zero area)")]
    DegenerateRing { polygon: usize, ring: usize },
    #[error("geometry has no polygons")]
    Empty,
    #[error("expected {expected:?} coordinates, found {found:?}")]
    WrongCrs { expected: Crs, found: Crs },
    #[error("geometry has zero extent")]
    ZeroExtent,
    #[error("invalid isoline record {id}: {reason}")]
    InvalidRecord { id: String, reason: String },
}

pub type Result<T> = std::result::Result<T, GeometryError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Crs {
    #[serde(rename = "EPSG:4326")]
    Wgs84,
    #[serde(rename = "EPSG:3857")]
    WebMercator,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

impl From<(f64, f64)> for Point {
    fn from((x, y): (f64, f64)) -> Self {
        Self { x, y }
    }
}

/// Closed vertex ring; first vertex repeats as the last.
pub type Ring = Vec<Point>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub exterior: Ring,
    #[serde(default)]
    pub holes: Vec<Ring>,
}

impl Polygon {
    pub fn new(exterior: Ring, holes: Vec<Ring>) -> Self {
        Self { exterior, holes }
    }

    pub fn rings(&self) -> impl Iterator<Item = &Ring> {
        std::iter::once(&self.exterior).chain(self.holes.iter())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoMultiPolygon {
    pub crs: Crs,
    pub polygons: Vec<Polygon>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl BBox {
    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }

    pub fn center(&self) -> Point {
        Point::new(
            0.5 * (self.min_x + self.max_x),
            0.5 * (self.min_y + self.max_y),
        )
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.min_x && p.x <= self.max_x && p.y >= self.min_y && p.y <= self.max_y
    }

    pub fn contains_bbox(&self, other: &BBox) -> bool {
        self.min_x <= other.min_x
            && self.min_y <= other.min_y
            && self.max_x >= other.max_x
            && self.max_y >= other.max_y
    }
}

/// Builds a closed ring from an open or closed vertex list.
pub fn closed_ring<P: Into<Point> + Copy>(pts: &[P]) -> Ring {
    let mut ring: Ring = pts.iter().map(|&p| p.into()).collect();
    if let (Some(first), Some(last)) = (ring.first().copied(), ring.last().copied()) {
        if first != last {
            ring.push(first);
        }
    }
    ring
}

/// Axis-aligned rectangle as a closed counter-clockwise ring.
pub fn rect_ring(min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> Ring {
    closed_ring(&[
        (min_x, min_y),
        (max_x, min_y),
        (max_x, max_y),
        (min_x, max_y),
    ])
}

pub fn reproject_to_mercator(lon: f64, lat: f64) -> Result<(f64, f64)> {
    if !lon.is_finite() || !lat.is_finite() {
        return Err(GeometryError::NonFinite(lon, lat));
    }
    if lat.abs() >= MAX_MERCATOR_LAT {
        return Err(GeometryError::LatitudeOutOfRange(lat));
    }
    if lon.abs() > 180.0 {
        return Err(GeometryError::LongitudeOutOfRange(lon));
    }
    let x = EARTH_RADIUS_M * lon.to_radians();
    let y = EARTH_RADIUS_M * lat.to_radians().sin().atanh();
    Ok((x, y))
}

/// Inverse of [`reproject_to_mercator`]; returns (lon, lat) in degrees.
pub fn mercator_to_wgs84(x: f64, y: f64) -> Result<(f64, f64)> {
    if !x.is_finite() || !y.is_finite() {
        return Err(GeometryError::NonFinite(x, y));
    }
    let lon = (x / EARTH_RADIUS_M).to_degrees();
    let lat = (y / EARTH_RADIUS_M).sinh().atan().to_degrees();
    if lon.abs() > 180.0 + 1e-9 {
        return Err(GeometryError::LongitudeOutOfRange(lon));
    }
    Ok((lon, lat))
}

fn ring_length(ring: &[Point]) -> f64 {
    ring.windows(2)
        .map(|w| (w[1].x - w[0].x).hypot(w[1].y - w[0].y))
        .sum()
}

/// Returns (signed area, first moment x, first moment y) of a ring.
fn ring_moments(ring: &[Point]) -> (f64, f64, f64) {
    let (mut a, mut mx, mut my) = (0.0, 0.0, 0.0);
    for w in ring.windows(2) {
        let cross = w[0].x * w[1].y - w[1].x * w[0].y;
        a += cross;
        mx += (w[0].x + w[1].x) * cross;
        my += (w[0].y + w[1].y) * cross;
    }
    (a * 0.5, mx / 6.0, my / 6.0)
}

impl GeoMultiPolygon {
    pub fn new(crs: Crs, polygons: Vec<Polygon>) -> Result<Self> {
        let g = Self { crs, polygons };
        g.validate()?;
        Ok(g)
    }

    /// Single-polygon convenience constructor in Web Mercator.
    pub fn mercator(exterior: Ring, holes: Vec<Ring>) -> Result<Self> {
        Self::new(Crs::WebMercator, vec![Polygon::new(exterior, holes)])
    }

    pub fn validate(&self) -> Result<()> {
        if self.polygons.is_empty() {
            return Err(GeometryError::Empty);
        }
        for (pi, poly) in self.polygons.iter().enumerate() {
            for (ri, ring) in poly.rings().enumerate() {
                if ring.len() < 4 {
                    return Err(GeometryError::ShortRing {
                        polygon: pi,
                        ring: ri,
                        len: ring.len(),
                    });
                }
                if ring.first() != ring.last() {
                    return Err(GeometryError::OpenRing { polygon: pi, ring: ri });
                }
                for p in ring {
                    if !p.x.is_finite() || !p.y.is_finite() {
                        return Err(GeometryError::NonFinite(p.x, p.y));
                    }
                    if self.crs == Crs::Wgs84 {
                        if p.y.abs() >= MAX_MERCATOR_LAT {
                            return Err(GeometryError::LatitudeOutOfRange(p.y));
                        }
                        if p.x.abs() > 180.0 {
                            return Err(GeometryError::LongitudeOutOfRange(p.x));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn require(&self, crs: Crs) -> Result<()> {
        if self.crs != crs {
            return Err(GeometryError::WrongCrs {
                expected: crs,
                found: self.crs,
            });
        }
        Ok(())
    }

    /// Reprojects to Web Mercator; a no-op for geometries already in it.
    pub fn to_mercator(&self) -> Result<Self> {
        if self.crs == Crs::WebMercator {
            return Ok(self.clone());
        }
        let project = |ring: &Ring| -> Result<Ring> {
            ring.iter()
                .map(|p| reproject_to_mercator(p.x, p.y).map(Point::from))
                .collect()
        };
        let polygons = self
            .polygons
            .iter()
            .map(|poly| {
                Ok(Polygon {
                    exterior: project(&poly.exterior)?,
                    holes: poly.holes.iter().map(project).collect::<Result<_>>()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            crs: Crs::WebMercator,
            polygons,
        })
    }

    /// Union bbox over every member polygon.
    pub fn bbox(&self) -> BBox {
        let mut b = BBox {
            min_x: f64::INFINITY,
            min_y: f64::INFINITY,
            max_x: f64::NEG_INFINITY,
            max_y: f64::NEG_INFINITY,
        };
        for p in self.polygons.iter().flat_map(|poly| poly.exterior.iter()) {
            b.min_x = b.min_x.min(p.x);
            b.min_y = b.min_y.min(p.y);
            b.max_x = b.max_x.max(p.x);
            b.max_y = b.max_y.max(p.y);
        }
        b
    }

    /// Even-odd containment over all rings of all polygons.
    pub fn contains(&self, p: Point) -> bool {
        let mut inside = false;
        for ring in self.polygons.iter().flat_map(|poly| poly.rings()) {
            for w in ring.windows(2) {
                let (a, b) = (w[0], w[1]);
                if (a.y > p.y) != (b.y > p.y) {
                    let x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
                    if p.x < x {
                        inside = !inside;
                    }
                }
            }
        }
        inside
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        self.map_points(|p| Point::new(p.x + dx, p.y + dy))
    }

    pub fn map_points(&self, f: impl Fn(Point) -> Point) -> Self {
        let map_ring = |r: &Ring| r.iter().copied().map(&f).collect::<Ring>();
        Self {
            crs: self.crs,
            polygons: self
                .polygons
                .iter()
                .map(|poly| Polygon {
                    exterior: map_ring(&poly.exterior),
                    holes: poly.holes.iter().map(map_ring).collect(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolygonMetrics {
    pub area_m2: f64,
    pub perimeter_m: f64,
    pub centroid: Point,
    pub bbox: BBox,
}

/// Shoelace area (outer rings minus holes), outer-ring perimeter and
/// area-weighted centroid of a Web Mercator multipolygon.
pub fn polygon_metrics(g: &GeoMultiPolygon) -> Result<PolygonMetrics> {
    g.require(Crs::WebMercator)?;
    g.validate()?;
    let (mut area, mut mx, mut my, mut perimeter) = (0.0, 0.0, 0.0, 0.0);
    for (pi, poly) in g.polygons.iter().enumerate() {
        for (ri, ring) in poly.rings().enumerate() {
            let (a, rx, ry) = ring_moments(ring);
            if a == 0.0 {
                return Err(GeometryError::DegenerateRing { polygon: pi, ring: ri });
            }
            // Orientation-independent: exterior adds, holes subtract.
            let sign = if ri == 0 { 1.0 } else { -1.0 } * a.signum();
            area += sign * a;
            mx += sign * rx;
            my += sign * ry;
        }
        perimeter += ring_length(&poly.exterior);
    }
    if area <= 0.0 {
        return Err(GeometryError::DegenerateRing { polygon: 0, ring: 0 });
    }
    Ok(PolygonMetrics {
        area_m2: area,
        perimeter_m: perimeter,
        centroid: Point::new(mx / area, my / area),
        bbox: g.bbox(),
    })
}

/// Square capture window in Web Mercator meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingWindow {
    pub center: Point,
    pub side_m: f64,
}

impl SamplingWindow {
    pub fn new(center: Point, side_m: f64) -> Self {
        Self { center, side_m }
    }

    pub fn half(&self) -> f64 {
        0.5 * self.side_m
    }

    pub fn bbox(&self) -> BBox {
        let h = self.half();
        BBox {
            min_x: self.center.x - h,
            min_y: self.center.y - h,
            max_x: self.center.x + h,
            max_y: self.center.y + h,
        }
    }

    /// Corners in (min_x,min_y), (max_x,min_y), (max_x,max_y), (min_x,max_y) order.
    pub fn corners(&self) -> [Point; 4] {
        let b = self.bbox();
        [
            Point::new(b.min_x, b.min_y),
            Point::new(b.max_x, b.min_y),
            Point::new(b.max_x, b.max_y),
            Point::new(b.min_x, b.max_y),
        ]
    }

    /// Latitude of the window center in degrees.
    pub fn center_latitude(&self) -> f64 {
        mercator_to_wgs84(self.center.x, self.center.y)
            .map(|(_, lat)| lat)
            .unwrap_or(0.0)
    }
}

/// Window of side `1.05 · max(width, height)` centered on the area-weighted centroid.
pub fn sampling_window(g: &GeoMultiPolygon) -> Result<SamplingWindow> {
    let m = polygon_metrics(g)?;
    let extent = m.bbox.width().max(m.bbox.height());
    if !(extent > 0.0) {
        return Err(GeometryError::ZeroExtent);
    }
    Ok(SamplingWindow::new(m.centroid, WINDOW_MARGIN * extent))
}

/// One municipal isoline with its reported heat demand and GIS attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolineRecord {
    pub id: String,
    pub geometry: GeoMultiPolygon,
    pub heat_demand_mwh_a: f64,
    pub area_m2: f64,
    pub perimeter_m: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_prediction_mwh_a: Option<f64>,
}

/// Relative slack on the isoperimetric inequality.
const ISOPERIMETRIC_TOL: f64 = 1e-3;

impl IsolineRecord {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| GeometryError::InvalidRecord {
            id: self.id.clone(),
            reason,
        };
        if !(self.area_m2 > 0.0) || !self.area_m2.is_finite() {
            return Err(bad(format!("area_m2 must be positive, got {}", self.area_m2)));
        }
        if !(self.perimeter_m > 0.0) || !self.perimeter_m.is_finite() {
            return Err(bad(format!(
                "perimeter_m must be positive, got {}",
                self.perimeter_m
            )));
        }
        if !(self.heat_demand_mwh_a >= 0.0) || !self.heat_demand_mwh_a.is_finite() {
            return Err(bad(format!(
                "heat_demand_mwh_a must be non-negative, got {}",
                self.heat_demand_mwh_a
            )));
        }
        if let Some(b) = self.baseline_prediction_mwh_a {
            if !(b >= 0.0) || !b.is_finite() {
                return Err(bad(format!(
                    "baseline_prediction_mwh_a must be non-negative, got {b}"
                )));
            }
        }
        let lhs = self.perimeter_m * self.perimeter_m;
        let rhs = 4.0 * PI * self.area_m2;
        if lhs < rhs * (1.0 - ISOPERIMETRIC_TOL) {
            return Err(bad(format!(
                "perimeter {} too short for area {} (isoperimetric bound)",
                self.perimeter_m, self.area_m2
            )));
        }
        self.geometry.validate()
    }

    /// Relative deviation between metadata area and the geometry's area,
    /// with the Mercator area scaled back to ground meters at the centroid.
    pub fn area_mismatch(&self) -> Result<f64> {
        let m = polygon_metrics(&self.geometry.to_mercator()?)?;
        let scale = mercator_scale(m.centroid.y);
        let ground = m.area_m2 / (scale * scale);
        Ok((ground - self.area_m2).abs() / self.area_m2)
    }
}

/// Mercator scale factor (projected meters per ground meter) at northing `y`.
pub fn mercator_scale(y: f64) -> f64 {
    (y / EARTH_RADIUS_M).cosh()
}
