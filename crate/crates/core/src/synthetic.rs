//! Procedural test world: convex isolines over a smooth vegetation field,
//! a tile client that paints the field, buildings with LOD2 heights and a
//! census grid. Targets mix area, vegetation and building composition so an
//! end-to-end run can be checked against known structure.

use crate::geometry::{mercator_to_wgs84, reproject_to_mercator, Point, EARTH_RADIUS_M};
use crate::hashing::fnv1a64;
use crate::imagery::{RasterImage, TileClient, TransportError, TILE_SIZE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const SCHEME: &str = "synthetic://";
/// Mercator origin of the world (western Germany).
const ORIGIN_LON: f64 = 8.0;
const ORIGIN_LAT: f64 = 49.9;
/// Ground spacing of the isoline grid cells.
const CELL_M: f64 = 600.0;
const GRAY: [f64; 3] = [128.0, 128.0, 128.0];
const GREEN: [f64; 3] = [40.0, 160.0, 60.0];
/// Half-width of the uniform per-pixel color noise.
const NOISE_AMPLITUDE: f64 = 12.0;
const DECADES: [&str; 6] = ["pre-1919", "1919-1948", "1949-1978", "1979-1990", "1991-2000", "2001-2011"];

/// Smooth vegetation cover in [0, 1] over Web Mercator meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VegetationField {
    phase: [f64; 2],
    wavelength_m: [f64; 2],
}

impl VegetationField {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7665_6765);
        Self {
            phase: [rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI)],
            wavelength_m: [rng.gen_range(5_000.0..7_000.0), rng.gen_range(4_000.0..6_000.0)],
        }
    }

    pub fn value(&self, p: Point) -> f64 {
        let a = (2.0 * PI * p.x / self.wavelength_m[0] + self.phase[0]).sin();
        let b = (2.0 * PI * p.y / self.wavelength_m[1] + self.phase[1]).sin();
        0.5 + 0.25 * a + 0.25 * b
    }

    /// Pixel color at `p`: gray blended toward green by the field, plus
    /// zero-mean noise keyed by `noise_key`.
    pub fn color(&self, p: Point, noise_key: u64) -> [u8; 3] {
        let u = self.value(p);
        let mut out = [0u8; 3];
        for c in 0..3 {
            let h = fnv1a64(noise_key, &[c as u8]);
            let noise = ((h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0) * NOISE_AMPLITUDE;
            out[c] = (GRAY[c] + (GREEN[c] - GRAY[c]) * u + noise).round().clamp(0.0, 255.0) as u8;
        }
        out
    }
}

/// Serves `synthetic://<seed>/{z}/{x}/{y}` tiles painted from the
/// vegetation field of `<seed>`.
#[derive(Debug, Default)]
pub struct ProceduralTileClient {
    pub calls: std::sync::atomic::AtomicUsize,
}

impl ProceduralTileClient {
    pub fn call_count(&self) -> usize {
        self.calls.load(std::sync::atomic::Ordering::SeqCst)
    }

    pub fn render(seed: u64, z: u8, x: u32, y: u32) -> RasterImage {
        let field = VegetationField::new(seed);
        let span = crate::imagery::tile_span(z);
        let half = crate::geometry::MERCATOR_HALF_EXTENT_M;
        let px = span / TILE_SIZE as f64;
        let mut data = Vec::with_capacity((TILE_SIZE * TILE_SIZE * 3) as usize);
        let tile_key = fnv1a64(seed, format!("{z}/{x}/{y}").as_bytes());
        for row in 0..TILE_SIZE {
            let my = half - (y as f64 * span) - (row as f64 + 0.5) * px;
            for col in 0..TILE_SIZE {
                let mx = -half + x as f64 * span + (col as f64 + 0.5) * px;
                let key = tile_key ^ ((row as u64) << 32 | col as u64);
                data.extend_from_slice(&field.color(Point::new(mx, my), key));
            }
        }
        RasterImage::new(TILE_SIZE, TILE_SIZE, 3, data).expect("tile buffer size")
    }
}

fn parse_synthetic_url(url: &str) -> Option<(u64, u8, u32, u32)> {
    let rest = url.strip_prefix(SCHEME)?;
    let parts: Vec<&str> = rest.split('/').collect();
    if parts.len() != 4 {
        return None;
    }
    let y = parts[3].trim_end_matches(".png");
    Some((parts[0].parse().ok()?, parts[1].parse().ok()?, parts[2].parse().ok()?, y.parse().ok()?))
}

impl TileClient for ProceduralTileClient {
    fn get(&self, url: &str) -> Result<Vec<u8>, TransportError> {
        self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        let (seed, z, x, y) =
            parse_synthetic_url(url).ok_or_else(|| TransportError(format!("bad synthetic tile url {url}")))?;
        Self::render(seed, z, x, y)
            .encode_png()
            .map_err(|e| TransportError(e.to_string()))
    }
}

pub fn tile_template(seed: u64) -> String {
    format!("{SCHEME}{seed}/{{z}}/{{x}}/{{y}}")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldParams {
    pub isolines: usize,
    pub seed: u64,
    /// Noise standard deviation as a fraction of the noiseless target's sd.
    pub noise_fraction: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            isolines: 300,
            seed: 7,
            noise_fraction: 0.05,
        }
    }
}

/// Ground-truth drivers of one synthetic isoline's target.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Latent {
    pub id: String,
    pub area_norm: f64,
    pub vegetation: f64,
    pub comp_mix: f64,
    pub y: f64,
}

pub struct World {
    pub isolines: Value,
    pub buildings: Value,
    pub lod2: Vec<Value>,
    pub census_csv: String,
    pub latents: Vec<Latent>,
    pub tile_template: String,
}

struct Shape {
    id: String,
    /// Mercator ring, closed.
    ring: Vec<Point>,
    area_ground: f64,
    perimeter_ground: f64,
    vegetation: f64,
    comp_mix: f64,
}

fn shoelace(ring: &[Point]) -> f64 {
    ring.windows(2).map(|w| w[0].x * w[1].y - w[1].x * w[0].y).sum::<f64>().abs() * 0.5
}

fn inside_convex(ring: &[Point], p: Point) -> bool {
    // Counter-clockwise ring: point is left of every edge.
    ring.windows(2)
        .all(|w| (w[1].x - w[0].x) * (p.y - w[0].y) - (w[1].y - w[0].y) * (p.x - w[0].x) >= 0.0)
}

fn ring_to_wgs84(ring: &[Point]) -> Value {
    Value::Array(
        ring.iter()
            .map(|p| {
                let (lon, lat) = mercator_to_wgs84(p.x, p.y).expect("world lies inside Mercator bounds");
                json!([lon, lat])
            })
            .collect(),
    )
}

/// Mean field value over a convex ring, sampled on a regular grid.
fn mean_over(field: &VegetationField, ring: &[Point]) -> f64 {
    let (min_x, max_x) = ring.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.x), b.max(p.x)));
    let (min_y, max_y) = ring.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.y), b.max(p.y)));
    const STEPS: usize = 40;
    let (mut sum, mut n) = (0.0, 0usize);
    for i in 0..STEPS {
        for j in 0..STEPS {
            let p = Point::new(
                min_x + (i as f64 + 0.5) / STEPS as f64 * (max_x - min_x),
                min_y + (j as f64 + 0.5) / STEPS as f64 * (max_y - min_y),
            );
            if inside_convex(ring, p) {
                sum += field.value(p);
                n += 1;
            }
        }
    }
    sum / n.max(1) as f64
}

/// Builds the world: isolines on a jittered grid (no overlaps), five to
/// twenty-five buildings inside each, a census point every 500 m and
/// targets `y = 1000 · (0.8·area_norm + 0.5·u + 0.3·comp_mix + ε)`.
pub fn generate_world(params: WorldParams) -> World {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let field = VegetationField::new(params.seed);
    let (ox, oy) = reproject_to_mercator(ORIGIN_LON, ORIGIN_LAT).expect("origin in range");
    let cols = (params.isolines as f64).sqrt().ceil() as usize;

    let mut shapes = Vec::with_capacity(params.isolines);
    let mut building_features = Vec::new();
    let mut lod2 = Vec::new();
    for i in 0..params.isolines {
        let (cx_g, cy_g) = ((i % cols) as f64 * CELL_M, (i / cols) as f64 * CELL_M);
        let center_y_guess = oy + cy_g;
        let scale = (center_y_guess / EARTH_RADIUS_M).cosh();
        let center = Point::new(
            ox + (cx_g + rng.gen_range(-40.0..40.0)) * scale,
            oy + (cy_g + rng.gen_range(-40.0..40.0)) * scale,
        );
        let radius = rng.gen_range(80.0..240.0) * scale;
        let vertices = rng.gen_range(5..=10);
        let mut angles: Vec<f64> = (0..vertices).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
        angles.sort_by(f64::total_cmp);
        // Keep the polygon fat: no angular gap wider than a half turn.
        for k in 0..vertices {
            angles[k] = angles[k] * 0.5 + (k as f64 / vertices as f64) * PI;
        }
        let mut ring: Vec<Point> = angles
            .iter()
            .map(|a| Point::new(center.x + radius * a.cos(), center.y + radius * a.sin()))
            .collect();
        ring.push(ring[0]);
        let area_merc = shoelace(&ring);
        let perim_merc: f64 = ring.windows(2).map(|w| (w[1].x - w[0].x).hypot(w[1].y - w[0].y)).sum();
        let id = format!("iso-{i:04}");

        // Buildings: square footprints whose centroids fall inside the ring.
        let mix: f64 = rng.gen_range(0.0..1.0);
        let count = rng.gen_range(5..=25);
        let (mut placed, mut mfh) = (0, 0);
        let mut attempts = 0;
        while placed < count && attempts < 2000 {
            attempts += 1;
            let c = Point::new(
                center.x + rng.gen_range(-radius..radius),
                center.y + rng.gen_range(-radius..radius),
            );
            if !inside_convex(&ring, c) {
                continue;
            }
            let half = rng.gen_range(4.0..10.0) * scale;
            let is_mfh = rng.gen_bool(mix);
            mfh += is_mfh as usize;
            let bid = format!("{id}-b{placed:02}");
            let sq = [
                Point::new(c.x - half, c.y - half),
                Point::new(c.x + half, c.y - half),
                Point::new(c.x + half, c.y + half),
                Point::new(c.x - half, c.y + half),
                Point::new(c.x - half, c.y - half),
            ];
            building_features.push(json!({
                "type": "Feature",
                "id": bid,
                "properties": { "building": if is_mfh { "apartments" } else { "detached" } },
                "geometry": { "type": "Polygon", "coordinates": [ring_to_wgs84(&sq)] },
            }));
            let height: f64 = if is_mfh { rng.gen_range(9.0..30.0) } else { rng.gen_range(3.0..10.0) };
            let ground = rng.gen_range(90.0..140.0);
            lod2.push(json!({
                "id": bid,
                "ground_z_m": ground,
                "roof_vertex_z_m": [ground + height, ground + height - 1.5, ground + height - 0.5],
            }));
            placed += 1;
        }
        shapes.push(Shape {
            id,
            vegetation: mean_over(&field, &ring),
            ring,
            area_ground: area_merc / (scale * scale),
            perimeter_ground: perim_merc / scale,
            comp_mix: mfh as f64 / placed.max(1) as f64,
        });
    }

    let (amin, amax) = shapes
        .iter()
        .fold((f64::MAX, f64::MIN), |(a, b), s| (a.min(s.area_ground), b.max(s.area_ground)));
    let signal: Vec<f64> = shapes
        .iter()
        .map(|s| 0.8 * (s.area_ground - amin) / (amax - amin) + 0.5 * s.vegetation + 0.3 * s.comp_mix)
        .collect();
    let mean = signal.iter().sum::<f64>() / signal.len() as f64;
    let sd = (signal.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / signal.len() as f64).sqrt();
    let sigma = params.noise_fraction * sd;

    let mut latents = Vec::with_capacity(shapes.len());
    let mut features = Vec::with_capacity(shapes.len());
    for (s, base) in shapes.iter().zip(&signal) {
        // Box-Muller from the world stream.
        let (u1, u2): (f64, f64) = (rng.gen_range(f64::EPSILON..1.0), rng.gen());
        let eps = sigma * (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos();
        let y = (1000.0 * (base + eps)).max(0.0);
        latents.push(Latent {
            id: s.id.clone(),
            area_norm: (s.area_ground - amin) / (amax - amin),
            vegetation: s.vegetation,
            comp_mix: s.comp_mix,
            y,
        });
        features.push(json!({
            "type": "Feature",
            "id": s.id,
            "properties": {
                "heat_demand_mwh_a": y,
                "area_m2": s.area_ground,
                "perimeter_m": s.perimeter_ground,
            },
            "geometry": { "type": "Polygon", "coordinates": [ring_to_wgs84(&s.ring)] },
        }));
    }

    // Census grid covering the world with 500 m spacing.
    let rows = params.isolines.div_ceil(cols);
    let mut census_csv = String::from("lon,lat,decade_label\n");
    let extent_x = cols as f64 * CELL_M;
    let extent_y = rows as f64 * CELL_M;
    let mut gy = -CELL_M / 2.0;
    while gy <= extent_y {
        let mut gx = -CELL_M / 2.0;
        while gx <= extent_x {
            let scale = ((oy + gy) / EARTH_RADIUS_M).cosh();
            let (lon, lat) = mercator_to_wgs84(ox + gx * scale, oy + gy * scale).expect("in range");
            let label = DECADES[rng.gen_range(0..DECADES.len())];
            let _ = writeln!(census_csv, "{lon:.9},{lat:.9},{label}");
            gx += 500.0;
        }
        gy += 500.0;
    }

    World {
        isolines: json!({ "type": "FeatureCollection", "features": features }),
        buildings: json!({ "type": "FeatureCollection", "features": building_features }),
        lod2,
        census_csv,
        latents,
        tile_template: tile_template(params.seed),
    }
}

/// Input files of a written world.
#[derive(Debug, Clone)]
pub struct WorldFiles {
    pub isolines: PathBuf,
    pub buildings: PathBuf,
    pub lod2: PathBuf,
    pub census: PathBuf,
    pub latents: PathBuf,
}

pub fn write_world(world: &World, dir: &Path) -> std::io::Result<WorldFiles> {
    std::fs::create_dir_all(dir)?;
    let files = WorldFiles {
        isolines: dir.join("isolines.geojson"),
        buildings: dir.join("buildings.geojson"),
        lod2: dir.join("lod2.jsonl"),
        census: dir.join("census.csv"),
        latents: dir.join("latents.jsonl"),
    };
    std::fs::write(&files.isolines, serde_json::to_string(&world.isolines)?)?;
    std::fs::write(&files.buildings, serde_json::to_string(&world.buildings)?)?;
    std::fs::write(&files.lod2, crate::io::to_jsonl(&world.lod2))?;
    std::fs::write(&files.census, &world.census_csv)?;
    std::fs::write(&files.latents, crate::io::to_jsonl(&world.latents))?;
    Ok(files)
}

/// Writes a world plus `heatprompt.toml` with relative paths that runs
/// offline against the procedural tiles. Returns the config path.
pub fn write_project(dir: &Path, params: WorldParams) -> std::io::Result<PathBuf> {
    use crate::config::{PathsConfig, RunConfig};
    let world = generate_world(params);
    let files = write_world(&world, dir)?;
    let rel = |p: &Path| PathBuf::from(p.file_name().expect("file path"));
    let mut cfg = RunConfig::new(PathsConfig {
        isolines: rel(&files.isolines),
        buildings: Some(rel(&files.buildings)),
        lod2: Some(rel(&files.lod2)),
        census: Some(rel(&files.census)),
        cache_dir: "cache".into(),
        output_dir: "out".into(),
    });
    cfg.seed = params.seed;
    cfg.imagery.tile_template = world.tile_template.clone();
    let path = dir.join("heatprompt.toml");
    std::fs::write(&path, cfg.to_toml())?;
    Ok(path)
}
