//! XYZ tile acquisition, Mercator mosaicking, mask rasterization and RGBA
//! composition for the 512×512 sample grid.

use crate::geometry::{GeoMultiPolygon, Crs, Point, SamplingWindow, MERCATOR_HALF_EXTENT_M};
use crate::hashing::sha256_hex;
use log::warn;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::time::Duration;
use thiserror::Error;

pub const TILE_SIZE: u32 = 256;
pub const OUTPUT_SIZE: u32 = 512;
pub const MAX_ZOOM: u8 = 19;
/// Equatorial ground resolution of a 256-px tile at zoom 0, meters per pixel.
pub const ZOOM0_RESOLUTION: f64 = 156_543.033_92;

#[derive(Debug, Error)]
pub enum ImageryError {
    #[error("{0}")]
    Domain(String),
    #[error("tile {coord}: transport failure after {attempts} attempt(s): {message}")]
    Transport {
        coord: TileCoord,
        attempts: u32,
        message: String,
    },
    #[error("tile {coord}: undecodable payload: {message}")]
    Format { coord: TileCoord, message: String },
    #[error("mosaic is missing tile {0}")]
    MissingTile(TileCoord),
    #[error("image encoding: {0}")]
    Encode(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ImageryError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileCoord {
    pub z: u8,
    pub x: u32,
    pub y: u32,
}

impl TileCoord {
    pub fn new(z: u8, x: u32, y: u32) -> Option<Self> {
        let n = 1u64 << z;
        (z <= MAX_ZOOM && (x as u64) < n && (y as u64) < n).then_some(Self { z, x, y })
    }
}

impl fmt::Display for TileCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.z, self.x, self.y)
    }
}

/// 8-bit raster, row-major, interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    pub width: u32,
    pub height: u32,
    pub channels: u8,
    pub data: Vec<u8>,
}

impl RasterImage {
    pub fn new(width: u32, height: u32, channels: u8, data: Vec<u8>) -> Result<Self> {
        if !matches!(channels, 1 | 3 | 4) {
            return Err(ImageryError::Domain(format!("unsupported channel count {channels}")));
        }
        let expected = width as usize * height as usize * channels as usize;
        if data.len() != expected {
            return Err(ImageryError::Domain(format!(
                "pixel buffer has {} bytes, expected {expected}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: u32, height: u32, pixel: &[u8]) -> Self {
        let data = pixel
            .iter()
            .copied()
            .cycle()
            .take(width as usize * height as usize * pixel.len())
            .collect();
        Self {
            width,
            height,
            channels: pixel.len() as u8,
            data,
        }
    }

    pub fn pixel(&self, x: u32, y: u32) -> &[u8] {
        let c = self.channels as usize;
        let i = (y as usize * self.width as usize + x as usize) * c;
        &self.data[i..i + c]
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            _ => image::ExtendedColorType::Rgba8,
        };
        let mut out = Vec::new();
        let encoder = image::codecs::png::PngEncoder::new(&mut out);
        image::ImageEncoder::write_image(encoder, &self.data, self.width, self.height, color)
            .map_err(|e| ImageryError::Encode(e.to_string()))?;
        Ok(out)
    }

    /// Decodes any supported format into the requested channel count.
    pub fn decode(bytes: &[u8], channels: u8) -> std::result::Result<Self, String> {
        let img = image::ImageReader::new(Cursor::new(bytes))
            .with_guessed_format()
            .map_err(|e| e.to_string())?
            .decode()
            .map_err(|e| e.to_string())?;
        let (w, h) = (img.width(), img.height());
        let data = match channels {
            1 => img.into_luma8().into_raw(),
            3 => img.into_rgb8().into_raw(),
            4 => img.into_rgba8().into_raw(),
            c => return Err(format!("unsupported channel count {c}")),
        };
        Ok(Self {
            width: w,
            height: h,
            channels,
            data,
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_png()?;
        write_atomic(path, &bytes)
    }

    pub fn load_png(path: &Path, channels: u8) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| ImageryError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::decode(&bytes, channels).map_err(ImageryError::Encode)
    }
}

/// Writes via a sibling temp file and rename so concurrent writers never
/// expose partial files.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    crate::io::write_atomic(path, bytes).map_err(|source| ImageryError::Io {
        path: path.to_owned(),
        source,
    })
}

/// Mercator meters per tile side at zoom `z`.
pub fn tile_span(z: u8) -> f64 {
    2.0 * MERCATOR_HALF_EXTENT_M / (1u64 << z) as f64
}

/// Ground meters per pixel of a 256-px tile at `lat_deg`.
pub fn ground_resolution(lat_deg: f64, z: u8) -> f64 {
    ZOOM0_RESOLUTION * lat_deg.to_radians().cos() / (1u64 << z) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZoomChoice {
    pub zoom: u8,
    /// True when even the maximum zoom is coarser than the window needs.
    pub clamped: bool,
}

/// Smallest zoom whose tile resolution is at least as fine as the window's
/// 512-px output resolution.
pub fn choose_zoom(window: &SamplingWindow) -> ZoomChoice {
    let required = window.side_m / OUTPUT_SIZE as f64;
    let lat = window.center_latitude();
    match (0..=MAX_ZOOM).find(|&z| ground_resolution(lat, z) <= required) {
        Some(zoom) => ZoomChoice { zoom, clamped: false },
        None => {
            warn!(
                "window side {:.3} m needs {:.4} m/px, finer than zoom {MAX_ZOOM}; clamping",
                window.side_m, required
            );
            ZoomChoice {
                zoom: MAX_ZOOM,
                clamped: true,
            }
        }
    }
}

/// Tile-pixel coordinates of a Mercator point at zoom `z` (y grows southward).
fn global_pixel(p: Point, z: u8) -> (f64, f64) {
    let scale = TILE_SIZE as f64 / tile_span(z);
    (
        (p.x + MERCATOR_HALF_EXTENT_M) * scale,
        (MERCATOR_HALF_EXTENT_M - p.y) * scale,
    )
}

/// Inclusive tile index range `(x0, y0, x1, y1)` covering the window.
fn tile_range(window: &SamplingWindow, z: u8) -> Result<(u32, u32, u32, u32)> {
    let b = window.bbox();
    let e = MERCATOR_HALF_EXTENT_M * (1.0 + 1e-12);
    if !(window.side_m > 0.0) || b.min_x < -e || b.max_x > e || b.min_y < -e || b.max_y > e {
        return Err(ImageryError::Domain(format!(
            "window [{:.3}, {:.3}]x[{:.3}, {:.3}] lies outside the Mercator extent",
            b.min_x, b.max_x, b.min_y, b.max_y
        )));
    }
    let span = tile_span(z);
    let n = (1u64 << z) as f64;
    let idx_lo = |v: f64| ((v / span).floor().clamp(0.0, n - 1.0)) as u32;
    let idx_hi = |v: f64| (((v / span).ceil() - 1.0).clamp(0.0, n - 1.0)) as u32;
    let x0 = idx_lo(b.min_x + MERCATOR_HALF_EXTENT_M);
    let x1 = idx_hi(b.max_x + MERCATOR_HALF_EXTENT_M).max(x0);
    let y0 = idx_lo(MERCATOR_HALF_EXTENT_M - b.max_y);
    let y1 = idx_hi(MERCATOR_HALF_EXTENT_M - b.min_y).max(y0);
    Ok((x0, y0, x1, y1))
}

/// Minimal covering tile rectangle in row-major order.
pub fn tiles_for_window(window: &SamplingWindow, zoom: u8) -> Result<Vec<TileCoord>> {
    if zoom > MAX_ZOOM {
        return Err(ImageryError::Domain(format!("zoom {zoom} exceeds {MAX_ZOOM}")));
    }
    let (x0, y0, x1, y1) = tile_range(window, zoom)?;
    Ok((y0..=y1)
        .flat_map(|y| (x0..=x1).map(move |x| TileCoord { z: zoom, x, y }))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportError(pub String);

impl fmt::Display for TransportError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for TransportError {}

/// Byte-level GET transport; mocked in tests.
pub trait TileClient: Send + Sync {
    fn get(&self, url: &str) -> std::result::Result<Vec<u8>, TransportError>;
}

/// Blocking HTTP(S) client backed by `ureq`.
pub struct HttpClient {
    agent: ureq::Agent,
}

impl HttpClient {
    pub fn new(timeout: Duration, user_agent: &str) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .user_agent(user_agent)
            .build()
            .into();
        Self { agent }
    }

    pub fn agent(&self) -> &ureq::Agent {
        &self.agent
    }
}

impl TileClient for HttpClient {
    fn get(&self, url: &str) -> std::result::Result<Vec<u8>, TransportError> {
        let mut resp = self
            .agent
            .get(url)
            .call()
            .map_err(|e| TransportError(e.to_string()))?;
        resp.body_mut()
            .read_to_vec()
            .map_err(|e| TransportError(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay_ms: u64,
    pub jitter: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay_ms: 250,
            jitter: true,
        }
    }
}

impl RetryPolicy {
    /// No sleeping and no jitter; for tests and offline mocks.
    pub fn immediate() -> Self {
        Self {
            attempts: 3,
            base_delay_ms: 0,
            jitter: false,
        }
    }

    /// Delay before retry number `retry` (1-based).
    pub fn delay(&self, retry: u32) -> Duration {
        let base = self.base_delay_ms.saturating_mul(1 << (retry - 1).min(16));
        let ms = if self.jitter && base > 0 {
            base + rand::thread_rng().gen_range(0..=base / 2)
        } else {
            base
        };
        Duration::from_millis(ms)
    }

    /// Runs `op` up to `attempts` times; returns the value and the retry count.
    pub fn run<T, E: fmt::Display>(
        &self,
        mut op: impl FnMut() -> std::result::Result<T, E>,
    ) -> std::result::Result<(T, u32), (String, u32)> {
        let attempts = self.attempts.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.delay(attempt));
            }
            match op() {
                Ok(v) => return Ok((v, attempt)),
                Err(e) => last = e.to_string(),
            }
        }
        Err((last, attempts))
    }
}

#[derive(Debug, Clone)]
pub struct FetchedTile {
    pub coord: TileCoord,
    pub image: RasterImage,
    pub from_cache: bool,
    pub retries: u32,
}

/// Resolves tiles through an optional on-disk PNG cache and a [`TileClient`].
pub struct TileFetcher<'a> {
    template: String,
    cache_dir: Option<PathBuf>,
    client: &'a dyn TileClient,
    retry: RetryPolicy,
}

impl<'a> TileFetcher<'a> {
    pub fn new(template: impl Into<String>, client: &'a dyn TileClient) -> Self {
        Self {
            template: template.into(),
            cache_dir: None,
            client,
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_cache(mut self, dir: impl Into<PathBuf>) -> Self {
        self.cache_dir = Some(dir.into());
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn url(&self, c: TileCoord) -> String {
        self.template
            .replace("{z}", &c.z.to_string())
            .replace("{x}", &c.x.to_string())
            .replace("{y}", &c.y.to_string())
    }

    /// Cache location: `<cache>/tiles/<template hash>/z/x/y.png`.
    pub fn cache_path(&self, c: TileCoord) -> Option<PathBuf> {
        let hash = &sha256_hex(self.template.as_bytes())[..16];
        self.cache_dir.as_ref().map(|d| {
            d.join("tiles")
                .join(hash)
                .join(c.z.to_string())
                .join(c.x.to_string())
                .join(format!("{}.png", c.y))
        })
    }

    pub fn fetch(&self, coord: TileCoord) -> Result<FetchedTile> {
        let cache_path = self.cache_path(coord);
        if let Some(path) = cache_path.as_deref().filter(|p| p.exists()) {
            match RasterImage::load_png(path, 3) {
                Ok(image) => {
                    return Ok(FetchedTile {
                        coord,
                        image,
                        from_cache: true,
                        retries: 0,
                    })
                }
                Err(e) => warn!("ignoring unreadable cached tile {}: {e}", path.display()),
            }
        }
        let url = self.url(coord);
        let (bytes, retries) = self
            .retry
            .run(|| self.client.get(&url))
            .map_err(|(message, attempts)| ImageryError::Transport {
                coord,
                attempts,
                message,
            })?;
        let image = RasterImage::decode(&bytes, 3)
            .map_err(|message| ImageryError::Format { coord, message })?;
        if image.width != TILE_SIZE || image.height != TILE_SIZE {
            return Err(ImageryError::Format {
                coord,
                message: format!("expected 256x256 tile, got {}x{}", image.width, image.height),
            });
        }
        if let Some(path) = cache_path {
            image.save_png(&path)?;
        }
        Ok(FetchedTile {
            coord,
            image,
            from_cache: false,
            retries,
        })
    }

    /// Fetches every coordinate with at most `parallelism` requests in flight.
    pub fn fetch_all(
        &self,
        coords: &[TileCoord],
        parallelism: usize,
    ) -> Result<HashMap<TileCoord, RasterImage>> {
        if parallelism <= 1 {
            return coords
                .iter()
                .map(|&c| self.fetch(c).map(|t| (t.coord, t.image)))
                .collect();
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism.max(1))
            .build()
            .map_err(|e| ImageryError::Domain(e.to_string()))?;
        let fetched: Vec<Result<FetchedTile>> =
            pool.install(|| coords.par_iter().map(|&c| self.fetch(c)).collect());
        fetched
            .into_iter()
            .map(|r| r.map(|t| (t.coord, t.image)))
            .collect()
    }
}

/// Snaps a sample coordinate onto a 2^-20 pixel grid so dyadic offsets stay exact.
fn snap(v: f64) -> f64 {
    const GRID: f64 = (1u64 << 20) as f64;
    (v * GRID).round() / GRID
}

/// Assembles the covering tiles and resamples the window to 512×512 RGB with
/// bilinear interpolation (pixel centers at half-integers, edge clamped).
pub fn mosaic_and_crop(
    tiles: &HashMap<TileCoord, RasterImage>,
    window: &SamplingWindow,
    zoom: u8,
) -> Result<RasterImage> {
    let (x0, y0, x1, y1) = tile_range(window, zoom)?;
    let cols = (x1 - x0 + 1) as usize;
    let rows = (y1 - y0 + 1) as usize;
    let ts = TILE_SIZE as usize;
    let (mw, mh) = (cols * ts, rows * ts);
    let mut mosaic = vec![0u8; mw * mh * 3];
    for ty in y0..=y1 {
        for tx in x0..=x1 {
            let coord = TileCoord { z: zoom, x: tx, y: ty };
            let tile = tiles.get(&coord).ok_or(ImageryError::MissingTile(coord))?;
            if tile.width != TILE_SIZE || tile.height != TILE_SIZE || tile.channels != 3 {
                return Err(ImageryError::Format {
                    coord,
                    message: "mosaic tiles must be 256x256 RGB".into(),
                });
            }
            let ox = (tx - x0) as usize * ts;
            let oy = (ty - y0) as usize * ts;
            for r in 0..ts {
                let src = &tile.data[r * ts * 3..(r + 1) * ts * 3];
                let dst = ((oy + r) * mw + ox) * 3;
                mosaic[dst..dst + ts * 3].copy_from_slice(src);
            }
        }
    }

    let b = window.bbox();
    let (gx, gy) = global_pixel(Point::new(b.min_x, b.max_y), zoom);
    let origin_x = snap(gx - (x0 as usize * ts) as f64);
    let origin_y = snap(gy - (y0 as usize * ts) as f64);
    let step = snap(window.side_m / tile_span(zoom) * TILE_SIZE as f64 / OUTPUT_SIZE as f64);

    let n = OUTPUT_SIZE as usize;
    let mut out = vec![0u8; n * n * 3];
    let lookup = |xi: isize, yi: isize, ch: usize| -> f64 {
        let xi = xi.clamp(0, mw as isize - 1) as usize;
        let yi = yi.clamp(0, mh as isize - 1) as usize;
        mosaic[(yi * mw + xi) * 3 + ch] as f64
    };
    for j in 0..n {
        let v = snap(origin_y + (j as f64 + 0.5) * step - 0.5);
        let vy = v.floor();
        let fy = v - vy;
        for i in 0..n {
            let u = snap(origin_x + (i as f64 + 0.5) * step - 0.5);
            let ux = u.floor();
            let fx = u - ux;
            let (xi, yi) = (ux as isize, vy as isize);
            for ch in 0..3 {
                let top = lookup(xi, yi, ch) * (1.0 - fx) + lookup(xi + 1, yi, ch) * fx;
                let bottom = lookup(xi, yi + 1, ch) * (1.0 - fx) + lookup(xi + 1, yi + 1, ch) * fx;
                let value = top * (1.0 - fy) + bottom * fy;
                out[(j * n + i) * 3 + ch] = value.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    RasterImage::new(OUTPUT_SIZE, OUTPUT_SIZE, 3, out)
}

/// Binary mask (0/255) of pixels whose centers fall inside the multipolygon
/// under the even-odd rule; centers exactly on an edge count as inside.
pub fn rasterize_mask(g: &GeoMultiPolygon, window: &SamplingWindow) -> Result<RasterImage> {
    if g.crs != Crs::WebMercator {
        return Err(ImageryError::Domain(
            "mask rasterization needs Web Mercator geometry".into(),
        ));
    }
    if !(window.side_m > 0.0) {
        return Err(ImageryError::Domain("window side must be positive".into()));
    }
    let n = OUTPUT_SIZE as usize;
    let b = window.bbox();
    let scale = OUTPUT_SIZE as f64 / window.side_m;
    let edges: Vec<(Point, Point)> = g
        .polygons
        .iter()
        .flat_map(|p| p.rings())
        .flat_map(|ring| ring.windows(2).map(|w| (w[0], w[1])))
        .map(|(a, c)| {
            let to_px = |p: Point| Point::new((p.x - b.min_x) * scale, (b.max_y - p.y) * scale);
            (to_px(a), to_px(c))
        })
        .collect();

    let mut data = vec![0u8; n * n];
    let mut crossings: Vec<f64> = Vec::new();
    for j in 0..n {
        let yc = j as f64 + 0.5;
        let row = &mut data[j * n..(j + 1) * n];
        crossings.clear();
        for &(a, c) in &edges {
            if (a.y > yc) != (c.y > yc) {
                crossings.push(a.x + (yc - a.y) * (c.x - a.x) / (c.y - a.y));
            }
        }
        crossings.sort_by(f64::total_cmp);
        // A center is inside when an odd number of crossings lies strictly to
        // its right, i.e. it falls in [c0, c1), [c2, c3), ...
        let total = crossings.len();
        for (k, &cx) in crossings.iter().enumerate() {
            if (total - k) % 2 == 1 {
                continue;
            }
            let end = crossings.get(k + 1).copied().unwrap_or(f64::INFINITY);
            let first = (cx - 0.5).ceil().max(0.0);
            let last = ((end - 0.5).ceil() - 1.0).min((n - 1) as f64);
            if first <= last {
                row[first as usize..=last as usize].fill(255);
            }
        }
        // Boundary pass: centers lying exactly on an edge.
        for &(a, c) in &edges {
            let (lo, hi) = (a.y.min(c.y), a.y.max(c.y));
            if yc < lo || yc > hi {
                continue;
            }
            let (x_lo, x_hi) = if a.y == c.y {
                (a.x.min(c.x), a.x.max(c.x))
            } else {
                let x = a.x + (yc - a.y) * (c.x - a.x) / (c.y - a.y);
                (x, x)
            };
            let first = (x_lo - 0.5).ceil().max(0.0);
            let last = (x_hi - 0.5).floor().min((n - 1) as f64);
            let mut i = first;
            while i <= last {
                let xc = i + 0.5;
                if a.y == c.y || xc == x_lo {
                    row[i as usize] = 255;
                }
                i += 1.0;
            }
        }
    }
    if data.iter().all(|&v| v == 0) {
        warn!("isoline does not intersect any pixel center of its window; mask is empty");
    }
    RasterImage::new(OUTPUT_SIZE, OUTPUT_SIZE, 1, data)
}

/// RGB copied verbatim, alpha taken from the mask.
pub fn compose_rgba(image: &RasterImage, mask: &RasterImage) -> Result<RasterImage> {
    if image.channels != 3 || mask.channels != 1 {
        return Err(ImageryError::Domain(format!(
            "expected RGB image and 1-channel mask, got {} and {} channels",
            image.channels, mask.channels
        )));
    }
    if image.width != mask.width || image.height != mask.height {
        return Err(ImageryError::Domain(format!(
            "image is {}x{} but mask is {}x{}",
            image.width, image.height, mask.width, mask.height
        )));
    }
    let data = image
        .data
        .chunks_exact(3)
        .zip(&mask.data)
        .flat_map(|(rgb, &a)| [rgb[0], rgb[1], rgb[2], a])
        .collect();
    RasterImage::new(image.width, image.height, 4, data)
}
