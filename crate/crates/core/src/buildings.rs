//! Building-level enrichment: use type from tags, height from LOD2 roof
//! elevations, construction age from the nearest census cell, floor area,
//! and aggregation into the per-isoline composition vector.

use crate::geometry::{polygon_metrics, GeoMultiPolygon, Point};
use crate::io::BuildingFeature;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};

pub const DEFAULT_FLOOR_HEIGHT_M: f64 = 3.0;
pub const DEFAULT_AGE_CUTOFF_M: f64 = 500.0;
pub const MAX_BUILDING_HEIGHT_M: f64 = 200.0;
pub const COMPOSITION_DIM: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UseType {
    #[serde(rename = "SFH")]
    SingleFamily,
    /// Terraced / row house (also written "TR").
    #[serde(rename = "TH")]
    Terraced,
    #[serde(rename = "MFH")]
    MultiFamily,
    #[serde(rename = "NR")]
    NonResidential,
}

const SFH_TAGS: &[&str] = &["house", "detached", "bungalow", "farm", "cabin"];
const TH_TAGS: &[&str] = &["terrace", "semidetached_house", "terraced_house", "row_house"];
const MFH_TAGS: &[&str] = &["apartments", "dormitory"];
const NR_TAGS: &[&str] = &[
    "industrial", "commercial", "retail", "office", "school", "church", "warehouse",
    "kindergarten", "university", "college", "hospital", "hotel", "public", "civic",
    "government", "supermarket", "train_station", "transportation", "chapel", "mosque",
    "synagogue", "temple", "cathedral", "fire_station", "sports_hall", "manufacture",
];

/// Rule table over the OSM `building` tag; `None` when the tags carry no evidence.
///
/// `building=residential` counts as MFH only with `building:flats` > 2.
pub fn classify_use_type(tags: &BTreeMap<String, String>) -> Option<UseType> {
    let kind = tags.get("building")?.trim().to_ascii_lowercase();
    let kind = kind.as_str();
    if SFH_TAGS.contains(&kind) {
        Some(UseType::SingleFamily)
    } else if TH_TAGS.contains(&kind) {
        Some(UseType::Terraced)
    } else if MFH_TAGS.contains(&kind) {
        Some(UseType::MultiFamily)
    } else if kind == "residential" {
        let flats = tags
            .get("building:flats")
            .and_then(|f| f.trim().parse::<f64>().ok());
        matches!(flats, Some(n) if n > 2.0).then_some(UseType::MultiFamily)
    } else if NR_TAGS.contains(&kind) {
        Some(UseType::NonResidential)
    } else {
        None
    }
}

/// Simplified LOD2 stand-in: ground elevation and roof vertex elevations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lod2Record {
    pub id: String,
    #[serde(default)]
    pub ground_z_m: Option<f64>,
    #[serde(default)]
    pub roof_vertex_z_m: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Height {
    Valid(f64),
    /// Outside (0, 200] m.
    Invalid(f64),
    Missing,
}

impl Height {
    pub fn valid(self) -> Option<f64> {
        match self {
            Height::Valid(h) => Some(h),
            _ => None,
        }
    }
}

/// Highest roof vertex minus ground elevation.
pub fn building_height(rec: &Lod2Record) -> Height {
    let Some(ground) = rec.ground_z_m.filter(|g| g.is_finite()) else {
        return Height::Missing;
    };
    let roof = rec
        .roof_vertex_z_m
        .iter()
        .copied()
        .filter(|z| z.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if roof == f64::NEG_INFINITY {
        return Height::Missing;
    }
    let h = roof - ground;
    if h > 0.0 && h <= MAX_BUILDING_HEIGHT_M {
        Height::Valid(h)
    } else {
        Height::Invalid(h)
    }
}

/// Census grid cell with its dominant construction period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensusPoint {
    pub id: usize,
    pub location: Point,
    pub decade_label: String,
}

/// Representative year of a construction-period label.
///
/// Census periods map to their midpoints (`pre-1919` → 1910); decade labels
/// such as `1950s` map to mid-decade.
pub fn representative_year(label: &str) -> Option<f64> {
    let norm: String = label
        .trim()
        .to_ascii_lowercase()
        .chars()
        .map(|c| if c == '–' || c == '—' { '-' } else { c })
        .collect();
    let fixed = match norm.as_str() {
        "pre-1919" | "before 1919" | "<1919" => Some(1910.0),
        "1919-1948" => Some(1933.5),
        "1949-1978" => Some(1963.5),
        "1979-1990" => Some(1984.5),
        "1991-2000" => Some(1995.5),
        "2001-2011" => Some(2006.0),
        _ => None,
    };
    if fixed.is_some() {
        return fixed;
    }
    if let Some(decade) = norm.strip_suffix('s') {
        if let Ok(y) = decade.parse::<u32>() {
            if y % 10 == 0 {
                return Some(y as f64 + 5.0);
            }
        }
    }
    if let Some((a, b)) = norm.split_once('-') {
        if let (Ok(a), Ok(b)) = (a.trim().parse::<f64>(), b.trim().parse::<f64>()) {
            return Some(0.5 * (a + b));
        }
    }
    None
}

/// Label of the Euclidean-nearest census point within `cutoff_m`; equidistant
/// candidates resolve to the lower id.
pub fn match_age_class<'a>(
    centroid: Point,
    census: &'a [CensusPoint],
    cutoff_m: f64,
) -> Option<&'a str> {
    let mut best: Option<(f64, &CensusPoint)> = None;
    for c in census {
        let d = (c.location.x - centroid.x).hypot(c.location.y - centroid.y);
        let better = match best {
            None => true,
            Some((bd, bc)) => d < bd || (d == bd && c.id < bc.id),
        };
        if better {
            best = Some((d, c));
        }
    }
    best.filter(|(d, _)| *d <= cutoff_m)
        .map(|(_, c)| c.decade_label.as_str())
}

/// `footprint_area · ⌊height / h_floor⌋`.
pub fn floor_area(footprint_area_m2: f64, height_m: f64, h_floor: f64) -> f64 {
    footprint_area_m2 * floor_count(height_m, h_floor) as f64
}

pub fn floor_count(height_m: f64, h_floor: f64) -> u32 {
    if height_m > 0.0 && h_floor > 0.0 {
        (height_m / h_floor).floor() as u32
    } else {
        0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildingParams {
    pub floor_height_m: f64,
    pub age_cutoff_m: f64,
}

impl Default for BuildingParams {
    fn default() -> Self {
        Self {
            floor_height_m: DEFAULT_FLOOR_HEIGHT_M,
            age_cutoff_m: DEFAULT_AGE_CUTOFF_M,
        }
    }
}

/// A building with all derived attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildingRecord {
    pub id: String,
    pub centroid: Point,
    pub footprint_area_m2: f64,
    pub use_type: Option<UseType>,
    pub height_m: Option<f64>,
    pub age_class: Option<String>,
    /// ⌊height / h_floor⌋; 0 when the height is missing (see `height_m`).
    pub floor_count: u32,
    pub floor_area_m2: f64,
}

impl BuildingRecord {
    pub fn new(
        id: String,
        centroid: Point,
        footprint_area_m2: f64,
        use_type: Option<UseType>,
        height_m: Option<f64>,
        age_class: Option<String>,
        h_floor: f64,
    ) -> Self {
        let floors = height_m.map_or(0, |h| floor_count(h, h_floor));
        Self {
            id,
            centroid,
            footprint_area_m2,
            use_type,
            height_m,
            age_class,
            floor_count: floors,
            floor_area_m2: footprint_area_m2 * floors as f64,
        }
    }
}

/// Derives use type, height, age class and floor area for every footprint.
/// Footprints with unusable geometry are skipped with a warning.
pub fn enrich_buildings(
    features: &[BuildingFeature],
    lod2: &[Lod2Record],
    census: &[CensusPoint],
    params: &BuildingParams,
) -> Vec<BuildingRecord> {
    let heights: HashMap<&str, &Lod2Record> = lod2.iter().map(|r| (r.id.as_str(), r)).collect();
    features
        .iter()
        .filter_map(|f| {
            let m = match polygon_metrics(&f.footprint) {
                Ok(m) => m,
                Err(e) => {
                    log::warn!("building {}: {e}; skipped", f.id);
                    return None;
                }
            };
            let height = heights
                .get(f.id.as_str())
                .map_or(Height::Missing, |r| building_height(r));
            if let Height::Invalid(h) = height {
                log::warn!("building {}: implausible height {h:.2} m ignored", f.id);
            }
            Some(BuildingRecord::new(
                f.id.clone(),
                m.centroid,
                m.area_m2,
                classify_use_type(&f.tags),
                height.valid(),
                match_age_class(m.centroid, census, params.age_cutoff_m).map(str::to_owned),
                params.floor_height_m,
            ))
        })
        .collect()
}

/// Buildings whose footprint centroid lies inside the isoline.
pub fn buildings_in<'a>(
    isoline: &GeoMultiPolygon,
    buildings: &'a [BuildingRecord],
) -> Vec<&'a BuildingRecord> {
    let bbox = isoline.bbox();
    buildings
        .iter()
        .filter(|b| bbox.contains(b.centroid) && isoline.contains(b.centroid))
        .collect()
}

/// Fixed 11-slot per-isoline building descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompositionVector {
    pub building_count: f64,
    pub total_footprint_area_m2: f64,
    pub mean_height_m: f64,
    pub mean_floor_count: f64,
    pub total_floor_area_m2: f64,
    /// Mean of (representative year − 1900) / 100 over buildings with a known age.
    pub mean_construction_decade: f64,
    pub ratio_sfh: f64,
    pub ratio_th: f64,
    pub ratio_mfh: f64,
    pub ratio_nr: f64,
    pub ratio_unknown_age: f64,
}

impl CompositionVector {
    pub const FIELD_NAMES: [&'static str; COMPOSITION_DIM] = [
        "building_count",
        "total_footprint_area_m2",
        "mean_height_m",
        "mean_floor_count",
        "total_floor_area_m2",
        "mean_construction_decade",
        "ratio_sfh",
        "ratio_th",
        "ratio_mfh",
        "ratio_nr",
        "ratio_unknown_age",
    ];

    pub fn zeros() -> Self {
        Self::from_array([0.0; COMPOSITION_DIM])
    }

    pub fn to_array(&self) -> [f64; COMPOSITION_DIM] {
        [
            self.building_count,
            self.total_footprint_area_m2,
            self.mean_height_m,
            self.mean_floor_count,
            self.total_floor_area_m2,
            self.mean_construction_decade,
            self.ratio_sfh,
            self.ratio_th,
            self.ratio_mfh,
            self.ratio_nr,
            self.ratio_unknown_age,
        ]
    }

    pub fn from_array(a: [f64; COMPOSITION_DIM]) -> Self {
        Self {
            building_count: a[0],
            total_footprint_area_m2: a[1],
            mean_height_m: a[2],
            mean_floor_count: a[3],
            total_floor_area_m2: a[4],
            mean_construction_decade: a[5],
            ratio_sfh: a[6],
            ratio_th: a[7],
            ratio_mfh: a[8],
            ratio_nr: a[9],
            ratio_unknown_age: a[10],
        }
    }
}

/// Values kept out of the feature vector but useful when auditing inputs.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CompositionDiagnostics {
    pub ratio_unknown_use_type: f64,
    pub invalid_or_missing_heights: usize,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Aggregates member buildings; unknown use types count as SFH in the ratios.
///
/// Buildings are processed in id order so the result does not depend on the
/// input order.
pub fn aggregate_composition(
    buildings: &[&BuildingRecord],
) -> (CompositionVector, CompositionDiagnostics) {
    if buildings.is_empty() {
        return (CompositionVector::zeros(), CompositionDiagnostics::default());
    }
    let mut sorted: Vec<&BuildingRecord> = buildings.to_vec();
    sorted.sort_by(|a, b| {
        a.id.cmp(&b.id)
            .then(a.footprint_area_m2.total_cmp(&b.footprint_area_m2))
    });
    let n = sorted.len() as f64;

    let with_height: Vec<&BuildingRecord> =
        sorted.iter().copied().filter(|b| b.height_m.is_some()).collect();
    let years: Vec<f64> = sorted
        .iter()
        .filter_map(|b| b.age_class.as_deref().and_then(representative_year))
        .collect();
    let count_use = |t: UseType| sorted.iter().filter(|b| b.use_type == Some(t)).count() as f64;
    let unknown_use = sorted.iter().filter(|b| b.use_type.is_none()).count() as f64;
    let (sfh, th, mfh, nr) = (
        count_use(UseType::SingleFamily) + unknown_use,
        count_use(UseType::Terraced),
        count_use(UseType::MultiFamily),
        count_use(UseType::NonResidential),
    );
    let ratio_th = th / n;
    let ratio_mfh = mfh / n;
    let ratio_nr = nr / n;

    let v = CompositionVector {
        building_count: n,
        total_footprint_area_m2: sorted.iter().map(|b| b.footprint_area_m2).sum(),
        mean_height_m: mean(with_height.iter().filter_map(|b| b.height_m)),
        mean_floor_count: mean(with_height.iter().map(|b| b.floor_count as f64)),
        total_floor_area_m2: sorted.iter().map(|b| b.floor_area_m2).sum(),
        mean_construction_decade: mean(years.iter().map(|y| (y - 1900.0) / 100.0)),
        ratio_sfh: sfh / n,
        ratio_th,
        ratio_mfh,
        ratio_nr,
        ratio_unknown_age: (n - years.len() as f64) / n,
    };
    let diag = CompositionDiagnostics {
        ratio_unknown_use_type: unknown_use / n,
        invalid_or_missing_heights: sorted.len() - with_height.len(),
    };
    (v, diag)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tags(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    fn record(id: &str, use_type: Option<UseType>, height: Option<f64>, age: Option<&str>) -> BuildingRecord {
        BuildingRecord::new(
            id.into(),
            Point::new(0.0, 0.0),
            100.0,
            use_type,
            height,
            age.map(str::to_owned),
            DEFAULT_FLOOR_HEIGHT_M,
        )
    }

    #[test]
    fn use_type_rules() {
        assert_eq!(classify_use_type(&tags(&[("building", "detached")])), Some(UseType::SingleFamily));
        assert_eq!(classify_use_type(&tags(&[("building", "apartments")])), Some(UseType::MultiFamily));
        assert_eq!(classify_use_type(&tags(&[("building", "terrace")])), Some(UseType::Terraced));
        assert_eq!(classify_use_type(&tags(&[("building", "office")])), Some(UseType::NonResidential));
        assert_eq!(classify_use_type(&tags(&[])), None);
        assert_eq!(classify_use_type(&tags(&[("building", "yes")])), None);
        assert_eq!(
            classify_use_type(&tags(&[("building", "residential"), ("building:flats", "6")])),
            Some(UseType::MultiFamily)
        );
        assert_eq!(
            classify_use_type(&tags(&[("building", "residential"), ("building:flats", "2")])),
            None
        );
    }

    #[test]
    fn heights() {
        let rec = |g: Option<f64>, roof: &[f64]| Lod2Record {
            id: "b".into(),
            ground_z_m: g,
            roof_vertex_z_m: roof.to_vec(),
        };
        assert_eq!(building_height(&rec(Some(100.0), &[106.0, 108.0, 108.0])), Height::Valid(8.0));
        assert_eq!(building_height(&rec(Some(100.0), &[100.0])), Height::Invalid(0.0));
        assert_eq!(building_height(&rec(Some(100.0), &[105.0, 109.0, 105.0])), Height::Valid(9.0));
        assert_eq!(building_height(&rec(None, &[105.0])), Height::Missing);
        assert_eq!(building_height(&rec(Some(1.0), &[])), Height::Missing);
        assert_eq!(building_height(&rec(Some(0.0), &[250.0])), Height::Invalid(250.0));
    }

    #[test]
    fn age_matching() {
        let p = |id, x, label: &str| CensusPoint {
            id,
            location: Point::new(x, 0.0),
            decade_label: label.into(),
        };
        let one = [p(0, 10.0, "1949–1978")];
        assert_eq!(match_age_class(Point::new(0.0, 0.0), &one, 500.0), Some("1949–1978"));
        let tie = [p(3, 10.0, "late"), p(1, -10.0, "early")];
        assert_eq!(match_age_class(Point::new(0.0, 0.0), &tie, 500.0), Some("early"));
        let far = [p(0, 600.0, "x")];
        assert_eq!(match_age_class(Point::new(0.0, 0.0), &far, 500.0), None);
        assert_eq!(match_age_class(Point::new(0.0, 0.0), &[], 500.0), None);
    }

    #[test]
    fn floor_area_formula() {
        assert_eq!(floor_area(120.0, 9.0, 3.0), 360.0);
        assert_eq!(floor_area(120.0, 2.9, 3.0), 0.0);
        assert_eq!(floor_area(50.0, 10.5, 3.0), 150.0);
    }

    #[test]
    fn representative_years() {
        assert_eq!(representative_year("pre-1919"), Some(1910.0));
        assert_eq!(representative_year("1949–1978"), Some(1963.5));
        assert_eq!(representative_year("1950s"), Some(1955.0));
        assert_eq!(representative_year("unknown"), None);
    }

    #[test]
    fn composition_ratios_and_means() {
        let bs = [
            record("a", Some(UseType::SingleFamily), Some(6.0), Some("1950s")),
            record("b", Some(UseType::SingleFamily), Some(9.0), None),
            record("c", Some(UseType::MultiFamily), None, Some("1970s")),
            record("d", Some(UseType::MultiFamily), None, None),
        ];
        let refs: Vec<&BuildingRecord> = bs.iter().collect();
        let (v, _) = aggregate_composition(&refs);
        assert_eq!(v.building_count, 4.0);
        assert_eq!((v.ratio_sfh, v.ratio_th, v.ratio_mfh, v.ratio_nr), (0.5, 0.0, 0.5, 0.0));
        assert_eq!(v.mean_height_m, 7.5);
        assert_eq!(v.mean_floor_count, 2.5);
        assert_eq!(v.total_floor_area_m2, 500.0);
        assert!((v.mean_construction_decade - 0.65).abs() < 1e-12);
        assert_eq!(v.ratio_unknown_age, 0.5);
    }

    #[test]
    fn unknown_use_imputed_as_sfh() {
        let bs = [record("a", None, None, None), record("b", Some(UseType::NonResidential), None, None)];
        let refs: Vec<&BuildingRecord> = bs.iter().collect();
        let (v, d) = aggregate_composition(&refs);
        assert_eq!((v.ratio_sfh, v.ratio_nr), (0.5, 0.5));
        assert_eq!(d.ratio_unknown_use_type, 0.5);
    }

    #[test]
    fn empty_set_is_zero_vector() {
        let (v, _) = aggregate_composition(&[]);
        assert_eq!(v.to_array(), [0.0; COMPOSITION_DIM]);
    }
}
