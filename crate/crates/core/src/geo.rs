//! Geographic containment hierarchy used for semantic location obfuscation.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{GeoPoint, SemanticLocation};

const BUNDLED_WORLD: &str = include_str!("../fixtures/world.json");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("hierarchy file: {0}")]
    Parse(String),
    #[error("invalid region {region:?}: {reason}")]
    InvalidRegion { region: String, reason: String },
    #[error("path {0:?} is not in the hierarchy")]
    PathNotInHierarchy(Vec<String>),
    #[error("coordinates lie outside region {0:?}")]
    CoordsOutsideRegion(String),
}

/// Axis-aligned lat/lon box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub min_lat: f64,
    pub min_lon: f64,
    pub max_lat: f64,
    pub max_lon: f64,
}

impl BBox {
    pub fn point(p: GeoPoint) -> Self {
        Self {
            min_lat: p.lat,
            min_lon: p.lon,
            max_lat: p.lat,
            max_lon: p.lon,
        }
    }

    pub fn contains(&self, p: GeoPoint) -> bool {
        (self.min_lat..=self.max_lat).contains(&p.lat)
            && (self.min_lon..=self.max_lon).contains(&p.lon)
    }

    pub fn contains_box(&self, other: &BBox) -> bool {
        self.min_lat <= other.min_lat
            && self.min_lon <= other.min_lon
            && self.max_lat >= other.max_lat
            && self.max_lon >= other.max_lon
    }

    fn union(&self, other: &BBox) -> BBox {
        BBox {
            min_lat: self.min_lat.min(other.min_lat),
            min_lon: self.min_lon.min(other.min_lon),
            max_lat: self.max_lat.max(other.max_lat),
            max_lon: self.max_lon.max(other.max_lon),
        }
    }

    fn split(&self, n: usize, i: usize) -> BBox {
        let mut b = *self;
        if self.max_lat - self.min_lat >= self.max_lon - self.min_lon {
            let h = (self.max_lat - self.min_lat) / n as f64;
            b.min_lat = self.min_lat + h * i as f64;
            b.max_lat = if i + 1 == n { self.max_lat } else { self.min_lat + h * (i + 1) as f64 };
        } else {
            let w = (self.max_lon - self.min_lon) / n as f64;
            b.min_lon = self.min_lon + w * i as f64;
            b.max_lon = if i + 1 == n { self.max_lon } else { self.min_lon + w * (i + 1) as f64 };
        }
        b
    }

    fn center(&self) -> GeoPoint {
        GeoPoint::new(
            (self.min_lat + self.max_lat) / 2.0,
            (self.min_lon + self.max_lon) / 2.0,
        )
    }
}

/// Region as written in hierarchy files: nested objects.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionSpec {
    pub name: String,
    pub lat: f64,
    pub lon: f64,
    /// `[min_lat, min_lon, max_lat, max_lon]`; derived from the point and the
    /// children when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
    #[serde(default)]
    pub children: Vec<RegionSpec>,
}

#[derive(Debug, Clone)]
pub struct Region {
    pub name: String,
    pub point: GeoPoint,
    pub bbox: BBox,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub depth: usize,
}

/// Tree of named regions; index 0 is the root.
#[derive(Debug, Clone)]
pub struct GeoHierarchy {
    regions: Vec<Region>,
    depth: usize,
}

impl GeoHierarchy {
    /// The bundled synthetic world: one root, 3 countries, 12 states, 36 cities.
    pub fn bundled() -> Self {
        Self::from_json(BUNDLED_WORLD).expect("bundled hierarchy is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, GeoError> {
        let spec: RegionSpec = serde_json::from_str(text).map_err(|e| GeoError::Parse(e.to_string()))?;
        Self::from_spec(&spec)
    }

    pub fn from_spec(spec: &RegionSpec) -> Result<Self, GeoError> {
        let mut h = GeoHierarchy {
            regions: Vec::new(),
            depth: 0,
        };
        h.insert(spec, None, 0)?;
        h.depth = h.regions.iter().map(|r| r.depth).max().unwrap_or(0);
        Ok(h)
    }

    fn insert(&mut self, spec: &RegionSpec, parent: Option<usize>, depth: usize) -> Result<BBox, GeoError> {
        let invalid = |reason: &str| GeoError::InvalidRegion {
            region: spec.name.clone(),
            reason: reason.to_string(),
        };
        if spec.name.is_empty() {
            return Err(invalid("empty name"));
        }
        let point = GeoPoint::new(spec.lat, spec.lon);
        if !point.is_valid() {
            return Err(invalid("representative point is not a valid coordinate"));
        }
        let mut seen = BTreeSet::new();
        for c in &spec.children {
            if !seen.insert(c.name.as_str()) {
                return Err(invalid("duplicate child name"));
            }
        }
        let idx = self.regions.len();
        self.regions.push(Region {
            name: spec.name.clone(),
            point,
            bbox: BBox::point(point),
            parent,
            children: Vec::new(),
            depth,
        });
        let declared = spec.bbox.map(|[a, b, c, d]| BBox {
            min_lat: a,
            min_lon: b,
            max_lat: c,
            max_lon: d,
        });
        if let Some(b) = &declared {
            if !(b.min_lat <= b.max_lat && b.min_lon <= b.max_lon) || !b.contains(point) {
                return Err(invalid("representative point outside bounding box"));
            }
        }
        let mut derived = BBox::point(point);
        for child in &spec.children {
            let child_idx = self.regions.len();
            let child_box = self.insert(child, Some(idx), depth + 1)?;
            self.regions[idx].children.push(child_idx);
            if let Some(b) = &declared {
                if !b.contains_box(&child_box) {
                    return Err(GeoError::InvalidRegion {
                        region: child.name.clone(),
                        reason: format!("not contained in parent {:?}", spec.name),
                    });
                }
            }
            derived = derived.union(&child_box);
        }
        let bbox = declared.unwrap_or(derived);
        self.regions[idx].bbox = bbox;
        Ok(bbox)
    }

    /// Regular synthetic hierarchy: every node at level `i` has
    /// `branching[i]` children, slicing the parent's box into equal strips.
    pub fn synthetic(root: &str, branching: &[usize]) -> Self {
        fn build(name: String, bbox: BBox, branching: &[usize]) -> RegionSpec {
            let children = match branching.split_first() {
                None => Vec::new(),
                Some((&n, rest)) => (0..n)
                    .map(|i| build(format!("{name}.{i}"), bbox.split(n, i), rest))
                    .collect(),
            };
            let c = bbox.center();
            RegionSpec {
                name,
                lat: c.lat,
                lon: c.lon,
                bbox: Some([bbox.min_lat, bbox.min_lon, bbox.max_lat, bbox.max_lon]),
                children,
            }
        }
        let world = BBox {
            min_lat: -60.0,
            min_lon: -170.0,
            max_lat: 60.0,
            max_lon: 170.0,
        };
        // child names carry the parent prefix, so the root name is kept short
        let spec = build(root.to_string(), world, branching);
        Self::from_spec(&spec).expect("synthetic hierarchy is valid")
    }

    /// The nested form accepted by [`GeoHierarchy::from_spec`].
    pub fn to_spec(&self) -> RegionSpec {
        fn build(h: &GeoHierarchy, idx: usize) -> RegionSpec {
            let r = &h.regions[idx];
            RegionSpec {
                name: r.name.clone(),
                lat: r.point.lat,
                lon: r.point.lon,
                bbox: Some([r.bbox.min_lat, r.bbox.min_lon, r.bbox.max_lat, r.bbox.max_lon]),
                children: r.children.iter().map(|&c| build(h, c)).collect(),
            }
        }
        build(self, 0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_spec()).expect("hierarchy serialises")
    }

    pub fn root(&self) -> &Region {
        &self.regions[0]
    }

    /// Number of levels below the root on the longest path.
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn region(&self, idx: usize) -> &Region {
        &self.regions[idx]
    }

    /// Index of the region named by `path`, which must start at the root.
    pub fn resolve(&self, path: &[String]) -> Option<usize> {
        let (first, rest) = path.split_first()?;
        if *first != self.regions[0].name {
            return None;
        }
        let mut idx = 0;
        for name in rest {
            idx = *self.regions[idx]
                .children
                .iter()
                .find(|&&c| self.regions[c].name == *name)?;
        }
        Some(idx)
    }

    pub fn path_of(&self, mut idx: usize) -> Vec<String> {
        let mut path = vec![self.regions[idx].name.clone()];
        while let Some(p) = self.regions[idx].parent {
            path.push(self.regions[p].name.clone());
            idx = p;
        }
        path.reverse();
        path
    }

    /// The location at a region's representative point.
    pub fn location_of(&self, idx: usize) -> SemanticLocation {
        SemanticLocation {
            path: self.path_of(idx),
            coords: self.regions[idx].point,
        }
    }

    /// Checks that the path exists and the coordinates fall inside its finest region.
    pub fn validate_location(&self, loc: &SemanticLocation) -> Result<usize, GeoError> {
        let idx = self
            .resolve(&loc.path)
            .ok_or_else(|| GeoError::PathNotInHierarchy(loc.path.clone()))?;
        if !self.regions[idx].bbox.contains(loc.coords) {
            return Err(GeoError::CoordsOutsideRegion(self.regions[idx].name.clone()));
        }
        Ok(idx)
    }

    pub fn leaves(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.regions.len()).filter(|&i| self.regions[i].children.is_empty())
    }

    /// A uniformly chosen leaf with coordinates drawn uniformly from its box.
    pub fn random_leaf_location<R: Rng + ?Sized>(&self, rng: &mut R) -> SemanticLocation {
        let leaves: Vec<usize> = self.leaves().collect();
        let idx = leaves[rng.random_range(0..leaves.len())];
        let b = self.regions[idx].bbox;
        let lat = if b.max_lat > b.min_lat { rng.random_range(b.min_lat..=b.max_lat) } else { b.min_lat };
        let lon = if b.max_lon > b.min_lon { rng.random_range(b.min_lon..=b.max_lon) } else { b.min_lon };
        SemanticLocation {
            path: self.path_of(idx),
            coords: GeoPoint::new(lat, lon),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_world_shape() {
        let h = GeoHierarchy::bundled();
        assert_eq!(h.len(), 52);
        assert_eq!(h.depth(), 3);
        assert_eq!(h.root().name, "Terra");
        let idx = h
            .resolve(&["Terra".into(), "Borealis".into(), "Frostvale".into(), "Frostvale North".into()])
            .unwrap();
        assert_eq!(h.path_of(idx).len(), 4);
        assert!(h.validate_location(&h.location_of(idx)).is_ok());
    }

    #[test]
    fn every_point_inside_its_ancestors() {
        let h = GeoHierarchy::synthetic("W", &[3, 2, 2]);
        for i in 0..h.len() {
            let mut a = Some(i);
            while let Some(j) = a {
                assert!(h.region(j).bbox.contains(h.region(i).point));
                a = h.region(j).parent;
            }
        }
    }

    #[test]
    fn loader_rejects_bad_files() {
        assert!(matches!(GeoHierarchy::from_json("{"), Err(GeoError::Parse(_))));
        let dup = r#"{"name":"R","lat":0,"lon":0,"children":[
            {"name":"A","lat":0,"lon":0},{"name":"A","lat":1,"lon":1}]}"#;
        assert!(matches!(GeoHierarchy::from_json(dup), Err(GeoError::InvalidRegion { .. })));
        let escape = r#"{"name":"R","lat":0,"lon":0,"bbox":[-1,-1,1,1],"children":[
            {"name":"A","lat":5,"lon":5}]}"#;
        assert!(matches!(GeoHierarchy::from_json(escape), Err(GeoError::InvalidRegion { .. })));
    }

    #[test]
    fn derived_boxes_cover_children() {
        let text = r#"{"name":"R","lat":0,"lon":0,"children":[
            {"name":"A","lat":2,"lon":3},{"name":"B","lat":-1,"lon":-4}]}"#;
        let h = GeoHierarchy::from_json(text).unwrap();
        let r = h.root().bbox;
        assert_eq!((r.min_lat, r.min_lon, r.max_lat, r.max_lon), (-1.0, -4.0, 2.0, 3.0));
    }

    #[test]
    fn validate_rejects_unknown_paths_and_far_coords() {
        let h = GeoHierarchy::bundled();
        let bad = SemanticLocation::new(["Terra", "Atlantis"], GeoPoint::new(0.0, 0.0));
        assert!(matches!(h.validate_location(&bad), Err(GeoError::PathNotInHierarchy(_))));
        let mut far = h.location_of(h.leaves().next().unwrap());
        far.coords = GeoPoint::new(89.0, -179.0);
        assert!(matches!(h.validate_location(&far), Err(GeoError::CoordsOutsideRegion(_))));
    }

    #[test]
    fn export_round_trips() {
        let h = GeoHierarchy::synthetic("W", &[2, 3, 2]);
        let back = GeoHierarchy::from_json(&h.to_json()).unwrap();
        assert_eq!(back.len(), h.len());
        assert_eq!(back.depth(), h.depth());
        for i in 0..h.len() {
            assert_eq!(back.path_of(i), h.path_of(i));
            assert_eq!(back.region(i).point, h.region(i).point);
        }
    }
}
