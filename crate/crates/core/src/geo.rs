//! Coordinates, footprints and the Equal Earth projection.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const A1: f64 = 1.340264;
const A2: f64 = -0.081106;
const A3: f64 = 0.000893;
const A4: f64 = 0.003796;

/// Longitude/latitude in radians. Longitude is canonicalized into `[-pi, pi)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    lon: f64,
    lat: f64,
}

impl GeoPoint {
    pub fn new(lon: f64, lat: f64) -> Result<Self> {
        if !lon.is_finite() || !lat.is_finite() {
            return Err(Error::Domain {
                op: "geopoint",
                detail: format!("non-finite coordinate ({lon}, {lat})"),
            });
        }
        if !(-FRAC_PI_2..=FRAC_PI_2).contains(&lat) {
            return Err(Error::Domain {
                op: "geopoint",
                detail: format!("latitude {lat} outside [-pi/2, pi/2]"),
            });
        }
        let mut lon = (lon + PI).rem_euclid(2.0 * PI) - PI;
        if lon >= PI {
            lon = -PI;
        }
        Ok(Self { lon, lat })
    }

    pub fn from_degrees(lon: f64, lat: f64) -> Result<Self> {
        Self::new(lon.to_radians(), lat.to_radians())
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon_deg(&self) -> f64 {
        self.lon.to_degrees()
    }

    pub fn lat_deg(&self) -> f64 {
        self.lat.to_degrees()
    }
}

/// Axis-aligned lon/lat rectangle in radians. Never crosses the antimeridian.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoFootprint {
    pub lon_min: f64,
    pub lon_max: f64,
    pub lat_min: f64,
    pub lat_max: f64,
}

/// Footprint-local coordinate; `[-1, 1]^2` covers the footprint, `u` east, `v` north.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalCoord {
    pub u: f64,
    pub v: f64,
}

impl LocalCoord {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    /// Mirror image under a horizontal (east-west) flip.
    pub fn flipped(self) -> Self {
        Self {
            u: -self.u,
            v: self.v,
        }
    }
}

impl GeoFootprint {
    pub fn new(lon_min: f64, lon_max: f64, lat_min: f64, lat_max: f64) -> Result<Self> {
        let finite = [lon_min, lon_max, lat_min, lat_max]
            .iter()
            .all(|x| x.is_finite());
        if !finite || !(lon_min < lon_max) || !(lat_min < lat_max) {
            return Err(Error::Domain {
                op: "footprint",
                detail: format!(
                    "need lon_min < lon_max and lat_min < lat_max, got [{lon_min}, {lon_max}] x [{lat_min}, {lat_max}]"
                ),
            });
        }
        if lon_min < -PI || lon_max > PI {
            return Err(Error::Domain {
                op: "footprint",
                detail: "footprint crosses the antimeridian".into(),
            });
        }
        if lat_min < -FRAC_PI_2 || lat_max > FRAC_PI_2 {
            return Err(Error::Domain {
                op: "footprint",
                detail: "latitude outside [-pi/2, pi/2]".into(),
            });
        }
        Ok(Self {
            lon_min,
            lon_max,
            lat_min,
            lat_max,
        })
    }

    pub fn from_degrees(lon_min: f64, lon_max: f64, lat_min: f64, lat_max: f64) -> Result<Self> {
        Self::new(
            lon_min.to_radians(),
            lon_max.to_radians(),
            lat_min.to_radians(),
            lat_max.to_radians(),
        )
    }

    /// Boundaries are inclusive.
    pub fn contains(&self, p: GeoPoint) -> bool {
        (self.lon_min..=self.lon_max).contains(&p.lon) && (self.lat_min..=self.lat_max).contains(&p.lat)
    }

    pub fn to_local(&self, p: GeoPoint) -> Result<LocalCoord> {
        if !self.contains(p) {
            return Err(Error::OutOfFootprint {
                lon: p.lon,
                lat: p.lat,
            });
        }
        Ok(LocalCoord {
            u: 2.0 * (p.lon - self.lon_min) / (self.lon_max - self.lon_min) - 1.0,
            v: 2.0 * (p.lat - self.lat_min) / (self.lat_max - self.lat_min) - 1.0,
        })
    }

    /// Inverse of [`GeoFootprint::to_local`]; accepts coordinates outside the footprint.
    pub fn from_local(&self, q: LocalCoord) -> Result<GeoPoint> {
        GeoPoint::new(
            self.lon_min + (q.u + 1.0) * 0.5 * (self.lon_max - self.lon_min),
            self.lat_min + (q.v + 1.0) * 0.5 * (self.lat_max - self.lat_min),
        )
    }

    pub fn center(&self) -> GeoPoint {
        GeoPoint {
            lon: 0.5 * (self.lon_min + self.lon_max),
            lat: 0.5 * (self.lat_min + self.lat_max),
        }
    }
}

pub fn to_local(fp: &GeoFootprint, p: GeoPoint) -> Result<LocalCoord> {
    fp.to_local(p)
}

/// Center of patch `(a, b)` (row 0 north) of a `p x p` grid, in local coordinates.
pub fn patch_center(p: usize, a: usize, b: usize) -> Result<LocalCoord> {
    if a >= p {
        return Err(Error::Index { index: a, len: p });
    }
    if b >= p {
        return Err(Error::Index { index: b, len: p });
    }
    let pf = p as f64;
    Ok(LocalCoord {
        u: -1.0 + (2 * b + 1) as f64 / pf,
        v: 1.0 - (2 * a + 1) as f64 / pf,
    })
}

/// Forward Equal Earth projection of a point on the unit sphere.
pub fn equal_earth(p: GeoPoint) -> (f64, f64) {
    equal_earth_raw(p.lon, p.lat)
}

fn equal_earth_raw(lon: f64, lat: f64) -> (f64, f64) {
    let th = ((3f64.sqrt() / 2.0) * lat.sin()).asin();
    let t2 = th * th;
    let t6 = t2 * t2 * t2;
    let y = th * (A1 + A2 * t2 + t6 * (A3 + A4 * t2));
    let x = (2.0 * 3f64.sqrt() / 3.0) * lon * th.cos() / (A1 + 3.0 * A2 * t2 + t6 * (7.0 * A3 + 9.0 * A4 * t2));
    (x, y)
}

/// Half-extents of the projected world: `x` at (pi, 0) and `y` at (0, pi/2).
pub fn equal_earth_extent() -> (f64, f64) {
    (equal_earth_raw(PI, 0.0).0, equal_earth_raw(0.0, FRAC_PI_2).1)
}

/// Equal Earth coordinates rescaled into `[-1, 1]^2`.
pub fn equal_earth_unit(p: GeoPoint) -> [f64; 2] {
    let (x, y) = equal_earth(p);
    let (xm, ym) = equal_earth_extent();
    [x / xm, y / ym]
}
