//! 2.5D elevation maps: bilinear height queries, surface normals, placing
//! the vehicle on the ground, and vehicle-centred terrain patches.

use std::io::Write as _;
use std::path::Path;

use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::rotation::{quat_from_euler, EulerAngles, Quat, Vec3};
use crate::types::VehicleParams;

const BINARY_MAGIC: &[u8; 8] = b"TDYNELEV";
const ASCII_MAGIC: &str = "TDYNELEV-ASCII";
const FORMAT_VERSION: u32 = 1;
const SNAP: f64 = 1e-9;

/// Regular height grid. Cell `(col, row)` has its centre at
/// `origin + resolution * (col, row)`; `heights` is row-major with rows
/// running along +y.
#[derive(Debug, Clone, PartialEq)]
pub struct ElevationMap {
    origin: Vector2<f64>,
    resolution: f64,
    width: usize,
    height: usize,
    heights: Vec<f64>,
}

impl ElevationMap {
    pub fn new(
        origin: Vector2<f64>,
        resolution: f64,
        width: usize,
        height: usize,
        heights: Vec<f64>,
    ) -> Result<Self> {
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(Error::ConfigInvalid(format!("map resolution must be positive, got {resolution}")));
        }
        if width < 2 || height < 2 {
            return Err(Error::ConfigInvalid(format!("map must be at least 2x2, got {width}x{height}")));
        }
        if heights.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} heights for a {width}x{height} map",
                heights.len()
            )));
        }
        if !origin.iter().all(|v| v.is_finite()) || !heights.iter().all(|h| h.is_finite()) {
            return Err(Error::ConfigInvalid("map contains non-finite values".into()));
        }
        Ok(Self {
            origin,
            resolution,
            width,
            height,
            heights,
        })
    }

    /// Samples `f(x, y)` at every cell centre.
    pub fn from_fn(
        origin: Vector2<f64>,
        resolution: f64,
        width: usize,
        height: usize,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self> {
        let mut heights = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                let x = origin.x + resolution * col as f64;
                let y = origin.y + resolution * row as f64;
                heights.push(f(x, y));
            }
        }
        Self::new(origin, resolution, width, height, heights)
    }

    pub fn flat(origin: Vector2<f64>, resolution: f64, width: usize, height: usize, level: f64) -> Result<Self> {
        Self::new(origin, resolution, width, height, vec![level; width * height])
    }

    pub fn origin(&self) -> Vector2<f64> {
        self.origin
    }
    pub fn resolution(&self) -> f64 {
        self.resolution
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn heights(&self) -> &[f64] {
        &self.heights
    }

    /// World-frame extent `(min, max)` of the cell centres.
    pub fn bounds(&self) -> (Vector2<f64>, Vector2<f64>) {
        let max = self.origin
            + Vector2::new(
                self.resolution * (self.width - 1) as f64,
                self.resolution * (self.height - 1) as f64,
            );
        (self.origin, max)
    }

    pub fn cell(&self, col: usize, row: usize) -> f64 {
        self.heights[row * self.width + col]
    }

    pub fn contains(&self, xy: Vector2<f64>) -> bool {
        self.grid_coords(xy).is_some()
    }

    fn grid_coords(&self, xy: Vector2<f64>) -> Option<(f64, f64)> {
        let snap = |g: f64| {
            let r = g.round();
            if (g - r).abs() < SNAP {
                r
            } else {
                g
            }
        };
        let gx = snap((xy.x - self.origin.x) / self.resolution);
        let gy = snap((xy.y - self.origin.y) / self.resolution);
        let inside = gx >= 0.0
            && gy >= 0.0
            && gx <= (self.width - 1) as f64
            && gy <= (self.height - 1) as f64;
        inside.then_some((gx, gy))
    }

    /// Bilinear interpolation between the four surrounding cell centres.
    pub fn height_at(&self, xy: Vector2<f64>) -> Result<f64> {
        let (gx, gy) = self
            .grid_coords(xy)
            .ok_or(Error::OutOfBounds { x: xy.x, y: xy.y })?;
        let c0 = (gx.floor() as usize).min(self.width - 2);
        let r0 = (gy.floor() as usize).min(self.height - 2);
        let fx = gx - c0 as f64;
        let fy = gy - r0 as f64;
        let h00 = self.cell(c0, r0);
        let h10 = self.cell(c0 + 1, r0);
        let h01 = self.cell(c0, r0 + 1);
        let h11 = self.cell(c0 + 1, r0 + 1);
        let lower = h00 + fx * (h10 - h00);
        let upper = h01 + fx * (h11 - h01);
        Ok(lower + fy * (upper - lower))
    }

    /// Unit upward normal from central differences one cell wide.
    pub fn surface_normal(&self, xy: Vector2<f64>) -> Result<Vec3> {
        let r = self.resolution;
        let dx = Vector2::new(r, 0.0);
        let dy = Vector2::new(0.0, r);
        let hx = (self.height_at(xy + dx)? - self.height_at(xy - dx)?) / (2.0 * r);
        let hy = (self.height_at(xy + dy)? - self.height_at(xy - dy)?) / (2.0 * r);
        Ok(Vec3::new(-hx, -hy, 1.0).normalize())
    }

    /// Places the vehicle centre at `xy` with heading `yaw`. Roll and pitch
    /// come from the least-squares plane through the four wheel contact
    /// heights; z is the terrain height under the centre plus ride height.
    pub fn project_pose(&self, xy: Vector2<f64>, yaw: f64, params: &VehicleParams) -> Result<(Vec3, Quat)> {
        let attitude = self.ground_attitude(xy, yaw, params)?;
        let z = self.height_at(xy)? + params.ride_height;
        Ok((Vec3::new(xy.x, xy.y, z), quat_from_euler(&attitude)))
    }

    pub fn ground_attitude(&self, xy: Vector2<f64>, yaw: f64, params: &VehicleParams) -> Result<EulerAngles> {
        let (s, c) = yaw.sin_cos();
        let half = 0.5 * params.track_width;
        let lf = params.front_axle_distance;
        let lr = params.rear_axle_distance;
        let mut h = [0.0; 4];
        let contacts = [(lf, half), (lf, -half), (-lr, half), (-lr, -half)];
        for (k, (u, v)) in contacts.iter().enumerate() {
            let p = xy + Vector2::new(c * u - s * v, s * u + c * v);
            h[k] = self.height_at(p)?;
        }
        // Least-squares plane z = a + b*u + c*v over the four contacts. The
        // v coordinates are symmetric so the fit decouples.
        let u_mean = 0.5 * (lf - lr);
        let du_f = lf - u_mean;
        let du_r = -lr - u_mean;
        let slope_u = (du_f * (h[0] + h[1]) + du_r * (h[2] + h[3])) / (2.0 * (du_f * du_f + du_r * du_r));
        let slope_v = (h[0] - h[1] + h[2] - h[3]) * half / (4.0 * half * half);
        let pitch = -slope_u.atan();
        let roll = (slope_v / (1.0 + slope_u * slope_u).sqrt()).atan();
        Ok(EulerAngles::new(roll, pitch, yaw))
    }

    /// Yaw-aligned, centre-normalised square patch. Column index runs
    /// forward, row index runs from the vehicle's left to its right.
    pub fn extract_patch(&self, xy: Vector2<f64>, yaw: f64, size: usize, resolution: f64) -> Result<TerrainPatch> {
        if size.is_multiple_of(2) {
            return Err(Error::ConfigInvalid(format!("patch size must be odd, got {size}")));
        }
        if !(resolution > 0.0) {
            return Err(Error::ConfigInvalid("patch resolution must be positive".into()));
        }
        let center = self.height_at(xy)?;
        let half = (size / 2) as f64;
        let (s, c) = yaw.sin_cos();
        let mut heights = Vec::with_capacity(size * size);
        for row in 0..size {
            let v = (half - row as f64) * resolution;
            for col in 0..size {
                let u = (col as f64 - half) * resolution;
                let p = xy + Vector2::new(c * u - s * v, s * u + c * v);
                heights.push(self.height_at(p)? - center);
            }
        }
        Ok(TerrainPatch {
            size,
            resolution,
            heading: yaw,
            heights,
        })
    }

    pub fn write_binary(&self, mut w: impl std::io::Write) -> std::io::Result<()> {
        w.write_all(BINARY_MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&self.origin.x.to_le_bytes())?;
        w.write_all(&self.origin.y.to_le_bytes())?;
        w.write_all(&self.resolution.to_le_bytes())?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        for h in &self.heights {
            w.write_all(&(*h as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(44 + 4 * self.heights.len());
        self.write_binary(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_binary(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Format {
            what: "elevation map",
            msg: msg.to_string(),
        };
        if bytes.len() < 44 || &bytes[..8] != BINARY_MAGIC {
            return Err(bad("missing header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        if u32_at(8) != FORMAT_VERSION {
            return Err(bad("unsupported version"));
        }
        let origin = Vector2::new(f64_at(12), f64_at(20));
        let resolution = f64_at(28);
        let width = u32_at(36) as usize;
        let height = u32_at(40) as usize;
        let body = &bytes[44..];
        if body.len() != 4 * width * height {
            return Err(bad("height payload has the wrong length"));
        }
        let heights = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Self::new(origin, resolution, width, height, heights)
    }

    pub fn to_ascii(&self) -> String {
        let mut out = format!(
            "{ASCII_MAGIC} {FORMAT_VERSION}\norigin {:?} {:?}\nresolution {:?}\nsize {} {}\n",
            self.origin.x, self.origin.y, self.resolution, self.width, self.height
        );
        for row in self.heights.chunks(self.width) {
            let line: Vec<String> = row.iter().map(|h| format!("{h:?}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_ascii(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
        let mut next = |key: &str| -> Result<(usize, Vec<String>)> {
            let (n, l) = lines
                .next()
                .ok_or_else(|| Error::parse(path, 0, format!("missing `{key}` line")))?;
            let mut it = l.split_whitespace();
            if it.next() != Some(key) {
                return Err(Error::parse(path, n + 1, format!("expected `{key}`")));
            }
            Ok((n + 1, it.map(str::to_string).collect()))
        };
        let num = |n: usize, s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::parse(path, n, format!("bad number `{s}`")))
        };
        let (n, v) = next(ASCII_MAGIC)?;
        if v.first().map(String::as_str) != Some("1") {
            return Err(Error::parse(path, n, "unsupported version"));
        }
        let (n, v) = next("origin")?;
        if v.len() != 2 {
            return Err(Error::parse(path, n, "origin needs two values"));
        }
        let origin = Vector2::new(num(n, &v[0])?, num(n, &v[1])?);
        let (n, v) = next("resolution")?;
        let resolution = num(n, v.first().map(String::as_str).unwrap_or(""))?;
        let (n, v) = next("size")?;
        if v.len() != 2 {
            return Err(Error::parse(path, n, "size needs two values"));
        }
        let width: usize = v[0].parse().map_err(|_| Error::parse(path, n, "bad width"))?;
        let height: usize = v[1].parse().map_err(|_| Error::parse(path, n, "bad height"))?;
        let mut heights = Vec::with_capacity(width * height);
        for (n, l) in lines {
            for tok in l.split_whitespace() {
                heights.push(num(n + 1, tok)?);
            }
        }
        Self::new(origin, resolution, width, height, heights)
    }

    /// Reads either format, sniffing the magic bytes.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.starts_with(BINARY_MAGIC) && !bytes.starts_with(ASCII_MAGIC.as_bytes()) {
            Self::from_binary(&bytes)
        } else {
            let text = String::from_utf8(bytes).map_err(|_| Error::Format {
                what: "elevation map",
                msg: "neither binary nor UTF-8 text".into(),
            })?;
            Self::from_ascii(&text, path)
        }
    }

    pub fn save_binary(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_binary()).map_err(|e| Error::io(path, e))
    }
}

/// Terrain heights around the vehicle relative to the height under its centre.
#[derive(Debug, Clone, PartialEq)]
pub struct TerrainPatch {
    pub size: usize,
    pub resolution: f64,
    pub heading: f64,
    /// Row-major, `size * size`.
    pub heights: Vec<f64>,
}

impl TerrainPatch {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.heights[row * self.size + col]
    }

    pub fn center(&self) -> f64 {
        let h = self.size / 2;
        self.at(h, h)
    }
}
