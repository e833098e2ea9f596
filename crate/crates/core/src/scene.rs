//! Synthetic rectified stereo scenes with exact ground truth.
//!
//! A scene is a stack of textured planes described in left-image pixel
//! coordinates. Each plane has a disparity that is constant (fronto-parallel)
//! or affine in `x` (slanted), and a continuous value-noise texture attached
//! to its left-image coordinates. The right view at column `xr` shows the
//! nearest plane that projects there, sampled at the left position
//! `x = xr + d(x)`, so the right image is rendered without resampling error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{self, Camera, LossConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Depth bounds of the representable range.
pub const MIN_DEPTH: f64 = 0.1;
pub const MAX_DEPTH: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneSpec {
    /// `[top, left, bottom, right]` as fractions of the image size.
    pub region: [f64; 4],
    /// Depth at the left and right image borders; equal for a fronto-parallel plane.
    pub depth_left: f64,
    pub depth_right: f64,
    /// Texture lattice spacing in pixels.
    pub cell: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub focal: f64,
    pub baseline: f64,
    /// Amplitude of independent uniform noise added to each view.
    #[serde(default)]
    pub noise: f64,
    /// Back to front; the first plane must cover the whole image.
    pub planes: Vec<PlaneSpec>,
}

pub const PRESETS: [&str; 3] = ["two-plane", "single-plane", "slanted"];

impl SceneConfig {
    /// A textured background with a nearer rectangle in the middle.
    pub fn two_plane(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            focal: 50.0,
            baseline: 0.02,
            noise: 0.0,
            planes: vec![
                PlaneSpec {
                    region: [0.0, 0.0, 1.0, 1.0],
                    depth_left: 0.5,
                    depth_right: 0.5,
                    cell: 4.0,
                },
                PlaneSpec {
                    region: [0.25, 0.375, 0.75, 0.75],
                    depth_left: 0.2,
                    depth_right: 0.2,
                    cell: 3.0,
                },
            ],
        }
    }

    pub fn single_plane(height: usize, width: usize) -> Self {
        Self {
            planes: vec![PlaneSpec {
                region: [0.0, 0.0, 1.0, 1.0],
                depth_left: 0.25,
                depth_right: 0.25,
                cell: 4.0,
            }],
            ..Self::two_plane(height, width)
        }
    }

    /// One plane whose disparity runs from 1 to 6 px across the image, with
    /// a smooth texture.
    pub fn slanted(height: usize, width: usize) -> Self {
        Self {
            planes: vec![PlaneSpec {
                region: [0.0, 0.0, 1.0, 1.0],
                depth_left: 1.0,
                depth_right: 1.0 / 6.0,
                cell: 10.0,
            }],
            ..Self::two_plane(height, width)
        }
    }

    pub fn preset(name: &str, height: usize, width: usize) -> Result<Self> {
        match name {
            "two-plane" => Ok(Self::two_plane(height, width)),
            "single-plane" => Ok(Self::single_plane(height, width)),
            "slanted" => Ok(Self::slanted(height, width)),
            _ => Err(Error::InvalidConfig(format!(
                "unknown scene preset '{name}' (expected one of {})",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn camera(&self) -> Camera {
        Camera {
            focal: self.focal,
            baseline: self.baseline,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 2 {
            return Err(Error::InvalidConfig("scene: size must be at least 2x2".into()));
        }
        if !(self.focal > 0.0 && self.baseline > 0.0) {
            return Err(Error::InvalidConfig("scene: focal and baseline must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(Error::InvalidConfig("scene: noise must lie in [0,1)".into()));
        }
        let Some(first) = self.planes.first() else {
            return Err(Error::InvalidConfig("scene: at least one plane required".into()));
        };
        if first.region != [0.0, 0.0, 1.0, 1.0] {
            return Err(Error::InvalidConfig("scene: the first plane must cover the image".into()));
        }
        for (i, p) in self.planes.iter().enumerate() {
            for z in [p.depth_left, p.depth_right] {
                if !(MIN_DEPTH..=MAX_DEPTH).contains(&z) {
                    return Err(Error::InvalidConfig(format!(
                        "scene: plane {i} depth {z} outside [{MIN_DEPTH}, {MAX_DEPTH}]"
                    )));
                }
            }
            let [t, l, b, r] = p.region;
            if !(0.0 <= t && t < b && b <= 1.0 && 0.0 <= l && l < r && r <= 1.0) {
                return Err(Error::InvalidConfig(format!("scene: plane {i} has an empty or invalid region")));
            }
            if !(p.cell >= 1.0) {
                return Err(Error::InvalidConfig(format!("scene: plane {i} texture cell must be >= 1 px")));
            }
            let geo = self.geometry(p);
            if geo.slope >= 1.0 {
                return Err(Error::InvalidConfig(format!(
                    "scene: plane {i} is too steep (disparity slope {} >= 1)",
                    geo.slope
                )));
            }
        }
        Ok(())
    }

    fn geometry(&self, p: &PlaneSpec) -> Plane {
        let fb = self.focal * self.baseline;
        let (dl, dr) = (fb / p.depth_left, fb / p.depth_right);
        let span = (self.width - 1) as f64;
        let [t, l, b, r] = p.region;
        let (h, w) = (self.height as f64, self.width as f64);
        Plane {
            offset: dl,
            slope: (dr - dl) / span,
            rows: ((t * h).round() as usize, (b * h).round() as usize),
            cols: ((l * w).round() as usize, (r * w).round() as usize),
        }
    }
}

/// Disparity `offset + slope·x` over a rectangle of left-image pixels.
#[derive(Debug, Clone, Copy)]
struct Plane {
    offset: f64,
    slope: f64,
    rows: (usize, usize),
    cols: (usize, usize),
}

impl Plane {
    fn disparity(&self, x: f64) -> f64 {
        self.offset + self.slope * x
    }

    fn covers(&self, y: usize, x: f64) -> bool {
        y >= self.rows.0 && y < self.rows.1 && x >= self.cols.0 as f64 && x < self.cols.1 as f64
    }

    /// Left-image column seen at right-image column `xr`.
    fn left_of(&self, xr: f64) -> f64 {
        (xr + self.offset) / (1.0 - self.slope)
    }
}

/// Two-octave value noise with C¹ interpolation on a random lattice.
struct Texture {
    lattice: Vec<Tensor>,
    cells: Vec<f64>,
    pad: f64,
}

const OCTAVE_WEIGHTS: [f64; 2] = [0.65, 0.35];

impl Texture {
    fn new(cell: f64, height: usize, width: usize, rng: &mut Rng) -> Self {
        let pad = width as f64;
        let cells = vec![cell, (cell / 2.0).max(1.0)];
        let lattice = cells
            .iter()
            .map(|&c| {
                let nx = ((3.0 * width as f64) / c).ceil() as usize + 3;
                let ny = (height as f64 / c).ceil() as usize + 3;
                rng.tensor(&[3, ny, nx], 0.0, 1.0)
            })
            .collect();
        Self { lattice, cells, pad }
    }

    fn sample(&self, ch: usize, y: f64, x: f64) -> f64 {
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let mut v = 0.0;
        for ((grid, &cell), &wgt) in self.lattice.iter().zip(&self.cells).zip(&OCTAVE_WEIGHTS) {
            let (ny, nx) = (grid.shape()[1], grid.shape()[2]);
            let gx = ((x + self.pad) / cell).clamp(0.0, (nx - 2) as f64);
            let gy = (y / cell).clamp(0.0, (ny - 2) as f64);
            let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
            let (tx, ty) = (smooth(gx - ix as f64), smooth(gy - iy as f64));
            let at = |r: usize, c: usize| grid.data()[(ch * ny + r) * nx + c];
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            v += wgt * (top * (1.0 - ty) + bot * ty);
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StereoSample {
    pub left: Tensor,
    pub right: Tensor,
    /// Left-frame disparity in pixels, `[1,h,w]`.
    pub gt_disparity: Tensor,
    pub gt_depth: Tensor,
    /// 1 where a left pixel has no valid counterpart in the right view.
    pub occlusion: Tensor,
    pub camera: Camera,
}

impl StereoSample {
    pub fn visible_fraction(&self) -> f64 {
        1.0 - self.occlusion.sum() / self.occlusion.len() as f64
    }
}

/// Index of the nearest plane covering left pixel `(y, x)`.
fn visible_left(planes: &[Plane], y: usize, x: usize) -> usize {
    let xf = x as f64;
    let mut best = 0;
    for (i, p) in planes.iter().enumerate() {
        if p.covers(y, xf) && p.disparity(xf) > planes[best].disparity(xf) {
            best = i;
        }
    }
    best
}

/// Nearest plane projecting to right pixel `(y, xr)` and its left-image column.
fn visible_right(planes: &[Plane], y: usize, xr: usize) -> (usize, f64) {
    let xr = xr as f64;
    let mut best = (0, planes[0].left_of(xr));
    for (i, p) in planes.iter().enumerate().skip(1) {
        let x = p.left_of(xr);
        let bx = best.1;
        if p.covers(y, x) && p.disparity(x) > planes[best.0].disparity(bx) {
            best = (i, x);
        }
    }
    best
}

pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<StereoSample> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = Rng::new(seed);
    let planes: Vec<Plane> = cfg.planes.iter().map(|p| cfg.geometry(p)).collect();
    let textures: Vec<Texture> = cfg.planes.iter().map(|p| Texture::new(p.cell, h, w, &mut rng)).collect();

    let mut left = Tensor::zeros(&[3, h, w]);
    let mut right = Tensor::zeros(&[3, h, w]);
    let mut disp = Tensor::zeros(&[1, h, w]);
    let mut right_owner = vec![0usize; h * w];
    for y in 0..h {
        for x in 0..w {
            let p = visible_left(&planes, y, x);
            disp.data_mut()[y * w + x] = planes[p].disparity(x as f64);
            let (q, xl) = visible_right(&planes, y, x);
            right_owner[y * w + x] = q;
            for ch in 0..3 {
                left.data_mut()[(ch * h + y) * w + x] = textures[p].sample(ch, y as f64, x as f64);
                right.data_mut()[(ch * h + y) * w + x] = textures[q].sample(ch, y as f64, xl);
            }
        }
    }

    let max_disp = disp.data().iter().cloned().fold(0.0, f64::max);
    let band = max_disp.ceil() as usize;
    let mut occ = Tensor::zeros(&[1, h, w]);
    for y in 0..h {
        for x in 0..w {
            let p = visible_left(&planes, y, x);
            let xr = x as f64 - disp.data()[y * w + x];
            let hidden = if x < band || xr < 0.0 {
                true
            } else {
                let (t0, t1) = (xr.floor() as usize, (xr.ceil() as usize).min(w - 1));
                right_owner[y * w + t0] != p || right_owner[y * w + t1] != p
            };
            if hidden {
                occ.data_mut()[y * w + x] = 1.0;
            }
        }
    }

    if cfg.noise > 0.0 {
        for img in [&mut left, &mut right] {
            for v in img.data_mut() {
                *v = (*v + rng.uniform(-cfg.noise, cfg.noise)).clamp(0.0, 1.0);
            }
        }
    }

    let fb = cfg.focal * cfg.baseline;
    let gt_depth = disp.map(|d| fb / d);
    Ok(StereoSample {
        left,
        right,
        gt_disparity: disp,
        gt_depth,
        occlusion: occ,
        camera: cfg.camera(),
    })
}

/// Photometric loss of `recon` against `image` over the pixels where
/// `mask` is 0. Masked reconstruction pixels are replaced by the target
/// before the SSIM statistics are taken.
pub fn masked_photometric_loss(image: &Tensor, recon: &Tensor, mask: &Tensor, cfg: &LossConfig) -> Result<f64> {
    let (c, h, w) = image.dims3("masked_photometric_loss")?;
    if mask.shape() != [1, h, w] || recon.shape() != image.shape() {
        return Err(Error::shape("masked_photometric_loss", image.shape(), mask.shape()));
    }
    let md = mask.data();
    let visible = md.iter().filter(|&&m| m == 0.0).count();
    if visible == 0 {
        return Err(Error::InvalidArgument("masked_photometric_loss: every pixel is masked".into()));
    }
    let mut fixed = recon.clone();
    for ch in 0..c {
        for k in 0..h * w {
            if md[k] != 0.0 {
                fixed.data_mut()[ch * h * w + k] = image.data()[ch * h * w + k];
            }
        }
    }
    let s = losses::ssim(image, &fixed, cfg)?;
    let mut total = 0.0;
    for ch in 0..c {
        for k in 0..h * w {
            if md[k] == 0.0 {
                let i = ch * h * w + k;
                let l1 = (image.data()[i] - fixed.data()[i]).abs();
                total += 0.5 * cfg.gamma * (1.0 - s.data()[i]) + (1.0 - cfg.gamma) * l1;
            }
        }
    }
    Ok(total / (c * visible) as f64)
}

/// The warp-consistency check: rebuild the left view from the right one at
/// the true disparity and score it off the occluded region.
pub fn warp_consistency(sample: &StereoSample, cfg: &LossConfig) -> Result<f64> {
    let recon = losses::warp(&sample.right, &sample.gt_disparity, losses::WarpDirection::LeftFromRight)?;
    masked_photometric_loss(&sample.left, &recon, &sample.occlusion, cfg)
}
