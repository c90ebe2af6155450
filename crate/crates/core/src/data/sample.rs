use fewmark_autodiff::Tensor;

use crate::error::{Error, Result};

/// Image and feature-grid sizes shared by rendering and the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub image_h: usize,
    pub image_w: usize,
    pub feat_h: usize,
    pub feat_w: usize,
}

impl Geometry {
    pub fn standard() -> Geometry {
        Geometry {
            image_h: 32,
            image_w: 32,
            feat_h: 8,
            feat_w: 8,
        }
    }

    /// Number of 2x downsampling stages between image and feature grid.
    /// Requires both axes to shrink by the same power of two.
    pub fn pool_stages(&self) -> Result<usize> {
        let check = |img: usize, feat: usize| -> Option<usize> {
            if feat == 0 || img % feat != 0 {
                return None;
            }
            let ratio = img / feat;
            ratio.is_power_of_two().then(|| ratio.trailing_zeros() as usize)
        };
        let h = check(self.image_h, self.feat_h);
        let w = check(self.image_w, self.feat_w);
        match (h, w) {
            (Some(a), Some(b)) if a == b => Ok(a),
            _ => Err(Error::data(format!(
                "geometry {}x{} -> {}x{} is not a uniform power-of-two reduction",
                self.image_h, self.image_w, self.feat_h, self.feat_w
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_h == 0 || self.image_w == 0 || self.feat_h == 0 || self.feat_w == 0 {
            return Err(Error::data("geometry dimensions must be positive"));
        }
        self.pool_stages().map(|_| ())
    }
}

/// One-hot landmark cells on the feature grid: exactly one hot cell per
/// landmark channel, all cells pairwise distinct.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Labelmap {
    pub feat_h: usize,
    pub feat_w: usize,
    /// `(row, col)` of the hot cell for each landmark channel.
    pub cells: Vec<(usize, usize)>,
}

impl Labelmap {
    pub fn channels(&self) -> usize {
        self.cells.len()
    }

    /// Dense `(channels, feat_h, feat_w)` one-hot view.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let (n, h, w) = (self.cells.len(), self.feat_h, self.feat_w);
        let mut data = vec![0.0; n * h * w];
        for (ch, &(r, c)) in self.cells.iter().enumerate() {
            data[(ch * h + r) * w + c] = 1.0;
        }
        Ok(Tensor::from_vec(&[n, h, w], data)?)
    }
}

/// Maps pixel-space landmark coordinates `(x, y)` to distinct one-hot cells
/// on the feature grid. A landmark's natural cell is
/// `(floor(y * feat_h / image_h), floor(x * feat_w / image_w))`; when two
/// landmarks collide, later ones (in landmark order) move to the nearest free
/// cell by L1 distance, ties broken by ascending `(row, col)`.
pub fn coords_to_labelmap(coords: &[(f64, f64)], geom: &Geometry) -> Result<Labelmap> {
    let (h, w) = (geom.feat_h, geom.feat_w);
    if coords.len() > h * w {
        return Err(Error::data(format!(
            "{} landmarks cannot occupy distinct cells on a {h}x{w} grid",
            coords.len()
        )));
    }
    let mut taken = vec![false; h * w];
    let mut cells = Vec::with_capacity(coords.len());
    for (i, &(x, y)) in coords.iter().enumerate() {
        if x < 0.0 || y < 0.0 || x >= geom.image_w as f64 || y >= geom.image_h as f64 {
            return Err(Error::data(format!(
                "landmark {i} at ({x}, {y}) is outside the {}x{} frame",
                geom.image_h, geom.image_w
            )));
        }
        let row = (y * h as f64 / geom.image_h as f64) as usize;
        let col = (x * w as f64 / geom.image_w as f64) as usize;
        let cell = resolve_collision(row, col, h, w, &taken)
            .expect("free cell exists because landmark count <= grid size");
        taken[cell.0 * w + cell.1] = true;
        cells.push(cell);
    }
    Ok(Labelmap {
        feat_h: h,
        feat_w: w,
        cells,
    })
}

fn resolve_collision(
    row: usize,
    col: usize,
    h: usize,
    w: usize,
    taken: &[bool],
) -> Option<(usize, usize)> {
    if !taken[row * w + col] {
        return Some((row, col));
    }
    for dist in 1..(h + w) {
        let mut ring: Vec<(usize, usize)> = Vec::new();
        let d = dist as isize;
        for dr in -d..=d {
            let dc = d - dr.abs();
            let r = row as isize + dr;
            for dc in if dc == 0 { vec![0] } else { vec![-dc, dc] } {
                let c = col as isize + dc;
                if r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w {
                    ring.push((r as usize, c as usize));
                }
            }
        }
        ring.sort_unstable();
        if let Some(&cell) = ring.iter().find(|&&(r, c)| !taken[r * w + c]) {
            return Some(cell);
        }
    }
    None
}

/// A rendered garment image with its landmark annotations.
#[derive(Clone, Debug)]
pub struct Sample {
    pub category_id: usize,
    /// Row-major `image_h x image_w` grey values in `[0, 1]`.
    pub image: Vec<f64>,
    pub geom: Geometry,
    /// Pixel-space `(x, y)` per landmark.
    pub coords: Vec<(f64, f64)>,
    pub labelmap: Labelmap,
    /// Pixel area enclosed by the garment outline.
    pub area: f64,
}

impl Sample {
    /// The image as a one-channel tensor `(1, image_h, image_w)`.
    pub fn image_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_vec(
            &[1, self.geom.image_h, self.geom.image_w],
            self.image.clone(),
        )?)
    }

    pub fn landmark_count(&self) -> usize {
        self.coords.len()
    }
}
