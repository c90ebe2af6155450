use fewmark_autodiff::Rng;

use crate::data::registry::Category;
use crate::data::sample::{coords_to_labelmap, Geometry, Sample};
use crate::error::{Error, Result};

/// Rendering parameters: geometry plus jitter, stroke, blur, and noise
/// settings.
#[derive(Clone, Debug)]
pub struct RenderConfig {
    pub geom: Geometry,
    /// Rotation drawn uniformly from `[-max_rot_deg, max_rot_deg]` degrees.
    pub max_rot_deg: f64,
    /// Isotropic scale drawn uniformly from `[scale_lo, scale_hi]`.
    pub scale_lo: f64,
    pub scale_hi: f64,
    /// Translation per axis drawn uniformly from `[-max_translate,
    /// max_translate]` (fraction of the frame).
    pub max_translate: f64,
    /// Stroke width in pixels drawn uniformly from `1..=max_thickness`.
    pub max_thickness: usize,
    pub blur: bool,
    /// Additive Gaussian pixel noise, clipped back to `[0, 1]`.
    pub noise_sigma: f64,
    /// Jitter re-draws allowed before giving up on a seed.
    pub max_retries: usize,
}

impl RenderConfig {
    pub fn standard() -> RenderConfig {
        RenderConfig {
            geom: Geometry::standard(),
            max_rot_deg: 15.0,
            scale_lo: 0.8,
            scale_hi: 1.2,
            max_translate: 0.1,
            max_thickness: 2,
            blur: true,
            noise_sigma: 0.05,
            max_retries: 120,
        }
    }

    /// Identity transform, no blur, no noise: coordinates become the template
    /// scaled onto the pixel grid.
    pub fn identity() -> RenderConfig {
        RenderConfig {
            max_rot_deg: 0.0,
            scale_lo: 1.0,
            scale_hi: 1.0,
            max_translate: 0.0,
            max_thickness: 1,
            blur: false,
            noise_sigma: 0.0,
            ..RenderConfig::standard()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.geom.validate()?;
        if self.scale_lo <= 0.0 || self.scale_hi < self.scale_lo {
            return Err(Error::data(format!(
                "invalid scale range [{}, {}]",
                self.scale_lo, self.scale_hi
            )));
        }
        if self.max_thickness == 0 {
            return Err(Error::data("stroke thickness must be at least 1"));
        }
        if self.noise_sigma < 0.0 || self.max_rot_deg < 0.0 || self.max_translate < 0.0 {
            return Err(Error::data("jitter magnitudes must be non-negative"));
        }
        Ok(())
    }
}

/// One drawn transform: rotation (radians), isotropic scale, translation in
/// unit-square units, and stroke thickness.
#[derive(Clone, Copy, Debug)]
pub struct Jitter {
    pub rot: f64,
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
    pub thickness: usize,
}

impl Jitter {
    fn draw(cfg: &RenderConfig, rng: &mut Rng) -> Jitter {
        let deg = rng.uniform_in(-cfg.max_rot_deg, cfg.max_rot_deg);
        Jitter {
            rot: deg.to_radians(),
            scale: rng.uniform_in(cfg.scale_lo, cfg.scale_hi),
            tx: rng.uniform_in(-cfg.max_translate, cfg.max_translate),
            ty: rng.uniform_in(-cfg.max_translate, cfg.max_translate),
            thickness: 1 + rng.below(cfg.max_thickness),
        }
    }
}

/// Rotates, scales (about the square's center), and translates template
/// points, staying in unit-square coordinates.
pub fn apply_jitter(template: &[(f64, f64)], j: &Jitter) -> Vec<(f64, f64)> {
    let (cos, sin) = (j.rot.cos(), j.rot.sin());
    template
        .iter()
        .map(|&(x, y)| {
            let (dx, dy) = (x - 0.5, y - 0.5);
            let rx = j.scale * (cos * dx - sin * dy);
            let ry = j.scale * (sin * dx + cos * dy);
            (0.5 + rx + j.tx, 0.5 + ry + j.ty)
        })
        .collect()
}

/// Absolute shoelace area of a closed polygon.
pub fn polygon_area(points: &[(f64, f64)]) -> f64 {
    let n = points.len();
    if n < 3 {
        return 0.0;
    }
    let mut twice = 0.0;
    for i in 0..n {
        let (x0, y0) = points[i];
        let (x1, y1) = points[(i + 1) % n];
        twice += x0 * y1 - x1 * y0;
    }
    (twice * 0.5).abs()
}

fn stamp(image: &mut [f64], geom: &Geometry, x: f64, y: f64, thickness: usize) {
    let (h, w) = (geom.image_h as isize, geom.image_w as isize);
    let mut put = |r: isize, c: isize| {
        if r >= 0 && c >= 0 && r < h && c < w {
            image[(r * w + c) as usize] = 1.0;
        }
    };
    if thickness <= 1 {
        put(y.round() as isize, x.round() as isize);
    } else {
        let (r0, c0) = (y.floor() as isize, x.floor() as isize);
        for dr in 0..2 {
            for dc in 0..2 {
                put(r0 + dr, c0 + dc);
            }
        }
    }
}

fn draw_segment(image: &mut [f64], geom: &Geometry, a: (f64, f64), b: (f64, f64), thickness: usize) {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len = dx.hypot(dy);
    let steps = (len * 2.0).ceil() as usize + 1;
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        stamp(image, geom, a.0 + dx * t, a.1 + dy * t, thickness);
    }
}

fn blur3(image: &[f64], h: usize, w: usize) -> Vec<f64> {
    const KERNEL: [[f64; 3]; 3] = [[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]];
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (u, row) in KERNEL.iter().enumerate() {
                let rr = r as isize + u as isize - 1;
                if rr < 0 || rr >= h as isize {
                    continue;
                }
                for (v, k) in row.iter().enumerate() {
                    let cc = c as isize + v as isize - 1;
                    if cc < 0 || cc >= w as isize {
                        continue;
                    }
                    acc += k * image[rr as usize * w + cc as usize];
                }
            }
            out[r * w + c] = acc / 16.0;
        }
    }
    out
}

/// Renders one sample of a category: jittered outline drawn as pixel strokes,
/// blurred, noised, with pixel coordinates, a collision-free labelmap, and
/// the outline's pixel area. Depends only on `(category, cfg, seed)`.
///
/// Jitters that push any landmark outside the frame are re-drawn; if
/// `max_retries` draws all fail the seed is rejected with an error naming it.
pub fn render_sample(category: &Category, cfg: &RenderConfig, seed: u64) -> Result<Sample> {
    cfg.validate()?;
    let geom = &cfg.geom;
    let mut rng = Rng::new(seed);
    let (wf, hf) = (geom.image_w as f64, geom.image_h as f64);

    let mut chosen: Option<(Vec<(f64, f64)>, Jitter)> = None;
    for _ in 0..=cfg.max_retries {
        let jitter = Jitter::draw(cfg, &mut rng);
        let unit = apply_jitter(&category.template, &jitter);
        let pixel: Vec<(f64, f64)> = unit.iter().map(|&(x, y)| (x * wf, y * hf)).collect();
        let in_frame = pixel
            .iter()
            .all(|&(x, y)| x >= 0.0 && y >= 0.0 && x < wf && y < hf);
        if in_frame {
            chosen = Some((pixel, jitter));
            break;
        }
    }
    let Some((coords, jitter)) = chosen else {
        return Err(Error::data(format!(
            "render: category {:?}, seed {seed}: no in-frame jitter after {} draws",
            category.name,
            cfg.max_retries + 1
        )));
    };

    let mut image = vec![0.0; geom.image_h * geom.image_w];
    for &(a, b) in &category.edges {
        draw_segment(&mut image, geom, coords[a], coords[b], jitter.thickness);
    }
    if cfg.blur {
        image = blur3(&image, geom.image_h, geom.image_w);
    }
    if cfg.noise_sigma > 0.0 {
        for v in image.iter_mut() {
            *v = (*v + cfg.noise_sigma * rng.normal()).clamp(0.0, 1.0);
        }
    }

    let labelmap = coords_to_labelmap(&coords, geom)?;
    let area = polygon_area(&coords);
    if area <= 0.0 {
        return Err(Error::data(format!(
            "render: category {:?}, seed {seed}: degenerate outline area",
            category.name
        )));
    }
    Ok(Sample {
        category_id: category.id,
        image,
        geom: *geom,
        coords,
        labelmap,
        area,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::registry::Registry;

    #[test]
    fn identity_config_reproduces_scaled_template() {
        let reg = Registry::standard();
        let cat = reg.by_name("skirt").unwrap();
        let s = render_sample(cat, &RenderConfig::identity(), 5).unwrap();
        for (&(cx, cy), &(tx, ty)) in s.coords.iter().zip(&cat.template) {
            assert!((cx - tx * 32.0).abs() < 1e-12);
            assert!((cy - ty * 32.0).abs() < 1e-12);
        }
    }

    #[test]
    fn doubled_scale_quadruples_area() {
        let reg = Registry::standard();
        let cat = reg.by_name("vest").unwrap();
        let base = Jitter { rot: 0.0, scale: 1.0, tx: 0.0, ty: 0.0, thickness: 1 };
        let doubled = Jitter { scale: 2.0, ..base };
        let a1 = polygon_area(&apply_jitter(&cat.template, &base));
        let a2 = polygon_area(&apply_jitter(&cat.template, &doubled));
        assert!((a2 / a1 - 4.0).abs() < 1e-9);
    }

    #[test]
    fn rotation_preserves_area() {
        let reg = Registry::standard();
        let cat = reg.by_name("trousers").unwrap();
        let base = Jitter { rot: 0.0, scale: 1.0, tx: 0.0, ty: 0.0, thickness: 1 };
        let turned = Jitter { rot: 0.4, ..base };
        let a1 = polygon_area(&apply_jitter(&cat.template, &base));
        let a2 = polygon_area(&apply_jitter(&cat.template, &turned));
        assert!((a2 - a1).abs() < 1e-9);
    }

    #[test]
    fn same_seed_same_bytes_different_seed_differs() {
        let reg = Registry::standard();
        let cat = reg.by_name("shorts").unwrap();
        let cfg = RenderConfig::standard();
        let a = render_sample(cat, &cfg, 7).unwrap();
        let b = render_sample(cat, &cfg, 7).unwrap();
        let c = render_sample(cat, &cfg, 8).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.coords, b.coords);
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn pixels_stay_in_unit_range_and_area_positive() {
        let reg = Registry::standard();
        let cfg = RenderConfig::standard();
        for cat in reg.categories() {
            for seed in 0..20 {
                let s = render_sample(cat, &cfg, seed).unwrap();
                assert!(s.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
                assert!(s.area > 0.0);
                assert_eq!(s.landmark_count(), cat.landmark_count());
            }
        }
    }

    #[test]
    fn jitter_actually_moves_landmarks() {
        let reg = Registry::standard();
        let cat = reg.by_name("vest-dress").unwrap();
        let cfg = RenderConfig::standard();
        let reference = render_sample(cat, &RenderConfig::identity(), 0).unwrap();
        let mut moved = 0usize;
        let runs = 200usize;
        for seed in 0..runs as u64 {
            let s = render_sample(cat, &cfg, seed).unwrap();
            let displacement: f64 = s
                .coords
                .iter()
                .zip(&reference.coords)
                .map(|(a, b)| (a.0 - b.0).hypot(a.1 - b.1))
                .sum::<f64>()
                / s.coords.len() as f64;
            if displacement > 1e-6 {
                moved += 1;
            }
        }
        assert_eq!(moved, runs, "every jittered render should move landmarks");
    }

    #[test]
    fn labelmap_cells_are_pairwise_distinct() {
        let reg = Registry::standard();
        let cfg = RenderConfig::standard();
        for cat in reg.categories() {
            let s = render_sample(cat, &cfg, 3).unwrap();
            let mut cells = s.labelmap.cells.clone();
            cells.sort_unstable();
            cells.dedup();
            assert_eq!(cells.len(), cat.landmark_count(), "{}", cat.name);
        }
    }

    #[test]
    fn blur_and_noise_change_the_image() {
        let reg = Registry::standard();
        let cat = reg.by_name("sling").unwrap();
        let plain = render_sample(cat, &RenderConfig::identity(), 9).unwrap();
        let mut with_blur = RenderConfig::identity();
        with_blur.blur = true;
        let blurred = render_sample(cat, &with_blur, 9).unwrap();
        assert_ne!(plain.image, blurred.image);
        assert_eq!(plain.coords, blurred.coords);
    }
}
