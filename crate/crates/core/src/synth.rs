//! Procedural "rendered game" street scenes: flat-shaded sky, buildings,
//! road with lane markings, cars and trees. Used as a hermetic source
//! domain for tests and the desk-scale distillation runs.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{self, DatasetManifest, DomainTag, ImageRecord, Split};
use crate::error::{RegenError, Result};
use crate::imageio;
use crate::scalar::Scalar;
use crate::teacher::frame_seed;
use crate::tensor::{Shape, Tensor};

type Rgb = [f64; 3];

struct Canvas {
    w: usize,
    h: usize,
    px: Vec<Rgb>,
}

impl Canvas {
    fn new(w: usize, h: usize) -> Self {
        Canvas {
            w,
            h,
            px: vec![[0.0; 3]; w * h],
        }
    }

    fn set(&mut self, x: i64, y: i64, c: Rgb) {
        if x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < self.h {
            self.px[y as usize * self.w + x as usize] = c;
        }
    }

    fn rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, c: Rgb) {
        for y in y0.max(0.0) as i64..y1.min(self.h as f64).ceil() as i64 {
            for x in x0.max(0.0) as i64..x1.min(self.w as f64).ceil() as i64 {
                self.set(x, y, c);
            }
        }
    }

    fn disc(&mut self, cx: f64, cy: f64, r: f64, c: Rgb) {
        for y in (cy - r).floor() as i64..=(cy + r).ceil() as i64 {
            for x in (cx - r).floor() as i64..=(cx + r).ceil() as i64 {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if dx * dx + dy * dy <= r * r {
                    self.set(x, y, c);
                }
            }
        }
    }
}

fn shade(c: Rgb, k: f64) -> Rgb {
    c.map(|v| (v * k).clamp(0.0, 1.0))
}

fn color(rng: &mut ChaCha8Rng, base: Rgb, spread: f64) -> Rgb {
    base.map(|v| (v + rng.gen_range(-spread..=spread)).clamp(0.0, 1.0))
}

/// Render one scene at `width x height`, values in `[-1, 1]`.
pub fn render_scene<T: Scalar>(width: usize, height: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (width as f64, height as f64);
    let mut cv = Canvas::new(width, height);

    // Sky gradient down to the horizon.
    let horizon = h * rng.gen_range(0.35..0.55);
    let zenith = color(&mut rng, [0.25, 0.45, 0.85], 0.1);
    let haze = color(&mut rng, [0.75, 0.82, 0.9], 0.08);
    for y in 0..height {
        let t = (y as f64 / horizon).min(1.0);
        let c = [0, 1, 2].map(|i| zenith[i] * (1.0 - t) + haze[i] * t);
        for x in 0..width {
            cv.set(x as i64, y as i64, c);
        }
    }

    // Skyline of buildings standing on the horizon, with window grids.
    let mut x = -rng.gen_range(0.0..0.1) * w;
    while x < w {
        let bw = w * rng.gen_range(0.08..0.22);
        let bh = horizon * rng.gen_range(0.3..0.95);
        let wall = color(&mut rng, [0.55, 0.5, 0.45], 0.2);
        cv.rect(x, horizon - bh, x + bw, horizon, wall);
        let lit = color(&mut rng, [0.95, 0.85, 0.45], 0.05);
        let step = (w / 40.0).max(2.0);
        let mut wy = horizon - bh + step * 0.5;
        while wy + step * 0.5 < horizon {
            let mut wx = x + step * 0.5;
            while wx + step * 0.5 < x + bw {
                let c = if rng.gen_bool(0.4) { lit } else { shade(wall, 0.55) };
                cv.rect(wx, wy, wx + step * 0.5, wy + step * 0.5, c);
                wx += step;
            }
            wy += step;
        }
        x += bw + w * rng.gen_range(0.0..0.04);
    }

    // Ground and a road converging to a vanishing point.
    let grass = color(&mut rng, [0.3, 0.55, 0.25], 0.08);
    let asphalt = color(&mut rng, [0.3, 0.3, 0.32], 0.05);
    let paint = color(&mut rng, [0.95, 0.9, 0.6], 0.05);
    let vx = w * rng.gen_range(0.35..0.65);
    let half_bottom = w * rng.gen_range(0.35..0.6);
    let dash_phase = rng.gen_range(0.0..1.0);
    for y in horizon.ceil() as usize..height {
        let t = (y as f64 - horizon) / (h - horizon).max(1.0);
        let half = half_bottom * t;
        let center = vx + (w * 0.5 - vx) * t;
        for x in 0..width {
            let xf = x as f64 + 0.5;
            let c = if (xf - center).abs() <= half {
                let on_dash = ((t.sqrt() * 8.0 + dash_phase) % 1.0) < 0.5;
                if (xf - center).abs() < half * 0.03 + 0.5 && on_dash {
                    paint
                } else if (xf - center).abs() > half * 0.94 {
                    shade(paint, 0.9)
                } else {
                    asphalt
                }
            } else {
                shade(grass, 0.8 + 0.4 * t)
            };
            cv.set(x as i64, y as i64, c);
        }
    }

    // Trees beside the road.
    for _ in 0..rng.gen_range(2..6) {
        let t: f64 = rng.gen_range(0.1..1.0);
        let side = if rng.gen_bool(0.5) { -1.0 } else { 1.0 };
        let center = vx + (w * 0.5 - vx) * t;
        let tx = center + side * (half_bottom * t * rng.gen_range(1.15..1.6));
        let base = horizon + (h - horizon) * t;
        let size = h * 0.12 * t + 1.0;
        cv.rect(tx - size * 0.12, base - size * 1.2, tx + size * 0.12, base, [0.35, 0.22, 0.1]);
        let leaves = color(&mut rng, [0.15, 0.45, 0.15], 0.08);
        cv.disc(tx, base - size * 1.4, size * 0.6, leaves);
    }

    // Cars on the road, nearer ones larger.
    for _ in 0..rng.gen_range(1..4) {
        let t: f64 = rng.gen_range(0.2..0.95);
        let center = vx + (w * 0.5 - vx) * t;
        let lane = rng.gen_range(-0.6..0.6) * half_bottom * t;
        let base = horizon + (h - horizon) * t;
        let cw = w * 0.16 * t + 1.0;
        let ch = cw * 0.5;
        let body = color(&mut rng, [0.6, 0.2, 0.2], 0.35);
        let cx = center + lane;
        cv.rect(cx - cw * 0.5, base - ch, cx + cw * 0.5, base, body);
        cv.rect(cx - cw * 0.3, base - ch * 1.5, cx + cw * 0.3, base - ch, shade(body, 0.8));
        cv.rect(cx - cw * 0.25, base - ch * 1.4, cx + cw * 0.25, base - ch * 1.05, [0.55, 0.7, 0.8]);
        cv.rect(cx - cw * 0.45, base - ch * 0.2, cx - cw * 0.25, base, [0.08; 3]);
        cv.rect(cx + cw * 0.25, base - ch * 0.2, cx + cw * 0.45, base, [0.08; 3]);
    }

    let mut out = Tensor::zeros(Shape::new(1, 3, height, width));
    for y in 0..height {
        for x in 0..width {
            let p = cv.px[y * width + x];
            for (c, v) in p.iter().enumerate() {
                *out.at_mut(0, c, y, x) = T::from_f64_lossy(v * 2.0 - 1.0);
            }
        }
    }
    out
}

/// Render `count` scenes as `scene_NNNNN.png` under `dir` and return a
/// `source_game` manifest with deterministic `ratios` splits.
pub fn write_scene_dataset(
    dir: &Path,
    count: usize,
    (width, height): (usize, usize),
    seed: u64,
    ratios: [f64; 3],
) -> Result<DatasetManifest> {
    if count == 0 {
        return Err(RegenError::invalid("scene dataset needs at least one frame"));
    }
    std::fs::create_dir_all(dir).map_err(|e| RegenError::io(dir, e))?;
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let id = format!("scene_{i:05}");
        let path = dir.join(format!("{id}.png"));
        let img = render_scene::<f32>(width, height, frame_seed(seed, &id));
        imageio::write_png(&path, &img)?;
        records.push(ImageRecord {
            id,
            path,
            split: Split::Train,
            width,
            height,
            aux_channels: BTreeMap::new(),
        });
    }
    let manifest = DatasetManifest {
        name: "synthetic-scenes".into(),
        domain_tag: DomainTag::SourceGame,
        records,
    };
    let manifest = data::split_manifest(&manifest, ratios, seed)?;
    data::save_manifest(&manifest, &dir.join("manifest.json"))?;
    Ok(manifest)
}
