//! BEV heatmap rendering with detection circles and ground-truth crosses.

use image::{Rgb, RgbImage};
use msmvd::geometry::BevGridSpec;
use msmvd::inference::{FrameMaps, MapRecord};

/// Pixels of colour bar under the panels.
pub const BAR_HEIGHT: u32 = 12;
/// Gap between panels and around the colour bar.
pub const GAP: u32 = 4;
const TARGET_PANEL: usize = 320;
const BACKGROUND: Rgb<u8> = Rgb([40, 40, 40]);
const GRID_LINE: Rgb<u8> = Rgb([70, 70, 70]);
const DETECTION: Rgb<u8> = Rgb([255, 255, 255]);
const GROUND_TRUTH: Rgb<u8> = Rgb([255, 40, 40]);

/// Inferno-like colour ramp stops over `[0, 1]`.
const STOPS: [[f64; 3]; 5] = [
    [0.0, 0.0, 4.0],
    [87.0, 16.0, 110.0],
    [188.0, 55.0, 84.0],
    [249.0, 142.0, 9.0],
    [252.0, 255.0, 164.0],
];

pub fn colormap(v: f64) -> Rgb<u8> {
    let t = v.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (t.floor() as usize).min(STOPS.len() - 2);
    let f = t - i as f64;
    let c = |k: usize| (STOPS[i][k] + (STOPS[i + 1][k] - STOPS[i][k]) * f).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

/// Placeholder for empty input: a 16 m square grid with nothing on it.
pub fn blank_frame() -> FrameMaps {
    FrameMaps {
        frame_id: 0,
        grid: BevGridSpec::new(160, 160, 0.1, [0.0, 0.0]),
        merged: None,
        levels: Vec::new(),
        detections: Vec::new(),
        ground_truth: Vec::new(),
    }
}

/// Panel geometry: image rows follow grid x, columns follow grid y.
#[derive(Clone, Copy, Debug)]
pub struct Layout {
    /// Pixels per full-grid cell.
    pub scale: f64,
    pub panel_h: u32,
    pub panel_w: u32,
    pub panels: u32,
}

impl Layout {
    pub fn new(grid: &BevGridSpec, panels: u32) -> Self {
        let longest = grid.cells_x.max(grid.cells_y) as f64;
        let scale = (TARGET_PANEL as f64 / longest).max(0.25);
        let panel_h = (grid.cells_x as f64 * scale).round().max(1.0) as u32;
        let panel_w = (grid.cells_y as f64 * scale).round().max(1.0) as u32;
        Self { scale, panel_h, panel_w, panels }
    }

    pub fn width(&self) -> u32 {
        self.panels * self.panel_w + (self.panels - 1) * GAP
    }

    pub fn height(&self) -> u32 {
        self.panel_h + GAP + BAR_HEIGHT
    }

    /// Pixel `(column, row)` of a world position inside panel `k`.
    pub fn pixel(&self, grid: &BevGridSpec, k: u32, world: [f64; 2]) -> (f64, f64) {
        let [gx, gy] = grid.world_to_grid(world[0], world[1]);
        let x0 = (k * (self.panel_w + GAP)) as f64;
        (x0 + gy * self.scale, gx * self.scale)
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn draw_panel(img: &mut RgbImage, layout: &Layout, grid: &BevGridSpec, k: u32, map: Option<&MapRecord>) {
    let x0 = k * (layout.panel_w + GAP);
    for py in 0..layout.panel_h {
        for px in 0..layout.panel_w {
            let gx = (py as f64 + 0.5) / layout.scale;
            let gy = (px as f64 + 0.5) / layout.scale;
            let colour = match map {
                Some(m) => {
                    let s = BevGridSpec::level_scale(m.bev_level) as f64;
                    let i = ((gx / s) as usize).min(m.rows - 1);
                    let j = ((gy / s) as usize).min(m.cols - 1);
                    colormap(m.values[i * m.cols + j])
                }
                None => {
                    // One line every 10 full-grid cells.
                    let on_line = |g: f64| (g / 10.0).fract() < 1.0 / (10.0 * layout.scale).max(1.0);
                    if on_line(gx) || on_line(gy) {
                        GRID_LINE
                    } else {
                        BACKGROUND
                    }
                }
            };
            img.put_pixel(x0 + px, py, colour);
        }
    }
    let _ = grid;
}

fn draw_circle(img: &mut RgbImage, cx: f64, cy: f64, r: f64, c: Rgb<u8>) {
    let steps = (2.0 * std::f64::consts::PI * r * 2.0).ceil().max(16.0) as usize;
    for s in 0..steps {
        let a = 2.0 * std::f64::consts::PI * s as f64 / steps as f64;
        put(img, (cx + r * a.cos()).round() as i64, (cy + r * a.sin()).round() as i64, c);
    }
}

fn draw_cross(img: &mut RgbImage, cx: f64, cy: f64, r: i64, c: Rgb<u8>) {
    let (x, y) = (cx.round() as i64, cy.round() as i64);
    for d in -r..=r {
        put(img, x + d, y + d, c);
        put(img, x + d, y - d, c);
    }
}

/// Renders the merged map, or every level side by side with `per_level`.
pub fn render(frame: &FrameMaps, per_level: bool) -> RgbImage {
    let grid = &frame.grid;
    let panels: Vec<Option<&MapRecord>> = if per_level {
        if frame.levels.is_empty() {
            vec![None; 3]
        } else {
            frame.levels.iter().map(Some).collect()
        }
    } else {
        vec![frame.merged.as_ref().or(frame.levels.first())]
    };
    let layout = Layout::new(grid, panels.len() as u32);
    let mut img = RgbImage::from_pixel(layout.width(), layout.height(), BACKGROUND);
    for (k, map) in panels.iter().enumerate() {
        let k = k as u32;
        draw_panel(&mut img, &layout, grid, k, *map);
        for gt in &frame.ground_truth {
            let (x, y) = layout.pixel(grid, k, *gt);
            draw_cross(&mut img, x, y, 3, GROUND_TRUTH);
        }
        for d in &frame.detections {
            let (x, y) = layout.pixel(grid, k, [d.x, d.y]);
            draw_circle(&mut img, x, y, 5.0, DETECTION);
        }
    }
    let bar_y = layout.panel_h + GAP;
    let w = layout.width();
    for px in 0..w {
        let c = colormap(px as f64 / (w - 1).max(1) as f64);
        for py in bar_y..bar_y + BAR_HEIGHT {
            img.put_pixel(px, py, c);
        }
    }
    img
}
