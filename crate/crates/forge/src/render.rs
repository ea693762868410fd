//! Deterministic raster renderer: entities on a 3x3 layout inside the panel,
//! filled shapes with shade-dependent intensity on a black background.

use crate::rules::{PanelAttrs, ATTRIBUTES};

/// Entity fill intensities per shade level.
const SHADES: [u8; 3] = [102, 178, 255];

/// Render one panel into a `size*size` grayscale byte buffer.
pub fn render_panel(panel: &PanelAttrs, size: u16) -> Vec<u8> {
    let s = size as i32;
    let mut img = vec![0u8; (s * s) as usize];
    let shade = SHADES[panel.shade as usize % SHADES.len()];
    let radius = (s * (2 + panel.size as i32)) / 32; // levels 0..2 -> r 1..2 at 16px, 2..4 at 32px
    let radius = radius.max(1);

    for e in 0..panel.count.min(9) {
        let gr = (e / 3) as i32;
        let gc = (e % 3) as i32;
        let cy = ((gr * 2 + 1) * s) / 6;
        let cx = ((gc * 2 + 1) * s) / 6;
        draw_shape(&mut img, s, panel.shape, cx, cy, radius, shade);
    }
    img
}

fn draw_shape(img: &mut [u8], s: i32, shape: u8, cx: i32, cy: i32, r: i32, shade: u8) {
    for dy in -r..=r {
        for dx in -r..=r {
            let inside = match shape {
                0 => dx * dx + dy * dy <= r * r,          // circle
                1 => true,                                 // square
                2 => 2 * dx.abs() <= dy + r,               // triangle, apex up
                _ => dx.abs() + dy.abs() <= r,             // diamond
            };
            if inside {
                let (x, y) = (cx + dx, cy + dy);
                if x >= 0 && x < s && y >= 0 && y < s {
                    img[(y * s + x) as usize] = shade;
                }
            }
        }
    }
}

/// All renderable panels with their rasters, for nearest-template
/// classification of generated answers.
pub struct TemplateBank {
    size: u16,
    panels: Vec<PanelAttrs>,
    rasters: Vec<Vec<u8>>,
}

impl TemplateBank {
    pub fn new(size: u16) -> Self {
        let mut panels = Vec::new();
        let (slo, shi) = ATTRIBUTES[0].domain();
        let (clo, chi) = ATTRIBUTES[1].domain();
        let (zlo, zhi) = ATTRIBUTES[2].domain();
        let (hlo, hhi) = ATTRIBUTES[3].domain();
        for shape in slo..=shi {
            for count in clo..=chi {
                for size_level in zlo..=zhi {
                    for shade in hlo..=hhi {
                        panels.push(PanelAttrs {
                            shape,
                            count,
                            size: size_level,
                            shade,
                        });
                    }
                }
            }
        }
        let rasters = panels.iter().map(|p| render_panel(p, size)).collect();
        TemplateBank {
            size,
            panels,
            rasters,
        }
    }

    pub fn len(&self) -> usize {
        self.panels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.panels.is_empty()
    }

    /// Nearest template by mean squared error over [0,1] pixels, plus that
    /// error. Callers reject matches above their distance threshold.
    pub fn classify(&self, raster: &[u8]) -> (PanelAttrs, f64) {
        assert_eq!(raster.len(), (self.size as usize).pow(2));
        let mut best = (self.panels[0], f64::INFINITY);
        for (panel, template) in self.panels.iter().zip(&self.rasters) {
            let mut acc = 0.0f64;
            for (&a, &b) in raster.iter().zip(template) {
                let d = (a as f64 - b as f64) / 255.0;
                acc += d * d;
            }
            let mse = acc / raster.len() as f64;
            if mse < best.1 {
                best = (*panel, mse);
            }
        }
        best
    }
}
