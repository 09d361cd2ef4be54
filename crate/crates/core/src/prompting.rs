//! Numbered-circle visual prompts and the role/premise/directive text bundle.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::projection::{PixelPoint, SuctionCandidate};
use crate::rgbd::ColorFrame;

/// Version tag of the bundled prompt templates.
pub const TEMPLATE_VERSION: &str = "v1";

const ROLE_V1: &str = include_str!("../assets/prompts/role_v1.txt");
const PREMISE_V1: &str = include_str!("../assets/prompts/premise_v1.txt");

pub fn default_role() -> &'static str {
    ROLE_V1.trim_end()
}

pub fn default_premise() -> &'static str {
    PREMISE_V1.trim_end()
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("directive text is empty")]
    EmptyDirective,
}

/// The three text components sent with the annotated image. Serialized
/// in message order: role, premise, directive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub role: String,
    pub premise: String,
    pub directive: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptOverrides {
    #[serde(default)]
    pub role: Option<String>,
    #[serde(default)]
    pub premise: Option<String>,
}

pub fn assemble_prompt(directive: &str, overrides: &PromptOverrides) -> Result<PromptBundle, PromptError> {
    if directive.trim().is_empty() {
        return Err(PromptError::EmptyDirective);
    }
    Ok(PromptBundle {
        role: overrides
            .role
            .clone()
            .unwrap_or_else(|| default_role().to_string()),
        premise: overrides
            .premise
            .clone()
            .unwrap_or_else(|| default_premise().to_string()),
        directive: directive.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkerStyle {
    pub circle_radius: u32,
    pub circle_color: [u8; 3],
    pub text_color: [u8; 3],
    pub outline_color: [u8; 3],
    pub stroke_width: u32,
    pub font_height: u32,
}

impl Default for MarkerStyle {
    fn default() -> Self {
        Self {
            circle_radius: 14,
            circle_color: [255, 255, 255],
            text_color: [0, 0, 0],
            outline_color: [32, 32, 32],
            stroke_width: 2,
            font_height: 12,
        }
    }
}

impl MarkerStyle {
    /// Smaller markers for low-resolution frames.
    pub fn compact() -> Self {
        Self {
            circle_radius: 7,
            stroke_width: 1,
            font_height: 7,
            ..Self::default()
        }
    }

    pub fn is_valid(&self) -> bool {
        self.circle_radius * 2 >= self.font_height && self.font_height > 0
    }

    /// Default style, or [`MarkerStyle::compact`] for frames narrower than 320 px.
    pub fn for_width(width: u32) -> Self {
        if width < 320 {
            Self::compact()
        } else {
            Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LegendEntry {
    pub label: u32,
    /// Integer pixel center of the drawn marker.
    pub center: [i64; 2],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatedImage {
    pub pixels: ColorFrame,
    pub legend: Vec<LegendEntry>,
}

/// A marker request: label, position, fill color.
#[derive(Debug, Clone, Copy)]
pub struct Marker {
    pub label: u32,
    pub pixel: PixelPoint,
    pub fill: [u8; 3],
}

/// Draws uniform markers for every candidate, in ascending label order.
pub fn render_markers(image: &ColorFrame, candidates: &[SuctionCandidate], style: &MarkerStyle) -> AnnotatedImage {
    let markers: Vec<Marker> = candidates
        .iter()
        .map(|c| Marker {
            label: c.label,
            pixel: c.pixel,
            fill: style.circle_color,
        })
        .collect();
    render_marker_list(image, &markers, style)
}

/// Draws the given markers sorted by label; later labels overdraw earlier ones.
pub fn render_marker_list(image: &ColorFrame, markers: &[Marker], style: &MarkerStyle) -> AnnotatedImage {
    let mut out = image.clone();
    let mut sorted: Vec<&Marker> = markers.iter().collect();
    sorted.sort_by_key(|m| m.label);
    let mut legend = Vec::with_capacity(sorted.len());
    for m in sorted {
        let (cu, cv) = m.pixel.rounded();
        draw_disc(&mut out, cu, cv, style, m.fill);
        draw_label(&mut out, cu, cv, m.label, style);
        legend.push(LegendEntry {
            label: m.label,
            center: [cu, cv],
        });
    }
    AnnotatedImage {
        pixels: out,
        legend,
    }
}

/// Inclusive pixel bounding box of a marker centered at (cu, cv).
pub fn marker_bounds(cu: i64, cv: i64, style: &MarkerStyle) -> (i64, i64, i64, i64) {
    let r = style.circle_radius as i64;
    (cu - r, cv - r, cu + r, cv + r)
}

fn put(img: &mut ColorFrame, x: i64, y: i64, rgb: [u8; 3]) {
    if x >= 0 && y >= 0 && x < img.width as i64 && y < img.height as i64 {
        img.put_pixel(x as u32, y as u32, rgb);
    }
}

fn draw_disc(img: &mut ColorFrame, cu: i64, cv: i64, style: &MarkerStyle, fill: [u8; 3]) {
    let r = style.circle_radius as i64;
    let r2 = (r * r) as f64;
    let inner = (r as f64 - style.stroke_width as f64).max(0.0);
    let inner2 = inner * inner;
    for dy in -r..=r {
        for dx in -r..=r {
            let d2 = (dx * dx + dy * dy) as f64;
            if d2 > r2 {
                continue;
            }
            let rgb = if d2 > inner2 { style.outline_color } else { fill };
            put(img, cu + dx, cv + dy, rgb);
        }
    }
}

const GLYPHS: [[u8; 7]; 10] = [
    [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110],
    [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
    [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111],
    [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110],
    [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010],
    [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110],
    [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110],
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000],
    [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110],
    [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100],
];

fn draw_label(img: &mut ColorFrame, cu: i64, cv: i64, label: u32, style: &MarkerStyle) {
    let digits: Vec<usize> = label
        .to_string()
        .bytes()
        .map(|b| (b - b'0') as usize)
        .collect();
    let gh = style.font_height as i64;
    let gw = ((style.font_height as f64 * 5.0 / 7.0).round() as i64).max(1);
    let gap = (gh / 7).max(1);
    let total_w = digits.len() as i64 * gw + (digits.len() as i64 - 1) * gap;
    let x0 = cu - total_w / 2;
    let y0 = cv - gh / 2;
    for (k, &d) in digits.iter().enumerate() {
        let gx0 = x0 + k as i64 * (gw + gap);
        for y in 0..gh {
            let row = GLYPHS[d][(y * 7 / gh) as usize];
            for x in 0..gw {
                let col = (x * 5 / gw) as u32;
                if row & (0b10000 >> col) != 0 {
                    put(img, gx0 + x, y0 + y, style.text_color);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Vec3;

    fn candidate(label: u32, u: f64, v: f64) -> SuctionCandidate {
        SuctionCandidate {
            label,
            point_camera: Vec3::new(0.0, 0.0, 1.0),
            normal_camera: Vec3::new(0.0, 0.0, -1.0),
            pixel: PixelPoint { u, v },
            point_robot: Vec3::zeros(),
            normal_robot: Vec3::z(),
            scores: None,
        }
    }

    fn gradient(w: u32, h: u32) -> ColorFrame {
        let mut data = Vec::new();
        for v in 0..h {
            for u in 0..w {
                data.extend_from_slice(&[(u % 200) as u8, (v % 200) as u8, 77]);
            }
        }
        ColorFrame::new(w, h, data).unwrap()
    }

    #[test]
    fn empty_candidates_leave_image_unchanged() {
        let img = gradient(64, 48);
        let out = render_markers(&img, &[], &MarkerStyle::default());
        assert_eq!(out.pixels, img);
        assert!(out.legend.is_empty());
    }

    #[test]
    fn single_marker_diff_is_confined_to_its_box() {
        let img = gradient(100, 80);
        let style = MarkerStyle::default();
        let out = render_markers(&img, &[candidate(1, 50.0, 40.0)], &style);
        let (x0, y0, x1, y1) = marker_bounds(50, 40, &style);
        let mut changed = 0;
        for v in 0..80 {
            for u in 0..100 {
                let inside = (u as i64) >= x0 && (u as i64) <= x1 && (v as i64) >= y0 && (v as i64) <= y1;
                if img.pixel(u, v) != out.pixels.pixel(u, v) {
                    assert!(inside, "pixel ({u},{v}) changed outside marker box");
                    changed += 1;
                }
            }
        }
        assert!(changed > 0);
        // the blob is round: box corners untouched, a point at radius-stroke-1 is fill color
        assert_eq!(out.pixels.pixel(x0 as u32, y0 as u32), img.pixel(x0 as u32, y0 as u32));
        assert_eq!(out.pixels.pixel(50 - 11, 40), style.circle_color);
        assert_eq!(out.pixels.pixel(50 - 13, 40), style.outline_color);
        assert_eq!(out.legend, vec![LegendEntry { label: 1, center: [50, 40] }]);
    }

    #[test]
    fn later_labels_overdraw() {
        let img = ColorFrame::filled(60, 40, [0, 0, 0]);
        let style = MarkerStyle::default();
        let c1 = candidate(1, 28.0, 20.0);
        let c2 = candidate(2, 31.0, 20.0);
        let both = render_markers(&img, &[c2.clone(), c1.clone()], &style);
        let only2 = render_markers(&img, &[c2], &style);
        assert_eq!(both.legend.iter().map(|l| l.label).collect::<Vec<_>>(), vec![1, 2]);
        // everywhere marker 2 paints, the combined image equals marker 2 alone
        for v in 0..40 {
            for u in 0..60 {
                let (dx, dy) = (u as i64 - 31, v as i64 - 20);
                if dx * dx + dy * dy <= 14 * 14 {
                    assert_eq!(both.pixels.pixel(u, v), only2.pixels.pixel(u, v));
                }
            }
        }
        // and marker 1 still shows on its far side
        assert_eq!(both.pixels.pixel(28 - 13, 20), style.outline_color);
    }

    #[test]
    fn rendering_is_deterministic_and_rounds_centers() {
        let img = gradient(80, 60);
        let cands = [candidate(1, 10.4, 10.6), candidate(2, 70.5, 50.2)];
        let a = render_markers(&img, &cands, &MarkerStyle::default());
        let b = render_markers(&img, &cands, &MarkerStyle::default());
        assert_eq!(a, b);
        assert_eq!(a.legend[0].center, [10, 11]);
        assert_eq!(a.legend[1].center, [71, 50]);
    }

    #[test]
    fn digits_render_inside_circle() {
        let img = ColorFrame::filled(40, 40, [9, 9, 9]);
        let style = MarkerStyle::default();
        let out = render_markers(&img, &[candidate(15, 20.0, 20.0)], &style);
        let mut text = 0;
        for v in 0..40u32 {
            for u in 0..40u32 {
                if out.pixels.pixel(u, v) == style.text_color {
                    let (dx, dy) = (u as i64 - 20, v as i64 - 20);
                    assert!(dx * dx + dy * dy < 12 * 12);
                    text += 1;
                }
            }
        }
        assert!(text > 20);
        assert!(style.is_valid() && MarkerStyle::compact().is_valid());
    }

    #[test]
    fn default_templates() {
        let b = assemble_prompt("Pick up the cola.", &PromptOverrides::default()).unwrap();
        assert_eq!(b.directive, "Pick up the cola.");
        assert!(b.role.starts_with("You are a picking robot in a retail store."));
        assert!(b.premise.contains("- Flatness: Prioritize points on the object where the surface is flat and smooth."));
        assert!(b.premise.ends_with("Multiple suction points represent good immediate actions to be taken."));
        assert_eq!(b.role, default_role());
    }

    #[test]
    fn override_semantics() {
        let o = PromptOverrides {
            role: Some("You are a careful stocker.".into()),
            premise: None,
        };
        let b = assemble_prompt("Pick the green tea box.", &o).unwrap();
        assert_eq!(b.role, "You are a careful stocker.");
        assert_eq!(b.premise, default_premise());
        assert_eq!(assemble_prompt("  ", &o), Err(PromptError::EmptyDirective));
    }

    #[test]
    fn serialization_order_and_roundtrip() {
        let b = assemble_prompt("Pick the coffee bag from the side.", &PromptOverrides::default()).unwrap();
        let json = serde_json::to_string(&b).unwrap();
        let r = json.find("\"role\"").unwrap();
        let p = json.find("\"premise\"").unwrap();
        let d = json.find("\"directive\"").unwrap();
        assert!(r < p && p < d);
        let back: PromptBundle = serde_json::from_str(&json).unwrap();
        assert_eq!(back, b);
        assert_eq!(serde_json::to_string(&back).unwrap(), json);
    }
}
