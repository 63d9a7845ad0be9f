//! Overlay figures and explanation-map renderings.
//!
//! Overlays assign (R, G, B) to (fiber membrane, mitochondrial mass, map):
//! attribution-family maps render into the blue plane; signal-family
//! figures keep the blue plane black and show the map as its own panel.
//! Rendering is pure and never touches the map data on disk.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explain::RelevanceMap;
use crate::patch::INTENSITY_MAX;

/// How the map enters the overlay's blue plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverlayMode {
    /// Blue plane = display-normalised |map|.
    Attribution,
    /// Blue plane identically zero; the map renders as a separate panel.
    Signal,
}

/// Normalisation for standalone map renderings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "norm")]
pub enum MapNorm {
    /// Clip at the p-th percentile of |values| before scaling.
    SymmetricPercentile { p: f64 },
    /// Scale by the maximum |value|.
    AbsMax,
}

/// Colour scale for standalone map renderings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapColormap {
    /// Blue-gray-red with zero at mid-gray.
    Diverging,
    Grayscale,
}

/// An 8-bit RGB figure plus its plane legend and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlayImage {
    pub pixels: RgbImage,
    pub legend: [String; 3],
    pub provenance: Option<String>,
}

impl OverlayImage {
    pub fn dims(&self) -> (usize, usize) {
        (self.pixels.height() as usize, self.pixels.width() as usize)
    }

    /// Deterministic PNG bytes for this figure.
    pub fn png_bytes(&self) -> Result<Vec<u8>> {
        let mut bytes = Vec::new();
        let encoder = image::codecs::png::PngEncoder::new(&mut bytes);
        self.pixels
            .write_with_encoder(encoder)
            .map_err(Error::Png)?;
        Ok(bytes)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.png_bytes()?)?;
        Ok(())
    }
}

fn display_u8(value: f64) -> u8 {
    (value.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Per-pixel map magnitude summed over channels, scaled to [0, 1] by its
/// maximum (zero map stays zero).
fn magnitude_plane(map: &RelevanceMap) -> Array2<f64> {
    let (h, w, c) = map.values.dim();
    let mut mag = Array2::<f64>::zeros((h, w));
    for row in 0..h {
        for col in 0..w {
            let mut sum = 0.0;
            for ch in 0..c {
                sum += map.values[(row, col, ch)].abs();
            }
            mag[(row, col)] = sum;
        }
    }
    let max = mag.iter().cloned().fold(0.0f64, f64::max);
    if max > 0.0 {
        mag.mapv_inplace(|v| v / max);
    }
    mag
}

/// (R, G, B) = (membrane, mitochondrial mass, |map| or black).
pub fn render_overlay(
    membrane: &Array2<u16>,
    mito_mass: &Array2<u16>,
    map: Option<&RelevanceMap>,
    mode: OverlayMode,
) -> Result<OverlayImage> {
    if membrane.dim() != mito_mass.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", membrane.dim()),
            found: format!("{:?}", mito_mass.dim()),
        });
    }
    match (mode, map) {
        (OverlayMode::Attribution, None) => {
            return Err(Error::InvalidParameter(
                "attribution mode requires a map".to_string(),
            ))
        }
        (OverlayMode::Signal, Some(_)) => {
            return Err(Error::InvalidParameter(
                "signal mode renders the map separately; pass None".to_string(),
            ))
        }
        _ => {}
    }
    let (h, w) = membrane.dim();
    let blue = match (mode, map) {
        (OverlayMode::Attribution, Some(m)) => {
            if m.values.dim().0 != h || m.values.dim().1 != w {
                return Err(Error::ShapeMismatch {
                    expected: format!("({h}, {w})"),
                    found: format!("{:?}", m.values.dim()),
                });
            }
            Some(magnitude_plane(m))
        }
        _ => None,
    };
    let mut pixels = RgbImage::new(w as u32, h as u32);
    for row in 0..h {
        for col in 0..w {
            let r = display_u8(f64::from(membrane[(row, col)]) / INTENSITY_MAX);
            let g = display_u8(f64::from(mito_mass[(row, col)]) / INTENSITY_MAX);
            let b = blue
                .as_ref()
                .map(|plane| display_u8(plane[(row, col)]))
                .unwrap_or(0);
            pixels.put_pixel(col as u32, row as u32, Rgb([r, g, b]));
        }
    }
    let map_legend = match mode {
        OverlayMode::Attribution => {
            format!("|{}|", map.expect("checked above").method)
        }
        OverlayMode::Signal => "black".to_string(),
    };
    Ok(OverlayImage {
        pixels,
        legend: [
            "fiber membrane".to_string(),
            "mitochondrial mass".to_string(),
            map_legend,
        ],
        provenance: map.map(|m| format!("{}:{}", m.patch_ref.subject, m.method)),
    })
}

/// Signed map rendering. The diverging scale centres zero at mid-gray
/// (128, 128, 128), positive toward red, negative toward blue; grayscale
/// maps [-scale, scale] onto [0, 255].
pub fn render_map(
    map: &RelevanceMap,
    norm: MapNorm,
    colormap: MapColormap,
) -> Result<OverlayImage> {
    if !map.is_finite() {
        return Err(Error::InvalidParameter("map contains non-finite values".to_string()));
    }
    let (h, w, c) = map.values.dim();
    // per-pixel signed value: sum over channels
    let mut signed = Array2::<f64>::zeros((h, w));
    for row in 0..h {
        for col in 0..w {
            let mut sum = 0.0;
            for ch in 0..c {
                sum += map.values[(row, col, ch)];
            }
            signed[(row, col)] = sum;
        }
    }
    let abs: Vec<f64> = signed.iter().map(|v| v.abs()).collect();
    let scale = match norm {
        MapNorm::AbsMax => abs.iter().cloned().fold(0.0f64, f64::max),
        MapNorm::SymmetricPercentile { p } => crate::patch::percentile(&abs, p),
    };
    let mut pixels = RgbImage::new(w as u32, h as u32);
    for row in 0..h {
        for col in 0..w {
            let t = if scale > 0.0 {
                (signed[(row, col)] / scale).clamp(-1.0, 1.0)
            } else {
                0.0
            };
            let rgb = match colormap {
                MapColormap::Diverging => {
                    let shift = (127.0 * t).round() as i32;
                    let base = 128i32;
                    Rgb([
                        (base + shift).clamp(0, 255) as u8,
                        (base - shift.abs()).clamp(0, 255) as u8,
                        (base - shift).clamp(0, 255) as u8,
                    ])
                }
                MapColormap::Grayscale => {
                    let level = (127.5 * (t + 1.0)).round().clamp(0.0, 255.0) as u8;
                    Rgb([level, level, level])
                }
            };
            pixels.put_pixel(col as u32, row as u32, rgb);
        }
    }
    Ok(OverlayImage {
        pixels,
        legend: [
            format!("{}", map.method),
            format!("{norm:?}"),
            format!("{colormap:?}"),
        ],
        provenance: Some(format!("{}:{}", map.patch_ref.subject, map.method)),
    })
}

/// Grayscale rendering of an input channel grid for the middle panel.
pub fn render_input_panel(values: &Array2<f64>) -> OverlayImage {
    let (h, w) = values.dim();
    let max = values.iter().cloned().fold(0.0f64, f64::max);
    let mut pixels = RgbImage::new(w as u32, h as u32);
    for row in 0..h {
        for col in 0..w {
            let level = if max > 0.0 {
                display_u8(values[(row, col)] / max)
            } else {
                0
            };
            pixels.put_pixel(col as u32, row as u32, Rgb([level, level, level]));
        }
    }
    OverlayImage {
        pixels,
        legend: ["input".to_string(), "input".to_string(), "input".to_string()],
        provenance: None,
    }
}

const GUTTER_PX: u32 = 4;

/// Horizontal three-panel figure: overlay | input | map, with optional
/// 4-pixel white gutters.
pub fn render_triptych(
    input_panel: &OverlayImage,
    overlay: &OverlayImage,
    map_panel: &OverlayImage,
    gutters: bool,
) -> Result<OverlayImage> {
    let height = overlay.pixels.height();
    for panel in [input_panel, map_panel] {
        if panel.pixels.height() != height {
            return Err(Error::ShapeMismatch {
                expected: format!("height {height}"),
                found: format!("height {}", panel.pixels.height()),
            });
        }
    }
    let gutter = if gutters { GUTTER_PX } else { 0 };
    let width =
        overlay.pixels.width() + input_panel.pixels.width() + map_panel.pixels.width() + 2 * gutter;
    let mut pixels = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let mut x_offset = 0u32;
    for panel in [overlay, input_panel, map_panel] {
        for (x, y, px) in panel.pixels.enumerate_pixels() {
            pixels.put_pixel(x + x_offset, y, *px);
        }
        x_offset += panel.pixels.width() + gutter;
    }
    Ok(OverlayImage {
        pixels,
        legend: [
            overlay.legend[0].clone(),
            overlay.legend[1].clone(),
            overlay.legend[2].clone(),
        ],
        provenance: overlay.provenance.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explain::{MethodName, PatchRef};
    use ndarray::Array3;

    fn map_of(values: Array3<f64>) -> RelevanceMap {
        RelevanceMap {
            method: MethodName::Gradients,
            values,
            target_class: 1,
            target_score: 0.5,
            patch_ref: PatchRef {
                subject: "s".to_string(),
                origin_row: 0,
                origin_col: 0,
                channels: vec!["ch".to_string()],
            },
        }
    }

    #[test]
    fn signal_mode_blue_plane_is_identically_zero() {
        let membrane = Array2::from_elem((8, 8), 30000u16);
        let mito = Array2::from_elem((8, 8), 12000u16);
        let overlay = render_overlay(&membrane, &mito, None, OverlayMode::Signal).unwrap();
        for px in overlay.pixels.pixels() {
            assert_eq!(px.0[2], 0);
        }
        assert_eq!(overlay.legend[2], "black");
    }

    #[test]
    fn attribution_mode_blue_plane_is_display_normalised_magnitude() {
        let membrane = Array2::zeros((4, 4));
        let mito = Array2::zeros((4, 4));
        let mut values = Array3::zeros((4, 4, 1));
        values[(1, 2, 0)] = -2.0;
        values[(3, 3, 0)] = 1.0;
        let map = map_of(values);
        let overlay =
            render_overlay(&membrane, &mito, Some(&map), OverlayMode::Attribution).unwrap();
        assert_eq!(overlay.pixels.get_pixel(2, 1).0[2], 255);
        assert_eq!(overlay.pixels.get_pixel(3, 3).0[2], 128); // 0.5 of max
        assert_eq!(overlay.pixels.get_pixel(0, 0).0[2], 0);
    }

    #[test]
    fn zero_map_attribution_blue_plane_is_zero() {
        let membrane = Array2::zeros((4, 4));
        let mito = Array2::zeros((4, 4));
        let map = map_of(Array3::zeros((4, 4, 1)));
        let overlay =
            render_overlay(&membrane, &mito, Some(&map), OverlayMode::Attribution).unwrap();
        for px in overlay.pixels.pixels() {
            assert_eq!(px.0[2], 0);
        }
    }

    #[test]
    fn constant_max_membrane_saturates_the_red_plane() {
        let membrane = Array2::from_elem((4, 4), 65535u16);
        let mito = Array2::zeros((4, 4));
        let overlay = render_overlay(&membrane, &mito, None, OverlayMode::Signal).unwrap();
        for px in overlay.pixels.pixels() {
            assert_eq!(px.0[0], 255);
        }
    }

    #[test]
    fn zero_map_renders_uniform_mid_gray() {
        let map = map_of(Array3::zeros((6, 6, 1)));
        let img = render_map(&map, MapNorm::AbsMax, MapColormap::Diverging).unwrap();
        for px in img.pixels.pixels() {
            for plane in px.0 {
                assert!((i32::from(plane) - 128).abs() <= 1);
            }
        }
    }

    #[test]
    fn negated_map_renders_colour_inverted() {
        let mut values = Array3::zeros((3, 3, 1));
        values[(0, 0, 0)] = 1.0;
        values[(1, 1, 0)] = -0.4;
        values[(2, 2, 0)] = 0.7;
        let pos = map_of(values.clone());
        let neg = map_of(values.mapv(|v| -v));
        let img_pos = render_map(&pos, MapNorm::AbsMax, MapColormap::Diverging).unwrap();
        let img_neg = render_map(&neg, MapNorm::AbsMax, MapColormap::Diverging).unwrap();
        for (p, n) in img_pos.pixels.pixels().zip(img_neg.pixels.pixels()) {
            // red and blue planes swap within quantisation
            assert!((i32::from(p.0[0]) - i32::from(n.0[2])).abs() <= 1);
            assert!((i32::from(p.0[2]) - i32::from(n.0[0])).abs() <= 1);
            assert!((i32::from(p.0[1]) - i32::from(n.0[1])).abs() <= 1);
        }
    }

    #[test]
    fn absmax_saturates_exactly_the_peak_pixel() {
        let mut values = Array3::zeros((5, 5, 1));
        values[(2, 3, 0)] = 100.0;
        let map = map_of(values);
        let img = render_map(&map, MapNorm::AbsMax, MapColormap::Diverging).unwrap();
        let mut saturated = 0;
        for (x, y, px) in img.pixels.enumerate_pixels() {
            if px.0[0] == 255 {
                saturated += 1;
                assert_eq!((x, y), (3, 2));
            }
        }
        assert_eq!(saturated, 1);
    }

    #[test]
    fn triptych_dimensions_and_determinism() {
        let membrane = Array2::from_elem((16, 16), 20000u16);
        let mito = Array2::from_elem((16, 16), 9000u16);
        let map = map_of(Array3::from_shape_fn((16, 16, 1), |(r, c, _)| {
            (r as f64 - c as f64) / 16.0
        }));
        let overlay =
            render_overlay(&membrane, &mito, Some(&map), OverlayMode::Attribution).unwrap();
        let input = render_input_panel(&Array2::from_elem((16, 16), 0.5));
        let map_img = render_map(&map, MapNorm::SymmetricPercentile { p: 99.0 }, MapColormap::Diverging)
            .unwrap();

        let with_gutters = render_triptych(&input, &overlay, &map_img, true).unwrap();
        assert_eq!(with_gutters.dims(), (16, 3 * 16 + 8));
        let without = render_triptych(&input, &overlay, &map_img, false).unwrap();
        assert_eq!(without.dims(), (16, 3 * 16));

        let again = render_triptych(&input, &overlay, &map_img, true).unwrap();
        assert_eq!(with_gutters.png_bytes().unwrap(), again.png_bytes().unwrap());
    }

    #[test]
    fn mismatched_heights_are_rejected() {
        let a = render_input_panel(&Array2::zeros((8, 8)));
        let b = render_input_panel(&Array2::zeros((4, 8)));
        assert!(matches!(
            render_triptych(&b, &a, &a, true),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
