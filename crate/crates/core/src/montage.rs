//! Labelled tile montages with a built-in 5x7 bitmap font.

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::imageio::to_rgb;
use crate::tensor::Tensor;

const GLYPH_W: u32 = 5;
const GLYPH_H: u32 = 7;

/// Rows of a 5x7 glyph, most significant of the low five bits on the left.
fn glyph(ch: char) -> [u8; 7] {
    match ch.to_ascii_uppercase() {
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        '.' => [0, 0, 0, 0, 0, 0x0C, 0x0C],
        ',' => [0, 0, 0, 0, 0x0C, 0x04, 0x08],
        ':' => [0, 0x0C, 0x0C, 0, 0x0C, 0x0C, 0],
        '=' => [0, 0, 0x1F, 0, 0x1F, 0, 0],
        '-' => [0, 0, 0, 0x1F, 0, 0, 0],
        '+' => [0, 0x04, 0x04, 0x1F, 0x04, 0x04, 0],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        '/' => [0, 0x01, 0x02, 0x04, 0x08, 0x10, 0],
        '{' => [0x02, 0x04, 0x04, 0x08, 0x04, 0x04, 0x02],
        '}' => [0x08, 0x04, 0x04, 0x02, 0x04, 0x04, 0x08],
        '_' => [0, 0, 0, 0, 0, 0, 0x1F],
        ' ' => [0; 7],
        _ => [0x1F, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1F],
    }
}

/// Width in pixels of `text` at `scale`.
pub fn text_width(text: &str, scale: u32) -> u32 {
    text.chars().count() as u32 * (GLYPH_W + 1) * scale
}

pub fn draw_text(img: &mut RgbImage, x: u32, y: u32, text: &str, scale: u32, color: Rgb<u8>) {
    for (i, ch) in text.chars().enumerate() {
        let ox = x + i as u32 * (GLYPH_W + 1) * scale;
        for (row, bits) in glyph(ch).iter().enumerate() {
            for col in 0..GLYPH_W {
                if bits & (1 << (GLYPH_W - 1 - col)) == 0 {
                    continue;
                }
                for dy in 0..scale {
                    for dx in 0..scale {
                        let (px, py) = (ox + col * scale + dx, y + row as u32 * scale + dy);
                        if px < img.width() && py < img.height() {
                            img.put_pixel(px, py, color);
                        }
                    }
                }
            }
        }
    }
}

/// One labelled panel.
pub struct Tile<'a> {
    pub label: String,
    pub image: &'a Tensor,
}

const BACKGROUND: Rgb<u8> = Rgb([24, 24, 24]);
const INK: Rgb<u8> = Rgb([235, 235, 235]);

/// Lays tiles out in a row, each upscaled by `zoom`, labelled underneath, with
/// a caption strip at the bottom.
pub fn montage(tiles: &[Tile], zoom: u32, caption: &str) -> Result<RgbImage> {
    if tiles.is_empty() {
        return Err(Error::invalid("tiles", "montage needs at least one tile"));
    }
    let images: Vec<RgbImage> = tiles.iter().map(|t| to_rgb(t.image)).collect::<Result<_>>()?;
    let tw = images.iter().map(|i| i.width()).max().unwrap_or(0) * zoom;
    let th = images.iter().map(|i| i.height()).max().unwrap_or(0) * zoom;
    let pad = 4;
    let label_h = GLYPH_H + 4;
    let caption_h = GLYPH_H + 8;
    let width = (tw + pad) * tiles.len() as u32 + pad;
    let width = width.max(text_width(caption, 1) + 2 * pad);
    let height = pad + th + label_h + caption_h;
    let mut out = RgbImage::from_pixel(width, height, BACKGROUND);
    for (i, (tile, img)) in tiles.iter().zip(&images).enumerate() {
        let x0 = pad + i as u32 * (tw + pad);
        // Smaller tiles are centred in their cell.
        let ox = x0 + (tw - img.width() * zoom) / 2;
        let oy = pad + (th - img.height() * zoom) / 2;
        for (x, y, p) in img.enumerate_pixels() {
            for dy in 0..zoom {
                for dx in 0..zoom {
                    out.put_pixel(ox + x * zoom + dx, oy + y * zoom + dy, *p);
                }
            }
        }
        let lw = text_width(&tile.label, 1);
        let lx = x0 + tw.saturating_sub(lw) / 2;
        draw_text(&mut out, lx, pad + th + 2, &tile.label, 1, INK);
    }
    draw_text(&mut out, pad, pad + th + label_h + 4, caption, 1, INK);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn montage_has_one_cell_per_tile() {
        let a = Tensor::full(vec![1, 3, 8, 8], 1.0);
        let b = Tensor::full(vec![1, 3, 8, 8], -1.0);
        let tiles: Vec<Tile> =
            (0..7).map(|i| Tile { label: format!("T{i}"), image: if i % 2 == 0 { &a } else { &b } }).collect();
        let img = montage(&tiles, 2, "TAPS=4,5").unwrap();
        assert_eq!(img.width(), (16 + 4) * 7 + 4);
        // Top-left pixel of the first and second tile.
        assert_eq!(img.get_pixel(4, 4).0, [255, 255, 255]);
        assert_eq!(img.get_pixel(24, 4).0, [0, 0, 0]);
    }

    #[test]
    fn text_is_drawn() {
        let mut img = RgbImage::from_pixel(40, 10, BACKGROUND);
        draw_text(&mut img, 0, 0, "H", 1, INK);
        assert_eq!(*img.get_pixel(0, 0), INK);
        assert_eq!(*img.get_pixel(1, 0), BACKGROUND);
    }
}
