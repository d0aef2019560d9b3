//! Tiling display images into a single grayscale PNG.

use std::path::Path;

use image::{GrayImage, ImageFormat};

use crate::error::{LdamError, Result};

/// Row-major grid of equally sized grayscale tiles.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

/// Lays `tiles` out `cols` per row. Missing tiles in the last row stay mid-gray.
pub fn tile_grid(tiles: &[Vec<u8>], tile_h: usize, tile_w: usize, cols: usize) -> Result<Grid> {
    if cols == 0 || tile_h == 0 || tile_w == 0 {
        return Err(LdamError::InvalidArgument("grid dimensions must be positive".into()));
    }
    if let Some((i, t)) = tiles.iter().enumerate().find(|(_, t)| t.len() != tile_h * tile_w) {
        return Err(LdamError::InvalidArgument(format!(
            "tile {i} has {} pixels, expected {}",
            t.len(),
            tile_h * tile_w
        )));
    }
    let rows = tiles.len().div_ceil(cols).max(1);
    let (width, height) = (cols * tile_w, rows * tile_h);
    let mut pixels = vec![128u8; width * height];
    for (i, t) in tiles.iter().enumerate() {
        let (gr, gc) = (i / cols, i % cols);
        for r in 0..tile_h {
            let dst = (gr * tile_h + r) * width + gc * tile_w;
            pixels[dst..dst + tile_w].copy_from_slice(&t[r * tile_w..(r + 1) * tile_w]);
        }
    }
    Ok(Grid {
        width: width as u32,
        height: height as u32,
        pixels,
    })
}

impl Grid {
    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let img = self.image()?;
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png)
            .map_err(|e| LdamError::Image(e.to_string()))?;
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_png()?)?;
        Ok(())
    }

    fn image(&self) -> Result<GrayImage> {
        GrayImage::from_raw(self.width, self.height, self.pixels.clone())
            .ok_or_else(|| LdamError::Image("pixel buffer does not match dimensions".into()))
    }
}

/// Width and height stored in a PNG's header.
pub fn png_dimensions(bytes: &[u8]) -> Result<(u32, u32)> {
    let g = decode_png(bytes)?;
    Ok((g.width, g.height))
}

/// Decodes a PNG into grayscale pixels.
pub fn decode_png(bytes: &[u8]) -> Result<Grid> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| LdamError::Image(e.to_string()))?
        .into_luma8();
    Ok(Grid {
        width: img.width(),
        height: img.height(),
        pixels: img.into_raw(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_layout_and_png_size() {
        let tiles: Vec<Vec<u8>> = (0..3u8).map(|i| vec![i; 4]).collect();
        let g = tile_grid(&tiles, 2, 2, 2).unwrap();
        assert_eq!((g.width, g.height), (4, 4));
        assert_eq!(&g.pixels[..4], &[0, 0, 1, 1]);
        assert_eq!(&g.pixels[8..12], &[2, 2, 128, 128]);
        let png = g.encode_png().unwrap();
        assert_eq!(png_dimensions(&png).unwrap(), (4, 4));
        assert_eq!(decode_png(&png).unwrap(), g);
        assert!(tile_grid(&[vec![0; 3]], 2, 2, 1).is_err());
    }
}
