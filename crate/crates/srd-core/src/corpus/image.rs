//! Raw RGB raster images and the two portable-anymap formats used on disk:
//! binary PPM (P6) for corpus images and binary PGM (P5) for heatmaps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major, tightly packed 8-bit RGB image. `pixels.len()` is always
/// `width * height * 3`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

/// Axis-aligned pixel rectangle, `x`/`y` top-left, half-open on the
/// right/bottom edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Rect { x, y, w, h }
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn contains(&self, px: u32, py: u32) -> bool {
        px >= self.x && px < self.x + self.w && py >= self.y && py < self.y + self.h
    }

    /// Number of pixels shared with `other`.
    pub fn intersection_area(&self, other: &Rect) -> u64 {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = (self.x + self.w).min(other.x + other.w);
        let y1 = (self.y + self.h).min(other.y + other.h);
        if x1 <= x0 || y1 <= y0 {
            0
        } else {
            (x1 - x0) as u64 * (y1 - y0) as u64
        }
    }

    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.w > 0
            && self.h > 0
            && self.x.checked_add(self.w).is_some_and(|r| r <= width)
            && self.y.checked_add(self.h).is_some_and(|b| b <= height)
    }
}

impl RasterImage {
    /// Solid-color image.
    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let n = (width as usize) * (height as usize);
        let mut pixels = Vec::with_capacity(n * 3);
        for _ in 0..n {
            pixels.extend_from_slice(&rgb);
        }
        RasterImage {
            width,
            height,
            pixels,
        }
    }

    pub fn from_pixels(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self> {
        let expected = (width as usize) * (height as usize) * 3;
        if pixels.len() != expected {
            return Err(Error::contract(format!(
                "pixel buffer length {} does not match {}x{}x3 = {}",
                pixels.len(),
                width,
                height,
                expected
            )));
        }
        Ok(RasterImage {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    fn offset(&self, x: u32, y: u32) -> usize {
        debug_assert!(x < self.width && y < self.height);
        ((y as usize) * (self.width as usize) + (x as usize)) * 3
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let o = self.offset(x, y);
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let o = self.offset(x, y);
        self.pixels[o..o + 3].copy_from_slice(&rgb);
    }

    /// Paint `rect` (clipped to the image) with a solid color. Returns the
    /// number of pixels written.
    pub fn fill_rect_clipped(&mut self, rect: Rect, rgb: [u8; 3]) -> u64 {
        let x1 = (rect.x + rect.w).min(self.width);
        let y1 = (rect.y + rect.h).min(self.height);
        if rect.x >= x1 || rect.y >= y1 {
            return 0;
        }
        for y in rect.y..y1 {
            for x in rect.x..x1 {
                self.set(x, y, rgb);
            }
        }
        (x1 - rect.x) as u64 * (y1 - rect.y) as u64
    }

    /// Count of pixels at which `self` and `other` differ. Dimension
    /// mismatch is a contract violation.
    pub fn diff_count(&self, other: &RasterImage) -> Result<u64> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::contract(format!(
                "cannot diff {}x{} against {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        let mut n = 0u64;
        for (a, b) in self
            .pixels
            .chunks_exact(3)
            .zip(other.pixels.chunks_exact(3))
        {
            if a != b {
                n += 1;
            }
        }
        Ok(n)
    }

    // ---- PPM (P6) ------------------------------------------------------

    /// Canonical binary PPM encoding: `P6\n<w> <h>\n255\n` followed by the
    /// raw pixel buffer. Writing then reading is byte-exact.
    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let header = format!("P6\n{} {}\n255\n", self.width, self.height);
        let mut out = Vec::with_capacity(header.len() + self.pixels.len());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Parse binary PPM. Accepts `#` comments and arbitrary whitespace in
    /// the header (the format allows them), but requires maxval 255.
    pub fn from_ppm_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = 0usize;
        let magic = take_token(bytes, &mut cursor)
            .ok_or_else(|| Error::contract("ppm: missing magic".to_string()))?;
        if magic != b"P6" {
            return Err(Error::contract(format!(
                "ppm: expected P6 magic, got {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        let width = parse_header_number(bytes, &mut cursor, "width")?;
        let height = parse_header_number(bytes, &mut cursor, "height")?;
        let maxval = parse_header_number(bytes, &mut cursor, "maxval")?;
        if maxval != 255 {
            return Err(Error::contract(format!(
                "ppm: only maxval 255 supported, got {maxval}"
            )));
        }
        // Exactly one whitespace byte separates the header from pixel data.
        cursor += 1;
        let expected = (width as usize) * (height as usize) * 3;
        let data = bytes
            .get(cursor..cursor + expected)
            .ok_or_else(|| Error::contract("ppm: truncated pixel data".to_string()))?;
        RasterImage::from_pixels(width, height, data.to_vec())
    }
}

/// Canonical binary PGM encoding for an 8-bit grayscale buffer.
pub fn gray_to_pgm_bytes(width: u32, height: u32, gray: &[u8]) -> Result<Vec<u8>> {
    let expected = (width as usize) * (height as usize);
    if gray.len() != expected {
        return Err(Error::contract(format!(
            "pgm: buffer length {} does not match {}x{}",
            gray.len(),
            width,
            height
        )));
    }
    let header = format!("P5\n{width} {height}\n255\n");
    let mut out = Vec::with_capacity(header.len() + gray.len());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(gray);
    Ok(out)
}

/// Parse binary PGM, returning (width, height, gray bytes).
pub fn gray_from_pgm_bytes(bytes: &[u8]) -> Result<(u32, u32, Vec<u8>)> {
    let mut cursor = 0usize;
    let magic = take_token(bytes, &mut cursor)
        .ok_or_else(|| Error::contract("pgm: missing magic".to_string()))?;
    if magic != b"P5" {
        return Err(Error::contract(format!(
            "pgm: expected P5 magic, got {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let width = parse_header_number(bytes, &mut cursor, "width")?;
    let height = parse_header_number(bytes, &mut cursor, "height")?;
    let maxval = parse_header_number(bytes, &mut cursor, "maxval")?;
    if maxval != 255 {
        return Err(Error::contract(format!(
            "pgm: only maxval 255 supported, got {maxval}"
        )));
    }
    cursor += 1;
    let expected = (width as usize) * (height as usize);
    let data = bytes
        .get(cursor..cursor + expected)
        .ok_or_else(|| Error::contract("pgm: truncated pixel data".to_string()))?;
    Ok((width, height, data.to_vec()))
}

/// Advance past whitespace and `#` comments, then return the next
/// whitespace-delimited token.
fn take_token<'a>(bytes: &'a [u8], cursor: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *cursor < bytes.len() && bytes[*cursor].is_ascii_whitespace() {
            *cursor += 1;
        }
        if *cursor < bytes.len() && bytes[*cursor] == b'#' {
            while *cursor < bytes.len() && bytes[*cursor] != b'\n' {
                *cursor += 1;
            }
            continue;
        }
        break;
    }
    if *cursor >= bytes.len() {
        return None;
    }
    let start = *cursor;
    while *cursor < bytes.len() && !bytes[*cursor].is_ascii_whitespace() {
        *cursor += 1;
    }
    Some(&bytes[start..*cursor])
}

fn parse_header_number(bytes: &[u8], cursor: &mut usize, what: &str) -> Result<u32> {
    let tok = take_token(bytes, cursor)
        .ok_or_else(|| Error::contract(format!("pnm header: missing {what}")))?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse::<u32>().ok())
        .ok_or_else(|| {
            Error::contract(format!(
                "pnm header: bad {what}: {:?}",
                String::from_utf8_lossy(tok)
            ))
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buffer_length_is_enforced() {
        assert!(RasterImage::from_pixels(2, 2, vec![0; 12]).is_ok());
        assert!(RasterImage::from_pixels(2, 2, vec![0; 11]).is_err());
        assert!(RasterImage::from_pixels(2, 2, vec![0; 13]).is_err());
    }

    #[test]
    fn get_set_round_trip() {
        let mut img = RasterImage::filled(4, 3, [9, 9, 9]);
        img.set(3, 2, [1, 2, 3]);
        assert_eq!(img.get(3, 2), [1, 2, 3]);
        assert_eq!(img.get(0, 0), [9, 9, 9]);
    }

    #[test]
    fn fill_rect_clips_at_borders() {
        let mut img = RasterImage::filled(10, 10, [0, 0, 0]);
        let wrote = img.fill_rect_clipped(Rect::new(7, 8, 5, 5), [255, 0, 0]);
        // 3 columns x 2 rows survive the clip.
        assert_eq!(wrote, 6);
        let red = img
            .pixels()
            .chunks_exact(3)
            .filter(|p| *p == [255, 0, 0])
            .count();
        assert_eq!(red, 6);
    }

    #[test]
    fn ppm_round_trip_is_byte_exact() {
        let mut img = RasterImage::filled(5, 4, [10, 200, 30]);
        img.set(2, 1, [0, 0, 0]);
        img.set(4, 3, [255, 255, 255]);
        let bytes = img.to_ppm_bytes();
        let back = RasterImage::from_ppm_bytes(&bytes).unwrap();
        assert_eq!(back, img);
        assert_eq!(back.to_ppm_bytes(), bytes);
    }

    #[test]
    fn ppm_accepts_comments_in_header() {
        let img = RasterImage::filled(2, 2, [1, 2, 3]);
        let mut bytes = b"P6\n# generated elsewhere\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(img.pixels());
        assert_eq!(RasterImage::from_ppm_bytes(&bytes).unwrap(), img);
    }

    #[test]
    fn ppm_rejects_truncation_and_bad_magic() {
        let img = RasterImage::filled(3, 3, [7, 7, 7]);
        let mut bytes = img.to_ppm_bytes();
        bytes.truncate(bytes.len() - 1);
        assert!(RasterImage::from_ppm_bytes(&bytes).is_err());
        assert!(RasterImage::from_ppm_bytes(b"P5\n1 1\n255\n\x00").is_err());
    }

    #[test]
    fn pgm_round_trip() {
        let gray: Vec<u8> = (0..12).map(|v| v * 20).collect();
        let bytes = gray_to_pgm_bytes(4, 3, &gray).unwrap();
        let (w, h, back) = gray_from_pgm_bytes(&bytes).unwrap();
        assert_eq!((w, h), (4, 3));
        assert_eq!(back, gray);
    }

    #[test]
    fn rect_intersection_area() {
        let a = Rect::new(0, 0, 10, 10);
        let b = Rect::new(5, 5, 10, 10);
        assert_eq!(a.intersection_area(&b), 25);
        let c = Rect::new(10, 10, 2, 2);
        assert_eq!(a.intersection_area(&c), 0);
        assert_eq!(a.intersection_area(&a), 100);
    }
}
