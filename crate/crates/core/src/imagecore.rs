//! Dense 8-bit RGB rasters, slice tiling and 2×2 quadrant addressing.
//!
//! Everything in here works on `u8` samples so that duplication checks
//! downstream can compare pixels bit-for-bit. Conversion to real values
//! happens only at the network boundary (see [`crate::nnet`]).

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use thiserror::Error;

/// Number of interleaved channels in every raster (RGB).
pub const CHANNELS: usize = 3;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("invalid raster dimensions {width}x{height} (both must be >= 2)")]
    InvalidDimensions { width: usize, height: usize },
    #[error("pixel buffer holds {actual} samples, expected {expected}")]
    BufferLength { expected: usize, actual: usize },
    #[error("patch side {0} is odd")]
    OddPatchSide(usize),
    #[error("patch side {side} exceeds image dimensions {width}x{height}")]
    PatchTooLarge {
        side: usize,
        width: usize,
        height: usize,
    },
    #[error("patch raster must be square, got {width}x{height}")]
    NotSquare { width: usize, height: usize },
    #[error("dimension mismatch: expected {expected_w}x{expected_h}, got {actual_w}x{actual_h}")]
    DimensionMismatch {
        expected_w: usize,
        expected_h: usize,
        actual_w: usize,
        actual_h: usize,
    },
    #[error("malformed patch id {0:?}")]
    BadPatchId(String),
    #[error("unsupported or malformed image: {0}")]
    Decode(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ImageError> = std::result::Result<T, E>;

/// Row-major, channel-interleaved 8-bit RGB raster.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct RasterImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl fmt::Debug for RasterImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RasterImage")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl RasterImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(ImageError::InvalidDimensions { width, height });
        }
        let expected = width * height * CHANNELS;
        if pixels.len() != expected {
            return Err(ImageError::BufferLength {
                expected,
                actual: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        Self::from_fn(width, height, |_, _| rgb)
    }

    /// Builds a raster by evaluating `f(x, y)` for every pixel.
    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [u8; 3],
    ) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(ImageError::InvalidDimensions { width, height });
        }
        let mut pixels = Vec::with_capacity(width * height * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(x, y));
            }
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * CHANNELS;
        self.pixels[i..i + CHANNELS].copy_from_slice(&rgb);
    }

    /// Copies the `w`×`h` window whose top-left corner is `(x0, y0)`.
    ///
    /// Panics if the window leaves the raster.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> RasterImage {
        assert!(x0 + w <= self.width && y0 + h <= self.height, "crop out of bounds");
        let mut pixels = Vec::with_capacity(w * h * CHANNELS);
        let row_len = w * CHANNELS;
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * CHANNELS;
            pixels.extend_from_slice(&self.pixels[start..start + row_len]);
        }
        RasterImage {
            width: w,
            height: h,
            pixels,
        }
    }

    /// Overwrites the window at `(x0, y0)` with `src`.
    pub fn paste(&mut self, x0: usize, y0: usize, src: &RasterImage) {
        assert!(
            x0 + src.width <= self.width && y0 + src.height <= self.height,
            "paste out of bounds"
        );
        let row_len = src.width * CHANNELS;
        for y in 0..src.height {
            let dst = ((y0 + y) * self.width + x0) * CHANNELS;
            let s = y * row_len;
            self.pixels[dst..dst + row_len].copy_from_slice(&src.pixels[s..s + row_len]);
        }
    }

    /// Mean sample value of each channel.
    pub fn channel_means(&self) -> [f64; 3] {
        let mut sums = [0u64; 3];
        for px in self.pixels.chunks_exact(CHANNELS) {
            for c in 0..CHANNELS {
                sums[c] += u64::from(px[c]);
            }
        }
        let n = (self.width * self.height) as f64;
        [sums[0] as f64 / n, sums[1] as f64 / n, sums[2] as f64 / n]
    }
}

/// Where a patch came from: its slice and grid cell.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PatchOrigin {
    pub slice_id: String,
    pub tile_row: usize,
    pub tile_col: usize,
}

impl PatchOrigin {
    pub fn new(slice_id: impl Into<String>, tile_row: usize, tile_col: usize) -> Self {
        Self {
            slice_id: slice_id.into(),
            tile_row,
            tile_col,
        }
    }

    /// Identity string `<slice_id>#r<tile_row>c<tile_col>`.
    pub fn id(&self) -> String {
        patch_id(&self.slice_id, self.tile_row, self.tile_col)
    }

    pub fn parse(id: &str) -> Result<Self> {
        let bad = || ImageError::BadPatchId(id.to_string());
        let (slice, cell) = id.rsplit_once('#').ok_or_else(bad)?;
        let cell = cell.strip_prefix('r').ok_or_else(bad)?;
        let (row, col) = cell.split_once('c').ok_or_else(bad)?;
        Ok(Self {
            slice_id: slice.to_string(),
            tile_row: row.parse().map_err(|_| bad())?,
            tile_col: col.parse().map_err(|_| bad())?,
        })
    }
}

pub fn patch_id(slice_id: &str, tile_row: usize, tile_col: usize) -> String {
    format!("{slice_id}#r{tile_row}c{tile_col}")
}

/// Square, even-sided tile of a slice.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchImage {
    origin: PatchOrigin,
    image: RasterImage,
}

impl PatchImage {
    pub fn new(origin: PatchOrigin, image: RasterImage) -> Result<Self> {
        if image.width != image.height {
            return Err(ImageError::NotSquare {
                width: image.width,
                height: image.height,
            });
        }
        if image.width % 2 != 0 {
            return Err(ImageError::OddPatchSide(image.width));
        }
        Ok(Self { origin, image })
    }

    pub fn side(&self) -> usize {
        self.image.width
    }

    pub fn origin(&self) -> &PatchOrigin {
        &self.origin
    }

    pub fn id(&self) -> String {
        self.origin.id()
    }

    pub fn image(&self) -> &RasterImage {
        &self.image
    }

    pub fn into_image(self) -> RasterImage {
        self.image
    }

    /// Same origin, different pixels. The replacement must have the same side.
    pub(crate) fn with_image(&self, image: RasterImage) -> PatchImage {
        debug_assert_eq!(image.width, self.image.width);
        PatchImage {
            origin: self.origin.clone(),
            image,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Quadrant {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [
        Quadrant::TopLeft,
        Quadrant::TopRight,
        Quadrant::BottomLeft,
        Quadrant::BottomRight,
    ];

    /// Pixel offset of the quadrant's top-left corner within a patch of `side`.
    pub fn offset(self, side: usize) -> (usize, usize) {
        let h = side / 2;
        match self {
            Quadrant::TopLeft => (0, 0),
            Quadrant::TopRight => (h, 0),
            Quadrant::BottomLeft => (0, h),
            Quadrant::BottomRight => (h, h),
        }
    }
}

/// Splits `image` into non-overlapping `patch_side` squares in row-major
/// `(tile_row, tile_col)` order. Right and bottom remainders are dropped.
pub fn tile_slice(
    slice_id: &str,
    image: &RasterImage,
    patch_side: usize,
) -> Result<Vec<PatchImage>> {
    let (cols, rows) = tile_grid(image.width, image.height, patch_side)?;
    let mut patches = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let tile = image.crop(c * patch_side, r * patch_side, patch_side, patch_side);
            patches.push(PatchImage {
                origin: PatchOrigin::new(slice_id, r, c),
                image: tile,
            });
        }
    }
    Ok(patches)
}

/// `(cols, rows)` of the tile grid for an image of the given size.
pub fn tile_grid(width: usize, height: usize, patch_side: usize) -> Result<(usize, usize)> {
    if patch_side % 2 != 0 {
        return Err(ImageError::OddPatchSide(patch_side));
    }
    if patch_side == 0 || patch_side > width || patch_side > height {
        return Err(ImageError::PatchTooLarge {
            side: patch_side,
            width,
            height,
        });
    }
    Ok((width / patch_side, height / patch_side))
}

/// Inverse of [`tile_slice`]: stitches a row-major patch list back into the
/// cropped slice.
pub fn assemble_tiles(patches: &[PatchImage], cols: usize, rows: usize) -> Result<RasterImage> {
    let first = patches
        .first()
        .ok_or(ImageError::InvalidDimensions { width: 0, height: 0 })?;
    if patches.len() != cols * rows {
        return Err(ImageError::BufferLength {
            expected: cols * rows,
            actual: patches.len(),
        });
    }
    let side = first.side();
    let mut out = RasterImage::filled(cols * side, rows * side, [0, 0, 0])?;
    for (i, p) in patches.iter().enumerate() {
        if p.side() != side {
            return Err(ImageError::DimensionMismatch {
                expected_w: side,
                expected_h: side,
                actual_w: p.side(),
                actual_h: p.side(),
            });
        }
        out.paste((i % cols) * side, (i / cols) * side, &p.image);
    }
    Ok(out)
}

pub fn extract_quadrant(patch: &PatchImage, q: Quadrant) -> RasterImage {
    let half = patch.side() / 2;
    let (x0, y0) = q.offset(patch.side());
    patch.image.crop(x0, y0, half, half)
}

pub fn write_quadrant(patch: &PatchImage, q: Quadrant, data: &RasterImage) -> Result<PatchImage> {
    let half = patch.side() / 2;
    if data.width != half || data.height != half {
        return Err(ImageError::DimensionMismatch {
            expected_w: half,
            expected_h: half,
            actual_w: data.width,
            actual_h: data.height,
        });
    }
    let (x0, y0) = q.offset(patch.side());
    let mut image = patch.image.clone();
    image.paste(x0, y0, data);
    Ok(patch.with_image(image))
}

// ---------------------------------------------------------------------------
// File IO

/// Reads a PNG or binary PPM (P6) image, chosen by content sniffing.
pub fn read_image(path: &Path) -> Result<RasterImage> {
    let bytes = fs::read(path)?;
    decode_image(&bytes)
}

pub fn decode_image(bytes: &[u8]) -> Result<RasterImage> {
    if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|e| ImageError::Decode(e.to_string()))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        RasterImage::new(w as usize, h as usize, img.into_raw())
    }
}

fn decode_ppm(bytes: &[u8]) -> Result<RasterImage> {
    let mut reader = BufReader::new(bytes);
    let mut fields = Vec::with_capacity(4);
    let mut token = Vec::new();
    // Header: magic, width, height, maxval separated by whitespace; '#' starts a comment.
    while fields.len() < 4 {
        let mut byte = [0u8; 1];
        if reader.read(&mut byte)? == 0 {
            return Err(ImageError::Decode("truncated PPM header".into()));
        }
        match byte[0] {
            b'#' if token.is_empty() => {
                let mut skip = Vec::new();
                reader.read_until(b'\n', &mut skip)?;
            }
            b if b.is_ascii_whitespace() => {
                if !token.is_empty() {
                    fields.push(String::from_utf8_lossy(&token).into_owned());
                    token.clear();
                }
            }
            b => token.push(b),
        }
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| ImageError::Decode(format!("bad PPM header field {s:?}")))
    };
    if fields[0] != "P6" {
        return Err(ImageError::Decode("not a P6 PPM".into()));
    }
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(ImageError::Decode(format!("unsupported PPM maxval {maxval}")));
    }
    let mut pixels = vec![0u8; w * h * CHANNELS];
    reader
        .read_exact(&mut pixels)
        .map_err(|_| ImageError::Decode("truncated PPM payload".into()))?;
    RasterImage::new(w, h, pixels)
}

pub fn encode_ppm(image: &RasterImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    out
}

pub fn write_ppm(path: &Path, image: &RasterImage) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_ppm(image))?;
    Ok(())
}

pub fn write_png(path: &Path, image: &RasterImage) -> Result<()> {
    image::save_buffer_with_format(
        path,
        &image.pixels,
        image.width as u32,
        image.height as u32,
        image::ColorType::Rgb8,
        image::ImageFormat::Png,
    )
    .map_err(|e| ImageError::Decode(e.to_string()))
}

/// Writes PNG or PPM depending on the extension of `path` (`.ppm` → P6).
pub fn write_image(path: &Path, image: &RasterImage) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => write_ppm(path, image),
        _ => write_png(path, image),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_patch(side: usize) -> PatchImage {
        let h = side / 2;
        let img = RasterImage::from_fn(side, side, |x, y| {
            let v = (x >= h) as u8 + 2 * (y >= h) as u8;
            [v, v, v]
        })
        .unwrap();
        PatchImage::new(PatchOrigin::new("s", 0, 0), img).unwrap()
    }

    fn distinct_patch(side: usize) -> PatchImage {
        let img = RasterImage::from_fn(side, side, |x, y| {
            let v = (y * side + x) as u8;
            [v, v.wrapping_add(1), v.wrapping_add(2)]
        })
        .unwrap();
        PatchImage::new(PatchOrigin::new("s", 0, 0), img).unwrap()
    }

    #[test]
    fn rejects_bad_buffers() {
        assert!(matches!(
            RasterImage::new(1, 4, vec![0; 12]),
            Err(ImageError::InvalidDimensions { .. })
        ));
        assert!(matches!(
            RasterImage::new(2, 2, vec![0; 11]),
            Err(ImageError::BufferLength { expected: 12, actual: 11 })
        ));
    }

    #[test]
    fn tiles_full_size_geometry() {
        let img = RasterImage::filled(2048, 1536, [9, 9, 9]).unwrap();
        let patches = tile_slice("a", &img, 512).unwrap();
        assert_eq!(patches.len(), 12);
        assert_eq!(patches[4].origin(), &PatchOrigin::new("a", 1, 0));
        assert_eq!(patches[11].id(), "a#r2c3");
    }

    #[test]
    fn tiles_desk_geometry_and_identity() {
        let img = RasterImage::filled(512, 384, [1, 2, 3]).unwrap();
        assert_eq!(tile_slice("a", &img, 128).unwrap().len(), 12);

        let img = distinct_patch(512).into_image();
        let patches = tile_slice("a", &img, 512).unwrap();
        assert_eq!(patches.len(), 1);
        assert_eq!(patches[0].image(), &img);
    }

    #[test]
    fn tiling_errors() {
        let img = RasterImage::filled(64, 32, [0, 0, 0]).unwrap();
        assert!(matches!(tile_slice("a", &img, 33), Err(ImageError::OddPatchSide(33))));
        assert!(matches!(tile_slice("a", &img, 34), Err(ImageError::PatchTooLarge { .. })));
    }

    #[test]
    fn remainder_is_discarded_and_tiles_reassemble() {
        let img = RasterImage::from_fn(70, 45, |x, y| [x as u8, y as u8, (x ^ y) as u8]).unwrap();
        let patches = tile_slice("a", &img, 20).unwrap();
        assert_eq!(patches.len(), 3 * 2);
        let back = assemble_tiles(&patches, 3, 2).unwrap();
        assert_eq!(back, img.crop(0, 0, 60, 40));
    }

    #[test]
    fn quadrant_extraction() {
        let p = quad_patch(8);
        for (i, q) in Quadrant::ALL.into_iter().enumerate() {
            let sub = extract_quadrant(&p, q);
            assert_eq!((sub.width(), sub.height()), (4, 4));
            assert!(sub.pixels().iter().all(|&v| v as usize == i));
        }

        let p = distinct_patch(4);
        let tl = extract_quadrant(&p, Quadrant::TopLeft);
        assert_eq!(tl, p.image().crop(0, 0, 2, 2));
        assert_eq!(tl.pixel(1, 1), p.image().pixel(1, 1));
    }

    #[test]
    fn quadrant_writes() {
        let p = distinct_patch(6);
        let tl = extract_quadrant(&p, Quadrant::TopLeft);
        assert_eq!(write_quadrant(&p, Quadrant::TopLeft, &tl).unwrap(), p);

        let white = PatchImage::new(
            PatchOrigin::new("s", 0, 0),
            RasterImage::filled(8, 8, [255; 3]).unwrap(),
        )
        .unwrap();
        let zeros = RasterImage::filled(4, 4, [0; 3]).unwrap();
        let out = write_quadrant(&white, Quadrant::TopRight, &zeros).unwrap();
        let zero_samples = out.image().pixels().iter().filter(|&&v| v == 0).count();
        assert_eq!(zero_samples, CHANNELS * 64 / 4);

        let out = write_quadrant(&p, Quadrant::BottomRight, &tl).unwrap();
        assert_eq!(extract_quadrant(&out, Quadrant::BottomRight), tl);

        let wrong = RasterImage::filled(2, 4, [0; 3]).unwrap();
        assert!(matches!(
            write_quadrant(&p, Quadrant::TopLeft, &wrong),
            Err(ImageError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn patch_ids_parse() {
        let o = PatchOrigin::new("slice#7", 2, 11);
        assert_eq!(o.id(), "slice#7#r2c11");
        assert_eq!(PatchOrigin::parse(&o.id()).unwrap(), o);
        assert!(PatchOrigin::parse("nohash").is_err());
        assert!(PatchOrigin::parse("a#x1c2").is_err());
    }

    #[test]
    fn ppm_and_png_round_trip() {
        let img = RasterImage::from_fn(5, 3, |x, y| [x as u8 * 40, y as u8 * 70, 200]).unwrap();
        let bytes = encode_ppm(&img);
        assert!(bytes.starts_with(b"P6\n5 3\n255\n"));
        assert_eq!(decode_image(&bytes).unwrap(), img);

        let commented = [b"P6\n# dump\n5 3\n255\n".as_slice(), img.pixels()].concat();
        assert_eq!(decode_image(&commented).unwrap(), img);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        write_image(&path, &img).unwrap();
        assert_eq!(read_image(&path).unwrap(), img);
    }
}
