//! Token-feature and mask file formats, plus planted-structure fixtures.
//!
//! Feature files ("SSAM v1") are little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "SSAM"
//! 4       4     u32 version (1)
//! 8       4     u32 grid rows Hp
//! 12      4     u32 grid cols Wp
//! 16      4     u32 token dimension d
//! 20      4     u32 patch size P
//! 24      ...   Hp*Wp*d f32 values, token-major
//! ```
//!
//! Tokens are stored in row-major grid order: token `r * Wp + c` is the patch
//! at grid row `r`, column `c`. Masks are binary PGM (P5, maxval 255) at patch
//! resolution, one byte per patch.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"SSAM";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

#[derive(Debug, Error)]
pub enum FeatureIoError {
    #[error("bad magic {found:?} at byte offset 0, expected \"SSAM\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported format version {version} at byte offset 4")]
    UnsupportedVersion { version: u32 },
    #[error("truncated file: needed {needed} bytes at byte offset {offset}, file has {len}")]
    TruncatedFile { offset: usize, needed: usize, len: usize },
    #[error("trailing data: {extra} unexpected bytes at byte offset {offset}")]
    TrailingData { offset: usize, extra: usize },
    #[error("non-finite value {value} at byte offset {offset}")]
    NonFiniteValue { offset: usize, value: f32 },
    #[error("invalid header: {0}")]
    BadHeader(String),
    #[error("label {label} at patch {index} does not fit in an 8-bit PGM")]
    LabelOverflow { index: usize, label: u32 },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid fixture spec: {0}")]
    InvalidSpec(String),
    #[error("I/O failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, FeatureIoError>;

/// Geometry of the patch grid a feature map was extracted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    image_height: usize,
    image_width: usize,
    patch_size: usize,
}

impl PatchGrid {
    /// Grid for an `image_height x image_width` image cut into `patch_size` squares.
    pub fn from_image(image_height: usize, image_width: usize, patch_size: usize) -> Result<Self> {
        if patch_size == 0 {
            return Err(FeatureIoError::InvalidGrid("patch size must be positive".into()));
        }
        if image_height == 0 || image_width == 0 {
            return Err(FeatureIoError::InvalidGrid("image must be non-empty".into()));
        }
        if !image_height.is_multiple_of(patch_size) || !image_width.is_multiple_of(patch_size) {
            return Err(FeatureIoError::InvalidGrid(format!(
                "image {image_height}x{image_width} is not a multiple of patch size {patch_size}"
            )));
        }
        Ok(Self { image_height, image_width, patch_size })
    }

    /// Grid with `rows x cols` patches of side `patch_size`.
    pub fn from_patches(rows: usize, cols: usize, patch_size: usize) -> Result<Self> {
        let height = rows.checked_mul(patch_size);
        let width = cols.checked_mul(patch_size);
        match (height, width) {
            (Some(h), Some(w)) => Self::from_image(h, w, patch_size),
            _ => Err(FeatureIoError::InvalidGrid("grid dimensions overflow".into())),
        }
    }

    pub fn image_height(&self) -> usize {
        self.image_height
    }

    pub fn image_width(&self) -> usize {
        self.image_width
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn rows(&self) -> usize {
        self.image_height / self.patch_size
    }

    pub fn cols(&self) -> usize {
        self.image_width / self.patch_size
    }

    /// Number of patch tokens.
    pub fn len(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols() + col
    }

    pub fn is_border(&self, index: usize) -> bool {
        let (r, c) = (index / self.cols(), index % self.cols());
        r == 0 || c == 0 || r + 1 == self.rows() || c + 1 == self.cols()
    }
}

/// Per-image grid of patch tokens, one row per patch in row-major grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenFeatureMap {
    grid: PatchGrid,
    tokens: Array2<f32>,
}

impl TokenFeatureMap {
    pub fn new(grid: PatchGrid, tokens: Array2<f32>) -> Result<Self> {
        if tokens.nrows() != grid.len() {
            return Err(FeatureIoError::InvalidGrid(format!(
                "{} tokens for a grid of {} patches",
                tokens.nrows(),
                grid.len()
            )));
        }
        if tokens.ncols() == 0 {
            return Err(FeatureIoError::InvalidGrid("token dimension must be positive".into()));
        }
        if let Some((i, v)) = tokens.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(FeatureIoError::NonFiniteValue { offset: HEADER_LEN + 4 * i, value: *v });
        }
        Ok(Self { grid, tokens })
    }

    pub fn grid(&self) -> PatchGrid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn tokens(&self) -> &Array2<f32> {
        &self.tokens
    }

    /// Tokens widened to 64-bit for the numerical pipeline.
    pub fn to_f64(&self) -> Array2<f64> {
        self.tokens.mapv(f64::from)
    }
}

/// Per-patch integer labels; 0 is background for binary masks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    grid: PatchGrid,
    labels: Vec<u32>,
}

impl LabelMask {
    pub fn new(grid: PatchGrid, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != grid.len() {
            return Err(FeatureIoError::InvalidGrid(format!(
                "{} labels for a grid of {} patches",
                labels.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, labels })
    }

    pub fn grid(&self) -> PatchGrid {
        self.grid
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Nearest-neighbour upsampling to pixel resolution, row-major.
    pub fn to_pixels(&self) -> Vec<u32> {
        let p = self.grid.patch_size();
        let (h, w) = (self.grid.image_height(), self.grid.image_width());
        let cols = self.grid.cols();
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                out.push(self.labels[(y / p) * cols + x / p]);
            }
        }
        out
    }
}

/// Parameters for a planted-partition token fixture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixtureSpec {
    pub grid: PatchGrid,
    pub dim: usize,
    pub blocks: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl FixtureSpec {
    fn validate(&self) -> Result<()> {
        if self.blocks < 2 {
            return Err(FeatureIoError::InvalidSpec(format!("need at least 2 blocks, got {}", self.blocks)));
        }
        if self.blocks > self.grid.len() {
            return Err(FeatureIoError::InvalidSpec(format!(
                "{} blocks exceed {} patches",
                self.blocks,
                self.grid.len()
            )));
        }
        if self.blocks > self.dim {
            return Err(FeatureIoError::InvalidSpec(format!(
                "{} orthogonal prototypes need dimension >= {}, got {}",
                self.blocks, self.blocks, self.dim
            )));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(FeatureIoError::InvalidSpec(format!("noise sigma {} must be finite and >= 0", self.noise_sigma)));
        }
        Ok(())
    }
}

/// Assigns each patch to one of `blocks` contiguous rectangles.
///
/// Blocks are laid out in horizontal bands of vertical strips: every band but
/// the last holds `per_band` strips and the last band holds the remainder.
pub fn block_layout(grid: PatchGrid, blocks: usize) -> Vec<u32> {
    let (rows, cols) = (grid.rows(), grid.cols());
    let mut per_band = ((blocks as f64).sqrt().ceil() as usize).clamp(1, cols);
    let mut bands = blocks.div_ceil(per_band);
    if bands > rows {
        per_band = cols;
        bands = blocks.div_ceil(cols);
    }
    let mut labels = vec![0u32; grid.len()];
    for r in 0..rows {
        let band = r * bands / rows;
        let first = band * per_band;
        let strips = per_band.min(blocks - first);
        for c in 0..cols {
            let strip = c * strips / cols;
            labels[grid.index(r, c)] = (first + strip) as u32;
        }
    }
    labels
}

/// Builds a planted-partition feature map and its ground-truth labels.
///
/// Tokens in block `j` equal the unit basis vector `e_j` plus i.i.d. Gaussian
/// noise of standard deviation `noise_sigma`.
pub fn synthesize_fixture(spec: &FixtureSpec) -> Result<(TokenFeatureMap, LabelMask)> {
    spec.validate()?;
    let labels = block_layout(spec.grid, spec.blocks);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| FeatureIoError::InvalidSpec(e.to_string()))?;
    let mut tokens = Array2::<f32>::zeros((spec.grid.len(), spec.dim));
    for (i, mut row) in tokens.rows_mut().into_iter().enumerate() {
        let block = labels[i] as usize;
        for (k, v) in row.iter_mut().enumerate() {
            let proto = if k == block { 1.0 } else { 0.0 };
            let eps = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            *v = (proto + eps) as f32;
        }
    }
    let features = TokenFeatureMap::new(spec.grid, tokens)?;
    let mask = LabelMask::new(spec.grid, labels)?;
    Ok((features, mask))
}

pub fn encode_features(f: &TokenFeatureMap) -> Vec<u8> {
    let grid = f.grid();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * f.tokens.len());
    out.extend_from_slice(MAGIC);
    for v in [FORMAT_VERSION, grid.rows() as u32, grid.cols() as u32, f.dim() as u32, grid.patch_size() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in f.tokens.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let chunk = bytes.get(offset..offset + 4).ok_or(FeatureIoError::TruncatedFile {
        offset,
        needed: 4,
        len: bytes.len(),
    })?;
    Ok(u32::from_le_bytes(chunk.try_into().expect("4-byte slice")))
}

pub fn decode_features(bytes: &[u8]) -> Result<TokenFeatureMap> {
    if bytes.len() < 4 {
        return Err(FeatureIoError::TruncatedFile { offset: 0, needed: 4, len: bytes.len() });
    }
    if &bytes[..4] != MAGIC {
        return Err(FeatureIoError::BadMagic { found: bytes[..4].try_into().expect("4-byte slice") });
    }
    let version = read_u32(bytes, 4)?;
    if version != FORMAT_VERSION {
        return Err(FeatureIoError::UnsupportedVersion { version });
    }
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let dim = read_u32(bytes, 16)? as usize;
    let patch = read_u32(bytes, 20)? as usize;
    if rows == 0 || cols == 0 || dim == 0 || patch == 0 {
        return Err(FeatureIoError::BadHeader(format!(
            "zero-sized field in header (Hp={rows}, Wp={cols}, d={dim}, P={patch})"
        )));
    }
    let grid = PatchGrid::from_patches(rows, cols, patch)?;
    let count = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(dim))
        .ok_or_else(|| FeatureIoError::BadHeader("payload size overflows".into()))?;
    let needed = count * 4;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < needed {
        return Err(FeatureIoError::TruncatedFile { offset: HEADER_LEN, needed, len: bytes.len() });
    }
    if payload.len() > needed {
        return Err(FeatureIoError::TrailingData { offset: HEADER_LEN + needed, extra: payload.len() - needed });
    }
    let mut values = Vec::with_capacity(count);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        if !v.is_finite() {
            return Err(FeatureIoError::NonFiniteValue { offset: HEADER_LEN + 4 * i, value: v });
        }
        values.push(v);
    }
    let tokens = Array2::from_shape_vec((rows * cols, dim), values).expect("shape matches payload length");
    TokenFeatureMap::new(grid, tokens)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FeatureIoError + '_ {
    move |source| FeatureIoError::IoFailure { path: path.to_path_buf(), source }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| FeatureIoError::IoFailure {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidInput, "path has no file name"),
        })?
        .to_string_lossy()
        .into_owned();
    let tmp = path.with_file_name(format!(".{file_name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(io_err(path))
}

pub fn save_features(f: &TokenFeatureMap, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_features(f))
}

pub fn load_features(path: impl AsRef<Path>) -> Result<TokenFeatureMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_features(&bytes)
}

/// Binary PGM (P5, maxval 255) with one byte per pixel.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    debug_assert_eq!(pixels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses a P5 image, returning `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 0usize;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // whitespace and comments between header tokens
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(FeatureIoError::BadHeader(format!("PGM header ends early at byte offset {pos}")));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(FeatureIoError::BadHeader(format!("expected P5 magic, found {:?}", fields[0])));
    }
    let parse = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| FeatureIoError::BadHeader(format!("PGM {what} {s:?} is not an integer")))
    };
    let width = parse(&fields[1], "width")?;
    let height = parse(&fields[2], "height")?;
    let maxval = parse(&fields[3], "maxval")?;
    if maxval != 255 {
        return Err(FeatureIoError::BadHeader(format!("PGM maxval {maxval}, expected 255")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let needed = width * height;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() < needed {
        return Err(FeatureIoError::TruncatedFile { offset: pos, needed, len: bytes.len() });
    }
    if raster.len() > needed {
        return Err(FeatureIoError::TrailingData { offset: pos + needed, extra: raster.len() - needed });
    }
    Ok((width, height, raster.to_vec()))
}

pub fn encode_mask(m: &LabelMask) -> Result<Vec<u8>> {
    let mut pixels = Vec::with_capacity(m.len());
    for (index, &label) in m.labels.iter().enumerate() {
        let byte = u8::try_from(label).map_err(|_| FeatureIoError::LabelOverflow { index, label })?;
        pixels.push(byte);
    }
    Ok(encode_pgm(m.grid.cols(), m.grid.rows(), &pixels))
}

pub fn save_mask(m: &LabelMask, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_mask(m)?)
}

/// Loads a patch-resolution mask. PGM carries no patch size, so the grid is
/// reported with `patch_size` supplied by the caller.
pub fn load_mask(path: impl AsRef<Path>, patch_size: usize) -> Result<LabelMask> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (width, height, pixels) = decode_pgm(&bytes)?;
    if width == 0 || height == 0 {
        return Err(FeatureIoError::BadHeader("PGM has zero size".into()));
    }
    let grid = PatchGrid::from_patches(height, width, patch_size)?;
    LabelMask::new(grid, pixels.into_iter().map(u32::from).collect())
}

/// Min-max scales `values` into 0..=255; a constant input maps to 0.
pub fn heatmap_bytes(values: impl IntoIterator<Item = f64> + Clone) -> Vec<u8> {
    let (lo, hi) = values
        .clone()
        .into_iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    values
        .into_iter()
        .map(|v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect()
}
