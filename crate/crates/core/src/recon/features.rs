use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::RgbImage;

const LOCAL_MAGIC: &[u8; 4] = b"FLC\x01";
const GLOBAL_MAGIC: &[u8; 4] = b"FGL\x01";

/// Image-aligned features `[H_f, W_f, C_l]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl LocalFeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        let m = Self {
            height,
            width,
            channels,
            data,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::Contract(format!(
                "local feature map must be at least 8x8, got {}x{}",
                self.height, self.width
            )));
        }
        if self.channels == 0 {
            return Err(Error::Contract("local feature map has no channels".into()));
        }
        let n = self.height * self.width * self.channels;
        if self.data.len() != n {
            return Err(Error::Dimension {
                what: "local feature data",
                expected: n,
                got: self.data.len(),
            });
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("local feature map is not finite".into()));
        }
        Ok(())
    }

    /// Bilinear resampling to `size × size` with pixel-centre alignment.
    pub fn resampled(&self, size: usize) -> Self {
        if size == self.height && size == self.width {
            return self.clone();
        }
        let c = self.channels;
        let data = bilinear(&self.data, self.width, self.height, c, size, size);
        Self {
            height: size,
            width: size,
            channels: c,
            data,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + 8 * self.data.len());
        buf.extend_from_slice(LOCAL_MAGIC);
        for d in [self.height, self.width, self.channels] {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = read_all(path)?;
        let dims = header(&bytes, LOCAL_MAGIC, 3, path)?;
        let (h, w, c) = (dims[0], dims[1], dims[2]);
        let data = payload(&bytes[16..], h * w * c, path)?;
        Self::new(h, w, c, data).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Image-level feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalFeature {
    pub data: Vec<f64>,
}

impl GlobalFeature {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Empty("global feature"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("global feature is not finite".into()));
        }
        Ok(Self { data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(8 + 8 * self.data.len());
        buf.extend_from_slice(GLOBAL_MAGIC);
        buf.extend_from_slice(&(self.data.len() as u32).to_le_bytes());
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = read_all(path)?;
        let dims = header(&bytes, GLOBAL_MAGIC, 1, path)?;
        let data = payload(&bytes[8..], dims[0], path)?;
        Self::new(data).map_err(|e| Error::format(path, e.to_string()))
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

fn header(bytes: &[u8], magic: &[u8; 4], n: usize, path: &Path) -> Result<Vec<usize>> {
    if bytes.len() < 4 + 4 * n || bytes[..3] != magic[..3] {
        return Err(Error::format(path, "bad magic or truncated header"));
    }
    if bytes[3] != magic[3] {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: bytes[3] as u32,
            expected: magic[3] as u32,
        });
    }
    Ok((0..n)
        .map(|i| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect())
}

fn payload(bytes: &[u8], n: usize, path: &Path) -> Result<Vec<f64>> {
    if bytes.len() != 8 * n {
        return Err(Error::format(path, format!("expected {n} values, found {} bytes", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Bilinear resize of an `[h, w, c]` image with pixel centres at `i + 0.5`.
pub(crate) fn bilinear(src: &[f64], w: usize, h: usize, c: usize, ow: usize, oh: usize) -> Vec<f64> {
    let mut out = vec![0.0; ow * oh * c];
    let sample = |o: usize, n_out: usize, n_in: usize| {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    for y in 0..oh {
        let (y0, y1, fy) = sample(y, oh, h);
        for x in 0..ow {
            let (x0, x1, fx) = sample(x, ow, w);
            let o = &mut out[(y * ow + x) * c..(y * ow + x + 1) * c];
            for k in 0..c {
                let v00 = src[(y0 * w + x0) * c + k];
                let v01 = src[(y0 * w + x1) * c + k];
                let v10 = src[(y1 * w + x0) * c + k];
                let v11 = src[(y1 * w + x1) * c + k];
                o[k] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11);
            }
        }
    }
    out
}

/// Stand-in for a learned image backbone. Local features are the bilinearly
/// resized RGB plus horizontal and vertical luminance gradients, repeated
/// cyclically to `c_l` channels. The global feature holds the mean and
/// standard deviation of each of those five channels, repeated to `c_g`.
pub fn synthetic_features(
    img: &RgbImage,
    size: usize,
    c_l: usize,
    c_g: usize,
) -> Result<(LocalFeatureMap, GlobalFeature)> {
    if c_l == 0 || c_g == 0 {
        return Err(Error::Config("feature channel counts must be positive".into()));
    }
    let rgb = bilinear(&img.data, img.width, img.height, 3, size, size);
    let lum: Vec<f64> = rgb
        .chunks(3)
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .collect();
    let at = |x: isize, y: isize| {
        let x = x.clamp(0, size as isize - 1) as usize;
        let y = y.clamp(0, size as isize - 1) as usize;
        lum[y * size + x]
    };
    let mut base = Vec::with_capacity(size * size * 5);
    for y in 0..size as isize {
        for x in 0..size as isize {
            let p = (y as usize * size + x as usize) * 3;
            base.extend_from_slice(&rgb[p..p + 3]);
            base.push(0.5 * (at(x + 1, y) - at(x - 1, y)));
            base.push(0.5 * (at(x, y + 1) - at(x, y - 1)));
        }
    }
    let mut data = Vec::with_capacity(size * size * c_l);
    for px in base.chunks(5) {
        data.extend((0..c_l).map(|k| px[k % 5]));
    }
    let npix = (size * size) as f64;
    let mut moments = Vec::with_capacity(10);
    for k in 0..5 {
        let mean = base.chunks(5).map(|p| p[k]).sum::<f64>() / npix;
        let var = base.chunks(5).map(|p| (p[k] - mean).powi(2)).sum::<f64>() / npix;
        moments.push(mean);
        moments.push(var.sqrt());
    }
    let global = GlobalFeature::new((0..c_g).map(|k| moments[k % moments.len()]).collect())?;
    Ok((LocalFeatureMap::new(size, size, c_l, data)?, global))
}
