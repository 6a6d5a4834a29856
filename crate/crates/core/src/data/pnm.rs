//! Binary netpbm images: P6 (RGB) and P5 (gray), 8- or 16-bit.
//!
//! Intensities map to `[0, 1]` by dividing by maxval. Disparity maps are
//! stored as 16-bit P5 in fixed point, `raw = round(disparity · 256)`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fixed-point scale of 16-bit disparity files.
pub const DISP_SCALE: f32 = 256.0;

/// A decoded netpbm raster.
#[derive(Clone, Debug, PartialEq)]
pub struct Pnm {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    /// Interleaved raw samples, row-major.
    pub samples: Vec<u16>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Reads whitespace-separated header tokens, skipping `#` comments.
struct Header<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn token(&mut self) -> Result<&str> {
        loop {
            match self.buf.get(self.pos) {
                Some(b'#') => {
                    while self.buf.get(self.pos).is_some_and(|&c| c != b'\n') {
                        self.pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => self.pos += 1,
                Some(_) => break,
                None => return Err(format_err("truncated header")),
            }
        }
        let start = self.pos;
        while self
            .buf
            .get(self.pos)
            .is_some_and(|c| !c.is_ascii_whitespace())
        {
            self.pos += 1;
        }
        std::str::from_utf8(&self.buf[start..self.pos]).map_err(|_| format_err("non-ASCII header"))
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let t = self.token()?;
        t.parse()
            .map_err(|_| format_err(format!("bad {what} {t:?} in header")))
    }
}

impl Pnm {
    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut h = Header { buf, pos: 0 };
        let channels = match h.token()? {
            "P5" => 1,
            "P6" => 3,
            other => {
                return Err(format_err(format!(
                    "unsupported magic {other:?}, expected P5 or P6"
                )))
            }
        };
        let width = h.number("width")?;
        let height = h.number("height")?;
        let maxval = h.number("maxval")?;
        if width == 0 || height == 0 {
            return Err(format_err(format!("empty image {width}x{height}")));
        }
        if maxval == 0 || maxval > 65535 {
            return Err(format_err(format!("unsupported maxval {maxval}")));
        }
        // exactly one whitespace byte separates the header from the raster
        if !h.buf.get(h.pos).is_some_and(|c| c.is_ascii_whitespace()) {
            return Err(format_err("missing whitespace after maxval"));
        }
        let raster = &buf[h.pos + 1..];
        let n = width * height * channels;
        let bytes = if maxval < 256 { 1 } else { 2 };
        if raster.len() < n * bytes {
            return Err(format_err(format!(
                "raster truncated: need {} bytes, have {}",
                n * bytes,
                raster.len()
            )));
        }
        let samples: Vec<u16> = if bytes == 1 {
            raster[..n].iter().map(|&b| b as u16).collect()
        } else {
            raster[..2 * n]
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]))
                .collect()
        };
        if samples.iter().any(|&s| s as usize > maxval) {
            return Err(format_err(format!("sample exceeds maxval {maxval}")));
        }
        Ok(Self {
            channels,
            width,
            height,
            maxval: maxval as u16,
            samples,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out =
            format!("{magic}\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval < 256 {
            out.extend(self.samples.iter().map(|&s| s as u8));
        } else {
            out.extend(self.samples.iter().flat_map(|s| s.to_be_bytes()));
        }
        out
    }

    /// `[C, H, W]` tensor of `sample / maxval`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let (c, h, w) = (self.channels, self.height, self.width);
        let maxval = self.maxval as f32;
        let mut data = vec![0.0; c * h * w];
        for (p, px) in self.samples.chunks_exact(c).enumerate() {
            for (ch, &s) in px.iter().enumerate() {
                data[ch * h * w + p] = s as f32 / maxval;
            }
        }
        Tensor::from_vec([c, h, w], data).expect("size matches header")
    }

    /// Quantizes a `[C, H, W]` tensor (C = 1 or 3, values clamped to
    /// `[0, 1]`) at the given maxval.
    pub fn from_tensor(t: &Tensor<f32>, maxval: u16) -> Result<Self> {
        let (c, h, w) = dims3(t)?;
        let mut samples = vec![0u16; c * h * w];
        for ch in 0..c {
            for p in 0..h * w {
                let v = t.data()[ch * h * w + p].clamp(0.0, 1.0);
                samples[p * c + ch] = (v * maxval as f32).round() as u16;
            }
        }
        Ok(Self {
            channels: c,
            width: w,
            height: h,
            maxval,
            samples,
        })
    }
}

fn dims3(t: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    let (c, h, w) = match *t.shape() {
        [c, h, w] => (c, h, w),
        [1, c, h, w] => (c, h, w),
        _ => {
            return Err(Error::InvalidShape {
                op: "save_image",
                msg: format!("expected [C, H, W], got {:?}", t.shape()),
            })
        }
    };
    if c != 1 && c != 3 {
        return Err(Error::InvalidShape {
            op: "save_image",
            msg: format!("expected 1 or 3 channels, got {c}"),
        });
    }
    Ok((c, h, w))
}

/// Writes `bytes` to a sibling temporary file, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let run = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        fs::rename(&tmp, path)
    };
    run().map_err(|e| Error::io(path, e))
}

pub fn read_pnm(path: &Path) -> Result<Pnm> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Pnm::decode(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Loads a P5/P6 file as a `[C, H, W]` tensor in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    Ok(read_pnm(path)?.to_tensor())
}

/// Saves `[3, H, W]` as 8-bit P6 or `[1, H, W]` as 8-bit P5.
pub fn save_image(t: &Tensor<f32>, path: &Path) -> Result<()> {
    write_atomic(path, &Pnm::from_tensor(t, 255)?.encode())
}

/// Saves a `[1, H, W]` disparity map as 16-bit fixed point.
pub fn save_disparity(d: &Tensor<f32>, path: &Path) -> Result<()> {
    let (c, h, w) = dims3(d)?;
    if c != 1 {
        return Err(Error::InvalidShape {
            op: "save_disparity",
            msg: format!("disparity must have one channel, got {c}"),
        });
    }
    let samples = d
        .data()
        .iter()
        .map(|&v| (v * DISP_SCALE).round().clamp(0.0, 65535.0) as u16)
        .collect();
    let pnm = Pnm {
        channels: 1,
        width: w,
        height: h,
        maxval: 65535,
        samples,
    };
    write_atomic(path, &pnm.encode())
}

/// Loads a 16-bit P5 disparity map as `[1, H, W]` pixels.
pub fn load_disparity(path: &Path) -> Result<Tensor<f32>> {
    let p = read_pnm(path)?;
    if p.channels != 1 || p.maxval < 256 {
        return Err(Error::Format(format!(
            "{}: disparity maps must be 16-bit P5",
            path.display()
        )));
    }
    let data = p.samples.iter().map(|&s| s as f32 / DISP_SCALE).collect();
    Tensor::from_vec([1, p.height, p.width], data)
}
