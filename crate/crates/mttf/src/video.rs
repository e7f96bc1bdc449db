//! Frame and video containers plus raw video file I/O.
//!
//! On disk a video is an 8-bit RGB planar file (per frame: R plane, G plane,
//! B plane) next to a human-readable sidecar descriptor holding width,
//! height, frame rate and frame count. Y4M ingestion is supported for 4:2:0
//! and 4:4:4 sources.

use crate::error::{Error, Result};
use ndarray::{Array3, IxDyn};
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

/// Exact frame rate as a rational number.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fps {
    pub num: u16,
    pub den: u16,
}

impl Fps {
    pub fn new(num: u16, den: u16) -> Self {
        Fps { num, den }
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Fps {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

/// One RGB frame with pixels in `[0, 1]`, stored `(3, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameImage {
    pub pixels: Array3<f64>,
}

impl FrameImage {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        let frame = FrameImage { pixels };
        frame.validate()?;
        Ok(frame)
    }

    pub fn validate(&self) -> Result<()> {
        let sh = self.pixels.shape();
        if sh[0] != 3 {
            return Err(Error::input(format!("frame must have 3 channels, got {}", sh[0])));
        }
        if sh[1] != sh[2] {
            return Err(Error::input(format!("frame must be square, got {}x{}", sh[1], sh[2])));
        }
        if self.pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("frame contains non-finite pixels"));
        }
        if self.pixels.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::input("frame pixels outside [0, 1]"));
        }
        Ok(())
    }

    pub fn resolution(&self) -> usize {
        self.pixels.shape()[1]
    }

    /// Index `i` such that `resolution == r >> i`, if the frame size is one
    /// of the `count` resolutions supported under largest resolution `r`.
    pub fn resolution_index(&self, largest: usize, count: usize) -> Result<usize> {
        let res = self.resolution();
        for i in 0..count {
            if largest >> i == res {
                return Ok(i);
            }
        }
        Err(Error::config(format!(
            "unsupported resolution {res} (largest {largest}, {count} supported)"
        )))
    }

    pub fn from_rgb8(data: &[u8], size: usize) -> Result<Self> {
        if data.len() != 3 * size * size {
            return Err(Error::input(format!(
                "rgb8 buffer length {} does not match 3*{size}*{size}",
                data.len()
            )));
        }
        let pixels = Array3::from_shape_fn((3, size, size), |(c, y, x)| {
            data[c * size * size + y * size + x] as f64 / 255.0
        });
        Ok(FrameImage { pixels })
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn constant(size: usize, value: f64) -> Self {
        FrameImage {
            pixels: Array3::from_elem((3, size, size), value),
        }
    }
}

/// A frame sequence with a frame rate.
#[derive(Debug, Clone)]
pub struct Video {
    pub frames: Vec<FrameImage>,
    pub fps: Fps,
}

impl Video {
    pub fn new(frames: Vec<FrameImage>, fps: Fps) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::input("video has no frames"));
        }
        let res = frames[0].resolution();
        if frames.iter().any(|f| f.resolution() != res) {
            return Err(Error::input("all frames must share one resolution"));
        }
        Ok(Video { frames, fps })
    }

    pub fn resolution(&self) -> usize {
        self.frames[0].resolution()
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    /// Writes `<path>` (planar RGB8) and `<path>.meta` (descriptor).
    pub fn save_raw(&self, path: &Path) -> Result<()> {
        let mut file = fs::File::create(path)?;
        for frame in &self.frames {
            file.write_all(&frame.to_rgb8())?;
        }
        let meta = format!(
            "width={}\nheight={}\nfps_num={}\nfps_den={}\nframes={}\n",
            self.resolution(),
            self.resolution(),
            self.fps.num,
            self.fps.den,
            self.frame_count()
        );
        fs::write(descriptor_path(path), meta)?;
        Ok(())
    }

    /// Reads a raw planar RGB8 file with its sidecar descriptor; `.y4m`
    /// inputs are dispatched to the Y4M reader.
    pub fn load(path: &Path) -> Result<Self> {
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("y4m")) {
            return Self::load_y4m(path);
        }
        let meta = fs::read_to_string(descriptor_path(path)).map_err(|e| {
            Error::input(format!(
                "missing descriptor {}: {e}",
                descriptor_path(path).display()
            ))
        })?;
        let mut width = 0usize;
        let mut height = 0usize;
        let mut fps_num = 25u16;
        let mut fps_den = 1u16;
        let mut frames = 0usize;
        for line in meta.lines() {
            let Some((k, v)) = line.split_once('=') else { continue };
            match k.trim() {
                "width" => width = parse_field(v)?,
                "height" => height = parse_field(v)?,
                "fps_num" => fps_num = parse_field(v)?,
                "fps_den" => fps_den = parse_field(v)?,
                "frames" => frames = parse_field(v)?,
                _ => {}
            }
        }
        if width == 0 || height == 0 || frames == 0 {
            return Err(Error::input("descriptor missing width/height/frames"));
        }
        if width != height {
            return Err(Error::input("only square videos are supported"));
        }
        let data = fs::read(path)?;
        let per_frame = 3 * width * height;
        if data.len() < per_frame * frames {
            return Err(Error::input(format!(
                "raw file too short: {} bytes for {} frames of {} bytes",
                data.len(),
                frames,
                per_frame
            )));
        }
        let frames = (0..frames)
            .map(|i| FrameImage::from_rgb8(&data[i * per_frame..(i + 1) * per_frame], width))
            .collect::<Result<Vec<_>>>()?;
        Video::new(frames, Fps::new(fps_num, fps_den))
    }

    /// Minimal Y4M reader (C420 family and C444), BT.601 limited range.
    pub fn load_y4m(path: &Path) -> Result<Self> {
        let mut data = Vec::new();
        fs::File::open(path)?.read_to_end(&mut data)?;
        let header_end = data
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::input("y4m: missing stream header"))?;
        let header = std::str::from_utf8(&data[..header_end])
            .map_err(|_| Error::input("y4m: non-utf8 header"))?;
        if !header.starts_with("YUV4MPEG2") {
            return Err(Error::input("y4m: bad signature"));
        }
        let mut width = 0usize;
        let mut height = 0usize;
        let mut fps = Fps::new(25, 1);
        let mut subsampled = true;
        for tok in header.split_ascii_whitespace().skip(1) {
            match tok.chars().next() {
                Some('W') => width = parse_field(&tok[1..])?,
                Some('H') => height = parse_field(&tok[1..])?,
                Some('F') => {
                    let (n, d) = tok[1..]
                        .split_once(':')
                        .ok_or_else(|| Error::input("y4m: bad frame rate"))?;
                    fps = Fps::new(parse_field(n)?, parse_field(d)?);
                }
                Some('C') => {
                    subsampled = match &tok[1..] {
                        c if c.starts_with("420") => true,
                        "444" => false,
                        other => {
                            return Err(Error::input(format!("y4m: unsupported chroma {other}")))
                        }
                    }
                }
                _ => {}
            }
        }
        if width == 0 || height == 0 {
            return Err(Error::input("y4m: missing dimensions"));
        }
        if width != height {
            return Err(Error::input("only square videos are supported"));
        }
        let y_len = width * height;
        let c_len = if subsampled { y_len / 4 } else { y_len };
        let mut pos = header_end + 1;
        let mut frames = Vec::new();
        while pos < data.len() {
            let line_end = data[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .map(|p| pos + p)
                .ok_or_else(|| Error::input("y4m: truncated frame header"))?;
            if !data[pos..].starts_with(b"FRAME") {
                return Err(Error::input("y4m: expected FRAME marker"));
            }
            pos = line_end + 1;
            let need = y_len + 2 * c_len;
            if pos + need > data.len() {
                return Err(Error::input("y4m: truncated frame payload"));
            }
            let y = &data[pos..pos + y_len];
            let cb = &data[pos + y_len..pos + y_len + c_len];
            let cr = &data[pos + y_len + c_len..pos + need];
            frames.push(yuv_to_frame(y, cb, cr, width, height, subsampled));
            pos += need;
        }
        Video::new(frames, fps)
    }
}

fn descriptor_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".meta");
    s.into()
}

fn parse_field<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::input(format!("bad descriptor field: {s:?}")))
}

fn yuv_to_frame(y: &[u8], cb: &[u8], cr: &[u8], w: usize, h: usize, subsampled: bool) -> FrameImage {
    let pixels = Array3::from_shape_fn((3, h, w), |(c, yy, xx)| {
        let luma = y[yy * w + xx] as f64;
        let (cw, cy, cx) = if subsampled {
            (w / 2, yy / 2, xx / 2)
        } else {
            (w, yy, xx)
        };
        let u = cb[cy * cw + cx] as f64 - 128.0;
        let v = cr[cy * cw + cx] as f64 - 128.0;
        let yv = (luma - 16.0) * (255.0 / 219.0);
        let val = match c {
            0 => yv + 1.596 * v * (255.0 / 224.0),
            1 => yv - 0.391 * u * (255.0 / 224.0) - 0.813 * v * (255.0 / 224.0),
            _ => yv + 2.018 * u * (255.0 / 224.0),
        };
        (val / 255.0).clamp(0.0, 1.0)
    });
    FrameImage { pixels }
}

/// Synthetic clip of a bright disc moving over a graded background; used by
/// tests, examples and the training smoke path.
pub fn synthetic_disc_clip(size: usize, frame_count: usize, speed: f64, fps: Fps) -> Video {
    let frames = (0..frame_count)
        .map(|t| synthetic_disc_frame(size, t as f64 * speed))
        .collect();
    Video::new(frames, fps).expect("synthetic clip is nonempty")
}

/// One frame of the synthetic disc clip; `phase` moves the disc along a
/// closed elliptic path so any two frames of a clip differ smoothly.
pub fn synthetic_disc_frame(size: usize, phase: f64) -> FrameImage {
    let s = size as f64;
    let cx = s * (0.5 + 0.25 * (phase).cos());
    let cy = s * (0.5 + 0.18 * (phase).sin());
    let radius = s * 0.16;
    let pixels = Array3::from_shape_fn((3, size, size), |(c, y, x)| {
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        let d = (dx * dx + dy * dy).sqrt();
        // Soft-edged disc over a horizontally graded backdrop.
        let disc = 1.0 / (1.0 + ((d - radius) * 1.5).exp());
        let bg = match c {
            0 => 0.15 + 0.2 * x as f64 / s,
            1 => 0.25,
            _ => 0.35 - 0.2 * y as f64 / s,
        };
        let fg = match c {
            0 => 0.95,
            1 => 0.65,
            _ => 0.2,
        };
        bg * (1.0 - disc) + fg * disc
    });
    FrameImage { pixels }
}

/// Soft foreground mask of the synthetic disc frame (matching
/// [`synthetic_disc_frame`]); handy as a matting ground truth in tests.
pub fn synthetic_disc_mask(size: usize, phase: f64) -> Array3<f64> {
    let s = size as f64;
    let cx = s * (0.5 + 0.25 * (phase).cos());
    let cy = s * (0.5 + 0.18 * (phase).sin());
    let radius = s * 0.16;
    Array3::from_shape_fn((1, size, size), |(_, y, x)| {
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        let d = (dx * dx + dy * dy).sqrt();
        1.0 / (1.0 + ((d - radius) * 1.5).exp())
    })
}

/// Frame as a dynamic-shape tensor for the autodiff pipeline.
pub fn frame_to_arr(frame: &FrameImage) -> crate::autodiff::Arr {
    frame.pixels.clone().into_dyn()
}

/// Bilinear resize of a frame to `size x size`.
pub fn resize_frame(frame: &FrameImage, size: usize) -> FrameImage {
    let g = crate::autodiff::Graph::inference();
    let out = g.constant(frame_to_arr(frame)).resize_bilinear(size, size);
    arr_to_frame(out.data())
}

/// Tensor `(3, H, W)` back to a frame, clamping into `[0, 1]`.
pub fn arr_to_frame(arr: &crate::autodiff::Arr) -> FrameImage {
    let sh = arr.shape();
    assert_eq!(sh.len(), 3);
    let mut pixels = Array3::zeros((sh[0], sh[1], sh[2]));
    for ((c, y, x), v) in pixels.indexed_iter_mut() {
        *v = arr[IxDyn(&[c, y, x])].clamp(0.0, 1.0);
    }
    FrameImage { pixels }
}
