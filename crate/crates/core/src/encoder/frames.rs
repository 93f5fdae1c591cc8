//! Lazy access to decoded video frames.
//!
//! A view path is either a directory of still images named by frame index
//! (`000000.png`, `17.jpg`, ...) already sampled at the dataset rate, or a
//! video file that is decoded on demand by an external `ffmpeg` process and
//! resampled to the dataset rate.

use std::collections::BTreeMap;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdout, Command, Stdio};

use image::{DynamicImage, RgbImage};

use crate::error::{Error, IoContext, Result};

/// Sequential reader over one view's frames.
pub trait FrameStream {
    /// Decodes frame `index`. Indices must be requested in non-decreasing
    /// order; a decode failure only affects that frame.
    fn frame(&mut self, index: u32) -> Result<DynamicImage>;
}

pub trait FrameSource: Send + Sync {
    fn open(&self, path: &Path, rate_hz: f64) -> Result<Box<dyn FrameStream>>;
}

/// Picks the image-directory reader for directories and `ffmpeg` for files.
#[derive(Debug, Clone, Default)]
pub struct DefaultFrameSource {
    pub ffmpeg: Option<PathBuf>,
}

impl FrameSource for DefaultFrameSource {
    fn open(&self, path: &Path, rate_hz: f64) -> Result<Box<dyn FrameStream>> {
        if path.is_dir() {
            Ok(Box::new(ImageDirStream::open(path)?))
        } else {
            let bin = self.ffmpeg.clone().unwrap_or_else(|| PathBuf::from("ffmpeg"));
            Ok(Box::new(FfmpegStream::spawn(&bin, path, rate_hz)?))
        }
    }
}

pub struct ImageDirStream {
    dir: PathBuf,
    files: BTreeMap<u32, PathBuf>,
}

impl ImageDirStream {
    pub fn open(dir: &Path) -> Result<Self> {
        let mut files = BTreeMap::new();
        for entry in std::fs::read_dir(dir).io_context(|| format!("listing {}", dir.display()))? {
            let path = entry.io_context(|| format!("listing {}", dir.display()))?.path();
            let index = path
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.parse::<u32>().ok());
            if let Some(i) = index {
                files.insert(i, path);
            }
        }
        Ok(ImageDirStream {
            dir: dir.to_path_buf(),
            files,
        })
    }
}

impl FrameStream for ImageDirStream {
    fn frame(&mut self, index: u32) -> Result<DynamicImage> {
        let path = self
            .files
            .get(&index)
            .ok_or_else(|| Error::Decode(format!("frame {index} missing from {}", self.dir.display())))?;
        let bytes = std::fs::read(path).io_context(|| format!("reading {}", path.display()))?;
        image::load_from_memory(&bytes).map_err(|e| Error::Decode(format!("{}: {e}", path.display())))
    }
}

/// Streams binary PPM frames out of `ffmpeg`.
pub struct FfmpegStream {
    child: Child,
    out: BufReader<ChildStdout>,
    next: u32,
    ended: bool,
    path: PathBuf,
}

impl FfmpegStream {
    pub fn spawn(ffmpeg: &Path, video: &Path, rate_hz: f64) -> Result<Self> {
        let mut child = Command::new(ffmpeg)
            .args(["-v", "error", "-i"])
            .arg(video)
            .args(["-vf", &format!("fps={rate_hz}"), "-f", "image2pipe", "-vcodec", "ppm", "-"])
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| Error::Decode(format!("cannot run {} for {}: {e}", ffmpeg.display(), video.display())))?;
        let out = BufReader::new(child.stdout.take().expect("stdout is piped"));
        Ok(FfmpegStream {
            child,
            out,
            next: 0,
            ended: false,
            path: video.to_path_buf(),
        })
    }

    fn read_one(&mut self) -> Result<Option<RgbImage>> {
        read_ppm(&mut self.out).map_err(|e| Error::Decode(format!("{}: {e}", self.path.display())))
    }
}

impl FrameStream for FfmpegStream {
    fn frame(&mut self, index: u32) -> Result<DynamicImage> {
        if index < self.next {
            return Err(Error::Decode(format!("frame {index} requested out of order")));
        }
        while !self.ended {
            let frame = self.read_one()?;
            let current = self.next;
            self.next += 1;
            match frame {
                None => self.ended = true,
                Some(img) if current == index => return Ok(DynamicImage::ImageRgb8(img)),
                Some(_) => {}
            }
        }
        Err(Error::Decode(format!("{} ended before frame {index}", self.path.display())))
    }
}

impl Drop for FfmpegStream {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Reads one `P6` image, or `None` at a clean end of stream.
pub fn read_ppm<R: Read>(r: &mut R) -> std::result::Result<Option<RgbImage>, String> {
    let mut tokens = Vec::with_capacity(4);
    let mut cur = Vec::new();
    let mut byte = [0u8; 1];
    let mut in_comment = false;
    while tokens.len() < 4 {
        match r.read(&mut byte) {
            Ok(0) if tokens.is_empty() && cur.is_empty() => return Ok(None),
            Ok(0) => return Err("truncated PPM header".into()),
            Ok(_) => {}
            Err(e) => return Err(e.to_string()),
        }
        let b = byte[0];
        if in_comment {
            in_comment = b != b'\n';
            continue;
        }
        if b == b'#' {
            in_comment = true;
        } else if b.is_ascii_whitespace() {
            if !cur.is_empty() {
                tokens.push(String::from_utf8_lossy(&cur).into_owned());
                cur.clear();
            }
        } else {
            cur.push(b);
        }
    }
    if tokens[0] != "P6" {
        return Err(format!("expected P6, found {}", tokens[0]));
    }
    let parse = |s: &str| s.parse::<u32>().map_err(|_| format!("bad PPM field {s:?}"));
    let (w, h, max) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
    if max != 255 {
        return Err(format!("unsupported PPM max value {max}"));
    }
    let mut buf = vec![0u8; (w as usize) * (h as usize) * 3];
    r.read_exact(&mut buf).map_err(|e| format!("truncated PPM body: {e}"))?;
    RgbImage::from_raw(w, h, buf).map(Some).ok_or_else(|| "bad PPM dimensions".into())
}
