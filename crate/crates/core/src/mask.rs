//! Binary masks and their binary PGM (P5) representation.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major binary mask; `true` marks foreground.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} bits for a {width}x{height} mask",
                bits.len()
            )));
        }
        Ok(Self { width, height, bits })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn complement(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    /// Writes a P5 PGM with 0 for background and 255 for foreground.
    pub fn write_pgm<W: Write>(&self, mut writer: W) -> Result<()> {
        write!(writer, "P5\n{} {}\n255\n", self.width, self.height)?;
        let body: Vec<u8> = self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        writer.write_all(&body)?;
        Ok(())
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_pgm(std::io::BufWriter::new(file))
    }

    /// Reads a P5 PGM; any nonzero sample is foreground.
    pub fn read_pgm<R: Read>(mut reader: R) -> Result<Self> {
        let mut raw = Vec::new();
        reader.read_to_end(&mut raw)?;
        let mut pos = 0;
        let magic = next_token(&raw, &mut pos)?;
        if magic != "P5" {
            return Err(Error::Parse(format!("unsupported PGM magic {magic:?}")));
        }
        let width = parse_dim(next_token(&raw, &mut pos)?)?;
        let height = parse_dim(next_token(&raw, &mut pos)?)?;
        let maxval = parse_dim(next_token(&raw, &mut pos)?)?;
        if maxval == 0 || maxval > 65535 {
            return Err(Error::Parse(format!("bad PGM maxval {maxval}")));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let sample = if maxval > 255 { 2 } else { 1 };
        let need = width * height * sample;
        let body = raw.get(pos..).unwrap_or(&[]);
        if body.len() < need {
            return Err(Error::Truncated {
                expected: pos + need,
                found: raw.len(),
            });
        }
        let bits = body[..need]
            .chunks_exact(sample)
            .map(|s| s.iter().any(|&b| b != 0))
            .collect();
        Self::new(width, height, bits)
    }

    pub fn load_pgm(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_pgm(std::io::BufReader::new(file))
    }
}

fn next_token<'a>(raw: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    loop {
        match raw.get(*pos) {
            Some(b'#') => {
                while raw.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(Error::Parse("unexpected end of PGM header".into())),
        }
    }
    let start = *pos;
    while raw.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    std::str::from_utf8(&raw[start..*pos]).map_err(|_| Error::Parse("non-ASCII PGM header".into()))
}

fn parse_dim(token: &str) -> Result<usize> {
    token
        .parse()
        .map_err(|_| Error::Parse(format!("bad PGM header field {token:?}")))
}
