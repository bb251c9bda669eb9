//! File formats: raw float64 lattices, binary PGM (8/16-bit) and PPM.
//!
//! Raw lattice layout, all little-endian:
//!
//! ```text
//! magic   8 bytes  "PFLAT64\n"
//! width   u32
//! height  u32
//! namelen u32
//! name    namelen bytes, UTF-8
//! data    width*height f64, row-major
//! ```
//!
//! Several lattices may be concatenated in one file.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Grid;

pub const RAW_MAGIC: &[u8; 8] = b"PFLAT64\n";

pub fn write_raw_lattice<W: Write>(w: &mut W, name: &str, grid: &Grid<f64>) -> Result<()> {
    w.write_all(RAW_MAGIC)?;
    w.write_all(&(grid.width() as u32).to_le_bytes())?;
    w.write_all(&(grid.height() as u32).to_le_bytes())?;
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    let mut buf = Vec::with_capacity(grid.as_slice().len() * 8);
    for v in grid.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_raw_lattice<R: Read>(r: &mut R) -> Result<(String, Grid<f64>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != RAW_MAGIC {
        return Err(Error::Parse("not a raw float64 lattice (bad magic)".into()));
    }
    let mut word = [0u8; 4];
    let mut read_u32 = |r: &mut R| -> Result<usize> {
        r.read_exact(&mut word)?;
        Ok(u32::from_le_bytes(word) as usize)
    };
    let width = read_u32(r)?;
    let height = read_u32(r)?;
    let name_len = read_u32(r)?;
    if name_len > 4096 {
        return Err(Error::Parse(format!("lattice name length {name_len} too large")));
    }
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|_| Error::Parse("lattice name not UTF-8".into()))?;
    let n = width
        .checked_mul(height)
        .ok_or_else(|| Error::Parse("lattice dimensions overflow".into()))?;
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((name, Grid::from_vec(width, height, data)?))
}

/// Decoded binary PGM.
#[derive(Debug, Clone, PartialEq)]
pub struct Pgm {
    pub maxval: u16,
    pub pixels: Grid<u16>,
}

fn read_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = Vec::new();
    loop {
        let mut byte = [0u8; 1];
        if r.read(&mut byte)? == 0 {
            break;
        }
        let b = byte[0];
        if b == b'#' && tok.is_empty() {
            let mut skip = Vec::new();
            r.read_until(b'\n', &mut skip)?;
            continue;
        }
        if b.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(b);
    }
    if tok.is_empty() {
        return Err(Error::Parse("truncated netpbm header".into()));
    }
    String::from_utf8(tok).map_err(|_| Error::Parse("non-ASCII netpbm header".into()))
}

fn header_number<R: BufRead>(r: &mut R, what: &str) -> Result<usize> {
    let tok = read_token(r)?;
    tok.parse()
        .map_err(|_| Error::Parse(format!("bad netpbm {what}: {tok:?}")))
}

/// Read a binary (`P5`) PGM with maxval up to 65535.
pub fn read_pgm<R: BufRead>(r: &mut R) -> Result<Pgm> {
    let magic = read_token(r)?;
    if magic != "P5" {
        return Err(Error::Parse(format!("expected binary PGM (P5), got {magic:?}")));
    }
    let width = header_number(r, "width")?;
    let height = header_number(r, "height")?;
    let maxval = header_number(r, "maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Parse(format!("PGM maxval {maxval} out of range")));
    }
    let n = width * height;
    let data = if maxval < 256 {
        let mut bytes = vec![0u8; n];
        r.read_exact(&mut bytes)?;
        bytes.into_iter().map(u16::from).collect()
    } else {
        let mut bytes = vec![0u8; n * 2];
        r.read_exact(&mut bytes)?;
        bytes
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    };
    Ok(Pgm {
        maxval: maxval as u16,
        pixels: Grid::from_vec(width, height, data)?,
    })
}

pub fn write_pgm16<W: Write>(w: &mut W, pixels: &Grid<u16>) -> Result<()> {
    write!(w, "P5\n{} {}\n65535\n", pixels.width(), pixels.height())?;
    let mut buf = Vec::with_capacity(pixels.as_slice().len() * 2);
    for v in pixels.as_slice() {
        buf.extend_from_slice(&v.to_be_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn write_pgm8<W: Write>(w: &mut W, pixels: &Grid<u8>) -> Result<()> {
    write!(w, "P5\n{} {}\n255\n", pixels.width(), pixels.height())?;
    w.write_all(pixels.as_slice())?;
    Ok(())
}

pub fn write_ppm<W: Write>(w: &mut W, pixels: &Grid<[u8; 3]>) -> Result<()> {
    write!(w, "P6\n{} {}\n255\n", pixels.width(), pixels.height())?;
    let buf: Vec<u8> = pixels.as_slice().iter().flatten().copied().collect();
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_ppm<R: BufRead>(r: &mut R) -> Result<Grid<[u8; 3]>> {
    let magic = read_token(r)?;
    if magic != "P6" {
        return Err(Error::Parse(format!("expected binary PPM (P6), got {magic:?}")));
    }
    let width = header_number(r, "width")?;
    let height = header_number(r, "height")?;
    let maxval = header_number(r, "maxval")?;
    if maxval != 255 {
        return Err(Error::Parse(format!("unsupported PPM maxval {maxval}")));
    }
    let mut bytes = vec![0u8; width * height * 3];
    r.read_exact(&mut bytes)?;
    let data = bytes.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    Grid::from_vec(width, height, data)
}

/// Whether a file starts with the raw lattice magic.
pub fn is_raw_lattice_file(path: &Path) -> Result<bool> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    match f.read_exact(&mut magic) {
        Ok(()) => Ok(&magic == RAW_MAGIC),
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Ok(false),
        Err(e) => Err(e.into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn raw_lattice_roundtrip_concatenated() {
        let a = Grid::from_fn(3, 2, |x, y| x as f64 - 0.5 * y as f64);
        let b = Grid::from_fn(3, 2, |x, y| f64::from_bits((x * 7 + y) as u64 + 1));
        let mut buf = Vec::new();
        write_raw_lattice(&mut buf, "a", &a).unwrap();
        write_raw_lattice(&mut buf, "tan_x^2", &b).unwrap();
        let mut cur = Cursor::new(buf);
        assert_eq!(read_raw_lattice(&mut cur).unwrap(), ("a".into(), a));
        let (name, got) = read_raw_lattice(&mut cur).unwrap();
        assert_eq!(name, "tan_x^2");
        assert!(got
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .all(|(u, v)| u.to_bits() == v.to_bits()));
    }

    #[test]
    fn raw_lattice_rejects_garbage() {
        let mut cur = Cursor::new(b"P5\n1 1\n255\n\0".to_vec());
        assert!(matches!(read_raw_lattice(&mut cur), Err(Error::Parse(_))));
        let mut truncated = Vec::new();
        write_raw_lattice(&mut truncated, "x", &Grid::filled(4, 4, 1.0)).unwrap();
        truncated.truncate(40);
        assert!(read_raw_lattice(&mut Cursor::new(truncated)).is_err());
    }

    #[test]
    fn pgm16_roundtrip_and_big_endian() {
        let g = Grid::from_vec(2, 2, vec![0u16, 1, 2000, 65535]).unwrap();
        let mut buf = Vec::new();
        write_pgm16(&mut buf, &g).unwrap();
        assert!(buf.starts_with(b"P5\n2 2\n65535\n"));
        assert_eq!(&buf[buf.len() - 8..], &[0, 0, 0, 1, 0x07, 0xd0, 0xff, 0xff]);
        let pgm = read_pgm(&mut Cursor::new(buf)).unwrap();
        assert_eq!(pgm.maxval, 65535);
        assert_eq!(pgm.pixels, g);
    }

    #[test]
    fn pgm8_with_comments() {
        let bytes = b"P5\n# made by hand\n3 1 # dims\n255\n\x01\x02\xff".to_vec();
        let pgm = read_pgm(&mut Cursor::new(bytes)).unwrap();
        assert_eq!(pgm.maxval, 255);
        assert_eq!(pgm.pixels.as_slice(), &[1, 2, 255]);
        let mut out = Vec::new();
        write_pgm8(&mut out, &Grid::from_vec(3, 1, vec![1u8, 2, 255]).unwrap()).unwrap();
        assert_eq!(read_pgm(&mut Cursor::new(out)).unwrap().pixels, pgm.pixels);
    }

    #[test]
    fn pgm_rejects_ascii_variant() {
        assert!(read_pgm(&mut Cursor::new(b"P2\n1 1\n255\n7\n".to_vec())).is_err());
        assert!(read_pgm(&mut Cursor::new(b"P5\n2 2\n255\n\x01".to_vec())).is_err());
    }

    #[test]
    fn ppm_roundtrip() {
        let g = Grid::from_fn(4, 3, |x, y| [x as u8, y as u8, 200]);
        let mut buf = Vec::new();
        write_ppm(&mut buf, &g).unwrap();
        assert_eq!(read_ppm(&mut Cursor::new(buf)).unwrap(), g);
    }
}
