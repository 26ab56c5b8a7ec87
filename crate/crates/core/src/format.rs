//! Binary containers for fitted fields (`NHF1`) and local-field grids
//! (`NHG1`).
//!
//! All integers are little-endian `u32`/`u64`, all reals little-endian
//! IEEE-754 `f64`, so a save/load round trip is bit-exact. Layouts:
//!
//! ```text
//! NHF1: magic | C u64 | channels u32 | width u32 | height u32 | flags u32 | κ
//!       | W1 (C×2) | |ν|² (C) | b1 (C) | W2 (channels×C) | b2 (channels)
//! NHG1: magic | C u64 | channels u32 | grid width u32 | grid height u32
//!       | flags u32 | κ | W1 (C×2) | |ν|² (C) | b1 (cells×C)
//!       | W2 (cells×channels×C) | b2 (cells×channels)
//! ```
//!
//! The cached squared norms are checked against `W1` on load.

use std::path::Path;

use crate::bank::KappaMode;
use crate::error::{Error, Result};
use crate::field::{FieldParams, HeatField, Trainable, WaveBank};
use crate::sampling::LocalFieldGrid;

const FIELD_MAGIC: &[u8; 4] = b"NHF1";
const GRID_MAGIC: &[u8; 4] = b"NHG1";

/// Provenance bits stored with a container.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FieldFlags {
    pub kappa_mode: KappaMode,
    pub trained: Trainable,
}

impl FieldFlags {
    const PAPER_LITERAL: u32 = 1;
    const TRAINED_WAVES: u32 = 2;
    const TRAINED_KAPPA: u32 = 4;

    fn bits(&self) -> u32 {
        let mut bits = 0;
        if self.kappa_mode == KappaMode::PaperLiteral {
            bits |= Self::PAPER_LITERAL;
        }
        if self.trained.waves {
            bits |= Self::TRAINED_WAVES;
        }
        if self.trained.kappa {
            bits |= Self::TRAINED_KAPPA;
        }
        bits
    }

    fn from_bits(bits: u32) -> Result<Self> {
        if bits & !7 != 0 {
            return Err(Error::Format(format!("unknown flag bits {bits:#x}")));
        }
        Ok(FieldFlags {
            kappa_mode: if bits & Self::PAPER_LITERAL != 0 {
                KappaMode::PaperLiteral
            } else {
                KappaMode::SelfConsistent
            },
            trained: Trainable {
                waves: bits & Self::TRAINED_WAVES != 0,
                kappa: bits & Self::TRAINED_KAPPA != 0,
            },
        })
    }
}

/// A global field together with the raster it was fitted to.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldFile {
    pub field: HeatField,
    /// Native (fit-resolution) raster size.
    pub width: u32,
    pub height: u32,
    pub flags: FieldFlags,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridFile {
    pub grid: LocalFieldGrid,
    pub flags: FieldFlags,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn reals(&mut self, vs: &[f64]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn bank(&mut self, bank: &WaveBank) {
        for w in bank.waves() {
            self.reals(w);
        }
        self.reals(bank.norm_sq());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn reals(&mut self, count: usize) -> Result<Vec<f64>> {
        let bytes = count
            .checked_mul(8)
            .ok_or_else(|| Error::Format("length overflow".into()))?;
        Ok(self
            .take(bytes)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn bank(&mut self, components: usize) -> Result<WaveBank> {
        let flat = self.reals(2 * components)?;
        let norms = self.reals(components)?;
        let waves = flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        WaveBank::with_cached_norms(waves, &norms).map_err(|e| Error::Format(e.to_string()))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Header fields shared by both containers.
struct Header {
    components: usize,
    channels: usize,
    width: u32,
    height: u32,
    flags: FieldFlags,
    kappa: f64,
}

fn read_header(r: &mut Reader<'_>, magic: &[u8; 4]) -> Result<Header> {
    let found = r.take(4)?;
    if found != magic {
        return Err(Error::Format(format!(
            "expected magic {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(found)
        )));
    }
    let components = usize::try_from(r.u64()?).map_err(|_| Error::Format("component count overflow".into()))?;
    let channels = r.u32()? as usize;
    let width = r.u32()?;
    let height = r.u32()?;
    let flags = FieldFlags::from_bits(r.u32()?)?;
    let kappa = r.reals(1)?[0];
    if components == 0 || channels == 0 {
        return Err(Error::Format("empty field".into()));
    }
    Ok(Header {
        components,
        channels,
        width,
        height,
        flags,
        kappa,
    })
}

fn write_header(w: &mut Writer, magic: &[u8; 4], h: &Header) {
    w.0.extend_from_slice(magic);
    w.u64(h.components as u64);
    w.u32(h.channels as u32);
    w.u32(h.width);
    w.u32(h.height);
    w.u32(h.flags.bits());
    w.reals(&[h.kappa]);
}

pub fn encode_field(file: &FieldFile) -> Vec<u8> {
    let f = &file.field;
    let p = f.params();
    let mut w = Writer(Vec::new());
    write_header(
        &mut w,
        FIELD_MAGIC,
        &Header {
            components: f.bank().len(),
            channels: f.channels(),
            width: file.width,
            height: file.height,
            flags: file.flags,
            kappa: f.kappa(),
        },
    );
    w.bank(f.bank());
    w.reals(&p.phases);
    w.reals(&p.amplitudes);
    w.reals(&p.bias);
    w.0
}

pub fn decode_field(bytes: &[u8]) -> Result<FieldFile> {
    let mut r = Reader { bytes, pos: 0 };
    let h = read_header(&mut r, FIELD_MAGIC)?;
    let bank = r.bank(h.components)?;
    let phases = r.reals(h.components)?;
    let amplitudes = r.reals(h.channels * h.components)?;
    let bias = r.reals(h.channels)?;
    r.finish()?;
    let params = FieldParams::new(h.channels, phases, amplitudes, bias, h.kappa)
        .map_err(|e| Error::Format(e.to_string()))?;
    let field = HeatField::new(bank, params).map_err(|e| Error::Format(e.to_string()))?;
    Ok(FieldFile {
        field,
        width: h.width,
        height: h.height,
        flags: h.flags,
    })
}

pub fn encode_grid(file: &GridFile) -> Vec<u8> {
    let g = &file.grid;
    let mut w = Writer(Vec::new());
    write_header(
        &mut w,
        GRID_MAGIC,
        &Header {
            components: g.bank().len(),
            channels: g.channels(),
            width: g.width() as u32,
            height: g.height() as u32,
            flags: file.flags,
            kappa: g.kappa(),
        },
    );
    w.bank(g.bank());
    w.reals(&g.phases);
    w.reals(&g.amplitudes);
    w.reals(g.bias());
    w.0
}

pub fn decode_grid(bytes: &[u8]) -> Result<GridFile> {
    let mut r = Reader { bytes, pos: 0 };
    let h = read_header(&mut r, GRID_MAGIC)?;
    let cells = (h.width as usize) * (h.height as usize);
    let bank = r.bank(h.components)?;
    let phases = r.reals(cells * h.components)?;
    let amplitudes = r.reals(cells * h.channels * h.components)?;
    let bias = r.reals(cells * h.channels)?;
    r.finish()?;
    let grid = LocalFieldGrid::from_parts(
        h.height as usize,
        h.width as usize,
        h.channels,
        bank,
        h.kappa,
        phases,
        amplitudes,
        bias,
    )
    .map_err(|e| Error::Format(e.to_string()))?;
    Ok(GridFile { grid, flags: h.flags })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_field(file: &FieldFile, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_field(file))
}

pub fn load_field(path: impl AsRef<Path>) -> Result<FieldFile> {
    decode_field(&read_bytes(path.as_ref())?)
}

pub fn save_grid(file: &GridFile, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_grid(file))
}

pub fn load_grid(path: impl AsRef<Path>) -> Result<GridFile> {
    decode_grid(&read_bytes(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn field_file(seed: u64) -> FieldFile {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves = (0..7)
            .map(|_| [rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0)])
            .collect();
        let field = HeatField::random(&mut rng, WaveBank::new(waves).unwrap(), 3, 1.234e-5, 0.3).unwrap();
        FieldFile {
            field,
            width: 48,
            height: 31,
            flags: FieldFlags {
                kappa_mode: KappaMode::PaperLiteral,
                trained: Trainable { waves: true, kappa: false },
            },
        }
    }

    #[test]
    fn field_round_trip_is_bit_exact() {
        let file = field_file(1);
        let bytes = encode_field(&file);
        assert_eq!(&bytes[..4], b"NHF1");
        let back = decode_field(&bytes).unwrap();
        assert_eq!(back, file);
        assert_eq!(encode_field(&back), bytes);
    }

    #[test]
    fn grid_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bank = WaveBank::new(vec![[1.0, 2.0], [-3.5, 0.25]]).unwrap();
        let (h, w, ch, n) = (3, 4, 2, 2);
        let grid = LocalFieldGrid::from_parts(
            h,
            w,
            ch,
            bank,
            0.07,
            (0..h * w * n).map(|_| rng.random()).collect(),
            (0..h * w * ch * n).map(|_| rng.random()).collect(),
            (0..h * w * ch).map(|_| rng.random()).collect(),
        )
        .unwrap();
        let file = GridFile {
            grid,
            flags: FieldFlags::default(),
        };
        let bytes = encode_grid(&file);
        assert_eq!(&bytes[..4], b"NHG1");
        assert_eq!(decode_grid(&bytes).unwrap(), file);
        assert!(decode_field(&bytes).is_err());
    }

    #[test]
    fn corrupt_containers_are_rejected() {
        let bytes = encode_field(&field_file(3));
        assert!(decode_field(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_field(&extra).is_err());
        let mut magic = bytes.clone();
        magic[3] = b'2';
        assert!(decode_field(&magic).is_err());

        // a stale cached norm: the first |ν|² sits after the header and W1
        let header = 4 + 8 + 4 * 4 + 8;
        let mut stale = bytes.clone();
        let at = header + 7 * 16;
        let v = f64::from_le_bytes(stale[at..at + 8].try_into().unwrap());
        stale[at..at + 8].copy_from_slice(&(v * 1.001).to_le_bytes());
        assert!(matches!(decode_field(&stale), Err(Error::Format(_))));

        let mut flags = bytes;
        flags[4 + 8 + 12] = 0x80;
        assert!(decode_field(&flags).is_err());
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.nhf");
        let file = field_file(4);
        save_field(&file, &path).unwrap();
        assert_eq!(load_field(&path).unwrap(), file);
        assert!(matches!(load_field(dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
