//! Synthetic "phantom" segmentation data: generation, sample files, the
//! dataset manifest and seeded batching.

mod batch;
mod manifest;
mod phantom;

use std::io::{Read, Write};
use std::path::Path;

use crate::tensor::{read_exact, read_u32};
use crate::{Error, Result, Tensor};

pub use batch::{batch_iter, batch_order, stack, Batch};
pub use manifest::{Dataset, GeneratorInfo, Manifest, SampleEntry, Split, MANIFEST_FILE, MANIFEST_VERSION};
pub use phantom::{generate_dataset, generate_phantoms, PhantomSpec};

/// Magic bytes of the mask block in a sample file.
pub const MASK_MAGIC: &[u8; 4] = b"TCM1";

/// One image and its exact class-index mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[C, H, W]`, intensities in `[0, 1]`
    pub image: Tensor<f32>,
    /// row-major `H·W` class indices
    pub mask: Vec<u8>,
}

impl Sample {
    pub fn new(image: Tensor<f32>, mask: Vec<u8>) -> Result<Self> {
        let s = image.shape();
        if s.len() != 3 || s[1] * s[2] != mask.len() {
            return Err(Error::Shape {
                op: "sample",
                lhs: s.to_vec(),
                rhs: vec![mask.len()],
            });
        }
        Ok(Sample { image, mask })
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// Writes the image in the tensor binary form followed by the mask
    /// block: magic `TCM1`, `u32` height, `u32` width, `H·W` bytes.
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        self.image.write_binary(w)?;
        w.write_all(MASK_MAGIC)?;
        w.write_all(&(self.height() as u32).to_le_bytes())?;
        w.write_all(&(self.width() as u32).to_le_bytes())?;
        w.write_all(&self.mask)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let image = Tensor::<f32>::read_binary(r)?;
        if image.rank() != 3 {
            return Err(Error::Corrupt {
                what: "sample",
                msg: format!("image has shape {:?}, expected [C, H, W]", image.shape()),
            });
        }
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, "sample")?;
        if &magic != MASK_MAGIC {
            return Err(Error::Corrupt {
                what: "sample",
                msg: format!("bad mask magic {magic:?}"),
            });
        }
        let h = read_u32(r, "sample")? as usize;
        let w = read_u32(r, "sample")? as usize;
        if [h, w] != image.shape()[1..] {
            return Err(Error::Corrupt {
                what: "sample",
                msg: format!("mask is {h}x{w} but image is {:?}", image.shape()),
            });
        }
        let mut mask = vec![0u8; h * w];
        read_exact(r, &mut mask, "sample")?;
        Ok(Sample { image, mask })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }
}

pub fn save_sample(sample: &Sample, path: &Path) -> Result<()> {
    std::fs::write(path, sample.to_bytes()).map_err(Error::io(path))
}

pub fn load_sample(path: &Path) -> Result<Sample> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    let mut r = &bytes[..];
    let sample = Sample::read_from(&mut r).map_err(|e| match e {
        Error::Corrupt { what, msg } => Error::Corrupt {
            what,
            msg: format!("{}: {msg}", path.display()),
        },
        e => e,
    })?;
    if !r.is_empty() {
        return Err(Error::Corrupt {
            what: "sample",
            msg: format!("{}: {} trailing bytes", path.display(), r.len()),
        });
    }
    Ok(sample)
}

/// Writes a class map in the sample mask block format (used for predicted
/// masks).
pub fn save_mask(mask: &[u8], height: usize, width: usize, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(12 + mask.len());
    out.extend_from_slice(MASK_MAGIC);
    out.extend_from_slice(&(height as u32).to_le_bytes());
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(mask);
    std::fs::write(path, out).map_err(Error::io(path))
}

/// Reads a file written by [`save_mask`]: `(mask, height, width)`.
pub fn load_mask(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    let mut r = &bytes[..];
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "mask")?;
    if &magic != MASK_MAGIC {
        return Err(Error::Corrupt {
            what: "mask",
            msg: format!("{}: bad magic {magic:?}", path.display()),
        });
    }
    let h = read_u32(&mut r, "mask")? as usize;
    let w = read_u32(&mut r, "mask")? as usize;
    if r.len() != h * w {
        return Err(Error::Corrupt {
            what: "mask",
            msg: format!("{}: {} payload bytes for {h}x{w}", path.display(), r.len()),
        });
    }
    Ok((r.to_vec(), h, w))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Sample {
        let image = Tensor::new([1, 2, 3], vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.125]).unwrap();
        Sample::new(image, vec![0, 1, 2, 3, 0, 1]).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let s = sample();
        let back = Sample::read_from(&mut &s.to_bytes()[..]).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn layout_of_the_mask_block() {
        let bytes = sample().to_bytes();
        let off = 4 + 4 + 3 * 4 + 6 * 4;
        assert_eq!(&bytes[off..off + 4], b"TCM1");
        assert_eq!(&bytes[off + 4..off + 8], &2u32.to_le_bytes());
        assert_eq!(&bytes[off + 8..off + 12], &3u32.to_le_bytes());
        assert_eq!(&bytes[off + 12..], &[0, 1, 2, 3, 0, 1]);
    }

    #[test]
    fn truncation_and_corruption_are_parse_errors() {
        let bytes = sample().to_bytes();
        for cut in [3, 20, bytes.len() - 1] {
            let err = Sample::read_from(&mut &bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Corrupt { .. }), "{err}");
        }
        let mut bad = bytes.clone();
        bad[44] = b'X';
        assert!(Sample::read_from(&mut &bad[..]).is_err());
    }

    #[test]
    fn mismatched_extents_are_rejected() {
        let image = Tensor::<f32>::zeros([1, 2, 2]);
        assert!(Sample::new(image, vec![0; 3]).is_err());
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.tcs");
        save_sample(&sample(), &p).unwrap();
        assert_eq!(load_sample(&p).unwrap(), sample());
        let m = dir.path().join("m.mask");
        save_mask(&[1, 2, 3, 0], 2, 2, &m).unwrap();
        assert_eq!(load_mask(&m).unwrap(), (vec![1, 2, 3, 0], 2, 2));
        let missing = load_sample(&dir.path().join("nope")).unwrap_err();
        assert!(missing.to_string().contains("nope"));
    }
}
