//! On-disk formats: the raw float dump, PNG rendering, and trace output.
//! All files are written atomically (temp + rename).

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::latent::LatentImage;
use crate::sampling::StepTrace;

const RAW_MAGIC: &[u8; 4] = b"MSD1";

/// Serializes a canvas as the raw dump: magic "MSD1", then u32 little-endian
/// channels/height/width, then f64 little-endian values in storage order.
/// Lossless, for exact regression comparisons.
pub fn raw_bytes(z: &LatentImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + z.data().len() * 8);
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&(z.channels() as u32).to_le_bytes());
    out.extend_from_slice(&(z.height() as u32).to_le_bytes());
    out.extend_from_slice(&(z.width() as u32).to_le_bytes());
    for v in z.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn parse_raw(bytes: &[u8]) -> Result<LatentImage> {
    if bytes.len() < 16 || &bytes[0..4] != RAW_MAGIC {
        return Err(Error::Format("raw dump missing MSD1 magic".to_string()));
    }
    let read_u32 =
        |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    let (c, h, w) = (read_u32(4), read_u32(8), read_u32(12));
    let expected = 16 + c * h * w * 8;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "raw dump length {} does not match header {}x{}x{}",
            bytes.len(),
            c,
            h,
            w
        )));
    }
    let data: Vec<f64> = bytes[16..]
        .chunks_exact(8)
        .map(|chunk| f64::from_le_bytes(chunk.try_into().unwrap()))
        .collect();
    LatentImage::from_vec(c, h, w, data)
}

/// Renders the canvas with the fixed affine value map [−3, 3] → full range,
/// clamped: 16-bit grayscale for one channel, 8-bit RGB for three.
pub fn png_bytes(z: &LatentImage) -> Result<Vec<u8>> {
    let unit = |v: f64| ((v + 3.0) / 6.0).clamp(0.0, 1.0);
    let mut bytes = Vec::new();
    match z.channels() {
        1 => {
            let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_fn(
                z.width() as u32,
                z.height() as u32,
                |x, y| {
                    let v = unit(z.get(0, y as usize, x as usize));
                    image::Luma([(v * 65535.0).round() as u16])
                },
            );
            image::DynamicImage::ImageLuma16(img)
                .write_to(&mut Cursor::new(&mut bytes), image::ImageFormat::Png)
                .map_err(|e| Error::Format(format!("png encode failed: {e}")))?;
        }
        3 => {
            let img = image::ImageBuffer::<image::Rgb<u8>, Vec<u8>>::from_fn(
                z.width() as u32,
                z.height() as u32,
                |x, y| {
                    let px =
                        |c: usize| (unit(z.get(c, y as usize, x as usize)) * 255.0).round() as u8;
                    image::Rgb([px(0), px(1), px(2)])
                },
            );
            image::DynamicImage::ImageRgb8(img)
                .write_to(&mut Cursor::new(&mut bytes), image::ImageFormat::Png)
                .map_err(|e| Error::Format(format!("png encode failed: {e}")))?;
        }
        n => {
            return Err(Error::config(format!(
                "image export supports 1 or 3 channels, got {n}"
            )))
        }
    }
    Ok(bytes)
}

/// One JSON object per line, one line per timestep.
pub fn traces_jsonl(traces: &[StepTrace]) -> String {
    let mut out = String::new();
    for trace in traces {
        out.push_str(&serde_json::to_string(trace).expect("trace serializes"));
        out.push('\n');
    }
    out
}

/// Writes through a temp file in the same directory, then renames over the
/// target.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let io_err = |source: std::io::Error| Error::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(io_err)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp_path = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp_path, bytes).map_err(io_err)?;
    std::fs::rename(&tmp_path, path).map_err(io_err)?;
    Ok(())
}
