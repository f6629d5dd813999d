//! File formats.
//!
//! * Float maps are PFM (`Pf` one channel, `PF` three), little-endian, rows
//!   stored bottom to top as the format requires. Entries off a mask are NaN.
//! * Images may also be 16-bit grayscale PNG; colour PNGs are reduced to
//!   luminance. Masks are 8-bit PNG, nonzero meaning set.
//! * Light rigs are JSON, key points CSV.
//!
//! Image directories hold `light_00.pfm`, `light_01.pfm`, ... (or `.png`).
//! Proxy directories hold `normals.pfm`, `positions.pfm`, `recon_mask.png`,
//! `smooth_mask.png`, `hairy_mask.png` and `plane.json`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{
    DepthMap, ImagePlane, KeyPointSet, LightRig, Mask, ObservationStack, ProxyGeometry, Vec3,
};

/// Raw PFM contents, rows top to bottom, channels interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Pfm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn write_pfm(path: &Path, pfm: &Pfm) -> Result<()> {
    if !matches!(pfm.channels, 1 | 3) || pfm.data.len() != pfm.width * pfm.height * pfm.channels {
        return Err(Error::InvalidInput("PFM buffer has the wrong shape".into()));
    }
    let mut out = BufWriter::new(File::create(path)?);
    let tag = if pfm.channels == 1 { "Pf" } else { "PF" };
    write!(out, "{tag}\n{} {}\n-1.0\n", pfm.width, pfm.height)?;
    let row_len = pfm.width * pfm.channels;
    for row in pfm.data.chunks_exact(row_len).rev() {
        for v in row {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn header_token(reader: &mut impl BufRead, path: &Path) -> Result<String> {
    let mut token = Vec::new();
    loop {
        let mut byte = [0u8];
        if reader.read(&mut byte)? == 0 {
            return Err(format_err(path, "truncated PFM header"));
        }
        if byte[0].is_ascii_whitespace() {
            if !token.is_empty() {
                break;
            }
        } else {
            token.push(byte[0]);
        }
    }
    String::from_utf8(token).map_err(|_| format_err(path, "non-ASCII PFM header"))
}

pub fn read_pfm(path: &Path) -> Result<Pfm> {
    let mut reader = BufReader::new(File::open(path)?);
    let channels = match header_token(&mut reader, path)?.as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(format_err(path, format!("unknown PFM tag {other:?}"))),
    };
    let mut number = |what: &str| -> Result<String> {
        header_token(&mut reader, path).map_err(|_| format_err(path, format!("missing {what}")))
    };
    let width: usize = number("width")?
        .parse()
        .map_err(|_| format_err(path, "bad width"))?;
    let height: usize = number("height")?
        .parse()
        .map_err(|_| format_err(path, "bad height"))?;
    let scale: f32 = number("scale")?
        .parse()
        .map_err(|_| format_err(path, "bad scale"))?;
    if width == 0 || height == 0 || scale == 0.0 || !scale.is_finite() {
        return Err(format_err(path, "degenerate PFM header"));
    }
    let little = scale < 0.0;
    let row_len = width * channels;
    let mut bytes = vec![0u8; row_len * height * 4];
    reader
        .read_exact(&mut bytes)
        .map_err(|_| format_err(path, "truncated PFM data"))?;
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| {
            let b = [b[0], b[1], b[2], b[3]];
            if little {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            }
        })
        .collect();
    let data = values
        .chunks_exact(row_len)
        .rev()
        .flatten()
        .copied()
        .collect();
    Ok(Pfm {
        width,
        height,
        channels,
        data,
    })
}

/// One-channel map with NaN off `mask`.
pub fn write_scalar_pfm(
    path: &Path,
    plane: &ImagePlane,
    values: &[f64],
    mask: &Mask,
) -> Result<()> {
    let data = (0..plane.len())
        .map(|i| {
            if mask.at(i) {
                values[i] as f32
            } else {
                f32::NAN
            }
        })
        .collect();
    write_pfm(
        path,
        &Pfm {
            width: plane.width,
            height: plane.height,
            channels: 1,
            data,
        },
    )
}

/// Three-channel map with NaN off `mask`.
pub fn write_vector_pfm(
    path: &Path,
    plane: &ImagePlane,
    values: &[Vec3],
    mask: &Mask,
) -> Result<()> {
    let data = (0..plane.len())
        .flat_map(|i| {
            let v = values[i];
            if mask.at(i) {
                [v.x as f32, v.y as f32, v.z as f32]
            } else {
                [f32::NAN; 3]
            }
        })
        .collect();
    write_pfm(
        path,
        &Pfm {
            width: plane.width,
            height: plane.height,
            channels: 3,
            data,
        },
    )
}

fn read_channels(path: &Path, channels: usize) -> Result<Pfm> {
    let pfm = read_pfm(path)?;
    if pfm.channels != channels {
        return Err(format_err(
            path,
            format!("expected {channels} channel(s), found {}", pfm.channels),
        ));
    }
    Ok(pfm)
}

pub fn read_scalar_pfm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let pfm = read_channels(path, 1)?;
    Ok((
        pfm.width,
        pfm.height,
        pfm.data.iter().map(|&v| v as f64).collect(),
    ))
}

pub fn read_vector_pfm(path: &Path) -> Result<(usize, usize, Vec<Vec3>)> {
    let pfm = read_channels(path, 3)?;
    let v = pfm
        .data
        .chunks_exact(3)
        .map(|c| Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64))
        .collect();
    Ok((pfm.width, pfm.height, v))
}

/// Writes a depth map as PFM, NaN off its mask.
pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    write_scalar_pfm(path, &depth.plane, &depth.depth, &depth.mask)
}

/// Reads a depth PFM; its mask is the set of finite entries. The values are
/// taken as stored, without re-centring.
pub fn read_depth(path: &Path, pixel_scale: f64) -> Result<DepthMap> {
    let (w, h, depth) = read_scalar_pfm(path)?;
    let plane = ImagePlane::new(w, h, pixel_scale)?;
    let mask = Mask::from_bits(w, h, depth.iter().map(|v| v.is_finite()).collect())?;
    Ok(DepthMap { plane, depth, mask })
}

/// 16-bit grayscale PNG of values clamped to [0, 1].
pub fn write_png16(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let pixels = values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(width as u32, height as u32, pixels)
            .ok_or_else(|| Error::InvalidInput("PNG buffer has the wrong shape".into()))?;
    img.save(path)?;
    Ok(())
}

/// Luminance in [0, 1] of any PNG.
pub fn read_png(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let img = image::open(path)?.into_luma16();
    let (w, h) = img.dimensions();
    Ok((
        w as usize,
        h as usize,
        img.into_raw()
            .into_iter()
            .map(|v| v as f64 / 65535.0)
            .collect(),
    ))
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let pixels = mask
        .bits()
        .iter()
        .map(|&b| if b { 255u8 } else { 0 })
        .collect();
    let img: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(mask.width() as u32, mask.height() as u32, pixels)
            .ok_or_else(|| Error::InvalidInput("mask buffer has the wrong shape".into()))?;
    img.save(path)?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    Mask::from_bits(
        w as usize,
        h as usize,
        img.into_raw().into_iter().map(|v| v != 0).collect(),
    )
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LightEntry {
    position: [f64; 3],
    beta: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RigFile {
    lights: Vec<LightEntry>,
}

pub fn rig_to_json(rig: &LightRig) -> Result<String> {
    let file = RigFile {
        lights: rig
            .positions()
            .iter()
            .zip(rig.intensities())
            .map(|(p, &beta)| LightEntry {
                position: [p.x, p.y, p.z],
                beta,
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn rig_from_json(text: &str) -> Result<LightRig> {
    let file: RigFile = serde_json::from_str(text)?;
    let (positions, intensities) = file
        .lights
        .into_iter()
        .map(|l| (Vec3::from(l.position), l.beta))
        .unzip();
    LightRig::new(positions, intensities)
}

pub fn write_rig(path: &Path, rig: &LightRig) -> Result<()> {
    fs::write(path, rig_to_json(rig)? + "\n")?;
    Ok(())
}

pub fn read_rig(path: &Path) -> Result<LightRig> {
    rig_from_json(&fs::read_to_string(path)?)
}

/// Columns `x, y, Nx, Ny, Nz, Vx, Vy, Vz, I_1 .. I_n`.
pub fn write_keypoints_csv(out: impl Write, kp: &KeyPointSet) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["x", "y", "Nx", "Ny", "Nz", "Vx", "Vy", "Vz"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((1..=kp.n_lights()).map(|j| format!("I_{j}")));
    w.write_record(&header)?;
    for k in 0..kp.len() {
        let (n, v) = (kp.normals[k], kp.positions[k]);
        let mut row = vec![kp.pixels[k].0.to_string(), kp.pixels[k].1.to_string()];
        row.extend([n.x, n.y, n.z, v.x, v.y, v.z].iter().map(|c| c.to_string()));
        row.extend(kp.intensities[k].iter().map(|c| c.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// How observation images are stored on disk.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ImageFormat {
    #[default]
    Pfm,
    Png,
}

fn light_file(dir: &Path, j: usize, format: ImageFormat) -> PathBuf {
    let ext = match format {
        ImageFormat::Pfm => "pfm",
        ImageFormat::Png => "png",
    };
    dir.join(format!("light_{j:02}.{ext}"))
}

/// Writes one file per light. PNG output is divided by the stack maximum
/// when that exceeds one.
pub fn write_images(dir: &Path, obs: &ObservationStack, format: ImageFormat) -> Result<()> {
    fs::create_dir_all(dir)?;
    let plane = obs.plane();
    let full = Mask::full(plane.width, plane.height);
    let scale = obs.max().max(1.0);
    for (j, layer) in obs.layers().iter().enumerate() {
        let path = light_file(dir, j, format);
        match format {
            ImageFormat::Pfm => write_scalar_pfm(&path, plane, layer, &full)?,
            ImageFormat::Png => {
                let scaled: Vec<f64> = layer.iter().map(|v| v / scale).collect();
                write_png16(&path, plane.width, plane.height, &scaled)?
            }
        }
    }
    Ok(())
}

/// Loads `light_00`, `light_01`, ... until the first missing index,
/// preferring PFM over PNG for each light.
pub fn read_images(dir: &Path, pixel_scale: f64) -> Result<ObservationStack> {
    let mut layers = Vec::new();
    let mut size = None;
    loop {
        let j = layers.len();
        let pfm = light_file(dir, j, ImageFormat::Pfm);
        let png = light_file(dir, j, ImageFormat::Png);
        let (w, h, values, path) = if pfm.exists() {
            let (w, h, v) = read_scalar_pfm(&pfm)?;
            (w, h, v, pfm)
        } else if png.exists() {
            let (w, h, v) = read_png(&png)?;
            (w, h, v, png)
        } else {
            break;
        };
        if *size.get_or_insert((w, h)) != (w, h) {
            return Err(format_err(&path, "image size differs from light_00"));
        }
        layers.push(values);
    }
    let Some((w, h)) = size else {
        return Err(format_err(dir, "no light_XX images found"));
    };
    ObservationStack::new(ImagePlane::new(w, h, pixel_scale)?, layers)
}

pub fn write_plane(path: &Path, plane: &ImagePlane) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(plane)? + "\n")?;
    Ok(())
}

pub fn read_plane(path: &Path) -> Result<ImagePlane> {
    let p: ImagePlane = serde_json::from_str(&fs::read_to_string(path)?)?;
    ImagePlane::new(p.width, p.height, p.pixel_scale)
}

pub fn write_proxy(dir: &Path, proxy: &ProxyGeometry) -> Result<()> {
    fs::create_dir_all(dir)?;
    let plane = proxy.plane();
    let mask = proxy.recon_mask();
    write_vector_pfm(&dir.join("normals.pfm"), plane, proxy.normals(), mask)?;
    write_vector_pfm(&dir.join("positions.pfm"), plane, proxy.positions(), mask)?;
    write_mask(&dir.join("recon_mask.png"), mask)?;
    write_mask(&dir.join("smooth_mask.png"), proxy.smooth_mask())?;
    write_mask(&dir.join("hairy_mask.png"), proxy.hairy_mask())?;
    write_plane(&dir.join("plane.json"), plane)
}

/// Reads a proxy directory. Normals are renormalised after the round trip
/// through single precision; entries off the recon mask are zeroed.
pub fn read_proxy(dir: &Path) -> Result<ProxyGeometry> {
    let plane = read_plane(&dir.join("plane.json"))?;
    let recon = read_mask(&dir.join("recon_mask.png"))?;
    let smooth = read_mask(&dir.join("smooth_mask.png"))?;
    let hairy = read_mask(&dir.join("hairy_mask.png"))?;
    let (nw, nh, mut normals) = read_vector_pfm(&dir.join("normals.pfm"))?;
    let (pw, ph, mut positions) = read_vector_pfm(&dir.join("positions.pfm"))?;
    for (what, w, h) in [("normals.pfm", nw, nh), ("positions.pfm", pw, ph)] {
        if (w, h) != (plane.width, plane.height) {
            return Err(format_err(&dir.join(what), "size differs from plane.json"));
        }
    }
    for i in 0..plane.len() {
        if recon.at(i) {
            let len = normals[i].norm();
            if len > 0.0 {
                normals[i] /= len;
            }
        } else {
            normals[i] = Vec3::zeros();
            positions[i] = Vec3::zeros();
        }
    }
    ProxyGeometry::new(plane, normals, positions, recon, smooth, hairy)
}
