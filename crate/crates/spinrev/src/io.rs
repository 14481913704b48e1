//! Bit-exact persistence: raw little-endian `f32` payloads with JSON
//! sidecars, plus 8-bit PGM previews for eyeballing rasters.
//!
//! Every object lives as `<name>.f32` (row-major, channel-planar) next to
//! `<name>.json` describing shape, channels, units and acquisition metadata.
//! The format is versioned; readers reject unknown versions.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitting::FitResult;
use crate::physics::{Image, SequenceParams, SpinMap};
use crate::raster::Raster;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    format_version: u32,
    kind: String,
    width: usize,
    height: usize,
    channels: Vec<String>,
    units: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sequence_params: Option<SequenceParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    noise_sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

fn payload_path(prefix: &Path) -> PathBuf {
    prefix.with_extension("f32")
}

fn sidecar_path(prefix: &Path) -> PathBuf {
    prefix.with_extension("json")
}

fn write_payload(prefix: &Path, planes: &[&[f32]]) -> Result<()> {
    let mut bytes = Vec::with_capacity(planes.iter().map(|p| p.len() * 4).sum());
    for plane in planes {
        for v in *plane {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(payload_path(prefix), bytes)?;
    Ok(())
}

fn write_sidecar(prefix: &Path, sidecar: &Sidecar) -> Result<()> {
    let mut json = serde_json::to_vec_pretty(sidecar)?;
    json.push(b'\n');
    fs::write(sidecar_path(prefix), json)?;
    Ok(())
}

fn read_sidecar(prefix: &Path, expected_kind: &str) -> Result<Sidecar> {
    let sidecar: Sidecar = serde_json::from_slice(&fs::read(sidecar_path(prefix))?)?;
    if sidecar.format_version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: sidecar.format_version,
            supported: FORMAT_VERSION,
        });
    }
    if sidecar.kind != expected_kind {
        return Err(Error::WrongKind {
            expected: expected_kind.into(),
            found: sidecar.kind,
        });
    }
    if sidecar.channels.len() != sidecar.units.len() {
        return Err(Error::DimensionMismatch {
            left: format!("{} channels", sidecar.channels.len()),
            right: format!("{} units", sidecar.units.len()),
        });
    }
    Ok(sidecar)
}

fn read_payload(prefix: &Path, sidecar: &Sidecar) -> Result<Vec<Vec<f32>>> {
    let bytes = fs::read(payload_path(prefix))?;
    let plane_len = sidecar.width * sidecar.height;
    let expected = plane_len * sidecar.channels.len() * 4;
    if bytes.len() != expected {
        return Err(Error::DimensionMismatch {
            left: format!(
                "sidecar {}x{}x{} = {} bytes",
                sidecar.width,
                sidecar.height,
                sidecar.channels.len(),
                expected
            ),
            right: format!("payload {} bytes", bytes.len()),
        });
    }
    let mut planes = Vec::with_capacity(sidecar.channels.len());
    for ch in 0..sidecar.channels.len() {
        let mut plane = Vec::with_capacity(plane_len);
        let start = ch * plane_len * 4;
        for i in 0..plane_len {
            let off = start + i * 4;
            plane.push(f32::from_le_bytes([
                bytes[off],
                bytes[off + 1],
                bytes[off + 2],
                bytes[off + 3],
            ]));
        }
        planes.push(plane);
    }
    Ok(planes)
}

fn labels_to_plane(labels: &[u8]) -> Vec<f32> {
    labels.iter().map(|&l| f32::from(l)).collect()
}

fn plane_to_labels(plane: &[f32]) -> Result<Vec<u8>> {
    plane
        .iter()
        .map(|&v| {
            let r = v.round();
            if (0.0..=255.0).contains(&r) && (v - r).abs() < 1e-3 {
                Ok(r as u8)
            } else {
                Err(Error::validation(
                    "label channel",
                    format!("{} is not a small integer", v),
                ))
            }
        })
        .collect()
}

pub fn write_spinmap(prefix: &Path, map: &SpinMap) -> Result<()> {
    map.validate()?;
    let mut channels = vec!["pd".to_string(), "t1".to_string(), "t2".to_string()];
    let mut units = vec!["au".to_string(), "ms".to_string(), "ms".to_string()];
    let mut planes: Vec<&[f32]> = vec![&map.pd.data, &map.t1.data, &map.t2.data];
    let label_plane;
    if let Some(labels) = &map.labels {
        label_plane = labels_to_plane(labels);
        planes.push(&label_plane);
        channels.push("labels".into());
        units.push("class".into());
    }
    write_payload(prefix, &planes)?;
    write_sidecar(
        prefix,
        &Sidecar {
            format_version: FORMAT_VERSION,
            kind: "spinmap".into(),
            width: map.width(),
            height: map.height(),
            channels,
            units,
            sequence_params: None,
            noise_sigma: None,
            seed: None,
        },
    )
}

pub fn read_spinmap(prefix: &Path) -> Result<SpinMap> {
    let sidecar = read_sidecar(prefix, "spinmap")?;
    let mut planes = read_payload(prefix, &sidecar)?;
    let has_labels = sidecar.channels.iter().any(|c| c == "labels");
    let expected = if has_labels { 4 } else { 3 };
    if sidecar.channels.len() != expected {
        return Err(Error::validation(
            "spinmap sidecar",
            format!("unexpected channels {:?}", sidecar.channels),
        ));
    }
    let labels = if has_labels {
        Some(plane_to_labels(&planes.pop().unwrap())?)
    } else {
        None
    };
    let t2 = planes.pop().unwrap();
    let t1 = planes.pop().unwrap();
    let pd = planes.pop().unwrap();
    Ok(SpinMap {
        pd: Raster::from_vec(sidecar.width, sidecar.height, pd)?,
        t1: Raster::from_vec(sidecar.width, sidecar.height, t1)?,
        t2: Raster::from_vec(sidecar.width, sidecar.height, t2)?,
        labels,
    })
}

pub fn write_image(prefix: &Path, image: &Image) -> Result<()> {
    image.validate()?;
    let mut channels = vec!["signal".to_string()];
    let mut units = vec!["au".to_string()];
    let mut planes: Vec<&[f32]> = vec![&image.data.data];
    let label_plane;
    if let Some(labels) = &image.labels {
        label_plane = labels_to_plane(labels);
        planes.push(&label_plane);
        channels.push("labels".into());
        units.push("class".into());
    }
    write_payload(prefix, &planes)?;
    write_sidecar(
        prefix,
        &Sidecar {
            format_version: FORMAT_VERSION,
            kind: "image".into(),
            width: image.width(),
            height: image.height(),
            channels,
            units,
            sequence_params: Some(image.params.clone()),
            noise_sigma: Some(image.noise_sigma),
            seed: image.seed,
        },
    )
}

pub fn read_image(prefix: &Path) -> Result<Image> {
    let sidecar = read_sidecar(prefix, "image")?;
    let mut planes = read_payload(prefix, &sidecar)?;
    let has_labels = sidecar.channels.iter().any(|c| c == "labels");
    let labels = if has_labels {
        Some(plane_to_labels(&planes.pop().unwrap())?)
    } else {
        None
    };
    let data = planes.pop().unwrap();
    let params = sidecar.sequence_params.ok_or_else(|| {
        Error::validation("image sidecar", "missing sequence_params")
    })?;
    Ok(Image {
        data: Raster::from_vec(sidecar.width, sidecar.height, data)?,
        params,
        noise_sigma: sidecar.noise_sigma.unwrap_or(0.0),
        seed: sidecar.seed,
        labels,
    })
}

/// Persist a bank of physical `(pd, t1, t2)` samples as a 1-row raster file.
pub fn write_sample_bank(prefix: &Path, samples: &[[f64; 3]]) -> Result<()> {
    let planes: Vec<Vec<f32>> = (0..3)
        .map(|c| samples.iter().map(|s| s[c] as f32).collect())
        .collect();
    let refs: Vec<&[f32]> = planes.iter().map(|p| p.as_slice()).collect();
    write_payload(prefix, &refs)?;
    write_sidecar(
        prefix,
        &Sidecar {
            format_version: FORMAT_VERSION,
            kind: "sample_bank".into(),
            width: samples.len(),
            height: 1,
            channels: vec!["pd".into(), "t1".into(), "t2".into()],
            units: vec!["au".into(), "ms".into(), "ms".into()],
            sequence_params: None,
            noise_sigma: None,
            seed: None,
        },
    )
}

pub fn read_sample_bank(prefix: &Path) -> Result<Vec<[f64; 3]>> {
    let sidecar = read_sidecar(prefix, "sample_bank")?;
    let planes = read_payload(prefix, &sidecar)?;
    if planes.len() != 3 {
        return Err(Error::validation(
            "sample bank sidecar",
            format!("expected 3 channels, found {}", planes.len()),
        ));
    }
    Ok((0..sidecar.width * sidecar.height)
        .map(|i| {
            [
                f64::from(planes[0][i]),
                f64::from(planes[1][i]),
                f64::from(planes[2][i]),
            ]
        })
        .collect())
}

/// Persist a fit result as one multi-channel file:
/// `pd, t1, t2[, labels], residual, iterations, converged`.
pub fn write_fit_result(prefix: &Path, fit: &FitResult) -> Result<()> {
    fit.spinmap.validate()?;
    let iter_plane: Vec<f32> = fit.iterations.iter().map(|&i| i as f32).collect();
    let conv_plane: Vec<f32> = fit
        .converged
        .iter()
        .map(|&c| if c { 1.0 } else { 0.0 })
        .collect();
    let mut channels = vec!["pd".to_string(), "t1".to_string(), "t2".to_string()];
    let mut units = vec!["au".to_string(), "ms".to_string(), "ms".to_string()];
    let mut planes: Vec<&[f32]> = vec![
        &fit.spinmap.pd.data,
        &fit.spinmap.t1.data,
        &fit.spinmap.t2.data,
    ];
    let label_plane;
    if let Some(labels) = &fit.spinmap.labels {
        label_plane = labels_to_plane(labels);
        planes.push(&label_plane);
        channels.push("labels".into());
        units.push("class".into());
    }
    planes.push(&fit.residual.data);
    planes.push(&iter_plane);
    planes.push(&conv_plane);
    channels.extend(["residual".to_string(), "iterations".to_string(), "converged".to_string()]);
    units.extend(["au".to_string(), "count".to_string(), "bool".to_string()]);
    write_payload(prefix, &planes)?;
    write_sidecar(
        prefix,
        &Sidecar {
            format_version: FORMAT_VERSION,
            kind: "fit_result".into(),
            width: fit.spinmap.width(),
            height: fit.spinmap.height(),
            channels,
            units,
            sequence_params: None,
            noise_sigma: None,
            seed: None,
        },
    )
}

pub fn read_fit_result(prefix: &Path) -> Result<FitResult> {
    let sidecar = read_sidecar(prefix, "fit_result")?;
    let mut planes = read_payload(prefix, &sidecar)?;
    let has_labels = sidecar.channels.iter().any(|c| c == "labels");
    let conv_plane = planes.pop().unwrap();
    let iter_plane = planes.pop().unwrap();
    let residual = planes.pop().unwrap();
    let labels = if has_labels {
        Some(plane_to_labels(&planes.pop().unwrap())?)
    } else {
        None
    };
    let t2 = planes.pop().unwrap();
    let t1 = planes.pop().unwrap();
    let pd = planes.pop().unwrap();
    Ok(FitResult {
        spinmap: SpinMap {
            pd: Raster::from_vec(sidecar.width, sidecar.height, pd)?,
            t1: Raster::from_vec(sidecar.width, sidecar.height, t1)?,
            t2: Raster::from_vec(sidecar.width, sidecar.height, t2)?,
            labels,
        },
        residual: Raster::from_vec(sidecar.width, sidecar.height, residual)?,
        iterations: iter_plane.iter().map(|&v| v as u32).collect(),
        converged: conv_plane.iter().map(|&v| v != 0.0).collect(),
    })
}

/// Min-max normalized 8-bit binary PGM (P5) preview. A constant raster maps
/// to mid-gray; non-finite input is rejected before anything is written.
pub fn export_raster_preview(raster: &Raster, path: &Path) -> Result<()> {
    if !raster.all_finite() {
        return Err(Error::NonFinite("raster preview".into()));
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in &raster.data {
        lo = lo.min(f64::from(v));
        hi = hi.max(f64::from(v));
    }
    let span = hi - lo;
    let mut out = Vec::with_capacity(raster.len() + 32);
    out.extend_from_slice(format!("P5\n{} {}\n255\n", raster.width, raster.height).as_bytes());
    for &v in &raster.data {
        let byte = if span == 0.0 {
            128
        } else {
            ((f64::from(v) - lo) / span * 255.0).round() as u8
        };
        out.push(byte);
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

/// Write a CSV table with a header row. Values are written as given;
/// callers format numbers deterministically.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomSpec};
    use crate::physics::forward_image;
    use rand::Rng;
    use tempfile::tempdir;

    fn random_map(seed: u64) -> SpinMap {
        let mut rng = crate::rng::stream(seed, "io_test");
        let n = 6 * 5;
        SpinMap {
            pd: Raster::from_vec(6, 5, (0..n).map(|_| rng.gen_range(0.0..1.2)).collect()).unwrap(),
            t1: Raster::from_vec(6, 5, (0..n).map(|_| rng.gen_range(100.0..3000.0)).collect())
                .unwrap(),
            t2: Raster::from_vec(6, 5, (0..n).map(|_| rng.gen_range(10.0..500.0)).collect())
                .unwrap(),
            labels: Some((0..n).map(|i| (i % 4) as u8).collect()),
        }
    }

    #[test]
    fn spinmap_round_trip_is_bit_identical() {
        let dir = tempdir().unwrap();
        let map = random_map(1);
        let prefix = dir.path().join("map");
        write_spinmap(&prefix, &map).unwrap();
        let back = read_spinmap(&prefix).unwrap();
        assert_eq!(map, back);
    }

    #[test]
    fn image_round_trip_preserves_metadata() {
        let dir = tempdir().unwrap();
        let map = generate_phantom(&PhantomSpec::new(16, 16, 3)).unwrap();
        let img = forward_image(
            &map,
            &SequenceParams::Molli {
                flip_angle: 0.7853981633974483,
                t_inv: 650.0,
            },
            0.01,
            9,
        )
        .unwrap();
        let prefix = dir.path().join("img");
        write_image(&prefix, &img).unwrap();
        let back = read_image(&prefix).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn sample_bank_round_trip() {
        let dir = tempdir().unwrap();
        let bank: Vec<[f64; 3]> = (0..10)
            .map(|i| [i as f64 * 0.1, 100.0 + i as f64, 20.0 + i as f64])
            .collect();
        let prefix = dir.path().join("bank");
        write_sample_bank(&prefix, &bank).unwrap();
        let back = read_sample_bank(&prefix).unwrap();
        for (a, b) in bank.iter().zip(&back) {
            for c in 0..3 {
                assert_eq!(a[c] as f32, b[c] as f32);
                assert_eq!(b[c], f64::from(a[c] as f32));
            }
        }
    }

    #[test]
    fn dimension_mismatch_names_both_sides() {
        let dir = tempdir().unwrap();
        let map = random_map(2);
        let prefix = dir.path().join("map");
        write_spinmap(&prefix, &map).unwrap();
        // Truncate the payload.
        let payload = prefix.with_extension("f32");
        let bytes = fs::read(&payload).unwrap();
        fs::write(&payload, &bytes[..bytes.len() - 8]).unwrap();
        let err = read_spinmap(&prefix).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bytes"), "unhelpful message: {}", msg);
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn unknown_version_is_rejected() {
        let dir = tempdir().unwrap();
        let map = random_map(3);
        let prefix = dir.path().join("map");
        write_spinmap(&prefix, &map).unwrap();
        let sidecar = prefix.with_extension("json");
        let text = fs::read_to_string(&sidecar)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 0");
        fs::write(&sidecar, text).unwrap();
        assert!(matches!(
            read_spinmap(&prefix),
            Err(Error::UnsupportedVersion { found: 0, supported: 1 })
        ));
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let dir = tempdir().unwrap();
        let map = random_map(4);
        let prefix = dir.path().join("map");
        write_spinmap(&prefix, &map).unwrap();
        assert!(matches!(read_image(&prefix), Err(Error::WrongKind { .. })));
    }

    #[test]
    fn preview_linear_map_is_exact() {
        let dir = tempdir().unwrap();
        let raster = Raster::from_vec(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let path = dir.path().join("p.pgm");
        export_raster_preview(&raster, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let header = b"P5\n2 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0u8, 85, 170, 255]);
    }

    #[test]
    fn preview_constant_raster_is_mid_gray() {
        let dir = tempdir().unwrap();
        let raster = Raster::filled(3, 1, 7.5);
        let path = dir.path().join("c.pgm");
        export_raster_preview(&raster, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[bytes.len() - 3..], &[128u8, 128, 128]);
    }

    #[test]
    fn preview_rejects_nan_without_writing() {
        let dir = tempdir().unwrap();
        let raster = Raster::from_vec(2, 1, vec![0.0, f32::NAN]).unwrap();
        let path = dir.path().join("bad.pgm");
        assert!(export_raster_preview(&raster, &path).is_err());
        assert!(!path.exists());
    }
}
