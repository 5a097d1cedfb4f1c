//! Scene directories.
//!
//! ```text
//! manifest               SRTSCENE 1 / config <json> / camera <m> <12 reals> / corruption <t> <m> <k>
//! labels                 L2 <t> <m> <k> <x> <y> / L3 <t> <k> <X> <Y> <Z>
//! view<m>/frame<t>.pf2   image
//! view<m>/flow<t>.flow   flow from frame t-1 to frame t
//! ```

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::camera::{CameraMatrix, Landmark3D};
use crate::raster::{fmt_real, parse_real, read_field, read_flow, write_field, write_flow};
use crate::tensor::Point2D;
use crate::{Error, Result};

use super::{landmark_bbox, Corruption, FrameBundle, Scene, SceneConfig};

const MAGIC: &str = "SRTSCENE 1";

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    Ok(BufReader::new(File::open(path)?))
}

pub fn write_scene(dir: &Path, scene: &Scene) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut out = create(&dir.join("manifest"))?;
    writeln!(out, "{MAGIC}")?;
    let json = serde_json::to_string(&scene.config).map_err(|e| Error::Config(e.to_string()))?;
    writeln!(out, "config {json}")?;
    for (m, cam) in scene.cameras.iter().enumerate() {
        let vals: Vec<String> = cam.to_flat().iter().map(|v| fmt_real(*v)).collect();
        writeln!(out, "camera {m} {}", vals.join(" "))?;
    }
    for c in &scene.corruptions {
        writeln!(out, "corruption {} {} {}", c.frame, c.view, c.landmark)?;
    }
    out.flush()?;

    let mut labels = create(&dir.join("labels"))?;
    for (t, f) in scene.frames.iter().enumerate() {
        for (m, pts) in f.landmarks_2d.iter().enumerate() {
            for (k, p) in pts.iter().enumerate() {
                writeln!(labels, "L2 {t} {m} {k} {} {}", fmt_real(p.x), fmt_real(p.y))?;
            }
        }
        for (k, x) in f.landmarks_3d.iter().enumerate() {
            let [a, b, c] = x.position;
            writeln!(labels, "L3 {t} {k} {} {} {}", fmt_real(a), fmt_real(b), fmt_real(c))?;
        }
    }
    labels.flush()?;

    for m in 0..scene.cameras.len() {
        let vdir = dir.join(format!("view{m}"));
        fs::create_dir_all(&vdir)?;
        for (t, f) in scene.frames.iter().enumerate() {
            let mut w = create(&vdir.join(format!("frame{t}.pf2")))?;
            write_field(&mut w, &f.images[m])?;
            w.flush()?;
            let mut w = create(&vdir.join(format!("flow{t}.flow")))?;
            write_flow(&mut w, &f.flows[m])?;
            w.flush()?;
        }
    }
    Ok(())
}

fn parse_usize(tok: Option<&str>, ctx: &str) -> Result<usize> {
    tok.ok_or_else(|| Error::parse(ctx, "missing field"))?
        .parse()
        .map_err(|e| Error::parse(ctx, e))
}

/// Reads only the manifest: configuration, cameras and corruptions.
pub fn read_manifest(dir: &Path) -> Result<(SceneConfig, Vec<CameraMatrix>, Vec<Corruption>)> {
    let input = open(&dir.join("manifest"))?;
    let mut lines = input.lines();
    let first = lines.next().transpose()?.unwrap_or_default();
    if first.trim() != MAGIC {
        return Err(Error::parse(
            "scene manifest",
            format!("expected {MAGIC:?}, got {first:?}"),
        ));
    }
    let mut config = None;
    let mut cameras = Vec::new();
    let mut corruptions = Vec::new();
    for line in lines {
        let line = line?;
        let (tag, rest) = line.split_once(' ').unwrap_or((line.as_str(), ""));
        match tag {
            "config" => {
                let c: SceneConfig = serde_json::from_str(rest).map_err(|e| Error::parse("scene config", e))?;
                config = Some(c);
            }
            "camera" => {
                let mut toks = rest.split_whitespace();
                let m = parse_usize(toks.next(), "camera line")?;
                if m != cameras.len() {
                    return Err(Error::parse("camera line", format!("camera {m} out of order")));
                }
                let vals = toks.map(|t| parse_real(t, "camera line")).collect::<Result<Vec<_>>>()?;
                cameras.push(CameraMatrix::from_flat(&vals)?);
            }
            "corruption" => {
                let mut toks = rest.split_whitespace();
                corruptions.push(Corruption {
                    frame: parse_usize(toks.next(), "corruption line")?,
                    view: parse_usize(toks.next(), "corruption line")?,
                    landmark: parse_usize(toks.next(), "corruption line")?,
                });
            }
            "" => {}
            other => return Err(Error::parse("scene manifest", format!("unknown record {other:?}"))),
        }
    }
    let config = config.ok_or_else(|| Error::parse("scene manifest", "no config record"))?;
    config.validate()?;
    if cameras.len() != config.views {
        return Err(Error::parse(
            "scene manifest",
            format!("{} cameras for {} views", cameras.len(), config.views),
        ));
    }
    Ok((config, cameras, corruptions))
}

pub fn read_scene(dir: &Path) -> Result<Scene> {
    if !dir.is_dir() {
        return Err(Error::Missing(dir.to_path_buf()));
    }
    let (config, cameras, corruptions) = read_manifest(dir)?;
    let (t_n, m_n, k_n) = (config.frames, config.views, config.landmarks);
    let mut l2 = vec![vec![vec![None; k_n]; m_n]; t_n];
    let mut l3 = vec![vec![None; k_n]; t_n];
    for line in open(&dir.join("labels"))?.lines() {
        let line = line?;
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("L2") => {
                let t = parse_usize(toks.next(), "L2 record")?;
                let m = parse_usize(toks.next(), "L2 record")?;
                let k = parse_usize(toks.next(), "L2 record")?;
                let x = parse_real(toks.next().unwrap_or(""), "L2 record")?;
                let y = parse_real(toks.next().unwrap_or(""), "L2 record")?;
                let slot = l2
                    .get_mut(t)
                    .and_then(|r| r.get_mut(m))
                    .and_then(|r| r.get_mut(k))
                    .ok_or_else(|| Error::parse("L2 record", format!("index ({t}, {m}, {k}) out of range")))?;
                *slot = Some(Point2D::new(x, y));
            }
            Some("L3") => {
                let t = parse_usize(toks.next(), "L3 record")?;
                let k = parse_usize(toks.next(), "L3 record")?;
                let mut v = [0.0; 3];
                for c in &mut v {
                    *c = parse_real(toks.next().unwrap_or(""), "L3 record")?;
                }
                let slot = l3
                    .get_mut(t)
                    .and_then(|r| r.get_mut(k))
                    .ok_or_else(|| Error::parse("L3 record", format!("index ({t}, {k}) out of range")))?;
                *slot = Some(Landmark3D::new(v[0], v[1], v[2]));
            }
            None => {}
            Some(other) => return Err(Error::parse("labels", format!("unknown record {other:?}"))),
        }
    }
    let mut frames = Vec::with_capacity(t_n);
    for t in 0..t_n {
        let mut images = Vec::with_capacity(m_n);
        let mut flows = Vec::with_capacity(m_n);
        let mut landmarks_2d = Vec::with_capacity(m_n);
        let mut bboxes = Vec::with_capacity(m_n);
        for m in 0..m_n {
            let vdir = dir.join(format!("view{m}"));
            images.push(read_field(&mut open(&vdir.join(format!("frame{t}.pf2")))?)?);
            flows.push(read_flow(&mut open(&vdir.join(format!("flow{t}.flow")))?)?);
            let pts = l2[t][m]
                .iter()
                .map(|p| p.ok_or_else(|| Error::parse("labels", format!("missing 2D label in frame {t}, view {m}"))))
                .collect::<Result<Vec<_>>>()?;
            bboxes.push(landmark_bbox(&pts)?);
            landmarks_2d.push(pts);
        }
        let landmarks_3d = l3[t]
            .iter()
            .map(|p| p.ok_or_else(|| Error::parse("labels", format!("missing 3D label in frame {t}"))))
            .collect::<Result<Vec<_>>>()?;
        frames.push(FrameBundle {
            images,
            landmarks_2d,
            landmarks_3d,
            flows,
            bboxes,
        });
    }
    Ok(Scene {
        config,
        cameras,
        frames,
        corruptions,
    })
}
