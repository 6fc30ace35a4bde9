//! Demonstration recordings and their directory format.
//!
//! ```text
//! metadata.toml        format version, domain, intrinsics, frame count, rig
//! joints.jsonl         one JointRecord per frame
//! actions.jsonl        one ActionRecord per frame (robot domain only)
//! color/000000.png     8-bit RGB
//! depth/000000.png     16-bit gray, millimeters, 0 = invalid
//! human_mask/000000.png  8-bit gray, nonzero = human (optional)
//! reference/empty_workspace.png  16-bit depth of the empty scene (optional)
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BinaryMask, CameraIntrinsics, ColorImage, DepthImage, Grid};
use crate::trajectory::{ActionRecord, Trajectory};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Exoskeleton,
    Robot,
}

/// Joint readings of one frame. Exoskeleton recordings store raw encoder
/// readings; robot recordings store joint values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointRecord {
    pub frame: usize,
    pub timestamp: f64,
    pub q: Vec<Vec<f64>>,
    pub gripper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub color: ColorImage,
    pub depth: DepthImage,
    pub human_mask: Option<BinaryMask>,
    pub joints: JointRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoRecording {
    pub domain: Domain,
    pub intrinsics: CameraIntrinsics,
    /// Path of the rig (chain) file, as written in the metadata.
    pub rig: Option<String>,
    pub frames: Vec<Frame>,
    pub empty_workspace: Option<DepthImage>,
    pub actions: Option<Trajectory>,
}

impl DemoRecording {
    pub fn new(domain: Domain, intrinsics: CameraIntrinsics) -> Self {
        Self {
            domain,
            intrinsics,
            rig: None,
            frames: Vec::new(),
            empty_workspace: None,
            actions: None,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        let (w, h) = (self.intrinsics.width, self.intrinsics.height);
        let with_mask = self.frames.first().is_some_and(|f| f.human_mask.is_some());
        for (i, f) in self.frames.iter().enumerate() {
            let bad = |m: String| Error::Frame { frame: i, message: m };
            if (f.color.width, f.color.height) != (w, h) || (f.depth.width, f.depth.height) != (w, h) {
                return Err(bad(format!("image size differs from intrinsics {w}x{h}")));
            }
            match &f.human_mask {
                Some(m) if (m.width, m.height) != (w, h) => {
                    return Err(bad("human mask size differs from intrinsics".into()))
                }
                Some(_) if !with_mask => return Err(bad("human mask present on some frames only".into())),
                None if with_mask => return Err(bad("human mask present on some frames only".into())),
                _ => {}
            }
            if f.joints.frame != i {
                return Err(bad(format!("joint record carries frame index {}", f.joints.frame)));
            }
            if f.joints.gripper.len() != f.joints.q.len() {
                return Err(bad(format!(
                    "{} gripper widths for {} arms",
                    f.joints.gripper.len(),
                    f.joints.q.len()
                )));
            }
            if i > 0 && f.joints.q.len() != self.frames[0].joints.q.len() {
                return Err(bad("arm count changes within recording".into()));
            }
        }
        if let Some(d) = &self.empty_workspace {
            if (d.width, d.height) != (w, h) {
                return Err(Error::data("reference depth size differs from intrinsics"));
            }
        }
        if let Some(a) = &self.actions {
            if a.len() != self.frames.len() {
                return Err(Error::data(format!(
                    "{} action records for {} frames",
                    a.len(),
                    self.frames.len()
                )));
            }
            a.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    format_version: u32,
    domain: Domain,
    frame_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rig: Option<String>,
    intrinsics: CameraIntrinsics,
}

fn frame_file(dir: &Path, sub: &str, i: usize) -> PathBuf {
    dir.join(sub).join(format!("{i:06}.png"))
}

/// Writes `bytes` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn encode_png<P, C>(img: &ImageBuffer<P, C>, path: &Path) -> Result<Vec<u8>>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(buf.into_inner())
}

pub fn save_color(img: &ColorImage, path: &Path) -> Result<()> {
    let flat: Vec<u8> = img.data.iter().flatten().copied().collect();
    let buf = RgbImage::from_raw(img.width as u32, img.height as u32, flat).expect("buffer matches size");
    write_atomic(path, &encode_png(&buf, path)?)
}

pub fn save_depth(img: &DepthImage, path: &Path) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(img.width as u32, img.height as u32, img.data.clone()).expect("buffer matches size");
    write_atomic(path, &encode_png(&buf, path)?)
}

pub fn save_mask(img: &BinaryMask, path: &Path) -> Result<()> {
    let flat: Vec<u8> = img.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
    let buf = GrayImage::from_raw(img.width as u32, img.height as u32, flat).expect("buffer matches size");
    write_atomic(path, &encode_png(&buf, path)?)
}

/// Coverage in `[0, 1]` as 8-bit gray, 255 = full coverage.
pub fn save_coverage(img: &Grid<f64>, path: &Path) -> Result<()> {
    let flat: Vec<u8> = img.data.iter().map(|&m| (m.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf = GrayImage::from_raw(img.width as u32, img.height as u32, flat).expect("buffer matches size");
    write_atomic(path, &encode_png(&buf, path)?)
}

fn open_image(path: &Path) -> std::result::Result<image::DynamicImage, String> {
    image::ImageReader::open(path)
        .map_err(|e| e.to_string())?
        .with_guessed_format()
        .map_err(|e| e.to_string())?
        .decode()
        .map_err(|e| e.to_string())
}

pub fn load_color(path: &Path) -> std::result::Result<ColorImage, String> {
    let img = open_image(path)?;
    if img.color() != image::ColorType::Rgb8 {
        return Err(format!("expected 8-bit RGB, found {:?}", img.color()));
    }
    let rgb = img.into_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(Grid::from_vec(w as usize, h as usize, rgb.pixels().map(|p| p.0).collect()).expect("size matches"))
}

pub fn load_depth(path: &Path) -> std::result::Result<DepthImage, String> {
    let img = open_image(path)?;
    if img.color() != image::ColorType::L16 {
        return Err(format!("expected 16-bit gray depth, found {:?}", img.color()));
    }
    let d = img.into_luma16();
    let (w, h) = d.dimensions();
    Ok(Grid::from_vec(w as usize, h as usize, d.into_raw()).expect("size matches"))
}

pub fn load_mask(path: &Path) -> std::result::Result<BinaryMask, String> {
    let img = open_image(path)?;
    if img.color() != image::ColorType::L8 {
        return Err(format!("expected 8-bit gray mask, found {:?}", img.color()));
    }
    let m = img.into_luma8();
    let (w, h) = m.dimensions();
    Ok(Grid::from_vec(w as usize, h as usize, m.pixels().map(|p| p.0[0] != 0).collect()).expect("size matches"))
}

fn jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> Vec<u8> {
    let mut out = Vec::new();
    for it in items {
        serde_json::to_writer(&mut out, &it).expect("records serialize");
        out.push(b'\n');
    }
    out
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Writes `rec` into `dir`, creating it if needed.
pub fn save_recording(rec: &DemoRecording, dir: &Path) -> Result<()> {
    rec.validate()?;
    mkdir(dir)?;
    for sub in ["color", "depth"] {
        mkdir(&dir.join(sub))?;
    }
    let with_mask = rec.frames.first().is_some_and(|f| f.human_mask.is_some());
    if with_mask {
        mkdir(&dir.join("human_mask"))?;
    }
    for (i, f) in rec.frames.iter().enumerate() {
        save_color(&f.color, &frame_file(dir, "color", i))?;
        save_depth(&f.depth, &frame_file(dir, "depth", i))?;
        if let Some(m) = &f.human_mask {
            save_mask(m, &frame_file(dir, "human_mask", i))?;
        }
    }
    write_atomic(&dir.join("joints.jsonl"), &jsonl(rec.frames.iter().map(|f| &f.joints)))?;
    if let Some(a) = &rec.actions {
        write_atomic(&dir.join("actions.jsonl"), &jsonl(&a.records))?;
    }
    if let Some(d) = &rec.empty_workspace {
        mkdir(&dir.join("reference"))?;
        save_depth(d, &dir.join("reference").join("empty_workspace.png"))?;
    }
    let meta = Metadata {
        format_version: FORMAT_VERSION,
        domain: rec.domain,
        frame_count: rec.frames.len(),
        rig: rec.rig.clone(),
        intrinsics: rec.intrinsics,
    };
    let text = toml::to_string(&meta).map_err(|e| Error::data(e.to_string()))?;
    write_atomic(&dir.join("metadata.toml"), text.as_bytes())
}

fn load_frame_image<T>(
    dir: &Path,
    sub: &str,
    what: &'static str,
    i: usize,
    load: fn(&Path) -> std::result::Result<T, String>,
) -> Result<T> {
    let path = frame_file(dir, sub, i);
    if !path.is_file() {
        return Err(Error::MissingFrame { frame: i, what, path });
    }
    load(&path).map_err(|message| Error::CorruptFrame {
        frame: i,
        what,
        path,
        message,
    })
}

pub fn load_recording(dir: &Path) -> Result<DemoRecording> {
    let meta_path = dir.join("metadata.toml");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let version: Option<u32> = toml::from_str::<toml::Table>(&text)
        .ok()
        .and_then(|t| t.get("format_version")?.as_integer())
        .and_then(|v| u32::try_from(v).ok());
    if let Some(found) = version.filter(|&v| v != FORMAT_VERSION) {
        return Err(Error::Version {
            found,
            expected: FORMAT_VERSION,
        });
    }
    let meta: Metadata = toml::from_str(&text).map_err(|e| Error::Parse {
        path: meta_path.clone(),
        message: e.to_string(),
    })?;
    meta.intrinsics.validate()?;
    let n = meta.frame_count;

    let joints: Vec<JointRecord> = read_jsonl(&dir.join("joints.jsonl"))?;
    if joints.len() != n {
        return Err(Error::data(format!("{} joint records for {n} frames", joints.len())));
    }
    let with_mask = dir.join("human_mask").is_dir();
    let (w, h) = (meta.intrinsics.width, meta.intrinsics.height);
    let mut frames = Vec::with_capacity(n);
    for (i, joints) in joints.into_iter().enumerate() {
        let color = load_frame_image(dir, "color", "color image", i, load_color)?;
        let depth = load_frame_image(dir, "depth", "depth image", i, load_depth)?;
        let human_mask = if with_mask {
            Some(load_frame_image(dir, "human_mask", "human mask", i, load_mask)?)
        } else {
            None
        };
        if (color.width, color.height) != (w, h) || (depth.width, depth.height) != (w, h) {
            return Err(Error::Frame {
                frame: i,
                message: format!("image size differs from intrinsics {w}x{h}"),
            });
        }
        frames.push(Frame {
            color,
            depth,
            human_mask,
            joints,
        });
    }
    for sub in ["color", "depth", "human_mask"] {
        if frame_file(dir, sub, n).exists() {
            return Err(Error::data(format!("{sub}/ holds more than the {n} frames in the metadata")));
        }
    }

    let actions_path = dir.join("actions.jsonl");
    let actions = if actions_path.is_file() {
        Some(Trajectory {
            records: read_jsonl::<ActionRecord>(&actions_path)?,
        })
    } else {
        None
    };
    let ref_path = dir.join("reference").join("empty_workspace.png");
    let empty_workspace = if ref_path.is_file() {
        Some(load_depth(&ref_path).map_err(|message| Error::Parse {
            path: ref_path.clone(),
            message,
        })?)
    } else {
        None
    };
    let rec = DemoRecording {
        domain: meta.domain,
        intrinsics: meta.intrinsics,
        rig: meta.rig,
        frames,
        empty_workspace,
        actions,
    };
    rec.validate()?;
    Ok(rec)
}
