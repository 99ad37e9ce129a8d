//! JSON scene files.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use super::{Camera, PoseSeq2D, PoseSeq3D, Scene, Skeleton};
use crate::error::{Error, Result};

pub const SCENE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraFile {
    #[serde(rename = "K")]
    k: [[f64; 3]; 3],
    #[serde(rename = "R")]
    r: [[f64; 3]; 3],
    t: [f64; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    version: u32,
    skeleton: String,
    fps: f64,
    image_size: [u32; 2],
    camera: CameraFile,
    person_ids: Vec<String>,
    joints_2d: Vec<Vec<Vec<[f64; 2]>>>,
    visibility: Vec<Vec<Vec<u8>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    joints_3d: Option<Vec<Vec<Vec<[f64; 3]>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<serde_json::Value>,
}

fn serde_field(err: &serde_json::Error) -> String {
    let msg = err.to_string();
    match (msg.find('`'), msg.rfind('`')) {
        (Some(a), Some(b)) if b > a + 1 => msg[a + 1..b].to_string(),
        _ => "scene".to_string(),
    }
}

fn mat_from_rows(rows: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|r, c| rows[r][c])
}

fn mat_to_rows(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = m[(r, c)];
        }
    }
    out
}

fn check_len(field: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::parse(field, format!("expected length {want}, found {got}")));
    }
    Ok(())
}

/// Parses and validates a scene document.
pub fn scene_from_json(text: &str) -> Result<Scene> {
    let file: SceneFile =
        serde_json::from_str(text).map_err(|e| Error::parse(serde_field(&e), e.to_string()))?;
    if file.version != SCENE_VERSION {
        return Err(Error::parse(
            "version",
            format!("unsupported version {} (expected {SCENE_VERSION})", file.version),
        ));
    }
    let skeleton = Skeleton::by_name(&file.skeleton)?;
    let p = file.person_ids.len();
    if p == 0 {
        return Err(Error::invalid("scene has an empty persons list"));
    }
    let t = file.joints_2d.len();
    if t == 0 {
        return Err(Error::parse("joints_2d", "scene has no frames"));
    }
    let j = skeleton.joint_count();
    check_len("visibility", file.visibility.len(), t)?;
    let mut data2 = Array4::zeros((t, p, j, 2));
    let mut vis = Array3::from_elem((t, p, j), false);
    for (ti, (frame, vframe)) in file.joints_2d.iter().zip(&file.visibility).enumerate() {
        check_len(&format!("joints_2d[{ti}]"), frame.len(), p)?;
        check_len(&format!("visibility[{ti}]"), vframe.len(), p)?;
        for (pi, (person, vperson)) in frame.iter().zip(vframe).enumerate() {
            check_len(&format!("joints_2d[{ti}][{pi}]"), person.len(), j)?;
            check_len(&format!("visibility[{ti}][{pi}]"), vperson.len(), j)?;
            for (ji, (xy, v)) in person.iter().zip(vperson).enumerate() {
                if !xy.iter().all(|c| c.is_finite()) {
                    return Err(Error::parse(format!("joints_2d[{ti}][{pi}][{ji}]"), "non-finite coordinate"));
                }
                data2[[ti, pi, ji, 0]] = xy[0];
                data2[[ti, pi, ji, 1]] = xy[1];
                vis[[ti, pi, ji]] = match v {
                    0 => false,
                    1 => true,
                    other => {
                        return Err(Error::parse(
                            format!("visibility[{ti}][{pi}][{ji}]"),
                            format!("expected 0 or 1, found {other}"),
                        ))
                    }
                };
            }
        }
    }
    let pose3d = match &file.joints_3d {
        None => None,
        Some(frames) => {
            check_len("joints_3d", frames.len(), t)?;
            let mut data3 = Array4::zeros((t, p, j, 3));
            for (ti, frame) in frames.iter().enumerate() {
                check_len(&format!("joints_3d[{ti}]"), frame.len(), p)?;
                for (pi, person) in frame.iter().enumerate() {
                    check_len(&format!("joints_3d[{ti}][{pi}]"), person.len(), j)?;
                    for (ji, xyz) in person.iter().enumerate() {
                        for c in 0..3 {
                            data3[[ti, pi, ji, c]] = xyz[c];
                        }
                    }
                }
            }
            Some(PoseSeq3D::new(data3).map_err(|e| Error::parse("joints_3d", e.to_string()))?)
        }
    };
    let camera = Camera {
        intrinsics: mat_from_rows(&file.camera.k),
        rotation: mat_from_rows(&file.camera.r),
        translation: Vector3::from(file.camera.t),
        image_size: (file.image_size[0], file.image_size[1]),
    };
    camera
        .validate()
        .map_err(|e| Error::parse("camera", e.to_string()))?;
    let scene = Scene {
        skeleton,
        pose2d: PoseSeq2D::new(data2, vis)?,
        pose3d,
        camera,
        fps: file.fps,
        person_ids: file.person_ids,
        meta: file.meta,
    };
    scene.validate()?;
    Ok(scene)
}

pub fn scene_to_json(scene: &Scene) -> Result<String> {
    scene.validate()?;
    let (t, p, j) = scene.pose2d.dim();
    let joints_2d = (0..t)
        .map(|ti| {
            (0..p)
                .map(|pi| {
                    (0..j)
                        .map(|ji| [scene.pose2d.data[[ti, pi, ji, 0]], scene.pose2d.data[[ti, pi, ji, 1]]])
                        .collect()
                })
                .collect()
        })
        .collect();
    let visibility = (0..t)
        .map(|ti| {
            (0..p)
                .map(|pi| (0..j).map(|ji| scene.pose2d.visibility[[ti, pi, ji]] as u8).collect())
                .collect()
        })
        .collect();
    let joints_3d = scene.pose3d.as_ref().map(|g| {
        (0..t)
            .map(|ti| {
                (0..p)
                    .map(|pi| {
                        (0..j)
                            .map(|ji| [g.data[[ti, pi, ji, 0]], g.data[[ti, pi, ji, 1]], g.data[[ti, pi, ji, 2]]])
                            .collect()
                    })
                    .collect()
            })
            .collect()
    });
    let file = SceneFile {
        version: SCENE_VERSION,
        skeleton: scene.skeleton.name.clone(),
        fps: scene.fps,
        image_size: [scene.camera.image_size.0, scene.camera.image_size.1],
        camera: CameraFile {
            k: mat_to_rows(&scene.camera.intrinsics),
            r: mat_to_rows(&scene.camera.rotation),
            t: [scene.camera.translation.x, scene.camera.translation.y, scene.camera.translation.z],
        },
        person_ids: scene.person_ids.clone(),
        joints_2d,
        visibility,
        joints_3d,
        meta: scene.meta.clone(),
    };
    // serde_json emits the shortest representation that round-trips exactly
    Ok(serde_json::to_string(&file)?)
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    std::io::Read::read_to_string(&mut BufReader::new(file), &mut text).map_err(|e| Error::io(path, e))?;
    scene_from_json(&text)
}

pub fn save_scene(scene: &Scene, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = scene_to_json(scene)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}
