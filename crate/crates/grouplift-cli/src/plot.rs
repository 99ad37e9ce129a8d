//! Static SVG figures.

use std::path::Path;

use anyhow::{anyhow, bail, Result};
use grouplift::evaluation::OcclusionRow;
use grouplift::pose::{PoseSeq3D, Scene};
use plotters::prelude::*;

fn err<E: std::fmt::Display>(e: E) -> anyhow::Error {
    anyhow!("plotting failed: {e}")
}

/// Error curves over occlusion levels.
pub fn occlusion_curve(rows: &[OcclusionRow], path: &Path) -> Result<()> {
    if rows.is_empty() {
        bail!("no rows to plot");
    }
    let x_max = rows.iter().map(|r| r.n).max().unwrap_or(0).max(1) as f64;
    let y_max = rows
        .iter()
        .flat_map(|r| [r.mpjpe_rel_mm, r.mpjpe_abs_mm])
        .fold(1.0f64, f64::max)
        * 1.1;
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("MPJPE under occlusion", ("sans-serif", 22))
        .margin(16)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d(0.0..x_max, 0.0..y_max)
        .map_err(err)?;
    chart
        .configure_mesh()
        .x_desc("max occluded joints per person")
        .y_desc("mm")
        .draw()
        .map_err(err)?;
    for (label, color, pick) in [
        ("MPJPE rel", BLUE, (|r: &OcclusionRow| r.mpjpe_rel_mm) as fn(&OcclusionRow) -> f64),
        ("MPJPE abs", RED, |r: &OcclusionRow| r.mpjpe_abs_mm),
    ] {
        let points: Vec<(f64, f64)> = rows.iter().map(|r| (r.n as f64, pick(r))).collect();
        chart
            .draw_series(LineSeries::new(points.clone(), color.stroke_width(2)))
            .map_err(err)?
            .label(label)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        chart
            .draw_series(points.into_iter().map(|p| Circle::new(p, 4, color.filled())))
            .map_err(err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(err)?;
    root.present().map_err(err)?;
    Ok(())
}

/// One frame of a scene's 3D poses as a perspective skeleton plot; world z is up.
pub fn skeleton_frame(scene: &Scene, pose: &PoseSeq3D, frame: usize, path: &Path) -> Result<()> {
    let (t, p, j) = pose.dim();
    if frame >= t {
        bail!("frame {frame} out of range for a {t}-frame scene");
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for person in 0..p {
        for joint in 0..j {
            let v = pose.joint(frame, person, joint);
            for c in 0..3 {
                lo[c] = lo[c].min(v[c]);
                hi[c] = hi[c].max(v[c]);
            }
        }
    }
    // equal extents on the ground plane keep proportions
    let half = ((hi[0] - lo[0]).max(hi[1] - lo[1]) / 2.0 + 0.3).max(0.5);
    let (cx, cy) = ((hi[0] + lo[0]) / 2.0, (hi[1] + lo[1]) / 2.0);
    let root = SVGBackend::new(path, (720, 720)).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("frame {frame}"), ("sans-serif", 22))
        .margin(16)
        .build_cartesian_3d(cx - half..cx + half, 0.0f64..hi[2].max(2.0), cy - half..cy + half)
        .map_err(err)?;
    chart.with_projection(|mut pb| {
        pb.yaw = 0.6;
        pb.pitch = 0.3;
        pb.scale = 0.85;
        pb.into_matrix()
    });
    chart.configure_axes().draw().map_err(err)?;
    for person in 0..p {
        let color = Palette99::pick(person).to_rgba();
        let at = |k: usize| {
            let v = pose.joint(frame, person, k);
            (v[0], v[2], v[1])
        };
        for (k, parent) in scene.skeleton.parents.iter().enumerate() {
            if let Some(par) = parent {
                chart
                    .draw_series(LineSeries::new([at(*par), at(k)], color.stroke_width(3)))
                    .map_err(err)?;
            }
        }
        chart
            .draw_series((0..j).map(|k| Circle::new(at(k), 3, color.filled())))
            .map_err(err)?;
    }
    root.present().map_err(err)?;
    Ok(())
}
