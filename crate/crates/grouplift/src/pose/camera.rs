use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Pinhole camera. Extrinsics map world points into the camera frame
/// (`x_cam = rotation * x_world + translation`, OpenCV axes: +z forward, +y down).
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub intrinsics: Matrix3<f64>,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    /// (width, height) in pixels.
    pub image_size: (u32, u32),
}

const ORTHONORMAL_TOL: f64 = 1e-6;

impl Camera {
    pub fn new(
        intrinsics: Matrix3<f64>,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        image_size: (u32, u32),
    ) -> Result<Self> {
        let cam = Camera {
            intrinsics,
            rotation,
            translation,
            image_size,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking towards `target`, with `up` the world up direction.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        image_size: (u32, u32),
    ) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::invalid("camera eye and target coincide"))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::invalid("camera up vector is parallel to the view direction"))?;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        let (w, h) = image_size;
        let intrinsics = Matrix3::new(
            focal,
            0.0,
            w as f64 / 2.0,
            0.0,
            focal,
            h as f64 / 2.0,
            0.0,
            0.0,
            1.0,
        );
        Camera::new(intrinsics, rotation, translation, image_size)
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if !k.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("camera intrinsics contain non-finite values"));
        }
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 {
            return Err(Error::invalid("camera intrinsics must be upper triangular"));
        }
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err(Error::invalid("camera focal lengths must be positive"));
        }
        if (k[(2, 2)] - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("camera intrinsics must have K[2][2] = 1"));
        }
        let r = &self.rotation;
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if !(err <= ORTHONORMAL_TOL) {
            return Err(Error::invalid(format!(
                "camera rotation is not orthonormal (max deviation {err:e})"
            )));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("camera translation contains non-finite values"));
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(Error::invalid("image size must be positive"));
        }
        Ok(())
    }

    pub fn to_camera_frame(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * world + self.translation
    }

    /// Projects a camera-frame point; `None` if it is not strictly in front of the camera.
    pub fn project_camera_point(&self, p: &Vector3<f64>) -> Option<[f64; 2]> {
        if p.z <= 0.0 {
            return None;
        }
        let k = &self.intrinsics;
        let x = p.x / p.z;
        let y = p.y / p.z;
        Some([
            k[(0, 0)] * x + k[(0, 1)] * y + k[(0, 2)],
            k[(1, 1)] * y + k[(1, 2)],
        ])
    }

    pub fn project_world_point(&self, world: &Vector3<f64>) -> Option<[f64; 2]> {
        self.project_camera_point(&self.to_camera_frame(world))
    }

    /// Inclusive at 0, exclusive at width/height.
    pub fn in_image(&self, uv: [f64; 2]) -> bool {
        in_image(uv, self.image_size)
    }
}

pub(crate) fn in_image(uv: [f64; 2], image_size: (u32, u32)) -> bool {
    let (w, h) = (image_size.0 as f64, image_size.1 as f64);
    uv[0] >= 0.0 && uv[0] < w && uv[1] >= 0.0 && uv[1] < h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> Camera {
        Camera::look_at(
            Vector3::new(0.0, -5.0, 1.5),
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::z(),
            800.0,
            (1280, 720),
        )
        .unwrap()
    }

    #[test]
    fn look_at_is_orthonormal_and_centres_target() {
        let c = cam();
        let uv = c.project_world_point(&Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert!((uv[0] - 640.0).abs() < 1e-9);
        assert!((uv[1] - 360.0).abs() < 1e-9);
        // world up projects upwards in the image
        let above = c.project_world_point(&Vector3::new(0.0, 0.0, 2.0)).unwrap();
        assert!(above[1] < uv[1]);
    }

    #[test]
    fn rejects_degenerate_intrinsics() {
        let mut c = cam();
        c.intrinsics[(0, 0)] = 0.0;
        assert!(c.validate().is_err());
        let mut c = cam();
        c.intrinsics[(1, 0)] = 0.1;
        assert!(c.validate().is_err());
        let mut c = cam();
        c.rotation[(0, 0)] += 1e-3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn boundary_convention() {
        assert!(in_image([0.0, 0.0], (10, 10)));
        assert!(!in_image([10.0, 5.0], (10, 10)));
        assert!(!in_image([-1.0, 10.0], (100, 100)));
    }
}
