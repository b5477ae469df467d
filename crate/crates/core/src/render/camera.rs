use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::gaussian::Mat3;

/// Pinhole camera looking down its +z axis (x right, y down).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// World-to-camera transform, row-major.
    pub view: [[f64; 4]; 4],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
}

fn normalize3(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    v.map(|x| x / n)
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

impl Camera {
    /// Camera at `eye` looking at `target`; principal point at the image centre.
    pub fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3], focal: f64, width: usize, height: usize) -> Self {
        let z = normalize3([target[0] - eye[0], target[1] - eye[1], target[2] - eye[2]]);
        let mut x = cross(z, up);
        if x.iter().map(|v| v * v).sum::<f64>() < 1e-12 {
            // looking straight along `up`
            x = cross(z, [1.0, 0.0, 0.0]);
        }
        let x = normalize3(x);
        let y = cross(z, x);
        let rows = [x, y, z];
        let mut view = [[0.0; 4]; 4];
        for (i, r) in rows.iter().enumerate() {
            view[i][..3].copy_from_slice(r);
            view[i][3] = -(r[0] * eye[0] + r[1] * eye[1] + r[2] * eye[2]);
        }
        view[3][3] = 1.0;
        Self {
            view,
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            near: 0.01,
        }
    }

    pub fn rotation(&self) -> Mat3 {
        let v = &self.view;
        [
            [v[0][0], v[0][1], v[0][2]],
            [v[1][0], v[1][1], v[1][2]],
            [v[2][0], v[2][1], v[2][2]],
        ]
    }

    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let v = &self.view;
        [0, 1, 2].map(|i| v[i][0] * p[0] + v[i][1] * p[1] + v[i][2] * p[2] + v[i][3])
    }

    /// Camera centre in world coordinates.
    pub fn position(&self) -> [f64; 3] {
        let r = self.rotation();
        let t = [self.view[0][3], self.view[1][3], self.view[2][3]];
        [0, 1, 2].map(|j| -(r[0][j] * t[0] + r[1][j] * t[1] + r[2][j] * t[2]))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.near > 0.0) {
            return Err(contract(format!("camera near plane must be positive, got {}", self.near)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(contract("camera resolution must be non-zero"));
        }
        let r = self.rotation();
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (d - want).abs() > 1e-6 {
                    return Err(contract("camera view rotation is not orthonormal"));
                }
            }
        }
        if self.view[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(contract("camera view matrix last row must be (0,0,0,1)"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_puts_target_on_axis() {
        let cam = Camera::look_at([3.0, 1.0, 2.0], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0], 50.0, 32, 32);
        cam.validate().unwrap();
        let t = cam.to_camera([0.0, 0.0, 0.0]);
        assert!(t[0].abs() < 1e-12 && t[1].abs() < 1e-12);
        assert!((t[2] - 14f64.sqrt()).abs() < 1e-12);
        let p = cam.position();
        assert!((p[0] - 3.0).abs() < 1e-12 && (p[1] - 1.0).abs() < 1e-12 && (p[2] - 2.0).abs() < 1e-12);
        // world up maps to image up (negative y)
        let up = cam.to_camera([0.0, 0.0, 1.0]);
        assert!(up[1] < t[1]);
    }

    #[test]
    fn validate_rejects_bad_cameras() {
        let mut cam = Camera::look_at([0.0, 0.0, -3.0], [0.0; 3], [0.0, 1.0, 0.0], 50.0, 8, 8);
        cam.near = 0.0;
        assert!(cam.validate().is_err());
        cam.near = 0.1;
        cam.view[0][0] = 2.0;
        assert!(cam.validate().is_err());
    }
}
