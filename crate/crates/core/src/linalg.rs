//! Small fixed-size linear algebra used by cameras, kinematics, and the
//! splatting math. Row-major matrices; all types generic over [`Real`].

use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Vec3<S> {
    pub x: S,
    pub y: S,
    pub z: S,
}

impl<S: Real> Vec3<S> {
    pub fn new(x: S, y: S, z: S) -> Self {
        Vec3 { x, y, z }
    }

    pub fn zero() -> Self {
        Vec3::new(S::zero(), S::zero(), S::zero())
    }

    pub fn dot(self, o: Self) -> S {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Self) -> Self {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> S {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Self {
        let n = self.norm();
        Vec3::new(self.x / n, self.y / n, self.z / n)
    }

    pub fn scale(self, k: S) -> Self {
        Vec3::new(self.x * k, self.y * k, self.z * k)
    }

    pub fn to_array(self) -> [S; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [S; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }

    pub fn cast<T: Real>(self) -> Vec3<T> {
        Vec3::new(
            T::lit(self.x.to_f64x()),
            T::lit(self.y.to_f64x()),
            T::lit(self.z.to_f64x()),
        )
    }
}

impl<S: Real> std::ops::Add for Vec3<S> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<S: Real> std::ops::Sub for Vec3<S> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<S: Real> std::ops::Neg for Vec3<S> {
    type Output = Self;
    fn neg(self) -> Self {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// 3x3 row-major matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat3<S> {
    pub m: [[S; 3]; 3],
}

impl<S: Real> Mat3<S> {
    pub fn identity() -> Self {
        let o = S::one();
        let z = S::zero();
        Mat3 { m: [[o, z, z], [z, o, z], [z, z, o]] }
    }

    pub fn from_rows(r0: Vec3<S>, r1: Vec3<S>, r2: Vec3<S>) -> Self {
        Mat3 { m: [r0.to_array(), r1.to_array(), r2.to_array()] }
    }

    pub fn row(&self, i: usize) -> Vec3<S> {
        Vec3::from_array(self.m[i])
    }

    pub fn col(&self, j: usize) -> Vec3<S> {
        Vec3::new(self.m[0][j], self.m[1][j], self.m[2][j])
    }

    pub fn mul_vec(&self, v: Vec3<S>) -> Vec3<S> {
        Vec3::new(self.row(0).dot(v), self.row(1).dot(v), self.row(2).dot(v))
    }

    pub fn mul_mat(&self, o: &Mat3<S>) -> Mat3<S> {
        let mut r = Mat3 { m: [[S::zero(); 3]; 3] };
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = S::zero();
                for k in 0..3 {
                    acc += self.m[i][k] * o.m[k][j];
                }
                r.m[i][j] = acc;
            }
        }
        r
    }

    pub fn transpose(&self) -> Mat3<S> {
        let mut r = Mat3 { m: [[S::zero(); 3]; 3] };
        for i in 0..3 {
            for j in 0..3 {
                r.m[i][j] = self.m[j][i];
            }
        }
        r
    }

    pub fn det(&self) -> S {
        self.row(0).dot(self.row(1).cross(self.row(2)))
    }

    pub fn scale_cols(&self, s: Vec3<S>) -> Mat3<S> {
        let mut r = *self;
        for i in 0..3 {
            r.m[i][0] *= s.x;
            r.m[i][1] *= s.y;
            r.m[i][2] *= s.z;
        }
        r
    }

    /// Rotation about a principal axis (0=x, 1=y, 2=z), radians.
    pub fn rot_axis(axis: usize, angle: S) -> Self {
        let (s, c) = (angle.sin(), angle.cos());
        let o = S::one();
        let z = S::zero();
        match axis {
            0 => Mat3 { m: [[o, z, z], [z, c, -s], [z, s, c]] },
            1 => Mat3 { m: [[c, z, s], [z, o, z], [-s, z, c]] },
            _ => Mat3 { m: [[c, -s, z], [s, c, z], [z, z, o]] },
        }
    }

    /// Rodrigues rotation from an axis-angle vector.
    pub fn from_axis_angle(aa: Vec3<S>) -> Self {
        let angle = aa.norm();
        if angle < S::lit(1e-12) {
            return Mat3::identity();
        }
        let k = aa.scale(S::one() / angle);
        let (s, c) = (angle.sin(), angle.cos());
        let v = S::one() - c;
        Mat3 {
            m: [
                [
                    c + k.x * k.x * v,
                    k.x * k.y * v - k.z * s,
                    k.x * k.z * v + k.y * s,
                ],
                [
                    k.y * k.x * v + k.z * s,
                    c + k.y * k.y * v,
                    k.y * k.z * v - k.x * s,
                ],
                [
                    k.z * k.x * v - k.y * s,
                    k.z * k.y * v + k.x * s,
                    c + k.z * k.z * v,
                ],
            ],
        }
    }

    pub fn cast<T: Real>(&self) -> Mat3<T> {
        let mut r = Mat3 { m: [[T::zero(); 3]; 3] };
        for i in 0..3 {
            for j in 0..3 {
                r.m[i][j] = T::lit(self.m[i][j].to_f64x());
            }
        }
        r
    }
}

/// 2x2 symmetric matrix stored as (a, b, c) for [[a, b], [b, c]].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sym2<S> {
    pub a: S,
    pub b: S,
    pub c: S,
}

impl<S: Real> Sym2<S> {
    pub fn det(&self) -> S {
        self.a * self.c - self.b * self.b
    }

    pub fn inverse(&self) -> Option<Sym2<S>> {
        let d = self.det();
        if d <= S::zero() {
            return None;
        }
        Some(Sym2 { a: self.c / d, b: -self.b / d, c: self.a / d })
    }

    /// Eigenvalues, largest first (symmetric 2x2 closed form).
    pub fn eigenvalues(&self) -> (S, S) {
        let half = S::lit(0.5);
        let mean = (self.a + self.c) * half;
        let diff = (self.a - self.c) * half;
        let r = (diff * diff + self.b * self.b).sqrt();
        (mean + r, mean - r)
    }
}

/// Unit quaternion (w, x, y, z).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quat<S> {
    pub w: S,
    pub x: S,
    pub y: S,
    pub z: S,
}

impl<S: Real> Quat<S> {
    pub fn identity() -> Self {
        Quat { w: S::one(), x: S::zero(), y: S::zero(), z: S::zero() }
    }

    pub fn new(w: S, x: S, y: S, z: S) -> Self {
        Quat { w, x, y, z }
    }

    pub fn norm(&self) -> S {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(&self) -> Self {
        let n = self.norm();
        Quat { w: self.w / n, x: self.x / n, y: self.y / n, z: self.z / n }
    }

    /// Rotation matrix of a unit quaternion.
    pub fn to_mat3(&self) -> Mat3<S> {
        let two = S::lit(2.0);
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        Mat3 {
            m: [
                [
                    S::one() - two * (y * y + z * z),
                    two * (x * y - w * z),
                    two * (x * z + w * y),
                ],
                [
                    two * (x * y + w * z),
                    S::one() - two * (x * x + z * z),
                    two * (y * z - w * x),
                ],
                [
                    two * (x * z - w * y),
                    two * (y * z + w * x),
                    S::one() - two * (x * x + y * y),
                ],
            ],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_handedness() {
        let x = Vec3::new(1.0f64, 0.0, 0.0);
        let y = Vec3::new(0.0f64, 1.0, 0.0);
        assert_eq!(x.cross(y), Vec3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn rodrigues_matches_principal_axis() {
        let a = Mat3::from_axis_angle(Vec3::new(0.0f64, 0.0, 0.7));
        let b = Mat3::rot_axis(2, 0.7f64);
        for i in 0..3 {
            for j in 0..3 {
                assert!((a.m[i][j] - b.m[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn quat_identity_rotation() {
        let r = Quat::<f64>::identity().to_mat3();
        let i = Mat3::identity();
        for k in 0..3 {
            assert_eq!(r.m[k], i.m[k]);
        }
    }

    #[test]
    fn sym2_inverse() {
        let s = Sym2 { a: 2.0f64, b: 0.5, c: 1.5 };
        let inv = s.inverse().unwrap();
        // s * inv = I
        let a = s.a * inv.a + s.b * inv.b;
        let b = s.a * inv.b + s.b * inv.c;
        let c = s.b * inv.b + s.c * inv.c;
        assert!((a - 1.0).abs() < 1e-12);
        assert!(b.abs() < 1e-12);
        assert!((c - 1.0).abs() < 1e-12);
    }
}
