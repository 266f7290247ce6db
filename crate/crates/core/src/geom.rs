use std::ops::{Add, Mul, Neg, Sub};

use crate::autodiff::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vec3<R> {
    pub x: R,
    pub y: R,
    pub z: R,
}

impl<R: Scalar> Vec3<R> {
    pub fn new(x: R, y: R, z: R) -> Self {
        Vec3 { x, y, z }
    }

    pub fn constant(x: f64, y: f64, z: f64) -> Self {
        Vec3::new(R::constant(x), R::constant(y), R::constant(z))
    }

    pub fn dot(self, o: Self) -> R {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Self) -> Self {
        Vec3::new(self.y * o.z - self.z * o.y, self.z * o.x - self.x * o.z, self.x * o.y - self.y * o.x)
    }

    pub fn norm(self) -> R {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Self {
        let inv = R::constant(1.0) / self.norm();
        self * inv
    }

    pub fn scale(self, s: f64) -> Self {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn values(self) -> Vec3<f64> {
        Vec3::new(self.x.value(), self.y.value(), self.z.value())
    }

    pub fn detach(self) -> Self {
        Vec3::new(self.x.detach(), self.y.detach(), self.z.detach())
    }
}

impl Vec3<f64> {
    pub fn lift<R: Scalar>(self) -> Vec3<R> {
        Vec3::constant(self.x, self.y, self.z)
    }
}

impl<R: Scalar> Add for Vec3<R> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<R: Scalar> Sub for Vec3<R> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<R: Scalar> Mul<R> for Vec3<R> {
    type Output = Self;
    fn mul(self, s: R) -> Self {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl<R: Scalar> Neg for Vec3<R> {
    type Output = Self;
    fn neg(self) -> Self {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}
