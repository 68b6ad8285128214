//! Procedural shape masks in normalized coordinates `(u, v) ∈ [-1, 1]²`
//! (`v` grows downwards).

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Plus,
    Ring,
    HorizontalBars,
    VerticalBars,
    Saltire,
    Diamond,
    HollowSquare,
    LShape,
    TShape,
    HalfDisk,
    TwoDots,
    Ellipse,
    Crescent,
    Corners,
    HShape,
    DiagonalBar,
    Dot,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 20] = [
        ShapeKind::Disk,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Plus,
        ShapeKind::Ring,
        ShapeKind::HorizontalBars,
        ShapeKind::VerticalBars,
        ShapeKind::Saltire,
        ShapeKind::Diamond,
        ShapeKind::HollowSquare,
        ShapeKind::LShape,
        ShapeKind::TShape,
        ShapeKind::HalfDisk,
        ShapeKind::TwoDots,
        ShapeKind::Ellipse,
        ShapeKind::Crescent,
        ShapeKind::Corners,
        ShapeKind::HShape,
        ShapeKind::DiagonalBar,
        ShapeKind::Dot,
    ];

    pub fn contains(self, u: f64, v: f64) -> bool {
        let r = (u * u + v * v).sqrt();
        let cheb = u.abs().max(v.abs());
        match self {
            ShapeKind::Disk => r < 0.75,
            ShapeKind::Square => cheb < 0.6,
            ShapeKind::Triangle => (-0.65..0.7).contains(&v) && u.abs() < 0.8 * (v + 0.65) / 1.35,
            ShapeKind::Plus => {
                (u.abs() < 0.22 && v.abs() < 0.8) || (v.abs() < 0.22 && u.abs() < 0.8)
            }
            ShapeKind::Ring => (0.45..0.8).contains(&r),
            ShapeKind::HorizontalBars => cheb < 0.8 && ((v + 0.8) / 0.32).floor() as i64 % 2 == 0,
            ShapeKind::VerticalBars => cheb < 0.8 && ((u + 0.8) / 0.32).floor() as i64 % 2 == 0,
            ShapeKind::Saltire => r < 0.9 && ((u - v).abs() < 0.25 || (u + v).abs() < 0.25),
            ShapeKind::Diamond => u.abs() + v.abs() < 0.8,
            ShapeKind::HollowSquare => (0.45..0.78).contains(&cheb),
            ShapeKind::LShape => {
                ((-0.7..-0.25).contains(&u) && v.abs() < 0.7)
                    || (u.abs() < 0.7 && (0.25..0.7).contains(&v))
            }
            ShapeKind::TShape => {
                ((-0.7..-0.3).contains(&v) && u.abs() < 0.75)
                    || (u.abs() < 0.2 && (-0.7..0.75).contains(&v))
            }
            ShapeKind::HalfDisk => r < 0.8 && v > 0.0,
            ShapeKind::TwoDots => {
                ((u + 0.42).powi(2) + v * v).sqrt() < 0.3
                    || ((u - 0.42).powi(2) + v * v).sqrt() < 0.3
            }
            ShapeKind::Ellipse => (u / 0.85).powi(2) + (v / 0.38).powi(2) < 1.0,
            ShapeKind::Crescent => r < 0.78 && ((u - 0.38).powi(2) + v * v).sqrt() > 0.58,
            ShapeKind::Corners => (0.4..0.8).contains(&u.abs()) && (0.4..0.8).contains(&v.abs()),
            ShapeKind::HShape => {
                ((0.45..0.75).contains(&u.abs()) && v.abs() < 0.75)
                    || (u.abs() < 0.75 && v.abs() < 0.15)
            }
            ShapeKind::DiagonalBar => cheb < 0.8 && (u - v).abs() < 0.3,
            ShapeKind::Dot => r < 0.35,
        }
    }

    /// Fraction of the unit square covered, estimated on a grid.
    pub fn area(self) -> f64 {
        let n = 200;
        let mut hits = 0;
        for i in 0..n {
            for j in 0..n {
                let u = (i as f64 + 0.5) / n as f64 * 2.0 - 1.0;
                let v = (j as f64 + 0.5) / n as f64 * 2.0 - 1.0;
                hits += self.contains(u, v) as usize;
            }
        }
        hits as f64 / (n * n) as f64
    }
}
