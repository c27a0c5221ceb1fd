//! Dihedral transforms of planar `[3][side][side]` tiles.

use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    Identity,
    Rot90,
    Rot180,
    Rot270,
    FlipHorizontal,
    FlipVertical,
}

impl Transform {
    pub const ALL: [Transform; 6] = [
        Transform::Identity,
        Transform::Rot90,
        Transform::Rot180,
        Transform::Rot270,
        Transform::FlipHorizontal,
        Transform::FlipVertical,
    ];

    pub fn sample(rng: &mut impl Rng) -> Self {
        Self::ALL[rng.gen_range(0..Self::ALL.len())]
    }

    /// Source coordinates `(sy, sx)` of output pixel `(y, x)`.
    fn source(self, y: usize, x: usize, side: usize) -> (usize, usize) {
        let last = side - 1;
        match self {
            Transform::Identity => (y, x),
            Transform::Rot90 => (x, last - y),
            Transform::Rot180 => (last - y, last - x),
            Transform::Rot270 => (last - x, y),
            Transform::FlipHorizontal => (y, last - x),
            Transform::FlipVertical => (last - y, x),
        }
    }

    pub fn apply(self, pixels: &[f32], side: usize) -> Vec<f32> {
        if self == Transform::Identity {
            return pixels.to_vec();
        }
        let area = side * side;
        let channels = pixels.len() / area;
        let mut out = vec![0.0; pixels.len()];
        for c in 0..channels {
            let (src, dst) = (&pixels[c * area..(c + 1) * area], &mut out[c * area..(c + 1) * area]);
            for y in 0..side {
                for x in 0..side {
                    let (sy, sx) = self.source(y, x, side);
                    dst[y * side + x] = src[sy * side + sx];
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tile(side: usize) -> Vec<f32> {
        (0..3 * side * side).map(|i| i as f32).collect()
    }

    #[test]
    fn rotations_compose() {
        let t = tile(4);
        let r2 = Transform::Rot90.apply(&Transform::Rot90.apply(&t, 4), 4);
        assert_eq!(r2, Transform::Rot180.apply(&t, 4));
        let r4 = Transform::Rot180.apply(&r2, 4);
        assert_eq!(r4, t);
        let r3 = Transform::Rot90.apply(&r2, 4);
        assert_eq!(r3, Transform::Rot270.apply(&t, 4));
    }

    #[test]
    fn flips_are_involutions_and_permute_pixels() {
        let t = tile(5);
        for f in [Transform::FlipHorizontal, Transform::FlipVertical] {
            let once = f.apply(&t, 5);
            assert_ne!(once, t);
            assert_eq!(f.apply(&once, 5), t);
            let mut a = once.clone();
            let mut b = t.clone();
            a.sort_by(f32::total_cmp);
            b.sort_by(f32::total_cmp);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn rot90_moves_corner() {
        let side = 3;
        let mut t = vec![0.0; 3 * side * side];
        t[2] = 1.0; // (y=0, x=2)
        let r = Transform::Rot90.apply(&t, side);
        assert_eq!(r[0], 1.0);
    }
}
