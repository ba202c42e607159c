//! Oracles shared by the integration suites.

use ndarray::Array2;
use rand::Rng;

pub fn random_mask<R: Rng>(rng: &mut R) -> Array2<bool> {
    let h = rng.random_range(1..14);
    let w = rng.random_range(1..14);
    let density = rng.random_range(0.2..0.8);
    Array2::from_shape_fn((h, w), |_| rng.random_bool(density))
}

/// Background pixels reachable from the border, by sweeping to a fixpoint.
pub fn border_reachable(m: &Array2<bool>) -> Array2<bool> {
    let (h, w) = m.dim();
    let mut reach = Array2::from_shape_fn((h, w), |(y, x)| !m[[y, x]] && (y == 0 || x == 0 || y == h - 1 || x == w - 1));
    loop {
        let mut changed = false;
        for y in 0..h {
            for x in 0..w {
                if m[[y, x]] || reach[[y, x]] {
                    continue;
                }
                let near = (y > 0 && reach[[y - 1, x]])
                    || (y + 1 < h && reach[[y + 1, x]])
                    || (x > 0 && reach[[y, x - 1]])
                    || (x + 1 < w && reach[[y, x + 1]]);
                if near {
                    reach[[y, x]] = true;
                    changed = true;
                }
            }
        }
        if !changed {
            return reach;
        }
    }
}
