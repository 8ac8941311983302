#![allow(dead_code)]

use std::path::PathBuf;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn fixture_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/synthetic")
}

pub fn fixture_images() -> PathBuf {
    fixture_root().join("images")
}

pub fn fixture_gt() -> PathBuf {
    fixture_root().join("gt")
}

/// A soft prediction and binary ground truth, covering degenerate masks,
/// values that sit exactly on metric thresholds, and correlated predictions.
pub fn random_pair(rng: &mut ChaCha8Rng, case: usize, h: usize, w: usize) -> (Array2<f64>, Array2<bool>) {
    let gt = match case % 10 {
        0 => Array2::from_elem((h, w), false),
        1 => Array2::from_elem((h, w), true),
        _ => {
            let p = rng.random_range(0.1..0.9);
            Array2::from_shape_simple_fn((h, w), || rng.random::<f64>() < p)
        }
    };
    let pred = match case % 4 {
        0 => Array2::from_shape_simple_fn((h, w), || rng.random_range(0..=256) as f64 / 256.0),
        1 => Array2::from_shape_simple_fn((h, w), || rng.random::<f64>()),
        2 => gt.mapv(|g| (if g { 0.7 } else { 0.2 } + rng.random_range(-0.25..0.25f64)).clamp(0.0, 1.0)),
        _ if case % 17 == 3 => Array2::zeros((h, w)),
        _ => Array2::from_shape_simple_fn((h, w), || rng.random_range(0..=10) as f64 / 10.0),
    };
    (pred, gt)
}

/// Straight-from-definition reference implementations, one pixel at a time.
pub mod oracle {
    use ndarray::Array2;

    pub fn iou(pred: &Array2<bool>, gt: &Array2<bool>) -> f64 {
        let (mut inter, mut union) = (0.0, 0.0);
        for (p, g) in pred.iter().zip(gt) {
            if *p && *g {
                inter += 1.0;
            }
            if *p || *g {
                union += 1.0;
            }
        }
        if union == 0.0 {
            1.0
        } else {
            inter / union
        }
    }

    pub fn mae(pred: &Array2<f64>, gt: &Array2<bool>) -> f64 {
        let mut s = 0.0;
        for (p, g) in pred.iter().zip(gt) {
            s += (p - if *g { 1.0 } else { 0.0 }).abs();
        }
        s / pred.len() as f64
    }

    fn binarize(pred: &Array2<f64>, t: f64) -> Array2<f64> {
        pred.mapv(|p| if p > t { 1.0 } else { 0.0 })
    }

    pub fn max_f(pred: &Array2<f64>, gt: &Array2<bool>, beta_sq: f64, n: usize) -> f64 {
        let g = gt.mapv(|v| if v { 1.0 } else { 0.0 });
        let mut best: f64 = 0.0;
        for k in 0..n {
            let b = binarize(pred, k as f64 / n as f64);
            let tp = (&b * &g).sum();
            let precision = if b.sum() > 0.0 { tp / b.sum() } else { 0.0 };
            let recall = if g.sum() > 0.0 { tp / g.sum() } else { 0.0 };
            let f = if beta_sq * precision + recall == 0.0 {
                0.0
            } else {
                (1.0 + beta_sq) * precision * recall / (beta_sq * precision + recall)
            };
            best = best.max(f);
        }
        best
    }

    pub fn e_max(pred: &Array2<f64>, gt: &Array2<bool>, n: usize) -> f64 {
        let g = gt.mapv(|v| if v { 1.0 } else { 0.0 });
        let fg = g.mean().unwrap();
        let mut best: f64 = 0.0;
        for k in 0..n {
            let b = binarize(pred, k as f64 / n as f64);
            let e = if fg == 1.0 {
                b.mean().unwrap()
            } else if fg == 0.0 {
                b.mapv(|v| 1.0 - v).mean().unwrap()
            } else {
                let phi_p = &b - b.mean().unwrap();
                let phi_g = &g - fg;
                let xi = Array2::from_shape_fn(b.dim(), |ix| {
                    2.0 * phi_p[ix] * phi_g[ix] / (phi_p[ix] * phi_p[ix] + phi_g[ix] * phi_g[ix])
                });
                xi.mapv(|a| (a + 1.0).powi(2) / 4.0).mean().unwrap()
            };
            best = best.max(e);
        }
        best
    }

    fn mean2(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    /// Sample standard deviation; 0 for a single value.
    fn std(v: &[f64]) -> f64 {
        if v.len() < 2 {
            return 0.0;
        }
        let m = mean2(v);
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
    }

    fn object(values: &[f64]) -> f64 {
        if values.is_empty() {
            return 0.0;
        }
        let x = mean2(values);
        2.0 * x / (x * x + 1.0 + std(values) + f64::EPSILON)
    }

    fn s_object(pred: &Array2<f64>, gt: &Array2<bool>) -> f64 {
        let fg: Vec<f64> = pred.iter().zip(gt).filter(|(_, g)| **g).map(|(p, _)| *p).collect();
        let bg: Vec<f64> = pred.iter().zip(gt).filter(|(_, g)| !**g).map(|(p, _)| 1.0 - *p).collect();
        let u = fg.len() as f64 / pred.len() as f64;
        u * object(&fg) + (1.0 - u) * object(&bg)
    }

    fn ssim(pred: &[f64], gt: &[f64]) -> f64 {
        let n = pred.len() as f64;
        let x = mean2(pred);
        let y = mean2(gt);
        let d = n - 1.0 + f64::EPSILON;
        let sx2 = pred.iter().map(|p| (p - x).powi(2)).sum::<f64>() / d;
        let sy2 = gt.iter().map(|g| (g - y).powi(2)).sum::<f64>() / d;
        let sxy = pred.iter().zip(gt).map(|(p, g)| (p - x) * (g - y)).sum::<f64>() / d;
        let alpha = 4.0 * x * y * sxy;
        let beta = (x * x + y * y) * (sx2 + sy2);
        if alpha != 0.0 {
            alpha / (beta + f64::EPSILON)
        } else if beta == 0.0 {
            1.0
        } else {
            0.0
        }
    }

    /// Rows `r0..r1` (1-based, inclusive) and columns `c0..c1` as flat vectors.
    fn block(pred: &Array2<f64>, gt: &Array2<bool>, r0: usize, r1: usize, c0: usize, c1: usize) -> (Vec<f64>, Vec<f64>) {
        let (mut p, mut g) = (Vec::new(), Vec::new());
        for r in r0..=r1 {
            for c in c0..=c1 {
                p.push(pred[[r - 1, c - 1]]);
                g.push(if gt[[r - 1, c - 1]] { 1.0 } else { 0.0 });
            }
        }
        (p, g)
    }

    fn s_region(pred: &Array2<f64>, gt: &Array2<bool>) -> f64 {
        let (hei, wid) = gt.dim();
        let total = gt.iter().filter(|v| **v).count() as f64;
        let (mut sx, mut sy) = (0.0, 0.0);
        for r in 1..=hei {
            for c in 1..=wid {
                if gt[[r - 1, c - 1]] {
                    sx += c as f64;
                    sy += r as f64;
                }
            }
        }
        let x = (sx / total).round() as usize;
        let y = (sy / total).round() as usize;
        let area = (wid * hei) as f64;
        let w1 = (x * y) as f64 / area;
        let w2 = ((wid - x) * y) as f64 / area;
        let w3 = (x * (hei - y)) as f64 / area;
        let w4 = 1.0 - w1 - w2 - w3;
        let quads = [(1, y, 1, x, w1), (1, y, x + 1, wid, w2), (y + 1, hei, 1, x, w3), (y + 1, hei, x + 1, wid, w4)];
        let mut q = 0.0;
        for (r0, r1, c0, c1, w) in quads {
            if r0 > r1 || c0 > c1 {
                continue;
            }
            let (p, g) = block(pred, gt, r0, r1, c0, c1);
            q += w * ssim(&p, &g);
        }
        q
    }

    pub fn s_measure(pred: &Array2<f64>, gt: &Array2<bool>) -> f64 {
        let y = gt.iter().filter(|v| **v).count() as f64 / gt.len() as f64;
        let x = pred.mean().unwrap();
        let q = if y == 0.0 {
            1.0 - x
        } else if y == 1.0 {
            x
        } else {
            0.5 * s_object(pred, gt) + 0.5 * s_region(pred, gt)
        };
        q.clamp(0.0, 1.0)
    }
}
