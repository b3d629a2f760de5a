//! Independent scalar reference implementations used to check the library.
#![allow(dead_code)]

use std::f64::consts::PI;

/// Direct evaluation of the spherical projection for one point.
/// Returns `(col, row, range)` or `None` when outside the vertical field of view.
pub fn project_scalar(x: f64, y: f64, z: f64, f_up_deg: f64, f_down_deg: f64, h: usize, w: usize) -> Option<(usize, usize, f64)> {
    let r = (x * x + y * y + z * z).sqrt();
    let fu = f_up_deg.to_radians();
    let fd = f_down_deg.to_radians();
    let elev = (z / r).asin();
    if elev > fu + 1e-9 || elev < -fd - 1e-9 {
        return None;
    }
    let u = 0.5 * (1.0 - y.atan2(x) / PI) * w as f64;
    let v = (1.0 - (elev + fu) / (fu + fd)) * h as f64;
    let clamp = |t: f64, n: usize| -> usize {
        let f = t.floor();
        if f < 0.0 {
            0
        } else if f as usize > n - 1 {
            n - 1
        } else {
            f as usize
        }
    };
    Some((clamp(u, w), clamp(v, h), r))
}

/// Greedy farthest point sampling recomputing every min-distance from scratch.
pub fn fps_bruteforce(pts: &[[f64; 3]], n: usize) -> Vec<usize> {
    let d2 = |a: &[f64; 3], b: &[f64; 3]| {
        (a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) + (a[2] - b[2]) * (a[2] - b[2])
    };
    let m = pts.len() as f64;
    let mut c = [0.0; 3];
    for p in pts {
        for a in 0..3 {
            c[a] += p[a];
        }
    }
    let c = [c[0] / m, c[1] / m, c[2] / m];
    let mut seed = 0;
    for i in 1..pts.len() {
        if d2(&pts[i], &c) > d2(&pts[seed], &c) {
            seed = i;
        }
    }
    let mut sel = vec![seed];
    while sel.len() < n.min(pts.len()) {
        let mut best = None::<(usize, f64)>;
        for i in 0..pts.len() {
            if sel.contains(&i) {
                continue;
            }
            let md = sel.iter().map(|&s| d2(&pts[i], &pts[s])).fold(f64::INFINITY, f64::min);
            if best.map_or(true, |(_, b)| md > b) {
                best = Some((i, md));
            }
        }
        sel.push(best.unwrap().0);
    }
    let k = sel.len();
    for i in k..n {
        sel.push(sel[i % k]);
    }
    sel
}

/// Crop by tight (non-wrapping) bbox, symmetric zero pad, bilinear resize via
/// the four neighbouring source pixels, then scale by `1 / max_range`.
pub fn crop_scalar(img: &[f64], h: usize, w: usize, size: usize, max_range: f64) -> Vec<f64> {
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for r in 0..h {
        for c in 0..w {
            if img[r * w + c] > 0.0 {
                r0 = r0.min(r);
                r1 = r1.max(r);
                c0 = c0.min(c);
                c1 = c1.max(c);
            }
        }
    }
    let (bh, bw) = (r1 - r0 + 1, c1 - c0 + 1);
    let side = bh.max(bw);
    let (pt, pl) = ((side - bh) / 2, (side - bw) / 2);
    let mut sq = vec![0.0; side * side];
    for r in 0..bh {
        for c in 0..bw {
            sq[(r + pt) * side + c + pl] = img[(r0 + r) * w + c0 + c];
        }
    }
    let mut out = vec![0.0; size * size];
    let s = side as f64 / size as f64;
    for dy in 0..size {
        for dx in 0..size {
            let sy = ((dy as f64 + 0.5) * s - 0.5).clamp(0.0, (side - 1) as f64);
            let sx = ((dx as f64 + 0.5) * s - 0.5).clamp(0.0, (side - 1) as f64);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(side - 1), (x0 + 1).min(side - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            let v = sq[y0 * side + x0] * (1.0 - fy) * (1.0 - fx)
                + sq[y0 * side + x1] * (1.0 - fy) * fx
                + sq[y1 * side + x0] * fy * (1.0 - fx)
                + sq[y1 * side + x1] * fy * fx;
            out[dy * size + dx] = (v / max_range).clamp(0.0, 1.0);
        }
    }
    out
}

/// Rank-based metrics by explicit sorting: returns (rank-k hits per k, reciprocal ranks).
pub fn rank_of_true_match(row: &[f64], gallery_labels: &[u32], label: u32) -> usize {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap().then(a.cmp(&b)));
    order.iter().position(|&g| gallery_labels[g] == label).unwrap() + 1
}

/// Row-major `y = W x + b` with `W` of shape `[out, in]`.
pub fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let out = b.len();
    let inp = x.len();
    (0..out)
        .map(|o| b[o] + (0..inp).map(|i| w[o * inp + i] * x[i]).sum::<f64>())
        .collect()
}

pub fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

/// Nearest `k` of `pts` to `q` by full sort on (distance, index).
pub fn knn_sorted(pts: &[[f64; 3]], q: [f64; 3], k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = pts
        .iter()
        .enumerate()
        .map(|(i, p)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2), i))
        .collect();
    d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    d.into_iter().take(k).map(|(_, i)| i).collect()
}

pub struct ZetaWeights {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Motion-aware aggregation for one anchor, unrolled:
/// `max_j (f[n_j] + zeta(cur[n_j] - prev[n'_j]))`.
pub fn mafe_anchor(
    cur: &[[f64; 3]],
    prev: &[[f64; 3]],
    feats: &[Vec<f64>],
    anchor: [f64; 3],
    k: usize,
    zeta: &ZetaWeights,
) -> Vec<f64> {
    let here = knn_sorted(cur, anchor, k);
    let before = knn_sorted(prev, anchor, k);
    let c = feats[0].len();
    let mut out = vec![f64::NEG_INFINITY; c];
    for j in 0..k {
        let d: Vec<f64> = (0..3).map(|a| cur[here[j]][a] - prev[before[j]][a]).collect();
        let m = affine(&zeta.w2, &zeta.b2, &relu(affine(&zeta.w1, &zeta.b1, &d)));
        for ch in 0..c {
            out[ch] = out[ch].max(feats[here[j]][ch] + m[ch]);
        }
    }
    out
}

pub struct AcmWeights {
    pub wq: Vec<f64>,
    pub bq: Vec<f64>,
    pub wk: Vec<f64>,
    pub bk: Vec<f64>,
    pub wv: Vec<f64>,
    pub bv: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Cross-attention block on one frame. `pixels[i]` is the channel vector
/// of pixel `i`; returns fused pixel vectors and the attention matrix.
pub fn acm_frame(pixels: &[Vec<f64>], points: &[Vec<f64>], w: &AcmWeights) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let dk = w.bq.len();
    let q: Vec<Vec<f64>> = pixels.iter().map(|p| affine(&w.wq, &w.bq, p)).collect();
    let k: Vec<Vec<f64>> = points.iter().map(|p| affine(&w.wk, &w.bk, p)).collect();
    let v: Vec<Vec<f64>> = points.iter().map(|p| affine(&w.wv, &w.bv, p)).collect();
    let mut attn = Vec::new();
    let mut fused = Vec::new();
    for qi in &q {
        let s: Vec<f64> = k
            .iter()
            .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / (dk as f64).sqrt())
            .collect();
        let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        let a: Vec<f64> = e.iter().map(|x| x / z).collect();
        let c = v[0].len();
        let fa: Vec<f64> = (0..c).map(|ch| a.iter().zip(&v).map(|(ai, vj)| ai * vj[ch]).sum()).collect();
        let ff = affine(&w.w2, &w.b2, &relu(affine(&w.w1, &w.b1, &fa)));
        let x: Vec<f64> = fa.iter().zip(&ff).map(|(a, b)| a + b).collect();
        let mean = x.iter().sum::<f64>() / c as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        let rs = 1.0 / (var + 1e-5).sqrt();
        fused.push((0..c).map(|ch| (x[ch] - mean) * rs * w.gamma[ch] + w.beta[ch]).collect());
        attn.push(a);
    }
    (fused, attn)
}
