//! Feature-redundancy experiments: cheap-map fitting between feature maps,
//! block-to-block similarity inside a stage, and PGM export.

use std::fs;
use std::path::{Path, PathBuf};

use crate::arch::{detect_stages, ArchSpec, Layer, Model};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A single-channel 2-D map, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w || h == 0 || w == 0 {
            return Err(Error::Dimension {
                op: "feature_map",
                axis: "H*W",
                expected: h * w,
                got: data.len(),
            });
        }
        Ok(FeatureMap { h, w, data })
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let data = (0..h * w).map(|i| f(i / w, i % w)).collect();
        FeatureMap { h, w, data }
    }

    /// Channel `c` of sample `n`.
    pub fn from_tensor(t: &Tensor, n: usize, c: usize) -> Self {
        let s = t.shape();
        FeatureMap {
            h: s.h,
            w: s.w,
            data: t.plane(n, c).iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }

    /// Value at a signed position, zero outside the map.
    fn padded(&self, y: isize, x: isize) -> f64 {
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            0.0
        } else {
            self.data[y as usize * self.w + x as usize]
        }
    }

    /// Zero-padded "same" cross-correlation with a d×d filter.
    pub fn correlate(&self, filter: &[f64], d: usize) -> FeatureMap {
        let r = (d / 2) as isize;
        FeatureMap::from_fn(self.h, self.w, |y, x| {
            let mut acc = 0.0;
            for a in 0..d {
                for b in 0..d {
                    acc += filter[a * d + b]
                        * self.padded(y as isize + a as isize - r, x as isize + b as isize - r);
                }
            }
            acc
        })
    }

    /// Min-max normalized copy in [0, 1]; a constant map becomes all 0.5.
    pub fn normalized(&self) -> FeatureMap {
        let (lo, hi) = self
            .data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let data = if hi > lo {
            self.data.iter().map(|v| (v - lo) / (hi - lo)).collect()
        } else {
            vec![0.5; self.data.len()]
        };
        FeatureMap { data, ..*self }
    }
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheapFit {
    /// d×d filter, row-major.
    pub filter: Vec<f64>,
    pub d: usize,
    pub mse: f64,
    /// The design matrix was rank deficient and a ridge-regularized solve was used.
    pub regularized: bool,
}

const RIDGE: f64 = 1e-8;

/// Least-squares d×d filter mapping `src` to `dst` under zero-padded "same"
/// correlation over every pixel, without bias.
pub fn fit_cheap_map(src: &FeatureMap, dst: &FeatureMap, d: usize) -> Result<CheapFit> {
    if (src.h, src.w) != (dst.h, dst.w) {
        return Err(Error::config(format!(
            "src is {}x{} but dst is {}x{}",
            src.h, src.w, dst.h, dst.w
        )));
    }
    if d.is_multiple_of(2) || d > src.h.min(src.w) {
        return Err(Error::config(format!(
            "kernel d must be odd and <= min(H, W) = {}, got {d}",
            src.h.min(src.w)
        )));
    }
    let rows = src.h * src.w;
    let cols = d * d;
    let r = (d / 2) as isize;
    // Column-major design matrix: column (a, b) is src shifted by (a - r, b - r).
    let mut design = vec![0.0; rows * cols];
    for a in 0..d {
        for b in 0..d {
            let col = &mut design[(a * d + b) * rows..][..rows];
            for y in 0..src.h {
                for x in 0..src.w {
                    col[y * src.w + x] =
                        src.padded(y as isize + a as isize - r, x as isize + b as isize - r);
                }
            }
        }
    }
    let (filter, regularized) = match qr_solve(&design, &dst.data, rows, cols) {
        Some(f) => (f, false),
        None => (ridge_solve(&design, &dst.data, rows, cols), true),
    };
    let fitted = src.correlate(&filter, d);
    Ok(CheapFit {
        mse: mse(&fitted.data, &dst.data),
        filter,
        d,
        regularized,
    })
}

/// Householder QR least squares; `None` when a column is numerically dependent.
fn qr_solve(a: &[f64], b: &[f64], rows: usize, cols: usize) -> Option<Vec<f64>> {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 || rows < cols {
        return None;
    }
    let tol = scale * (rows as f64).sqrt() * 1e-12;
    for k in 0..cols {
        let (head, tail) = a.split_at_mut((k + 1) * rows);
        let col = &mut head[k * rows..];
        let norm = col[k..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= tol {
            return None;
        }
        let alpha = if col[k] > 0.0 { -norm } else { norm };
        col[k] -= alpha;
        let vnorm2: f64 = col[k..].iter().map(|v| v * v).sum();
        let reflect = |target: &mut [f64]| {
            let dot: f64 = col[k..].iter().zip(&target[k..]).map(|(v, t)| v * t).sum();
            let f = 2.0 * dot / vnorm2;
            for (t, v) in target[k..].iter_mut().zip(&col[k..]) {
                *t -= f * v;
            }
        };
        for j in 0..cols - k - 1 {
            reflect(&mut tail[j * rows..(j + 1) * rows]);
        }
        reflect(&mut b);
        col[k] = alpha;
    }
    let mut x = vec![0.0; cols];
    for k in (0..cols).rev() {
        let s: f64 = (k + 1..cols).map(|j| a[j * rows + k] * x[j]).sum();
        x[k] = (b[k] - s) / a[k * rows + k];
    }
    Some(x)
}

/// Normal equations with a small ridge, solved by Cholesky.
fn ridge_solve(a: &[f64], b: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let col = |j: usize| &a[j * rows..(j + 1) * rows];
    let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).sum::<f64>();
    let mut g = vec![0.0; cols * cols];
    for i in 0..cols {
        for j in 0..=i {
            let v = dot(col(i), col(j));
            g[i * cols + j] = v;
            g[j * cols + i] = v;
        }
        g[i * cols + i] += RIDGE;
    }
    let rhs: Vec<f64> = (0..cols).map(|j| dot(col(j), b)).collect();
    let mut l = vec![0.0; cols * cols];
    for i in 0..cols {
        for j in 0..=i {
            let s = g[i * cols + j]
                - (0..j)
                    .map(|k| l[i * cols + k] * l[j * cols + k])
                    .sum::<f64>();
            l[i * cols + j] = if i == j {
                s.max(RIDGE).sqrt()
            } else {
                s / l[j * cols + j]
            };
        }
    }
    let mut y = vec![0.0; cols];
    for i in 0..cols {
        y[i] = (rhs[i] - (0..i).map(|k| l[i * cols + k] * y[k]).sum::<f64>()) / l[i * cols + i];
    }
    let mut x = vec![0.0; cols];
    for i in (0..cols).rev() {
        x[i] =
            (y[i] - (i + 1..cols).map(|k| l[k * cols + i] * x[k]).sum::<f64>()) / l[i * cols + i];
    }
    x
}

/// The analysable stages of an arch: every G-Ghost stage node, otherwise every
/// detected run of two or more blocks. Each entry lists the tap names of the
/// stage's block outputs in order.
pub fn stage_taps(arch: &ArchSpec) -> Result<Vec<Vec<String>>> {
    let ghosted: Vec<Vec<String>> = arch
        .nodes
        .iter()
        .filter_map(|n| match &n.layer {
            Layer::GGhostStage(cfg) => Some(
                (1..=cfg.num_blocks())
                    .map(|i| format!("{}.block{i}", n.name))
                    .collect(),
            ),
            _ => None,
        })
        .collect();
    if !ghosted.is_empty() {
        return Ok(ghosted);
    }
    Ok(detect_stages(arch)?
        .into_iter()
        .filter(|run| run.len() >= 2)
        .map(|run| {
            run.into_iter()
                .map(|i| arch.nodes[i].name.clone())
                .collect()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityRow {
    pub first_block: String,
    pub last_block: String,
    pub first_channel: usize,
    pub last_channel: usize,
    pub mse: f64,
}

fn standardized(t: &Tensor, c: usize) -> Vec<f64> {
    let s = t.shape();
    let v: Vec<f64> = (0..s.n)
        .flat_map(|n| t.plane(n, c).iter().map(|&x| x as f64))
        .collect();
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
    let std = var.sqrt();
    v.iter()
        .map(|x| if std > 0.0 { (x - mean) / std } else { 0.0 })
        .collect()
}

/// For every channel of the stage's last block, the channel of its first block
/// that matches it best by MSE after per-map standardization (over the whole
/// batch). Rows are sorted by ascending MSE.
pub fn stage_similarity_report(
    model: &Model,
    input: &Tensor,
    stage: usize,
) -> Result<Vec<SimilarityRow>> {
    let stages = stage_taps(&model.arch)?;
    let taps = stages.get(stage).ok_or_else(|| {
        Error::config(format!(
            "stage id {stage} out of range: the model has {} stages",
            stages.len()
        ))
    })?;
    let trace = model.program.forward(input, &model.store, false)?;
    let (first_name, last_name) = (&taps[0], &taps[taps.len() - 1]);
    let first = trace.tap(&model.program, first_name)?;
    let last = trace.tap(&model.program, last_name)?;
    if (first.shape().h, first.shape().w) != (last.shape().h, last.shape().w) {
        return Err(Error::graph(
            last_name,
            "first and last block differ in resolution",
        ));
    }
    let first_maps: Vec<Vec<f64>> = (0..first.shape().c)
        .map(|c| standardized(first, c))
        .collect();
    let mut rows: Vec<SimilarityRow> = (0..last.shape().c)
        .map(|j| {
            let lm = standardized(last, j);
            let (i, e) = first_maps
                .iter()
                .enumerate()
                .map(|(i, fm)| (i, mse(fm, &lm)))
                .fold(
                    (0, f64::INFINITY),
                    |best, cur| if cur.1 < best.1 { cur } else { best },
                );
            SimilarityRow {
                first_block: first_name.clone(),
                last_block: last_name.clone(),
                first_channel: i,
                last_channel: j,
                mse: e,
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        a.mse
            .total_cmp(&b.mse)
            .then(a.last_channel.cmp(&b.last_channel))
    });
    Ok(rows)
}

pub fn similarity_csv(rows: &[SimilarityRow]) -> String {
    let mut out = String::from("first_block,first_channel,last_block,last_channel,mse\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.6e}\n",
            r.first_block, r.first_channel, r.last_block, r.last_channel, r.mse
        ));
    }
    out
}

/// Writes a map as binary PGM, min-max normalized to 0..=255.
pub fn write_pgm(path: &Path, map: &FeatureMap) -> Result<()> {
    let norm = map.normalized();
    let mut bytes = format!("P5\n{} {}\n255\n", map.w, map.h).into_bytes();
    bytes.extend(
        norm.data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a binary PGM (maxval ≤ 255) into values in [0, 1].
pub fn read_pgm(path: &Path) -> Result<FeatureMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::Format {
        what: "PGM",
        reason: format!("{}: {reason}", path.display()),
    };
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(bad("not a binary (P5) graymap"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("maxval must be 1..=255"));
    }
    let pixels = bytes
        .get(pos..pos + w * h)
        .ok_or_else(|| bad("truncated pixel data"))?;
    FeatureMap::new(
        h,
        w,
        pixels.iter().map(|&p| p as f64 / maxval as f64).collect(),
    )
}

/// Writes every channel of `node`'s output for the first sample of `input`
/// as `<node>_<channel>.pgm`.
pub fn dump_feature_maps(
    model: &Model,
    input: &Tensor,
    node: &str,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if !model.program.taps.contains_key(node) {
        return Err(Error::graph(node, "no such node"));
    }
    let trace = model.program.forward(input, &model.store, false)?;
    let t = trace.tap(&model.program, node)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let stem: String = node
        .chars()
        .map(|c| if c == '/' || c == '\\' { '_' } else { c })
        .collect();
    (0..t.shape().c)
        .map(|c| {
            let path = out_dir.join(format!("{stem}_{c}.pgm"));
            write_pgm(&path, &FeatureMap::from_tensor(t, 0, c))?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wave(h: usize, w: usize, phase: f64) -> FeatureMap {
        FeatureMap::from_fn(h, w, |y, x| {
            (0.3 * y as f64 + phase).sin() + (0.2 * x as f64).cos()
        })
    }

    #[test]
    fn identity_is_center_tap() {
        let m = wave(9, 9, 0.1);
        for d in [1, 3, 5, 7] {
            let fit = fit_cheap_map(&m, &m, d).unwrap();
            assert!(fit.mse < 1e-20, "d={d} mse={}", fit.mse);
            assert!((fit.filter[d * d / 2] - 1.0).abs() < 1e-9);
            assert!(!fit.regularized);
        }
    }

    #[test]
    fn shift_needs_three_taps() {
        let src = FeatureMap::from_fn(10, 10, |y, x| ((y * 7 + x * 3) % 11) as f64);
        let dst = FeatureMap::from_fn(
            10,
            10,
            |y, x| if x + 1 < 10 { src.at(y, x + 1) } else { 0.0 },
        );
        assert!(fit_cheap_map(&src, &dst, 3).unwrap().mse < 1e-20);
        assert!(fit_cheap_map(&src, &dst, 1).unwrap().mse > 0.1);
    }

    #[test]
    fn zero_source_uses_ridge() {
        let src = FeatureMap::from_fn(5, 5, |_, _| 0.0);
        let fit = fit_cheap_map(&src, &wave(5, 5, 0.0), 3).unwrap();
        assert!(fit.regularized);
        assert!(fit.filter.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_bad_kernel() {
        let m = wave(4, 4, 0.0);
        assert!(fit_cheap_map(&m, &m, 2).is_err());
        assert!(fit_cheap_map(&m, &m, 5).is_err());
    }

    #[test]
    fn pgm_roundtrip_and_constant() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let m = wave(6, 7, 0.4);
        write_pgm(&path, &m).unwrap();
        let back = read_pgm(&path).unwrap();
        let norm = m.normalized();
        assert_eq!((back.h, back.w), (6, 7));
        for (a, b) in back.data.iter().zip(&norm.data) {
            assert!((a - b).abs() <= 1.0 / 255.0);
        }
        write_pgm(&path, &FeatureMap::from_fn(3, 3, |_, _| 2.5)).unwrap();
        let raw = fs::read(&path).unwrap();
        assert!(raw.ends_with(&[128u8; 9]));
    }
}
