//! Region similarity (J), contour accuracy (F), their aggregation, and the two embedding
//! analysis tools: receptive-field cosine similarity and PCA projection.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::deform::sample_plane;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::video::SegmentationMask;

fn same_dims(op: &'static str, a: &SegmentationMask, b: &SegmentationMask) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(op, format!("{:?}", b.dims()), format!("{:?}", a.dims())));
    }
    Ok(())
}

/// IoU of class `c`; 1 when the class is absent from both masks.
pub fn jaccard(pred: &SegmentationMask, gt: &SegmentationMask, c: u8) -> Result<f64> {
    same_dims("jaccard", pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p == c, g == c);
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Pixels of class `c` with a 4-neighbour outside the class. Pixels beyond the image count as
/// outside, so regions touching the border have a boundary there.
pub fn boundary(mask: &SegmentationMask, c: u8) -> Vec<(usize, usize)> {
    let (h, w) = mask.dims();
    let inside = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask.get(y as usize, x as usize) == c;
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let (yi, xi) = (y as isize, x as isize);
            if mask.get(y, x) == c && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|&(dy, dx)| !inside(yi + dy, xi + dx)) {
                out.push((y, x));
            }
        }
    }
    out
}

/// DAVIS-style default boundary tolerance, `ceil(0.008 * diagonal)`.
pub fn default_tolerance(height: usize, width: usize) -> usize {
    (0.008 * ((height * height + width * width) as f64).sqrt()).ceil() as usize
}

fn dilate(points: &[(usize, usize)], h: usize, w: usize, tol: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    let t = tol.min(h + w) as isize;
    for &(y, x) in points {
        for dy in -t..=t {
            for dx in -t..=t {
                if dy * dy + dx * dx > t * t {
                    continue;
                }
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                    out[yy as usize * w + xx as usize] = true;
                }
            }
        }
    }
    out
}

/// Boundary F-measure of class `c` with a disk tolerance of `tol` pixels.
pub fn boundary_f(pred: &SegmentationMask, gt: &SegmentationMask, c: u8, tol: usize) -> Result<f64> {
    same_dims("boundary_f", pred, gt)?;
    let (h, w) = pred.dims();
    let (bp, bg) = (boundary(pred, c), boundary(gt, c));
    match (bp.is_empty(), bg.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let (near_gt, near_pred) = (dilate(&bg, h, w, tol), dilate(&bp, h, w, tol));
    let precision = bp.iter().filter(|&&(y, x)| near_gt[y * w + x]).count() as f64 / bp.len() as f64;
    let recall = bg.iter().filter(|&&(y, x)| near_pred[y * w + x]).count() as f64 / bg.len() as f64;
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalOptions {
    /// Objects to score; defaults to the non-background classes of the first ground-truth mask.
    pub classes: Option<Vec<u8>>,
    /// Boundary tolerance; defaults to [`default_tolerance`].
    pub tolerance: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectScore {
    pub class: u8,
    pub j: f64,
    pub f: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceScore {
    pub name: String,
    pub objects: Vec<ObjectScore>,
}

impl SequenceScore {
    /// Mean over objects, `None` for a sequence without objects.
    pub fn mean(&self) -> Option<(f64, f64)> {
        let n = self.objects.len() as f64;
        (n > 0.0).then(|| {
            let j = self.objects.iter().map(|o| o.j).sum::<f64>() / n;
            let f = self.objects.iter().map(|o| o.f).sum::<f64>() / n;
            (j, f)
        })
    }
}

/// Scores a propagated sequence. Frame 0 is the given ground truth and is not averaged.
pub fn evaluate(name: &str, pred: &[SegmentationMask], gt: &[SegmentationMask], opts: &EvalOptions) -> Result<SequenceScore> {
    if pred.len() != gt.len() {
        return Err(Error::invalid("evaluate", format!("`{name}`: {} predicted vs {} ground-truth masks", pred.len(), gt.len())));
    }
    if gt.len() < 2 {
        return Err(Error::invalid("evaluate", format!("`{name}` needs at least 2 frames")));
    }
    let classes = match &opts.classes {
        Some(c) => c.clone(),
        None => gt[0].classes().into_iter().filter(|&c| c != 0).collect(),
    };
    let tol = opts.tolerance.unwrap_or_else(|| default_tolerance(gt[0].height(), gt[0].width()));
    let frames = (gt.len() - 1) as f64;
    let objects = classes
        .iter()
        .map(|&c| {
            let (mut j, mut f) = (0.0, 0.0);
            for (p, g) in pred.iter().zip(gt).skip(1) {
                j += jaccard(p, g, c)?;
                f += boundary_f(p, g, c, tol)?;
            }
            Ok(ObjectScore {
                class: c,
                j: j / frames,
                f: f / frames,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SequenceScore {
        name: name.to_string(),
        objects,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub sequences: Vec<SequenceScore>,
    /// Mean over sequences of the per-sequence object means.
    pub mean_j: f64,
    pub mean_f: f64,
    /// Attribute -> (J, F, number of sequences).
    pub by_attribute: BTreeMap<String, (f64, f64, usize)>,
}

impl EvalReport {
    /// Aggregates sequence scores; `attributes` maps sequence names to attribute tags.
    pub fn new(sequences: Vec<SequenceScore>, attributes: Option<&BTreeMap<String, Vec<String>>>) -> Self {
        let scored: Vec<(&SequenceScore, (f64, f64))> = sequences.iter().filter_map(|s| s.mean().map(|m| (s, m))).collect();
        let n = scored.len().max(1) as f64;
        let mean_j = scored.iter().map(|(_, m)| m.0).sum::<f64>() / n;
        let mean_f = scored.iter().map(|(_, m)| m.1).sum::<f64>() / n;
        let mut by_attribute: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
        if let Some(attrs) = attributes {
            for (s, (j, f)) in &scored {
                for a in attrs.get(&s.name).into_iter().flatten() {
                    let e = by_attribute.entry(a.clone()).or_default();
                    e.0 += j;
                    e.1 += f;
                    e.2 += 1;
                }
            }
            for e in by_attribute.values_mut() {
                e.0 /= e.2 as f64;
                e.1 /= e.2 as f64;
            }
        }
        Self {
            sequences,
            mean_j,
            mean_f,
            by_attribute,
        }
    }

    /// Tab-separated `sequence class J F` records with a header line.
    pub fn records(&self) -> String {
        let mut s = String::from("sequence\tclass\tJ\tF\n");
        for seq in &self.sequences {
            for o in &seq.objects {
                let _ = writeln!(s, "{}\t{}\t{:.6}\t{:.6}", seq.name, o.class, o.j, o.f);
            }
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = format!("{:<24} {:>8} {:>8}\n", "sequence", "J", "F");
        for seq in &self.sequences {
            if let Some((j, f)) = seq.mean() {
                let _ = writeln!(s, "{:<24} {j:>8.4} {f:>8.4}", seq.name);
            }
        }
        let _ = writeln!(s, "{:<24} {:>8.4} {:>8.4}", "mean", self.mean_j, self.mean_f);
        for (a, (j, f, n)) in &self.by_attribute {
            let _ = writeln!(s, "{:<24} {j:>8.4} {f:>8.4}", format!("[{a}] ({n})"));
        }
        s
    }
}

fn feature_dims<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] | [1, c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(op, "[C, h, w]", format!("{:?}", t.shape()))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RfSimilarity {
    pub mean: f64,
    /// Samples whose vector (or the target's) had zero norm; they contribute 0 to the mean.
    pub zero_norm: usize,
}

/// Mean cosine similarity between the feature vector at `target` and bilinearly sampled vectors
/// at `samples` (fractional `(y, x)`, zero outside the map).
pub fn rf_cosine_similarity<T: Scalar>(features: &Tensor<T>, target: (usize, usize), samples: &[(f64, f64)]) -> Result<RfSimilarity> {
    let (c, h, w) = feature_dims("rf_cosine_similarity", features)?;
    if samples.is_empty() {
        return Err(Error::invalid("rf_cosine_similarity", "no sample locations"));
    }
    if target.0 >= h || target.1 >= w {
        return Err(Error::IndexOutOfRange {
            index: target.0 * w + target.1,
            reason: format!("target {target:?} outside {h}x{w}"),
        });
    }
    let planes: Vec<Vec<f64>> = (0..c)
        .map(|k| features.data()[k * h * w..(k + 1) * h * w].iter().map(|v| v.to_f64_lossy()).collect())
        .collect();
    let v0: Vec<f64> = planes.iter().map(|p| p[target.0 * w + target.1]).collect();
    let n0 = v0.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut total = 0.0;
    let mut zero_norm = 0;
    for &(y, x) in samples {
        let v: Vec<f64> = planes.iter().map(|p| sample_plane(p, h, w, y, x)).collect();
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n0 == 0.0 || n == 0.0 {
            zero_norm += 1;
            continue;
        }
        let dot: f64 = v0.iter().zip(&v).map(|(a, b)| a * b).sum();
        total += (dot / (n0 * n)).clamp(-1.0, 1.0);
    }
    Ok(RfSimilarity {
        mean: total / samples.len() as f64,
        zero_norm,
    })
}

/// [`rf_cosine_similarity`] averaged over every pixel of the map; `sampling[p]` holds the
/// sample locations for row-major pixel `p`.
pub fn mean_rf_similarity<T: Scalar>(features: &Tensor<T>, sampling: &[Vec<(f64, f64)>]) -> Result<RfSimilarity> {
    let (_, h, w) = feature_dims("mean_rf_similarity", features)?;
    if sampling.len() != h * w {
        return Err(Error::shape("mean_rf_similarity", format!("{} sample sets", h * w), format!("{}", sampling.len())));
    }
    let mut total = 0.0;
    let mut zero_norm = 0;
    for (p, samples) in sampling.iter().enumerate() {
        let s = rf_cosine_similarity(features, (p / w, p % w), samples)?;
        total += s.mean;
        zero_norm += s.zero_norm;
    }
    Ok(RfSimilarity {
        mean: total / (h * w) as f64,
        zero_norm,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    /// `[k, h, w]` projections of the centered feature vectors.
    pub projection: Tensor<f64>,
    /// Top-k covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// All eigenvalues, for explained-variance ratios.
    pub total_variance: f64,
    /// `k` unit eigenvectors of length `C`.
    pub components: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

impl Pca {
    /// Projection rescaled to `[0, 1]` per channel (constant channels map to 0.5).
    pub fn unit_range(&self) -> Tensor<f64> {
        let k = self.components.len();
        let hw = self.projection.numel() / k.max(1);
        let mut out = self.projection.clone();
        for plane in out.data_mut().chunks_mut(hw.max(1)) {
            let (lo, hi) = plane.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
            for v in plane.iter_mut() {
                *v = if hi > lo { (*v - lo) / (hi - lo) } else { 0.5 };
            }
        }
        out
    }
}

/// Principal components of the `h*w` feature vectors of a `[C, h, w]` map.
pub fn pca_project<T: Scalar>(features: &Tensor<T>, k: usize) -> Result<Pca> {
    let (c, h, w) = feature_dims("pca_project", features)?;
    let n = h * w;
    if k == 0 || k > c {
        return Err(Error::invalid("pca_project", format!("k = {k} with {c} channels")));
    }
    if n < k {
        return Err(Error::invalid("pca_project", format!("{n} vectors for {k} components")));
    }
    let x = DMatrix::from_fn(n, c, |i, j| features.data()[j * n + i].to_f64_lossy());
    let mean: Vec<f64> = (0..c).map(|j| x.column(j).mean()).collect();
    let centered = DMatrix::from_fn(n, c, |i, j| x[(i, j)] - mean[j]);
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let cov = (centered.transpose() * &centered) / denom;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let components: Vec<Vec<f64>> = order[..k]
        .iter()
        .map(|&i| {
            let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            let lead = v.iter().copied().fold(0.0f64, |m, a| if a.abs() > m.abs() { a } else { m });
            if lead < 0.0 {
                v.iter_mut().for_each(|a| *a = -*a);
            }
            v
        })
        .collect();
    let mut projection = Tensor::zeros([k, h, w]);
    for (q, comp) in components.iter().enumerate() {
        let col = &centered * DMatrix::from_column_slice(c, 1, comp);
        projection.data_mut()[q * n..(q + 1) * n].copy_from_slice(col.as_slice());
    }
    Ok(Pca {
        projection,
        eigenvalues: order[..k].iter().map(|&i| eig.eigenvalues[i]).collect(),
        total_variance: eig.eigenvalues.iter().sum(),
        components,
        mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gaussian_init;

    fn strip(cols: &[usize]) -> SegmentationMask {
        SegmentationMask::from_fn(2, 4, |_, x| u8::from(cols.contains(&x)))
    }

    #[test]
    fn jaccard_examples() {
        let a = strip(&[0, 1]);
        assert_eq!(jaccard(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(jaccard(&strip(&[0]), &strip(&[2]), 1).unwrap(), 0.0);
        assert!((jaccard(&a, &strip(&[1, 2]), 1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(jaccard(&strip(&[]), &strip(&[]), 1).unwrap(), 1.0);
        assert!(jaccard(&a, &SegmentationMask::filled(2, 3, 0), 1).is_err());
    }

    fn square(y0: usize, x0: usize) -> SegmentationMask {
        SegmentationMask::from_fn(16, 16, |y, x| u8::from((y0..y0 + 6).contains(&y) && (x0..x0 + 6).contains(&x)))
    }

    #[test]
    fn boundary_examples() {
        let a = square(4, 4);
        assert_eq!(boundary_f(&a, &a, 1, 1).unwrap(), 1.0);
        assert_eq!(boundary_f(&SegmentationMask::filled(16, 16, 0), &a, 1, 2).unwrap(), 0.0);
        assert_eq!(boundary_f(&square(4, 5), &a, 1, 2).unwrap(), 1.0);
        assert!(boundary_f(&square(4, 9), &a, 1, 1).unwrap() < 1.0);
        let empty = SegmentationMask::filled(16, 16, 0);
        assert_eq!(boundary_f(&empty, &empty, 1, 1).unwrap(), 1.0);
        assert_eq!(boundary(&a, 1).len(), 20);
    }

    #[test]
    fn default_tolerance_follows_the_diagonal() {
        assert_eq!(default_tolerance(64, 64), 1);
        assert_eq!(default_tolerance(480, 854), 8);
    }

    #[test]
    fn evaluate_skips_the_first_frame() {
        let gt = vec![square(4, 4), square(4, 5), square(4, 6)];
        let mut pred = gt.clone();
        pred[0] = SegmentationMask::filled(16, 16, 0);
        let s = evaluate("s", &pred, &gt, &EvalOptions::default()).unwrap();
        assert_eq!(s.mean(), Some((1.0, 1.0)));
        let bg = vec![SegmentationMask::filled(16, 16, 0); 3];
        let s = evaluate("s", &bg, &gt, &EvalOptions::default()).unwrap();
        assert_eq!(s.mean().unwrap().0, 0.0);
        assert!(evaluate("s", &bg[..2], &gt, &EvalOptions::default()).is_err());
    }

    #[test]
    fn report_means_and_attributes() {
        let a = SequenceScore {
            name: "a".into(),
            objects: vec![ObjectScore { class: 1, j: 1.0, f: 0.5 }, ObjectScore { class: 2, j: 0.0, f: 0.5 }],
        };
        let b = SequenceScore {
            name: "b".into(),
            objects: vec![ObjectScore { class: 1, j: 0.8, f: 0.9 }],
        };
        let attrs = BTreeMap::from([("a".to_string(), vec!["fast".to_string()]), ("b".to_string(), vec!["fast".into(), "occl".into()])]);
        let r = EvalReport::new(vec![a.clone(), b.clone()], Some(&attrs));
        assert!((r.mean_j - 0.65).abs() < 1e-12 && (r.mean_f - 0.7).abs() < 1e-12);
        assert_eq!(r.by_attribute["occl"], (0.8, 0.9, 1));
        assert_eq!(r.by_attribute["fast"].2, 2);
        let (ra, rb) = (EvalReport::new(vec![a], None), EvalReport::new(vec![b], None));
        assert!((r.mean_j - (ra.mean_j + rb.mean_j) / 2.0).abs() < 1e-12);
        assert!(r.records().lines().count() == 4 && r.summary().contains("mean"));
    }

    #[test]
    fn rf_similarity_conventions() {
        let constant = Tensor::<f32>::full([4, 5, 5], 0.7);
        let s = rf_cosine_similarity(&constant, (2, 2), &[(1.0, 1.0), (2.5, 3.25)]).unwrap();
        assert!((s.mean - 1.0).abs() < 1e-12);
        let mut onehot = Tensor::<f64>::zeros([2, 3, 3]);
        onehot.data_mut()[4] = 1.0;
        onehot.data_mut()[9..].iter_mut().for_each(|v| *v = 1.0);
        onehot.data_mut()[9 + 4] = 0.0;
        let s = rf_cosine_similarity(&onehot, (1, 1), &[(0.0, 0.0), (2.0, 2.0)]).unwrap();
        assert_eq!(s.mean, 0.0);
        let s = rf_cosine_similarity(&onehot, (1, 1), &[(-5.0, 0.0)]).unwrap();
        assert_eq!(s.zero_norm, 1);
        assert!(rf_cosine_similarity(&constant, (2, 2), &[]).is_err());
    }

    #[test]
    fn pca_on_axis_aligned_data() {
        // Three channels with variances in decreasing order and no correlation.
        let raw: Tensor<f64> = gaussian_init([3, 10, 10], 1.0, 4).unwrap();
        let mut f = raw.clone();
        for (k, s) in [3.0, 2.0, 0.5].iter().enumerate() {
            f.data_mut()[k * 100..(k + 1) * 100].iter_mut().for_each(|v| *v *= s);
        }
        let p = pca_project(&f, 3).unwrap();
        assert!(p.eigenvalues.windows(2).all(|e| e[0] >= e[1]));
        for (i, a) in p.components.iter().enumerate() {
            for (j, b) in p.components.iter().enumerate() {
                let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                assert!((d - f64::from(u8::from(i == j))).abs() < 1e-9);
            }
            let lead = a.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            assert!(lead > 0.0);
        }
        let u = p.unit_range();
        assert!(u.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(pca_project(&f, 4).is_err());
    }

    #[test]
    fn pca_rank_one() {
        let dir = [0.3, -0.5, 0.8, 0.1];
        let f = Tensor::<f64>::from_fn([4, 6, 6], |i| dir[i / 36] * ((i % 36) as f64 - 17.5));
        let p = pca_project(&f, 3).unwrap();
        assert!(p.eigenvalues[0] / p.total_variance > 0.9999);
    }
}
