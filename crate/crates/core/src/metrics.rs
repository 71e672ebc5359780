//! Pose accuracy metrics: ADD, ADD-S and the accuracy-threshold AUC.

use serde::{Deserialize, Serialize};

use crate::geometry::{Pose, Vec3};
use crate::scalar::Real;

/// Model sizes above this use the grid-accelerated nearest-neighbor search for
/// ADD-S. Both paths are exact.
pub const ADDS_BRUTE_FORCE_LIMIT: usize = 3000;

/// Default upper threshold of the AUC sweep, in meters.
pub const DEFAULT_DMAX: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("model point set is empty")]
    EmptyModel,
    #[error("cannot compute AUC of an empty error list")]
    EmptyErrors,
    #[error("d_max must be positive, got {0}")]
    BadThreshold(f64),
    #[error("prediction has {pred} poses but ground truth has {gt}")]
    LengthMismatch { pred: usize, gt: usize },
}

/// Object-frame points the metrics are evaluated on.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPoints<T> {
    points: Vec<Vec3<T>>,
}

impl<T: Real> ModelPoints<T> {
    pub fn new(points: Vec<Vec3<T>>) -> Result<Self, MetricsError> {
        if points.is_empty() {
            return Err(MetricsError::EmptyModel);
        }
        Ok(Self { points })
    }

    /// Keeps at most `cap` points by deterministic stride subsampling.
    pub fn subsampled(points: &[Vec3<T>], cap: usize) -> Result<Self, MetricsError> {
        if points.len() <= cap {
            return Self::new(points.to_vec());
        }
        let stride = points.len().div_ceil(cap);
        Self::new(points.iter().step_by(stride).copied().collect())
    }

    pub fn points(&self) -> &[Vec3<T>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Mean distance between corresponding model points under the two poses.
pub fn add_metric<T: Real>(model: &ModelPoints<T>, gt: &Pose<T>, est: &Pose<T>) -> T {
    // (R_gt - R_est) x + (t_gt - t_est): a shared rotation cancels exactly
    let dr = gt.rotation - est.rotation;
    let dt = gt.translation - est.translation;
    running_mean(model.points.iter().map(|&x| (dr * x + dt).norm()))
}

/// Incremental mean; exact for constant sequences.
fn running_mean<T: Real>(values: impl Iterator<Item = T>) -> T {
    let mut mean = T::zero();
    for (k, v) in values.enumerate() {
        mean += (v - mean) / T::lit((k + 1) as f64);
    }
    mean
}

/// Mean over ground-truth-posed points of the distance to the nearest
/// estimate-posed point.
pub fn adds_metric<T: Real>(model: &ModelPoints<T>, gt: &Pose<T>, est: &Pose<T>) -> T {
    let gt_pts: Vec<Vec3<T>> = model.points.iter().map(|&x| gt.transform_point(x)).collect();
    let est_pts: Vec<Vec3<T>> = model.points.iter().map(|&x| est.transform_point(x)).collect();
    if model.len() <= ADDS_BRUTE_FORCE_LIMIT {
        running_mean(gt_pts.iter().map(|&q| nearest_brute_force(&est_pts, q).sqrt()))
    } else {
        let grid = PointGrid::new(&est_pts);
        running_mean(gt_pts.iter().map(|&q| grid.nearest_squared(q).sqrt()))
    }
}

fn nearest_brute_force<T: Real>(points: &[Vec3<T>], q: Vec3<T>) -> T {
    points
        .iter()
        .map(|&p| (p - q).norm_squared())
        .fold(T::infinity(), |a, b| a.min(b))
}

/// Uniform hash grid for exact nearest-neighbor queries.
struct PointGrid<'a, T> {
    points: &'a [Vec3<T>],
    origin: Vec3<T>,
    cell: T,
    dims: [usize; 3],
    /// `starts[c]..starts[c + 1]` indexes `order` for cell `c`.
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl<'a, T: Real> PointGrid<'a, T> {
    fn new(points: &'a [Vec3<T>]) -> Self {
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            lo = Vec3::new(lo.x.min(p.x), lo.y.min(p.y), lo.z.min(p.z));
            hi = Vec3::new(hi.x.max(p.x), hi.y.max(p.y), hi.z.max(p.z));
        }
        let ext = hi - lo;
        let max_ext = ext.max_abs().max(T::lit(1e-9));
        // about two points per cell, floored so flat clouds stay bounded
        let floor = max_ext / T::lit(256.0);
        let volume = ext.x.max(floor) * ext.y.max(floor) * ext.z.max(floor);
        let cell = (volume / T::lit(points.len() as f64 / 2.0)).cbrt().max(floor);
        let dim = |e: T| ((e / cell).floor().to_usize().unwrap_or(0) + 1).max(1);
        let dims = [dim(ext.x), dim(ext.y), dim(ext.z)];
        let cell_of = |p: Vec3<T>| -> usize {
            let c = |v: T, o: T, n: usize| ((v - o) / cell).floor().to_usize().unwrap_or(0).min(n - 1);
            let (i, j, k) = (c(p.x, lo.x, dims[0]), c(p.y, lo.y, dims[1]), c(p.z, lo.z, dims[2]));
            (k * dims[1] + j) * dims[0] + i
        };
        let ncells = dims[0] * dims[1] * dims[2];
        let mut counts = vec![0usize; ncells + 1];
        let cells: Vec<usize> = points.iter().map(|&p| cell_of(p)).collect();
        for &c in &cells {
            counts[c + 1] += 1;
        }
        for i in 0..ncells {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut order = vec![0; points.len()];
        for (idx, &c) in cells.iter().enumerate() {
            order[fill[c]] = idx;
            fill[c] += 1;
        }
        Self { points, origin: lo, cell, dims, starts: counts, order }
    }

    fn nearest_squared(&self, q: Vec3<T>) -> T {
        let coord = |v: T, o: T| ((v - o) / self.cell).floor().to_i64().unwrap_or(0);
        let qc = [coord(q.x, self.origin.x), coord(q.y, self.origin.y), coord(q.z, self.origin.z)];
        let max_ring = (0..3)
            .map(|a| qc[a].abs().max((qc[a] - self.dims[a] as i64 + 1).abs()))
            .max()
            .unwrap_or(0);
        let mut best = T::infinity();
        for ring in 0..=max_ring {
            // points in rings > `ring` are at least `ring * cell` away
            let lo = [qc[0] - ring, qc[1] - ring, qc[2] - ring];
            let hi = [qc[0] + ring, qc[1] + ring, qc[2] + ring];
            for k in lo[2].max(0)..=hi[2].min(self.dims[2] as i64 - 1) {
                for j in lo[1].max(0)..=hi[1].min(self.dims[1] as i64 - 1) {
                    for i in lo[0].max(0)..=hi[0].min(self.dims[0] as i64 - 1) {
                        let on_shell = i == lo[0] || i == hi[0] || j == lo[1] || j == hi[1] || k == lo[2] || k == hi[2];
                        if !on_shell {
                            continue;
                        }
                        let c = (k as usize * self.dims[1] + j as usize) * self.dims[0] + i as usize;
                        for &idx in &self.order[self.starts[c]..self.starts[c + 1]] {
                            best = best.min((self.points[idx] - q).norm_squared());
                        }
                    }
                }
            }
            let reach = self.cell * T::lit(ring as f64);
            if best <= reach * reach {
                break;
            }
        }
        best
    }
}

/// Normalized area under the accuracy-vs-threshold curve on `[0, d_max]`.
///
/// For each error the accuracy curve is a unit step at `e`, whose integral over
/// `[0, d_max]` is `max(0, d_max - e)`, so the mean of `max(0, 1 - e / d_max)`
/// is the exact value. Infinite errors (lost frames) contribute zero.
pub fn auc<T: Real>(errors: &[T], d_max: T) -> Result<T, MetricsError> {
    if errors.is_empty() {
        return Err(MetricsError::EmptyErrors);
    }
    if !(d_max > T::zero()) || !d_max.is_finite() {
        return Err(MetricsError::BadThreshold(d_max.to_f64_lossy()));
    }
    let sum = errors
        .iter()
        .fold(T::zero(), |acc, &e| acc + (T::one() - e / d_max).max(T::zero()));
    Ok(sum / T::lit(errors.len() as f64))
}

mod non_finite_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|x| if x.is_finite() { Some(*x) } else { None }))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let v: Vec<Option<f64>> = Vec::deserialize(d)?;
        Ok(v.into_iter().map(|x| x.unwrap_or(f64::INFINITY)).collect())
    }
}

/// Sequence-level report. Lost frames carry infinite error (`null` in JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: usize,
    pub symmetric: bool,
    /// `"adds"` for symmetric objects, else `"add"`.
    pub headline_metric: String,
    pub headline_auc: f64,
    pub auc_add: f64,
    pub auc_adds: f64,
    pub d_max: f64,
    pub lost_frames: usize,
    /// Means over tracked frames; `None` when every frame was lost.
    pub mean_add: Option<f64>,
    pub mean_adds: Option<f64>,
    #[serde(with = "non_finite_as_null")]
    pub add: Vec<f64>,
    #[serde(with = "non_finite_as_null")]
    pub adds: Vec<f64>,
}

/// Scores a predicted trajectory against ground truth. Frames flagged in
/// `lost` are scored as infinite error.
pub fn evaluate_sequence(
    pred: &[Pose<f64>],
    gt: &[Pose<f64>],
    model: &ModelPoints<f64>,
    symmetric: bool,
    d_max: f64,
    lost: Option<&[bool]>,
) -> Result<EvalReport, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LengthMismatch { pred: pred.len(), gt: gt.len() });
    }
    if let Some(l) = lost {
        if l.len() != pred.len() {
            return Err(MetricsError::LengthMismatch { pred: l.len(), gt: gt.len() });
        }
    }
    let is_lost = |i: usize| lost.is_some_and(|l| l[i]);
    let mut add = Vec::with_capacity(pred.len());
    let mut adds = Vec::with_capacity(pred.len());
    for i in 0..pred.len() {
        if is_lost(i) {
            add.push(f64::INFINITY);
            adds.push(f64::INFINITY);
        } else {
            add.push(add_metric(model, &gt[i], &pred[i]));
            adds.push(adds_metric(model, &gt[i], &pred[i]));
        }
    }
    let auc_add = auc(&add, d_max)?;
    let auc_adds = auc(&adds, d_max)?;
    let mean = |v: &[f64]| {
        let tracked: Vec<f64> = v.iter().copied().filter(|e| e.is_finite()).collect();
        (!tracked.is_empty()).then(|| tracked.iter().sum::<f64>() / tracked.len() as f64)
    };
    Ok(EvalReport {
        frames: pred.len(),
        symmetric,
        headline_metric: if symmetric { "adds" } else { "add" }.to_string(),
        headline_auc: if symmetric { auc_adds } else { auc_add },
        auc_add,
        auc_adds,
        d_max,
        lost_frames: (0..pred.len()).filter(|&i| is_lost(i)).count(),
        mean_add: mean(&add),
        mean_adds: mean(&adds),
        add,
        adds,
    })
}

#[cfg(test)]
mod tests {
    use std::f64::consts::FRAC_PI_2;

    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::geometry::{compose, exp_se3, exp_so3, Twist};
    use crate::rng::stream_rng;

    type V = Vec3<f64>;

    fn random_pose(rng: &mut impl Rng) -> Pose<f64> {
        let mut v = || rng.gen_range(-1.0..1.0);
        exp_se3(&Twist::new(V::new(v(), v(), v()), V::new(v(), v(), v()) * 1.5))
    }

    fn random_model(rng: &mut impl Rng, m: usize) -> ModelPoints<f64> {
        ModelPoints::new((0..m).map(|_| V::new(rng.gen(), rng.gen(), rng.gen()) * 0.1).collect()).unwrap()
    }

    fn adds_oracle(model: &ModelPoints<f64>, gt: &Pose<f64>, est: &Pose<f64>) -> f64 {
        let mut total = 0.0;
        for &a in model.points() {
            let mut best = f64::INFINITY;
            for &b in model.points() {
                best = best.min((gt.transform_point(a) - est.transform_point(b)).norm());
            }
            total += best;
        }
        total / model.len() as f64
    }

    #[test]
    fn add_examples() {
        let mut rng = stream_rng(1, 0);
        let model = random_model(&mut rng, 50);
        let gt = random_pose(&mut rng);
        assert_eq!(add_metric(&model, &gt, &gt), 0.0);
        let shift = Pose::from_translation(V::new(0.03, 0.04, 0.0));
        assert_eq!(add_metric(&model, &Pose::identity(), &shift), 0.05);

        let est = random_pose(&mut rng);
        let mut sum = 0.0;
        for p in model.points() {
            let a = gt.rotation * *p + gt.translation;
            let b = est.rotation * *p + est.translation;
            sum += ((a.x - b.x).powi(2) + (a.y - b.y).powi(2) + (a.z - b.z).powi(2)).sqrt();
        }
        assert!((add_metric(&model, &gt, &est) - sum / 50.0).abs() < 1e-12);
    }

    #[test]
    fn adds_square_symmetry() {
        let model = ModelPoints::new(vec![
            V::new(0.05, 0.05, 0.0),
            V::new(-0.05, 0.05, 0.0),
            V::new(-0.05, -0.05, 0.0),
            V::new(0.05, -0.05, 0.0),
        ])
        .unwrap();
        let gt = Pose::from_translation(V::new(0.0, 0.0, 0.5));
        let est = compose(&gt, &Pose::new(exp_so3(V::new(0.0, 0.0, FRAC_PI_2)), V::zeros()));
        assert!(adds_metric(&model, &gt, &est) < 1e-15);
        assert!(add_metric(&model, &gt, &est) > 0.05);
        assert_eq!(adds_metric(&model, &gt, &gt), 0.0);
    }

    #[test]
    fn adds_matches_brute_force() {
        let mut rng = stream_rng(2, 0);
        let model = random_model(&mut rng, 200);
        let (gt, est) = (random_pose(&mut rng), random_pose(&mut rng));
        assert!((adds_metric(&model, &gt, &est) - adds_oracle(&model, &gt, &est)).abs() < 1e-12);
    }

    #[test]
    fn grid_path_is_exact() {
        let mut rng = stream_rng(3, 0);
        let model = random_model(&mut rng, ADDS_BRUTE_FORCE_LIMIT + 500);
        let gt = random_pose(&mut rng);
        let est = compose(&exp_se3(&Twist::new(V::new(0.01, 0.0, -0.02), V::new(0.1, 0.2, 0.0))), &gt);
        let oracle = adds_oracle(&model, &gt, &est);
        assert!((adds_metric(&model, &gt, &est) - oracle).abs() < 1e-12);
        // far-away estimate: queries outside the grid
        let far = compose(&Pose::from_translation(V::new(3.0, 0.0, 0.0)), &gt);
        assert!((adds_metric(&model, &gt, &far) - adds_oracle(&model, &gt, &far)).abs() < 1e-12);
    }

    #[test]
    fn grid_handles_planar_clouds() {
        let pts: Vec<V> = (0..4000).map(|i| V::new((i % 80) as f64 * 1e-3, (i / 80) as f64 * 1e-3, 0.0)).collect();
        let model = ModelPoints::new(pts).unwrap();
        let est = Pose::from_translation(V::new(0.0, 0.0, 0.002));
        assert!((adds_metric(&model, &Pose::identity(), &est) - 0.002).abs() < 1e-15);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.0, 0.0], 0.1).unwrap(), 1.0);
        assert_eq!(auc(&[0.1, 0.5, f64::INFINITY], 0.1).unwrap(), 0.0);
        assert_eq!(auc(&[0.05], 0.1).unwrap(), 0.5);
        assert_eq!(auc::<f64>(&[], 0.1), Err(MetricsError::EmptyErrors));
        assert!(auc(&[0.0], 0.0).is_err());
    }

    /// Trapezoid integration of the empirical accuracy curve. With an odd
    /// sample count a step at `d_max / 2` falls mid-segment and integrates exactly.
    fn auc_trapezoid(errors: &[f64], d_max: f64, samples: usize) -> f64 {
        let acc = |d: f64| errors.iter().filter(|&&e| e <= d).count() as f64 / errors.len() as f64;
        let h = d_max / samples as f64;
        let mut total = 0.0;
        let mut prev = acc(0.0);
        for i in 1..=samples {
            let cur = acc(i as f64 * h);
            total += 0.5 * (prev + cur) * h;
            prev = cur;
        }
        total / d_max
    }

    #[test]
    fn auc_matches_trapezoid() {
        assert!((auc(&[0.05], 0.1).unwrap() - auc_trapezoid(&[0.05], 0.1, 100_001)).abs() < 1e-9);
        let mut rng = stream_rng(4, 0);
        let errors: Vec<f64> = (0..200).map(|_| rng.gen_range(0.0..0.15)).collect();
        assert!((auc(&errors, 0.1).unwrap() - auc_trapezoid(&errors, 0.1, 100_000)).abs() < 1e-4);
    }

    #[test]
    fn auc_in_single_precision() {
        assert_eq!(auc(&[0.05f32], 0.1).unwrap(), 0.5);
    }

    #[test]
    fn evaluate_identity_and_lost() {
        let mut rng = stream_rng(5, 0);
        let model = random_model(&mut rng, 30);
        let poses: Vec<Pose<f64>> = (0..5).map(|_| random_pose(&mut rng)).collect();
        let r = evaluate_sequence(&poses, &poses, &model, false, 0.1, None).unwrap();
        assert_eq!((r.auc_add, r.auc_adds, r.headline_auc), (1.0, 1.0, 1.0));
        assert_eq!(r.headline_metric, "add");

        let lost = vec![true; 5];
        let r = evaluate_sequence(&poses, &poses, &model, true, 0.1, Some(&lost)).unwrap();
        assert_eq!((r.auc_add, r.auc_adds, r.lost_frames), (0.0, 0.0, 5));
        assert_eq!(r.headline_metric, "adds");

        assert!(matches!(
            evaluate_sequence(&poses[..3], &poses, &model, false, 0.1, None),
            Err(MetricsError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn report_totals_are_consistent() {
        let mut rng = stream_rng(6, 0);
        let model = random_model(&mut rng, 40);
        let gt: Vec<Pose<f64>> = (0..20).map(|_| random_pose(&mut rng)).collect();
        let pred: Vec<Pose<f64>> = gt
            .iter()
            .map(|g| {
                let mut v = || rng.gen_range(-0.03..0.03);
                compose(&exp_se3(&Twist::new(V::new(v(), v(), v()), V::new(v(), v(), v()))), g)
            })
            .collect();
        let mut lost = vec![false; 20];
        lost[7] = true;
        let r = evaluate_sequence(&pred, &gt, &model, false, 0.1, Some(&lost)).unwrap();
        assert_eq!(r.auc_add, auc(&r.add, 0.1).unwrap());
        assert_eq!(r.auc_adds, auc(&r.adds, 0.1).unwrap());
        assert_eq!(r.add.len(), 20);
        assert!(r.add[7].is_infinite());

        let json = serde_json::to_string(&r).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn subsampling_is_strided() {
        let pts: Vec<V> = (0..10).map(|i| V::new(i as f64, 0.0, 0.0)).collect();
        let m = ModelPoints::subsampled(&pts, 4).unwrap();
        assert_eq!(m.points().iter().map(|p| p.x).collect::<Vec<_>>(), vec![0.0, 3.0, 6.0, 9.0]);
        assert!(ModelPoints::<f64>::new(vec![]).is_err());
    }

    proptest! {
        #[test]
        fn adds_never_exceeds_add(seed in 0u64..10_000) {
            let mut rng = stream_rng(seed, 9);
            let model = random_model(&mut rng, 20);
            let (gt, est) = (random_pose(&mut rng), random_pose(&mut rng));
            prop_assert!(adds_metric(&model, &gt, &est) <= add_metric(&model, &gt, &est));
        }

        #[test]
        fn add_invariant_under_common_transform(seed in 0u64..10_000) {
            let mut rng = stream_rng(seed, 10);
            let model = random_model(&mut rng, 20);
            let (gt, est, g) = (random_pose(&mut rng), random_pose(&mut rng), random_pose(&mut rng));
            let a = add_metric(&model, &gt, &est);
            let b = add_metric(&model, &compose(&g, &gt), &compose(&g, &est));
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn auc_monotonicity(errs in proptest::collection::vec(0.0f64..0.2, 1..30), d in 0.01f64..0.2, bump in 0.0f64..0.1, idx in 0usize..30) {
            let a = auc(&errs, d).unwrap();
            prop_assert!(auc(&errs, d * 1.5).unwrap() >= a);
            let mut worse = errs.clone();
            let i = idx % worse.len();
            worse[i] += bump;
            prop_assert!(auc(&worse, d).unwrap() <= a + 1e-15);
        }
    }
}
