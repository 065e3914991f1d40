//! Two-stage instance extraction from per-pixel predictions.
//!
//! 1. Seeding: repeatedly take the unassigned foreground pixel with the highest
//!    centroid probability and claim every unassigned foreground pixel whose
//!    predicted feature lies in the closed ball of radius `B̂` around the
//!    seed's feature.
//! 2. Refinement: fit one Gaussian per seeded cluster (mean and covariance of
//!    its features, weight proportional to its size) and move every
//!    foreground pixel to the component with the highest weighted density.

use nalgebra::{Cholesky, SMatrix, SVector};
use thiserror::Error;

use crate::geometry::{slice_distance, FEATURE_DIM};
use crate::grid::Grid;

pub const DEFAULT_FG_THRESHOLD: f64 = 0.5;

/// Added to the diagonal of every component covariance.
pub const COVARIANCE_REGULARIZATION: f64 = 1e-6;

type Vec9 = SVector<f64, FEATURE_DIM>;
type Mat9 = SMatrix<f64, FEATURE_DIM, FEATURE_DIM>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClusteringError {
    #[error("prediction map `{name}` has shape {got:?}, expected {want:?}")]
    ShapeMismatch {
        name: &'static str,
        got: [usize; 3],
        want: [usize; 3],
    },
    #[error("prediction map `{0}` contains a non-finite value")]
    NonFinite(&'static str),
    #[error("prediction map `{name}` holds {value} outside {range}")]
    OutOfRange {
        name: &'static str,
        value: f64,
        range: &'static str,
    },
}

/// Per-pixel model outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `H×W×9` predicted object features.
    pub xi_hat: Grid<f64>,
    /// `H×W` probability of being a cluster seed.
    pub eta_hat: Grid<f64>,
    /// `H×W` predicted enclosing radius, non-negative.
    pub b_hat: Grid<f64>,
    /// `H×W` foreground probability.
    pub mask_prob: Grid<f64>,
}

impl Prediction {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            xi_hat: Grid::zeros(height, width, FEATURE_DIM),
            eta_hat: Grid::zeros(height, width, 1),
            b_hat: Grid::zeros(height, width, 1),
            mask_prob: Grid::zeros(height, width, 1),
        }
    }

    pub fn height(&self) -> usize {
        self.mask_prob.height()
    }

    pub fn width(&self) -> usize {
        self.mask_prob.width()
    }

    pub fn validate(&self) -> Result<(), ClusteringError> {
        let (h, w) = (self.height(), self.width());
        let maps: [(&'static str, &Grid<f64>, usize); 4] = [
            ("xi_hat", &self.xi_hat, FEATURE_DIM),
            ("eta_hat", &self.eta_hat, 1),
            ("b_hat", &self.b_hat, 1),
            ("mask_prob", &self.mask_prob, 1),
        ];
        for (name, grid, c) in maps {
            if grid.shape() != [h, w, c] {
                return Err(ClusteringError::ShapeMismatch {
                    name,
                    got: grid.shape(),
                    want: [h, w, c],
                });
            }
            if grid.as_slice().iter().any(|v| !v.is_finite()) {
                return Err(ClusteringError::NonFinite(name));
            }
        }
        for (name, grid) in [("eta_hat", &self.eta_hat), ("mask_prob", &self.mask_prob)] {
            if let Some(&value) = grid.as_slice().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(ClusteringError::OutOfRange {
                    name,
                    value,
                    range: "[0, 1]",
                });
            }
        }
        if let Some(&value) = self.b_hat.as_slice().iter().find(|&&v| v < 0.0) {
            return Err(ClusteringError::OutOfRange {
                name: "b_hat",
                value,
                range: "[0, inf)",
            });
        }
        Ok(())
    }

    fn foreground(&self, fg_threshold: f64) -> Vec<usize> {
        (0..self.mask_prob.len_pixels())
            .filter(|&i| self.mask_prob.value(i) >= fg_threshold)
            .collect()
    }
}

/// Instance labels for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    /// `H×W`, 0 = background, instances numbered `1..=M`.
    pub labels: Grid<u32>,
    /// Confidence of instance `m` at index `m - 1`.
    pub scores: Vec<f64>,
    /// Seed pixel `(row, col)` of each instance.
    pub seeds: Vec<(usize, usize)>,
}

impl Segmentation {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            labels: Grid::zeros(height, width, 1),
            scores: Vec::new(),
            seeds: Vec::new(),
        }
    }

    pub fn num_instances(&self) -> usize {
        self.scores.len()
    }

    /// Pixel indices of each instance, index `m - 1`.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_instances()];
        for (i, &l) in self.labels.as_slice().iter().enumerate() {
            if l > 0 {
                out[l as usize - 1].push(i);
            }
        }
        out
    }
}

fn mean_of(values: &Grid<f64>, pixels: &[usize]) -> f64 {
    if pixels.is_empty() {
        return 0.0;
    }
    pixels.iter().map(|&i| values.value(i)).sum::<f64>() / pixels.len() as f64
}

/// Greedy sphere seeding.
///
/// Seeds are taken in order of decreasing `η̂`, ties broken by smaller
/// `(row, col)`. Instance scores are the mean `η̂` of their pixels.
pub fn seed_segmentation(
    pred: &Prediction,
    fg_threshold: f64,
) -> Result<Segmentation, ClusteringError> {
    pred.validate()?;
    let (h, w) = (pred.height(), pred.width());
    let mut order = pred.foreground(fg_threshold);
    order.sort_by(|&a, &b| {
        pred.eta_hat
            .value(b)
            .total_cmp(&pred.eta_hat.value(a))
            .then(a.cmp(&b))
    });

    let mut seg = Segmentation::empty(h, w);
    let mut unassigned = order.clone();
    unassigned.sort_unstable();
    let mut next = 0usize;
    while !unassigned.is_empty() {
        while seg.labels.value(order[next]) != 0 {
            next += 1;
        }
        let seed = order[next];
        let label = seg.scores.len() as u32 + 1;
        let center = pred.xi_hat.at(seed);
        let radius = pred.b_hat.value(seed);
        let mut members = Vec::new();
        unassigned.retain(|&p| {
            if slice_distance(pred.xi_hat.at(p), center) <= radius {
                members.push(p);
                false
            } else {
                true
            }
        });
        debug_assert!(members.contains(&seed));
        for &p in &members {
            seg.labels.as_mut_slice()[p] = label;
        }
        seg.scores.push(mean_of(&pred.eta_hat, &members));
        seg.seeds.push((seed / w, seed % w));
    }
    Ok(seg)
}

/// Counters describing a refinement pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RefineStats {
    /// Components whose regularized covariance could not be factorized and
    /// were replaced by a spherical covariance of equal trace.
    pub spherical_fallbacks: usize,
    /// Foreground pixels whose label changed.
    pub reassigned: usize,
    /// Instances that lost all their pixels.
    pub dropped: usize,
}

/// A Gaussian component evaluated in the log domain.
struct Component {
    mean: Vec9,
    /// Lower Cholesky factor of the covariance.
    chol: Mat9,
    /// `ln π − ½ (d ln 2π + ln |Σ|)`.
    log_norm: f64,
}

impl Component {
    fn fit(points: &[Vec9], weight: f64, stats: &mut RefineStats) -> Self {
        let n = points.len() as f64;
        let mean = points.iter().fold(Vec9::zeros(), |acc, p| acc + p) / n;
        let mut cov = Mat9::zeros();
        for p in points {
            let d = p - mean;
            cov += d * d.transpose();
        }
        cov /= n;
        cov += Mat9::identity() * COVARIANCE_REGULARIZATION;

        let factored = Cholesky::new(cov).map(|c| c.l()).and_then(|l| {
            let logdet = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
            logdet.is_finite().then_some((l, logdet))
        });
        let (chol, logdet) = factored.unwrap_or_else(|| {
            stats.spherical_fallbacks += 1;
            let var = cov.trace() / FEATURE_DIM as f64;
            (Mat9::identity() * var.sqrt(), FEATURE_DIM as f64 * var.ln())
        });
        let d = FEATURE_DIM as f64;
        Self {
            mean,
            chol,
            log_norm: weight.ln() - 0.5 * (d * (2.0 * std::f64::consts::PI).ln() + logdet),
        }
    }

    /// Weighted log density `ln π + ln N(x | μ, Σ)`, or `None` as soon as it
    /// is known to fall below `floor` (or to equal it, unless `ties`).
    fn log_density_above(&self, x: &Vec9, floor: f64, ties: bool) -> Option<f64> {
        let d = x - self.mean;
        // Forward substitution L y = d; the Mahalanobis term is |y|², whose
        // partial sums only grow.
        let mut y = [0.0f64; FEATURE_DIM];
        let mut maha = 0.0;
        for i in 0..FEATURE_DIM {
            let mut s = d[i];
            for (j, yj) in y.iter().enumerate().take(i) {
                s -= self.chol[(i, j)] * yj;
            }
            y[i] = s / self.chol[(i, i)];
            maha += y[i] * y[i];
            let bound = self.log_norm - 0.5 * maha;
            if bound < floor || (bound == floor && !ties) || bound.is_nan() {
                return None;
            }
        }
        Some(self.log_norm - 0.5 * maha)
    }
}

fn feature_at(pred: &Prediction, idx: usize) -> Vec9 {
    Vec9::from_column_slice(pred.xi_hat.at(idx))
}

/// One hard-assignment expectation step of a Gaussian mixture initialized
/// from `seg`.
///
/// Instances that end up empty are dropped and the remaining labels are
/// renumbered in their original order. Scores are recomputed; seeds are kept.
pub fn gmm_refine(
    seg: &Segmentation,
    pred: &Prediction,
) -> Result<(Segmentation, RefineStats), ClusteringError> {
    pred.validate()?;
    if seg.labels.shape() != pred.mask_prob.shape() {
        return Err(ClusteringError::ShapeMismatch {
            name: "labels",
            got: seg.labels.shape(),
            want: pred.mask_prob.shape(),
        });
    }
    let mut stats = RefineStats::default();
    let members = seg.members();
    let foreground: Vec<usize> = members.iter().flatten().copied().collect();
    if seg.num_instances() <= 1 || foreground.is_empty() {
        return Ok((seg.clone(), stats));
    }
    let n_fg = foreground.len() as f64;
    let components: Vec<Option<Component>> = members
        .iter()
        .map(|pixels| {
            if pixels.is_empty() {
                return None;
            }
            let points: Vec<Vec9> = pixels.iter().map(|&i| feature_at(pred, i)).collect();
            Some(Component::fit(
                &points,
                pixels.len() as f64 / n_fg,
                &mut stats,
            ))
        })
        .collect();

    let mut assignment = seg.labels.clone();
    let mut sizes = vec![0usize; seg.num_instances()];
    for &p in &foreground {
        let x = feature_at(pred, p);
        // Start from the current instance to tighten the pruning bound; ties
        // still resolve to the lowest index.
        let own = seg.labels.value(p) as usize - 1;
        let own_ld = components[own]
            .as_ref()
            .and_then(|c| c.log_density_above(&x, f64::NEG_INFINITY, false))
            .unwrap_or(f64::NEG_INFINITY);
        let mut best = (own_ld, own);
        for (m, comp) in components.iter().enumerate() {
            if m == own {
                continue;
            }
            if let Some(comp) = comp {
                if let Some(ld) = comp.log_density_above(&x, best.0, m < best.1) {
                    best = (ld, m);
                }
            }
        }
        let label = best.1 as u32 + 1;
        if label != seg.labels.value(p) {
            stats.reassigned += 1;
        }
        assignment.as_mut_slice()[p] = label;
        sizes[best.1] += 1;
    }

    // Renumber surviving instances 1..=M' in their original order.
    let mut remap = vec![0u32; seg.num_instances() + 1];
    let mut seeds = Vec::new();
    for (m, &size) in sizes.iter().enumerate() {
        if size > 0 {
            seeds.push(seg.seeds[m]);
            remap[m + 1] = seeds.len() as u32;
        } else {
            stats.dropped += 1;
        }
    }
    for l in assignment.as_mut_slice() {
        *l = remap[*l as usize];
    }
    let mut refined = Segmentation {
        scores: vec![0.0; seeds.len()],
        labels: assignment,
        seeds,
    };
    refined.scores = refined
        .members()
        .iter()
        .map(|pixels| mean_of(&pred.eta_hat, pixels))
        .collect();
    Ok((refined, stats))
}

/// Seeding followed by one refinement pass.
pub fn segment(pred: &Prediction, fg_threshold: f64) -> Result<Segmentation, ClusteringError> {
    let seeded = seed_segmentation(pred, fg_threshold)?;
    Ok(gmm_refine(&seeded, pred)?.0)
}

/// True when two label maps agree on background and their instances
/// correspond one to one, regardless of numbering.
pub fn same_partition(a: &Grid<u32>, b: &Grid<u32>) -> bool {
    if a.shape() != b.shape() {
        return false;
    }
    let mut forward = std::collections::HashMap::new();
    let mut backward = std::collections::HashMap::new();
    for (&x, &y) in a.as_slice().iter().zip(b.as_slice()) {
        if (x == 0) != (y == 0) {
            return false;
        }
        if x != 0 && (*forward.entry(x).or_insert(y) != y || *backward.entry(y).or_insert(x) != x) {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_comparison_ignores_numbering() {
        let g = |v: Vec<u32>| Grid::from_vec(1, v.len(), 1, v).unwrap();
        assert!(same_partition(&g(vec![0, 2, 2, 1]), &g(vec![0, 5, 5, 3])));
        assert!(!same_partition(&g(vec![0, 2, 2, 1]), &g(vec![0, 5, 5, 5])));
        assert!(!same_partition(&g(vec![0, 2, 1, 1]), &g(vec![0, 5, 3, 5])));
        assert!(!same_partition(&g(vec![0, 1]), &g(vec![1, 1])));
    }

    /// Four pixels in a 1×4 image; pixels 2 and 3 sit at distance 2 along e1.
    fn four_pixel(b: f64) -> Prediction {
        let mut p = Prediction::zeros(1, 4);
        p.xi_hat.set(0, 2, 0, 2.0);
        p.xi_hat.set(0, 3, 0, 2.0);
        p.eta_hat
            .as_mut_slice()
            .copy_from_slice(&[0.9, 0.1, 0.8, 0.2]);
        p.b_hat.as_mut_slice().fill(b);
        p.mask_prob.as_mut_slice().fill(1.0);
        p
    }

    #[test]
    fn empty_foreground_gives_no_instances() {
        let seg = segment(&Prediction::zeros(3, 3), DEFAULT_FG_THRESHOLD).unwrap();
        assert_eq!(seg.num_instances(), 0);
        assert!(seg.labels.as_slice().iter().all(|&l| l == 0));
    }

    #[test]
    fn four_pixel_example_splits_in_two() {
        let seg = seed_segmentation(&four_pixel(1.0), 0.5).unwrap();
        assert_eq!(seg.labels.as_slice(), &[1, 1, 2, 2]);
        assert_eq!(seg.seeds, vec![(0, 0), (0, 2)]);
        assert!((seg.scores[0] - 0.5).abs() < 1e-15);
        assert!((seg.scores[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn large_radius_merges_everything() {
        let seg = seed_segmentation(&four_pixel(3.0), 0.5).unwrap();
        assert_eq!(seg.labels.as_slice(), &[1, 1, 1, 1]);
        assert_eq!(seg.num_instances(), 1);
    }

    #[test]
    fn zero_radius_still_terminates() {
        let mut p = four_pixel(0.0);
        p.xi_hat.set(0, 1, 0, 0.5);
        let seg = seed_segmentation(&p, 0.5).unwrap();
        // Pixel 3 shares pixel 2's feature, everything else is a singleton.
        assert_eq!(seg.labels.as_slice(), &[1, 3, 2, 2]);
    }

    #[test]
    fn seed_ties_prefer_smaller_index() {
        let mut p = Prediction::zeros(2, 2);
        p.mask_prob.as_mut_slice().fill(1.0);
        p.eta_hat.as_mut_slice().fill(0.7);
        for (i, x) in [0.0, 5.0, 10.0, 15.0].iter().enumerate() {
            p.xi_hat.at_mut(i)[0] = *x;
        }
        let seg = seed_segmentation(&p, 0.5).unwrap();
        assert_eq!(seg.seeds, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
    }

    #[test]
    fn single_instance_refinement_is_identity() {
        let seg = seed_segmentation(&four_pixel(3.0), 0.5).unwrap();
        let (refined, stats) = gmm_refine(&seg, &four_pixel(3.0)).unwrap();
        assert_eq!(refined, seg);
        assert_eq!(stats.reassigned, 0);
    }

    #[test]
    fn well_separated_clusters_are_a_fixed_point() {
        let pred = four_pixel(1.0);
        let seg = seed_segmentation(&pred, 0.5).unwrap();
        let (refined, stats) = gmm_refine(&seg, &pred).unwrap();
        assert_eq!(refined.labels, seg.labels);
        assert_eq!(stats, RefineStats::default());
    }

    /// Diagonal-covariance log density, written out independently of the
    /// Cholesky path.
    fn diag_log_density(x: &[f64], pts: &[[f64; 9]], weight: f64) -> f64 {
        let n = pts.len() as f64;
        let mut ld = weight.ln();
        for d in 0..9 {
            let mean = pts.iter().map(|p| p[d]).sum::<f64>() / n;
            let var = pts.iter().map(|p| (p[d] - mean).powi(2)).sum::<f64>() / n
                + COVARIANCE_REGULARIZATION;
            ld += -0.5 * ((2.0 * std::f64::consts::PI).ln() + var.ln())
                - 0.5 * (x[d] - mean).powi(2) / var;
        }
        ld
    }

    #[test]
    fn mis_seeded_pixel_moves_to_nearer_component() {
        let at = |x: f64, y: f64| {
            let mut v = [0.0; 9];
            v[0] = x;
            v[1] = y;
            v
        };
        // Cluster A: a cross around the origin plus the stray point.
        // Cluster B: a cross around (1, 0). Both covariances are diagonal.
        let a = [
            at(-0.1, 0.0),
            at(0.1, 0.0),
            at(0.0, -0.1),
            at(0.0, 0.1),
            at(0.9, 0.0),
        ];
        let b = [at(0.9, 0.0), at(1.1, 0.0), at(1.0, -0.1), at(1.0, 0.1)];
        let stray = at(0.9, 0.0);

        let mut pred = Prediction::zeros(1, 9);
        pred.mask_prob.as_mut_slice().fill(1.0);
        pred.eta_hat.as_mut_slice().fill(0.5);
        let mut labels = Grid::<u32>::zeros(1, 9, 1);
        for (i, p) in a.iter().chain(b.iter()).enumerate() {
            pred.xi_hat.at_mut(i).copy_from_slice(p);
            labels.as_mut_slice()[i] = if i < a.len() { 1 } else { 2 };
        }
        let seg = Segmentation {
            labels,
            scores: vec![0.5, 0.5],
            seeds: vec![(0, 0), (0, 5)],
        };

        let under_a = diag_log_density(&stray, &a, 5.0 / 9.0);
        let under_b = diag_log_density(&stray, &b, 4.0 / 9.0);
        assert!(under_b > under_a, "oracle: {under_b} vs {under_a}");

        let (refined, stats) = gmm_refine(&seg, &pred).unwrap();
        assert_eq!(refined.labels.value(4), 2);
        assert_eq!(stats.reassigned, 1);
        assert!((0..4).all(|i| refined.labels.value(i) == 1));
        assert!((5..9).all(|i| refined.labels.value(i) == 2));
        assert_eq!(stats.spherical_fallbacks, 0);
    }

    #[test]
    fn component_density_matches_diagonal_oracle() {
        let pts: Vec<[f64; 9]> = (0..12)
            .map(|i| {
                let mut v = [0.0; 9];
                v[i % 9] = 0.1 * (i as f64 - 5.0);
                v[(i + 4) % 9] = 0.05 * i as f64;
                v
            })
            .collect();
        let vecs: Vec<Vec9> = pts.iter().map(|p| Vec9::from_column_slice(p)).collect();
        let mut stats = RefineStats::default();
        let comp = Component::fit(&vecs, 0.25, &mut stats);
        // Cross-check against an explicit inverse and determinant.
        let n = pts.len() as f64;
        let mean = vecs.iter().fold(Vec9::zeros(), |a, p| a + p) / n;
        let mut cov = Mat9::zeros();
        for p in &vecs {
            cov += (p - mean) * (p - mean).transpose();
        }
        cov = cov / n + Mat9::identity() * COVARIANCE_REGULARIZATION;
        let x = Vec9::from_element(0.03);
        let d = x - mean;
        let maha = (d.transpose() * cov.try_inverse().unwrap() * d)[(0, 0)];
        let expected = 0.25f64.ln()
            - 0.5 * (9.0 * (2.0 * std::f64::consts::PI).ln() + cov.determinant().ln())
            - 0.5 * maha;
        assert!(
            (comp
                .log_density_above(&x, f64::NEG_INFINITY, false)
                .unwrap()
                - expected)
                .abs()
                < 1e-6 * expected.abs().max(1.0)
        );
    }

    #[test]
    fn dropped_instances_are_recompacted() {
        // Instances 1 and 2 have identical means and covariances, so every pixel
        // of 2 prefers the heavier component 1. Instance 3 is far away.
        let xs: Vec<f64> = (0..12)
            .map(|i| if i % 2 == 0 { -1.0 } else { 1.0 })
            .chain([50.0, 50.2])
            .collect();
        let mut pred = Prediction::zeros(1, xs.len());
        pred.mask_prob.as_mut_slice().fill(1.0);
        pred.eta_hat.as_mut_slice().fill(0.5);
        for (i, x) in xs.iter().enumerate() {
            pred.xi_hat.at_mut(i)[0] = *x;
        }
        let mut labels = vec![1u32; 10];
        labels.extend([2, 2, 3, 3]);
        let seg = Segmentation {
            labels: Grid::from_vec(1, 14, 1, labels).unwrap(),
            scores: vec![0.5; 3],
            seeds: vec![(0, 0), (0, 10), (0, 12)],
        };
        let (refined, stats) = gmm_refine(&seg, &pred).unwrap();
        let mut expected = vec![1u32; 12];
        expected.extend([2, 2]);
        assert_eq!(refined.labels.as_slice(), &expected[..]);
        assert_eq!(refined.seeds, vec![(0, 0), (0, 12)]);
        assert_eq!(refined.scores, vec![0.5, 0.5]);
        assert_eq!(
            stats,
            RefineStats {
                spherical_fallbacks: 0,
                reassigned: 2,
                dropped: 1
            }
        );
    }

    #[test]
    fn shape_and_range_validation() {
        let mut p = four_pixel(1.0);
        p.eta_hat.as_mut_slice()[0] = 1.5;
        assert!(matches!(
            seed_segmentation(&p, 0.5),
            Err(ClusteringError::OutOfRange {
                name: "eta_hat",
                ..
            })
        ));
        let mut p = four_pixel(1.0);
        p.b_hat = Grid::zeros(2, 2, 1);
        assert!(matches!(
            seed_segmentation(&p, 0.5),
            Err(ClusteringError::ShapeMismatch { .. })
        ));
        let mut p = four_pixel(1.0);
        p.xi_hat.as_mut_slice()[0] = f64::NAN;
        assert_eq!(
            seed_segmentation(&p, 0.5),
            Err(ClusteringError::NonFinite("xi_hat"))
        );
    }

    #[test]
    fn pruned_assignment_matches_exhaustive_argmax() {
        use rand::{Rng, SeedableRng};
        for seed in 0..20u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (h, w) = (12, 12);
            let centers: Vec<[f64; 9]> = (0..4)
                .map(|_| std::array::from_fn(|_| rng.random::<f64>()))
                .collect();
            let mut pred = Prediction::zeros(h, w);
            for i in 0..h * w {
                let c = centers[rng.random_range(0..4)];
                for (k, v) in pred.xi_hat.at_mut(i).iter_mut().enumerate() {
                    *v = c[k] + 0.05 * (rng.random::<f64>() - 0.5);
                }
                pred.b_hat.as_mut_slice()[i] = rng.random::<f64>() * 0.08;
                pred.eta_hat.as_mut_slice()[i] = rng.random::<f64>();
                pred.mask_prob.as_mut_slice()[i] = rng.random::<f64>();
            }
            let seeded = seed_segmentation(&pred, 0.3).unwrap();
            let (refined, stats) = gmm_refine(&seeded, &pred).unwrap();

            let members = seeded.members();
            let n_fg = members.iter().map(Vec::len).sum::<usize>() as f64;
            let comps: Vec<Component> = members
                .iter()
                .map(|px| {
                    let pts: Vec<Vec9> = px.iter().map(|&i| feature_at(&pred, i)).collect();
                    Component::fit(&pts, px.len() as f64 / n_fg, &mut RefineStats::default())
                })
                .collect();
            let mut naive = seeded.labels.clone();
            let mut reassigned = 0;
            for p in members.iter().flatten().copied() {
                let x = feature_at(&pred, p);
                let mut best = (f64::NEG_INFINITY, 0);
                for (m, c) in comps.iter().enumerate() {
                    let ld = c.log_density_above(&x, f64::NEG_INFINITY, true).unwrap();
                    if ld > best.0 {
                        best = (ld, m);
                    }
                }
                let label = best.1 as u32 + 1;
                reassigned += usize::from(label != seeded.labels.value(p));
                naive.as_mut_slice()[p] = label;
            }
            assert!(seeded.num_instances() > 4, "seed {seed}");
            assert!(same_partition(&refined.labels, &naive), "seed {seed}");
            assert_eq!(stats.reassigned, reassigned, "seed {seed}");
        }
    }
}
