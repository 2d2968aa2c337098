//! Constant-velocity Kalman filter over (cx, cy, aspect, h).
//!
//! State is the 8-vector [cx, cy, a, h, vx, vy, va, vh] in grid cells with
//! a = w/h; the measurement is the first four components. Noise scales are
//! tied to the box height, the SORT-lineage convention.

use nalgebra::{SMatrix, SVector};

use crate::error::{Error, Result};
use crate::types::BBox;

const STD_WEIGHT_POSITION: f64 = 1.0 / 20.0;
const STD_WEIGHT_VELOCITY: f64 = 1.0 / 160.0;
const MIN_HEIGHT: f64 = 1e-6;

type Vec8 = SVector<f64, 8>;
type Mat8 = SMatrix<f64, 8, 8>;
type Vec4 = SVector<f64, 4>;
type Mat4 = SMatrix<f64, 4, 4>;
type Mat4x8 = SMatrix<f64, 4, 8>;

/// Gaussian state estimate for one track.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    mean: Vec8,
    covariance: Mat8,
}

impl KalmanState {
    pub fn mean(&self) -> &Vec8 {
        &self.mean
    }

    pub fn covariance(&self) -> &Mat8 {
        &self.covariance
    }

    /// Project the state onto a box.
    pub fn bbox(&self) -> BBox {
        let h = self.mean[3].max(MIN_HEIGHT);
        let w = (self.mean[2] * h).max(MIN_HEIGHT);
        BBox {
            cx: self.mean[0],
            cy: self.mean[1],
            w,
            h,
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.mean[0], self.mean[1])
    }
}

fn transition() -> Mat8 {
    let mut f = Mat8::identity();
    for i in 0..4 {
        f[(i, i + 4)] = 1.0;
    }
    f
}

fn measurement_matrix() -> Mat4x8 {
    let mut h = Mat4x8::zeros();
    for i in 0..4 {
        h[(i, i)] = 1.0;
    }
    h
}

fn measurement_of(b: &BBox) -> Vec4 {
    Vec4::new(b.cx, b.cy, b.w / b.h, b.h)
}

/// Initialize a state from a box: zero velocities, diagonal covariance with
/// position std 2·h/20 and velocity std 10·h/160.
pub fn init(b: &BBox) -> KalmanState {
    let h = b.h;
    let mean = Vec8::from([b.cx, b.cy, b.w / b.h, b.h, 0.0, 0.0, 0.0, 0.0]);
    let std = [
        2.0 * STD_WEIGHT_POSITION * h,
        2.0 * STD_WEIGHT_POSITION * h,
        1e-2,
        2.0 * STD_WEIGHT_POSITION * h,
        10.0 * STD_WEIGHT_VELOCITY * h,
        10.0 * STD_WEIGHT_VELOCITY * h,
        1e-5,
        10.0 * STD_WEIGHT_VELOCITY * h,
    ];
    let mut covariance = Mat8::zeros();
    for (i, s) in std.iter().enumerate() {
        covariance[(i, i)] = s * s;
    }
    KalmanState { mean, covariance }
}

/// One constant-velocity step (unit time).
pub fn predict(s: &KalmanState) -> KalmanState {
    let f = transition();
    let h = s.mean[3].max(MIN_HEIGHT);
    let std = [
        STD_WEIGHT_POSITION * h,
        STD_WEIGHT_POSITION * h,
        1e-2,
        STD_WEIGHT_POSITION * h,
        STD_WEIGHT_VELOCITY * h,
        STD_WEIGHT_VELOCITY * h,
        1e-5,
        STD_WEIGHT_VELOCITY * h,
    ];
    let mut q = Mat8::zeros();
    for (i, sd) in std.iter().enumerate() {
        q[(i, i)] = sd * sd;
    }
    let mean = f * s.mean;
    let covariance = f * s.covariance * f.transpose() + q;
    KalmanState { mean, covariance }
}

/// Measurement update against an observed box. Uses the Joseph form so the
/// posterior covariance stays symmetric PSD under roundoff.
pub fn update(s: &KalmanState, z: &BBox) -> Result<KalmanState> {
    let hm = measurement_matrix();
    let h = s.mean[3].max(MIN_HEIGHT);
    let std = [
        STD_WEIGHT_POSITION * h,
        STD_WEIGHT_POSITION * h,
        1e-1,
        STD_WEIGHT_POSITION * h,
    ];
    let mut r = Mat4::zeros();
    for (i, sd) in std.iter().enumerate() {
        r[(i, i)] = sd * sd;
    }

    let projected_mean = hm * s.mean;
    let projected_cov = hm * s.covariance * hm.transpose() + r;
    let chol = projected_cov
        .cholesky()
        .ok_or(Error::SingularInnovation)?;
    // K = P Hᵀ S⁻¹, via S Kᵀ = H Pᵀ
    let kt = chol.solve(&(hm * s.covariance.transpose()));
    let gain = kt.transpose();

    let innovation = measurement_of(z) - projected_mean;
    let mut mean = s.mean + gain * innovation;
    mean[3] = mean[3].max(MIN_HEIGHT);

    let ikh = Mat8::identity() - gain * hm;
    let covariance = ikh * s.covariance * ikh.transpose() + gain * r * gain.transpose();
    Ok(KalmanState { mean, covariance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn bbox(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox::new(cx, cy, w, h).unwrap()
    }

    /// Independent 2-state (position, velocity) Kalman recursion over a single
    /// axis, with the same noise scales as the 8-state filter. The cx/vx block
    /// of the full filter is exactly this system, so the two must agree.
    struct ScalarKf {
        mean: [f64; 2],
        cov: [[f64; 2]; 2],
        h: f64,
    }

    impl ScalarKf {
        fn init(cx: f64, box_h: f64) -> Self {
            let sp = 2.0 * STD_WEIGHT_POSITION * box_h;
            let sv = 10.0 * STD_WEIGHT_VELOCITY * box_h;
            ScalarKf {
                mean: [cx, 0.0],
                cov: [[sp * sp, 0.0], [0.0, sv * sv]],
                h: box_h,
            }
        }

        fn predict(&mut self) {
            let [p, v] = self.mean;
            self.mean = [p + v, v];
            let c = self.cov;
            let qp = (STD_WEIGHT_POSITION * self.h).powi(2);
            let qv = (STD_WEIGHT_VELOCITY * self.h).powi(2);
            // F C Fᵀ + Q with F = [[1,1],[0,1]]
            self.cov = [
                [c[0][0] + c[0][1] + c[1][0] + c[1][1] + qp, c[0][1] + c[1][1]],
                [c[1][0] + c[1][1], c[1][1] + qv],
            ];
        }

        fn update(&mut self, z: f64) {
            let r = (STD_WEIGHT_POSITION * self.h).powi(2);
            let s = self.cov[0][0] + r;
            let k = [self.cov[0][0] / s, self.cov[1][0] / s];
            let innov = z - self.mean[0];
            self.mean = [self.mean[0] + k[0] * innov, self.mean[1] + k[1] * innov];
            let c = self.cov;
            // Joseph form for the 2-state system
            let a = [[1.0 - k[0], 0.0], [-k[1], 1.0]];
            let mut acat = [[0.0; 2]; 2];
            for i in 0..2 {
                for j in 0..2 {
                    let mut acc = 0.0;
                    for m in 0..2 {
                        for n in 0..2 {
                            acc += a[i][m] * c[m][n] * a[j][n];
                        }
                    }
                    acat[i][j] = acc;
                }
            }
            acat[0][0] += k[0] * r * k[0];
            acat[0][1] += k[0] * r * k[1];
            acat[1][0] += k[1] * r * k[0];
            acat[1][1] += k[1] * r * k[1];
            self.cov = acat;
        }
    }

    #[test]
    fn init_mean_matches_definition() {
        let s = init(&bbox(10.0, 10.0, 4.0, 8.0));
        let m = s.mean();
        assert_eq!(m.as_slice(), &[10.0, 10.0, 0.5, 8.0, 0.0, 0.0, 0.0, 0.0]);

        let s0 = init(&bbox(0.5, 0.5, 1.0, 1.0));
        assert_eq!(s0.center(), (0.5, 0.5));
        assert_eq!(&s0.mean().as_slice()[4..], &[0.0; 4]);
    }

    #[test]
    fn init_covariance_is_symmetric_positive_diagonal() {
        let s = init(&bbox(3.0, 4.0, 5.0, 10.0));
        let c = s.covariance();
        assert_eq!(c, &c.transpose());
        for i in 0..8 {
            assert!(c[(i, i)] > 0.0);
        }
    }

    #[test]
    fn predict_advances_center_by_velocity() {
        let mut s = init(&bbox(10.0, 10.0, 4.0, 8.0));
        s.mean[4] = 1.0;
        let p = predict(&s);
        assert_eq!(p.center(), (11.0, 10.0));

        let still = predict(&init(&bbox(7.0, 3.0, 2.0, 2.0)));
        assert_eq!(still.center(), (7.0, 3.0));
    }

    #[test]
    fn predict_inflates_covariance() {
        let s = init(&bbox(10.0, 10.0, 4.0, 8.0));
        let f = transition();
        let propagated = f * s.covariance * f.transpose();
        let p = predict(&s);
        assert!(p.covariance().trace() >= propagated.trace());
    }

    #[test]
    fn zero_innovation_leaves_position_unchanged() {
        let s = predict(&init(&bbox(10.0, 10.0, 4.0, 8.0)));
        let z = s.bbox();
        let u = update(&s, &z).unwrap();
        assert!((u.mean()[0] - s.mean()[0]).abs() < 1e-12);
        assert!((u.mean()[1] - s.mean()[1]).abs() < 1e-12);
    }

    #[test]
    fn update_contracts_position_variance() {
        let s = predict(&init(&bbox(10.0, 10.0, 4.0, 8.0)));
        let u = update(&s, &bbox(10.5, 9.5, 4.0, 8.0)).unwrap();
        for i in 0..4 {
            assert!(u.covariance()[(i, i)] <= s.covariance()[(i, i)]);
        }
    }

    #[test]
    fn stationary_box_converges_and_matches_scalar_oracle() {
        let truth = bbox(20.0, 15.0, 4.0, 8.0);
        let mut s = init(&truth);
        let mut oracle = ScalarKf::init(20.0, 8.0);
        for _ in 0..10 {
            s = predict(&s);
            oracle.predict();
            s = update(&s, &truth).unwrap();
            oracle.update(20.0);
            assert!((s.mean()[0] - oracle.mean[0]).abs() < 1e-9);
            assert!((s.covariance()[(0, 0)] - oracle.cov[0][0]).abs() < 1e-9);
        }
        assert!((s.mean()[0] - 20.0).abs() < 0.1);
        assert!((s.mean()[1] - 15.0).abs() < 0.1);
    }

    #[test]
    fn constant_velocity_prediction_error_converges() {
        // Object moving at fixed velocity, noiseless measurements. After a
        // burn-in the one-step prediction must land within 0.05 cells of the
        // least-squares line fit through the observed centers.
        let (x0, vx) = (5.0, 0.7);
        let mut s = init(&bbox(x0, 10.0, 4.0, 8.0));
        let mut xs: Vec<f64> = vec![x0];
        let mut prediction_err = f64::MAX;
        for t in 1..=20 {
            s = predict(&s);
            let x_true = x0 + vx * t as f64;
            prediction_err = (s.mean()[0] - x_true).abs();
            s = update(&s, &bbox(x_true, 10.0, 4.0, 8.0)).unwrap();
            xs.push(x_true);
        }
        // Brute-force least-squares line fit over the measurements.
        let n = xs.len() as f64;
        let sum_t: f64 = (0..xs.len()).map(|t| t as f64).sum();
        let sum_x: f64 = xs.iter().sum();
        let sum_tt: f64 = (0..xs.len()).map(|t| (t * t) as f64).sum();
        let sum_tx: f64 = xs.iter().enumerate().map(|(t, x)| t as f64 * x).sum();
        let slope = (n * sum_tx - sum_t * sum_x) / (n * sum_tt - sum_t * sum_t);
        let intercept = (sum_x - slope * sum_t) / n;
        let next = slope * xs.len() as f64 + intercept;
        assert!((slope - vx).abs() < 1e-9);
        assert!(prediction_err < 0.05, "prediction error {prediction_err}");
        assert!((s.mean()[0] + s.mean()[4] - next).abs() < 0.05);
    }

    #[test]
    fn covariance_stays_symmetric_psd_over_random_cycles() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mut s = init(&bbox(50.0, 50.0, 6.0, 12.0));
        for _ in 0..1000 {
            s = predict(&s);
            let z = bbox(
                50.0 + rng.random_range(-5.0..5.0),
                50.0 + rng.random_range(-5.0..5.0),
                (6.0 + rng.random_range(-2.0f64..2.0)).max(0.5),
                (12.0 + rng.random_range(-3.0f64..3.0)).max(0.5),
            );
            s = update(&s, &z).unwrap();
            let c = s.covariance();
            let asym = (c - c.transpose()).abs().max();
            assert!(asym < 1e-9, "asymmetry {asym}");
            let eig = c.symmetric_eigenvalues();
            assert!(eig.min() > -1e-6, "min eigenvalue {}", eig.min());
            assert!(s.mean()[3] > 0.0);
        }
    }
}
