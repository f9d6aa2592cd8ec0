//! Projector MLP and the frame-level feature mixer.

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SalmError;
use crate::nn::{self, Linear, LEAKY_SLOPE};

/// Two-layer perceptron with a LeakyReLU hidden layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projector {
    pub hidden: Linear,
    pub output: Linear,
}

#[derive(Debug, Clone)]
pub struct ProjectorCache {
    pub pre: Array2<f64>,
    pub act: Array2<f64>,
    pub output: Array2<f64>,
}

impl Projector {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Projector {
        Projector { hidden: Linear::zeros(input, hidden), output: Linear::zeros(hidden, output) }
    }

    pub fn random<R: Rng>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Projector {
        Projector { hidden: Linear::random(input, hidden, rng), output: Linear::random(hidden, output, rng) }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<ProjectorCache, SalmError> {
        if x.ncols() != self.hidden.input_dim() {
            return Err(SalmError::ShapeMismatch(format!(
                "projector input width {} vs {}",
                x.ncols(),
                self.hidden.input_dim()
            )));
        }
        let pre = self.hidden.forward(x);
        let act = nn::leaky_relu_mat(&pre, LEAKY_SLOPE);
        let output = self.output.forward(act.view());
        Ok(ProjectorCache { pre, act, output })
    }

    /// Accumulates gradients and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<f64>, cache: &ProjectorCache, dy: &Array2<f64>, grad: &mut Projector) -> Array2<f64> {
        let d_act = self.output.backward(cache.act.view(), dy, &mut grad.output);
        let d_pre = nn::leaky_relu_backward(&cache.pre, &d_act, LEAKY_SLOPE);
        self.hidden.backward(x, &d_pre, &mut grad.hidden)
    }
}

pub fn project(projector: &Projector, attended: ArrayView2<f64>) -> Result<Array2<f64>, SalmError> {
    Ok(projector.forward(attended)?.output)
}

/// Mixer input: row `i` is the token mean of frame `i` followed by the query
/// mean of `fp`.
pub fn pooled_inputs(fp: ArrayView2<f64>, fv: ArrayView2<f64>, n_frames: usize) -> Result<Array2<f64>, SalmError> {
    if n_frames == 0 || !fv.nrows().is_multiple_of(n_frames) || fv.nrows() == 0 || fp.nrows() == 0 {
        return Err(SalmError::ShapeMismatch(format!(
            "{} visual tokens do not split into {n_frames} frames",
            fv.nrows()
        )));
    }
    let per = fv.nrows() / n_frames;
    let frames: Vec<Array2<f64>> =
        (0..n_frames).map(|i| nn::mean_rows(fv.slice(ndarray::s![i * per..(i + 1) * per, ..]))).collect();
    let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
    let frame_means = concatenate(Axis(0), &views).expect("equal widths");
    let query_mean = nn::mean_rows(fp);
    let broadcast = query_mean.broadcast((n_frames, fp.ncols())).expect("row broadcast").to_owned();
    Ok(concatenate(Axis(1), &[frame_means.view(), broadcast.view()]).expect("equal heights"))
}

/// Frame-level features `N × C`: pooled inputs through the mixer.
pub fn mix_and_pool(mixer: &Linear, fp: ArrayView2<f64>, fv: ArrayView2<f64>, n_frames: usize) -> Result<Array2<f64>, SalmError> {
    let input = pooled_inputs(fp, fv, n_frames)?;
    if input.ncols() != mixer.input_dim() {
        return Err(SalmError::ShapeMismatch(format!(
            "mixer input width {} vs {}",
            input.ncols(),
            mixer.input_dim()
        )));
    }
    Ok(mixer.forward(input.view()))
}

/// Backward of [`mix_and_pool`] with respect to the mixer and `fp`. The
/// visual tokens come from the frozen encoder and get no gradient.
pub fn mix_and_pool_backward(
    mixer: &Linear,
    input: &Array2<f64>,
    dz: &Array2<f64>,
    fp_shape: (usize, usize),
    grad: &mut Linear,
) -> Array2<f64> {
    let (n_queries, width) = fp_shape;
    let d_input = mixer.backward(input.view(), dz, grad);
    let fv_width = input.ncols() - width;
    let d_query_mean = d_input.slice(ndarray::s![.., fv_width..]).sum_axis(Axis(0));
    let per_query = d_query_mean.mapv(|g| g / n_queries as f64);
    per_query.insert_axis(Axis(0)).broadcast((n_queries, width)).expect("broadcast").to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_input_gives_bias_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = Projector::random(4, 6, 3, &mut rng);
        p.hidden.bias = nn::gaussian((1, 6), 1.0, &mut rng);
        p.output.bias = nn::gaussian((1, 3), 1.0, &mut rng);
        let out = project(&p, Array2::zeros((2, 4)).view()).unwrap();
        let expect = nn::leaky_relu_mat(&p.hidden.bias, LEAKY_SLOPE).dot(&p.output.weight) + &p.output.bias;
        for row in out.rows() {
            assert_eq!(row, expect.row(0));
        }
    }

    #[test]
    fn identity_config_passes_through() {
        let mut p = Projector::zeros(3, 3, 3);
        p.hidden.weight = Array2::eye(3);
        p.output.weight = Array2::eye(3);
        let x = ndarray::array![[0.5, 2.0, 0.0], [1.0, 3.5, 7.25]];
        assert_eq!(project(&p, x.view()).unwrap(), x);
    }

    #[test]
    fn matches_matrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = Projector::random(5, 7, 4, &mut rng);
        p.hidden.bias = nn::gaussian((1, 7), 1.0, &mut rng);
        let x = nn::gaussian((8, 5), 1.0, &mut rng);
        let out = project(&p, x.view()).unwrap();
        for i in 0..8 {
            let mut h = [0.0; 7];
            for (j, hj) in h.iter_mut().enumerate() {
                let mut s = p.hidden.bias[[0, j]];
                for k in 0..5 {
                    s += x[[i, k]] * p.hidden.weight[[k, j]];
                }
                *hj = if s < 0.0 { 0.01 * s } else { s };
            }
            for o in 0..4 {
                let mut s = p.output.bias[[0, o]];
                for (j, hj) in h.iter().enumerate() {
                    s += hj * p.output.weight[[j, o]];
                }
                assert!((s - out[[i, o]]).abs() < 1e-12);
            }
        }
        assert!(project(&p, Array2::zeros((1, 4)).view()).is_err());
    }

    #[test]
    fn constant_inputs_give_identical_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mixer = Linear::random(6, 5, &mut rng);
        let fv = Array2::from_elem((16, 4), 0.7);
        let fp = Array2::from_elem((3, 2), -1.5);
        let z = mix_and_pool(&mixer, fp.view(), fv.view(), 8).unwrap();
        for i in 1..8 {
            assert_eq!(z.row(i), z.row(0));
        }
    }

    #[test]
    fn identity_mixer_gives_concatenated_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut mixer = Linear::zeros(5, 5);
        mixer.weight = Array2::eye(5);
        let fv = nn::gaussian((4, 3), 1.0, &mut rng);
        let fp = nn::gaussian((3, 2), 1.0, &mut rng);
        let z = mix_and_pool(&mixer, fp.view(), fv.view(), 2).unwrap();
        for i in 0..2 {
            for c in 0..3 {
                let m = (fv[[2 * i, c]] + fv[[2 * i + 1, c]]) / 2.0;
                assert!((z[[i, c]] - m).abs() < 1e-15);
            }
            for c in 0..2 {
                let m = (fp[[0, c]] + fp[[1, c]] + fp[[2, c]]) / 3.0;
                assert!((z[[i, 3 + c]] - m).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn mixer_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut mixer = Linear::random(7, 4, &mut rng);
        mixer.bias = nn::gaussian((1, 4), 1.0, &mut rng);
        let fv = nn::gaussian((12, 4), 1.0, &mut rng);
        let fp = nn::gaussian((5, 3), 1.0, &mut rng);
        let z = mix_and_pool(&mixer, fp.view(), fv.view(), 4).unwrap();
        for i in 0..4 {
            let mut cat = [0.0; 7];
            for t in 0..3 {
                for c in 0..4 {
                    cat[c] += fv[[i * 3 + t, c]] / 3.0;
                }
            }
            for q in 0..5 {
                for c in 0..3 {
                    cat[4 + c] += fp[[q, c]] / 5.0;
                }
            }
            for o in 0..4 {
                let s: f64 = mixer.bias[[0, o]] + (0..7).map(|k| cat[k] * mixer.weight[[k, o]]).sum::<f64>();
                assert!((s - z[[i, o]]).abs() < 1e-12);
            }
        }
        assert!(mix_and_pool(&mixer, fp.view(), fv.view(), 5).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = Projector::random(3, 5, 4, &mut rng);
        let mixer = Linear::random(6, 3, &mut rng);
        let x = nn::gaussian((4, 3), 1.0, &mut rng);
        let fv = nn::gaussian((6, 2), 1.0, &mut rng);
        let c = nn::gaussian((3, 3), 1.0, &mut rng);
        let loss = |x: &Array2<f64>| {
            let fp = project(&p, x.view()).unwrap();
            (mix_and_pool(&mixer, fp.view(), fv.view(), 3).unwrap() * &c).sum()
        };
        let cache = p.forward(x.view()).unwrap();
        let input = pooled_inputs(cache.output.view(), fv.view(), 3).unwrap();
        let mut gm = Linear::zeros(6, 3);
        let dfp = mix_and_pool_backward(&mixer, &input, &c, (4, 4), &mut gm);
        let mut gp = Projector::zeros(3, 5, 4);
        let dx = p.backward(x.view(), &cache, &dfp, &mut gp);
        let eps = 1e-6;
        for i in 0..4 {
            for j in 0..3 {
                let (mut a, mut b) = (x.clone(), x.clone());
                a[[i, j]] += eps;
                b[[i, j]] -= eps;
                let fd = (loss(&a) - loss(&b)) / (2.0 * eps);
                assert!((fd - dx[[i, j]]).abs() < 1e-7 * (1.0 + fd.abs()), "{fd} vs {}", dx[[i, j]]);
            }
        }
    }
}
