use super::{join, Mode, Module, Param, ParamRefs, ParamRefsMut};
use crate::tensor::{Scalar, Tensor};

const EPS: f64 = 1e-5;
const MOMENTUM: f64 = 0.1;

/// Per-channel batch normalisation over `(batch, height, width)`.
///
/// Running statistics follow the usual exponential average with unbiased variance.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    cache: Option<BnCache<T>>,
}

#[derive(Clone, Debug)]
struct BnCache<T> {
    x_hat: Tensor<T>,
    inv_std: Vec<T>,
    mode: Mode,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(vec![channels], vec![T::one(); channels]),
            beta: Param::new(vec![channels], vec![T::zero(); channels]),
            running_mean: Param::buffer(vec![channels], vec![T::zero(); channels]),
            running_var: Param::buffer(vec![channels], vec![T::one(); channels]),
            cache: None,
        }
    }

    pub fn forward(&mut self, mut x: Tensor<T>, mode: Mode) -> Tensor<T> {
        let [n, c, _, _] = x.shape();
        assert_eq!(c, self.gamma.len(), "batch-norm channel mismatch");
        let plane = x.plane_len();
        let count = n * plane;
        let mut inv_std = Vec::with_capacity(c);
        for ch in 0..c {
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut sum = 0.0f64;
                    for b in 0..n {
                        sum += x.plane(b, ch).iter().map(|v| v.to_f64().unwrap()).sum::<f64>();
                    }
                    let mean = sum / count as f64;
                    let mut sq = 0.0f64;
                    for b in 0..n {
                        sq += x
                            .plane(b, ch)
                            .iter()
                            .map(|v| {
                                let d = v.to_f64().unwrap() - mean;
                                d * d
                            })
                            .sum::<f64>();
                    }
                    let var = sq / count as f64;
                    let unbiased = if count > 1 { sq / (count - 1) as f64 } else { var };
                    let rm = self.running_mean.value[ch].to_f64().unwrap();
                    let rv = self.running_var.value[ch].to_f64().unwrap();
                    self.running_mean.value[ch] = T::lit((1.0 - MOMENTUM) * rm + MOMENTUM * mean);
                    self.running_var.value[ch] = T::lit((1.0 - MOMENTUM) * rv + MOMENTUM * unbiased);
                    (T::lit(mean), T::lit(var))
                }
                Mode::Eval => (self.running_mean.value[ch], self.running_var.value[ch]),
            };
            let istd = T::one() / (var + T::lit(EPS)).sqrt();
            inv_std.push(istd);
            for b in 0..n {
                for v in x.plane_mut(b, ch) {
                    *v = (*v - mean) * istd;
                }
            }
        }
        let x_hat = x.clone();
        for ch in 0..c {
            let (g, bt) = (self.gamma.value[ch], self.beta.value[ch]);
            for b in 0..n {
                for v in x.plane_mut(b, ch) {
                    *v = *v * g + bt;
                }
            }
        }
        self.cache = Some(BnCache {
            x_hat,
            inv_std,
            mode,
        });
        x
    }

    pub fn backward(&mut self, mut dy: Tensor<T>) -> Tensor<T> {
        let cache = self.cache.as_ref().expect("batch-norm backward before forward");
        let [n, c, _, _] = dy.shape();
        let count = T::from_usize(n * dy.plane_len()).unwrap();
        for ch in 0..c {
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for b in 0..n {
                for (g, xh) in dy.plane(b, ch).iter().zip(cache.x_hat.plane(b, ch)) {
                    sum_dy = sum_dy + *g;
                    sum_dy_xhat = sum_dy_xhat + *g * *xh;
                }
            }
            self.gamma.grad[ch] = self.gamma.grad[ch] + sum_dy_xhat;
            self.beta.grad[ch] = self.beta.grad[ch] + sum_dy;
            let scale = self.gamma.value[ch] * cache.inv_std[ch];
            match cache.mode {
                Mode::Eval => {
                    for b in 0..n {
                        for g in dy.plane_mut(b, ch) {
                            *g = *g * scale;
                        }
                    }
                }
                Mode::Train => {
                    let mean_dy = sum_dy / count;
                    let mean_dy_xhat = sum_dy_xhat / count;
                    for b in 0..n {
                        let xh = cache.x_hat.plane(b, ch);
                        for (g, &xv) in dy.plane_mut(b, ch).iter_mut().zip(xh) {
                            *g = scale * (*g - mean_dy - xv * mean_dy_xhat);
                        }
                    }
                }
            }
        }
        dy
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, T>) {
        out.push((join(prefix, "gamma"), &self.gamma));
        out.push((join(prefix, "beta"), &self.beta));
        out.push((join(prefix, "running_mean"), &self.running_mean));
        out.push((join(prefix, "running_var"), &self.running_var));
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamRefsMut<'a, T>) {
        out.push((join(prefix, "gamma"), &mut self.gamma));
        out.push((join(prefix, "beta"), &mut self.beta));
        out.push((join(prefix, "running_mean"), &mut self.running_mean));
        out.push((join(prefix, "running_var"), &mut self.running_var));
    }
}
