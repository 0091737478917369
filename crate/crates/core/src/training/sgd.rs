use ndarray::{ArrayD, Zip};

/// SGD with heavy-ball momentum and coupled L2 weight decay:
/// `g ← g + wd·θ; v ← μ·v + g; θ ← θ − lr·v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<ArrayD<f32>>,
}

impl Sgd {
    pub fn new(params: &[ArrayD<f32>], momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum: momentum as f32,
            weight_decay: weight_decay as f32,
            velocity: params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
        }
    }

    pub fn with_velocity(mut self, velocity: Vec<ArrayD<f32>>) -> Self {
        self.velocity = velocity;
        self
    }

    pub fn velocity(&self) -> &[ArrayD<f32>] {
        &self.velocity
    }

    pub fn step(&mut self, params: &mut [ArrayD<f32>], grads: &[ArrayD<f32>], lr: f64) {
        let lr = lr as f32;
        let (mu, wd) = (self.momentum, self.weight_decay);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            Zip::from(p).and(g).and(v).for_each(|p, &g, v| {
                *v = mu * *v + (g + wd * *p);
                *p -= lr * *v;
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn matches_hand_unrolled_updates() {
        let mut params = vec![arr1(&[1.0f32, -2.0]).into_dyn()];
        let mut sgd = Sgd::new(&params, 0.5, 0.1);
        let g = vec![arr1(&[0.5f32, 0.0]).into_dyn()];
        sgd.step(&mut params, &g, 0.1);
        // v = 0.5 + 0.1·1 = 0.6, θ = 1 − 0.06
        assert!((params[0][0] - 0.94).abs() < 1e-6);
        assert!((params[0][1] - (-2.0 + 0.1 * 0.2)).abs() < 1e-6);
        sgd.step(&mut params, &g, 0.1);
        let v = 0.5 * 0.6 + 0.5 + 0.1 * 0.94;
        assert!((params[0][0] - (0.94 - 0.1 * v)).abs() < 1e-6);
    }
}
