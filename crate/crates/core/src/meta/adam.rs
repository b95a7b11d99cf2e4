use crate::numcore::Tensor;

/// Adam with one moment pair and step counter per parameter slot, so that
/// different slots may be stepped at different times.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: Vec<i32>,
}

impl Adam {
    pub fn new<'a>(lr: f64, shapes: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = shapes.into_iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            v: m.clone(),
            t: vec![0; m.len()],
            m,
        }
    }

    pub fn step(&mut self, slot: usize, param: &mut Tensor, grad: &Tensor) {
        assert_eq!(param.shape(), grad.shape(), "adam slot {slot}: gradient shape");
        self.t[slot] += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t[slot]);
        let c2 = 1.0 - b2.powi(self.t[slot]);
        let m = self.m[slot].data_mut();
        let v = self.v[slot].data_mut();
        for (((p, g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_the_sign() {
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        let mut adam = Adam::new(0.1, [&p]);
        adam.step(0, &mut p, &Tensor::vector(vec![3.0, -0.5]));
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = Tensor::vector(vec![5.0]);
        let mut adam = Adam::new(0.1, [&p]);
        for _ in 0..500 {
            let g = p.map(|x| 2.0 * (x - 1.0));
            adam.step(0, &mut p, &g);
        }
        assert!((p.data()[0] - 1.0).abs() < 1e-2);
    }
}
