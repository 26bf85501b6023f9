//! Multinomial logistic regression on standardized features, used as a
//! linear probe.

/// Softmax-regression classifier with per-feature standardization.
#[derive(Clone, Debug)]
pub struct LogisticProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    weights: Vec<f64>,
    bias: Vec<f64>,
    n_classes: usize,
}

const ITERATIONS: usize = 500;
const LEARNING_RATE: f64 = 0.5;
const L2: f64 = 1e-3;

impl LogisticProbe {
    /// Full-batch gradient descent from zero weights; deterministic.
    pub fn fit(features: &[Vec<f64>], labels: &[usize], n_classes: usize) -> Self {
        assert!(!features.is_empty() && features.len() == labels.len(), "probe: bad training set");
        let p = features[0].len();
        let n = features.len() as f64;
        let mut mean = vec![0.0; p];
        for f in features {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v / n;
            }
        }
        let mut scale = vec![0.0; p];
        for f in features {
            for j in 0..p {
                scale[j] += (f[j] - mean[j]).powi(2) / n;
            }
        }
        for s in &mut scale {
            *s = if *s > 1e-12 { 1.0 / s.sqrt() } else { 0.0 };
        }
        let xs: Vec<Vec<f64>> = features.iter().map(|f| f.iter().enumerate().map(|(j, v)| (v - mean[j]) * scale[j]).collect()).collect();

        let mut probe = Self { mean, scale, weights: vec![0.0; p * n_classes], bias: vec![0.0; n_classes], n_classes };
        let mut gw = vec![0.0; p * n_classes];
        let mut gb = vec![0.0; n_classes];
        for _ in 0..ITERATIONS {
            gw.iter_mut().for_each(|g| *g = 0.0);
            gb.iter_mut().for_each(|g| *g = 0.0);
            for (x, &y) in xs.iter().zip(labels) {
                let probs = probe.probs_standardized(x);
                for c in 0..n_classes {
                    let err = probs[c] - if c == y { 1.0 } else { 0.0 };
                    gb[c] += err / n;
                    for j in 0..p {
                        gw[j * n_classes + c] += err * x[j] / n;
                    }
                }
            }
            for (w, g) in probe.weights.iter_mut().zip(&gw) {
                *w -= LEARNING_RATE * (g + L2 * *w);
            }
            for (b, g) in probe.bias.iter_mut().zip(&gb) {
                *b -= LEARNING_RATE * g;
            }
        }
        probe
    }

    fn probs_standardized(&self, x: &[f64]) -> Vec<f64> {
        let mut logits = self.bias.clone();
        for (j, v) in x.iter().enumerate() {
            for c in 0..self.n_classes {
                logits[c] += self.weights[j * self.n_classes + c] * v;
            }
        }
        crate::numerics::softmax(&logits)
    }

    pub fn predict(&self, features: &[f64]) -> usize {
        let x: Vec<f64> = features.iter().enumerate().map(|(j, v)| (v - self.mean[j]) * self.scale[j]).collect();
        let probs = self.probs_standardized(&x);
        (0..self.n_classes).max_by(|a, b| probs[*a].total_cmp(&probs[*b])).unwrap_or(0)
    }

    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[usize]) -> f64 {
        let hits = features.iter().zip(labels).filter(|(f, y)| self.predict(f) == **y).count();
        hits as f64 / labels.len().max(1) as f64
    }
}
