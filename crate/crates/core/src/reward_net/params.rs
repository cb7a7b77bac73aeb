/// A flat view over named parameter tensors, shared by the reward network,
/// the policy and the optimizer.
pub trait ParamSet {
    fn tensor_names(&self) -> Vec<String>;
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn shapes(&self) -> Vec<usize> {
        self.tensors().iter().map(|t| t.len()).collect()
    }

    fn num_params(&self) -> usize {
        self.shapes().iter().sum()
    }
}

/// Gradient tensors laid out like the owning [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &impl ParamSet) -> Self {
        Gradients {
            tensors: params.shapes().into_iter().map(|n| vec![0.0; n]).collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.tensors
            .iter_mut()
            .flatten()
            .for_each(|g| *g *= factor);
    }

    pub fn add_scaled(&mut self, other: &Gradients, factor: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += factor * y);
        }
    }

    pub fn flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.tensors.iter().flatten().copied()
    }

    pub fn max_abs(&self) -> f64 {
        self.flat().fold(0.0, |m, g| m.max(g.abs()))
    }
}
