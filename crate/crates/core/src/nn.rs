//! Layers and parameter plumbing shared by the models.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Models expose their tensors in a fixed order. `named_params` and
/// `params_mut` must list the same tensors in the same order.
pub trait Parameters {
    fn named_params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    /// Replace every tensor from `(name, tensor)` entries; names and dims
    /// must match exactly.
    fn load_named(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        let names: Vec<(String, Vec<usize>)> =
            self.named_params().into_iter().map(|(n, t)| (n, t.dims().to_vec())).collect();
        let mut sources = Vec::with_capacity(names.len());
        for (name, dims) in &names {
            let src = entries
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Validation(format!("missing tensor `{name}`")))?;
            if src.1.dims() != dims.as_slice() {
                return Err(Error::Validation(format!(
                    "tensor `{name}` has dims {:?}, expected {dims:?}",
                    src.1.dims()
                )));
            }
            sources.push(&src.1);
        }
        if entries.len() != names.len() {
            return Err(Error::Validation(format!(
                "expected {} tensors, found {}",
                names.len(),
                entries.len()
            )));
        }
        for (dst, src) in self.params_mut().into_iter().zip(sources) {
            *dst = src.clone();
        }
        Ok(())
    }

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Dense layer `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        Self {
            weight: Tensor::glorot(&[inputs, outputs], inputs, outputs, rng),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { weight: Tensor::zeros(&[inputs, outputs]), bias: Tensor::zeros(&[outputs]) }
    }

    pub fn inputs(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<LinearVars> {
        let (weight, bias) = if trainable {
            (g.param(self.weight.clone())?, g.param(self.bias.clone())?)
        } else {
            (g.constant(self.weight.clone())?, g.constant(self.bias.clone())?)
        };
        Ok(LinearVars { weight, bias })
    }

    pub fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

impl LinearVars {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = g.matmul(x, self.weight)?;
        g.add_bias(h, self.bias)
    }

    pub fn vars(&self) -> [Var; 2] {
        [self.weight, self.bias]
    }
}

/// Stack of [`Linear`] layers with `tanh` between them (not after the last).
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

#[derive(Clone, Debug)]
pub struct MlpVars {
    pub layers: Vec<LinearVars>,
}

impl Mlp {
    /// `widths = [in, hidden.., out]`.
    pub fn new(widths: &[usize], rng: &mut Rng) -> Self {
        Self { layers: widths.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect() }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn outputs(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<MlpVars> {
        let layers = self.layers.iter().map(|l| l.bind(g, trainable)).collect::<Result<_>>()?;
        Ok(MlpVars { layers })
    }

    pub fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.named(&format!("{prefix}.{i}"), out);
        }
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        for l in &mut self.layers {
            l.params_mut(out);
        }
    }
}

impl MlpVars {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, h)?;
            if i + 1 < self.layers.len() {
                h = g.tanh(h)?;
            }
        }
        Ok(h)
    }

    pub fn collect(&self, out: &mut Vec<Var>) {
        for l in &self.layers {
            out.extend(l.vars());
        }
    }
}

/// Pull gradients for `vars` (in order) out of a backward pass.
pub fn take_grads(grads: &mut Gradients, vars: &[Var]) -> Vec<Tensor> {
    vars.iter().map(|v| grads.take(*v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glorot_bounds() {
        let mut rng = Rng::new(0);
        let l = Linear::new(10, 20, &mut rng);
        let a = libm::sqrtf(6.0 / 30.0);
        assert!(l.weight.data().iter().all(|w| w.abs() <= a));
        assert!(l.bias.data().iter().all(|b| *b == 0.0));
    }

    #[test]
    fn mlp_shapes() {
        let mut rng = Rng::new(0);
        let m = Mlp::new(&[4, 8, 3], &mut rng);
        let mut g = Graph::new();
        let vars = m.bind(&mut g, true).unwrap();
        let x = g.constant(Tensor::zeros(&[5, 4])).unwrap();
        let y = vars.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y).dims(), &[5, 3]);
    }
}
