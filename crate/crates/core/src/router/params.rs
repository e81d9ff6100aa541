use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const NUM_RELATIONS: usize = 4;
pub const NUM_KINDS: usize = 3;

/// Architecture shape; fixes every tensor dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamShape {
    pub input_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub categories: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// Per relation, `hidden × hidden`.
    pub message: Vec<Array2<f64>>,
    /// One gate scalar per relation.
    pub gate: Array1<f64>,
    /// Per node kind, `hidden × 2·hidden` acting on `[h_v ‖ merged]`.
    pub update: Vec<Array2<f64>>,
    pub update_bias: Vec<Array1<f64>>,
    pub norm_scale: Vec<Array1<f64>>,
    pub norm_shift: Vec<Array1<f64>>,
}

/// Every learnable tensor of the router. Also used to hold gradients and
/// optimizer moments, which share the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterParams {
    pub shape: ParamShape,
    /// Per node kind, `hidden × input_dim`.
    pub input_proj: Vec<Array2<f64>>,
    pub input_bias: Vec<Array1<f64>>,
    pub layers: Vec<LayerParams>,
    /// Scoring perceptron: `hidden × 2·hidden`, then `hidden → 1`.
    pub score_hidden: Array2<f64>,
    pub score_hidden_bias: Array1<f64>,
    pub score_out: Array1<f64>,
    /// Question-type head, `categories × hidden`.
    pub aux_weight: Array2<f64>,
    pub aux_bias: Array1<f64>,
}

fn kind_name(k: usize) -> &'static str {
    match k {
        0 => "query",
        1 => "agent",
        _ => "entity",
    }
}

fn rel_name(r: usize) -> &'static str {
    match r {
        0 => "query_entity",
        1 => "entity_entity",
        2 => "agent_entity",
        _ => "query_agent",
    }
}

impl RouterParams {
    pub fn zeros(shape: &ParamShape) -> Self {
        let (d, h, c) = (shape.input_dim, shape.hidden, shape.categories.len());
        let layer = || LayerParams {
            message: (0..NUM_RELATIONS).map(|_| Array2::zeros((h, h))).collect(),
            gate: Array1::zeros(NUM_RELATIONS),
            update: (0..NUM_KINDS).map(|_| Array2::zeros((h, 2 * h))).collect(),
            update_bias: (0..NUM_KINDS).map(|_| Array1::zeros(h)).collect(),
            norm_scale: (0..NUM_KINDS).map(|_| Array1::zeros(h)).collect(),
            norm_shift: (0..NUM_KINDS).map(|_| Array1::zeros(h)).collect(),
        };
        Self {
            shape: shape.clone(),
            input_proj: (0..NUM_KINDS).map(|_| Array2::zeros((h, d))).collect(),
            input_bias: (0..NUM_KINDS).map(|_| Array1::zeros(h)).collect(),
            layers: (0..shape.layers).map(|_| layer()).collect(),
            score_hidden: Array2::zeros((h, 2 * h)),
            score_hidden_bias: Array1::zeros(h),
            score_out: Array1::zeros(h),
            aux_weight: Array2::zeros((c, h)),
            aux_bias: Array1::zeros(c),
        }
    }

    /// Uniform fan-in initialization; gates and norm scales start at 1.
    pub fn init(shape: &ParamShape, seed: u64) -> Self {
        let mut p = Self::zeros(shape);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fill = |a: &mut Array2<f64>, rng: &mut ChaCha8Rng| {
            let bound = 1.0 / (a.ncols() as f64).sqrt();
            a.mapv_inplace(|_| rng.random_range(-bound..bound));
        };
        for w in &mut p.input_proj {
            fill(w, &mut rng);
        }
        for layer in &mut p.layers {
            for w in &mut layer.message {
                fill(w, &mut rng);
            }
            layer.gate.fill(1.0);
            for w in &mut layer.update {
                fill(w, &mut rng);
            }
            for s in &mut layer.norm_scale {
                s.fill(1.0);
            }
        }
        fill(&mut p.score_hidden, &mut rng);
        let bound = 1.0 / (shape.hidden as f64).sqrt();
        p.score_out.mapv_inplace(|_| rng.random_range(-bound..bound));
        fill(&mut p.aux_weight, &mut rng);
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape)
    }

    /// Named views of every tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        for k in 0..NUM_KINDS {
            out.push((format!("input_proj.{}", kind_name(k)), self.input_proj[k].view().into_dyn()));
            out.push((format!("input_bias.{}", kind_name(k)), self.input_bias[k].view().into_dyn()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            for r in 0..NUM_RELATIONS {
                out.push((format!("layer{l}.message.{}", rel_name(r)), layer.message[r].view().into_dyn()));
            }
            out.push((format!("layer{l}.gate"), layer.gate.view().into_dyn()));
            for k in 0..NUM_KINDS {
                let kn = kind_name(k);
                out.push((format!("layer{l}.update.{kn}"), layer.update[k].view().into_dyn()));
                out.push((format!("layer{l}.update_bias.{kn}"), layer.update_bias[k].view().into_dyn()));
                out.push((format!("layer{l}.norm_scale.{kn}"), layer.norm_scale[k].view().into_dyn()));
                out.push((format!("layer{l}.norm_shift.{kn}"), layer.norm_shift[k].view().into_dyn()));
            }
        }
        out.push(("score.hidden".into(), self.score_hidden.view().into_dyn()));
        out.push(("score.hidden_bias".into(), self.score_hidden_bias.view().into_dyn()));
        out.push(("score.out".into(), self.score_out.view().into_dyn()));
        out.push(("aux.weight".into(), self.aux_weight.view().into_dyn()));
        out.push(("aux.bias".into(), self.aux_bias.view().into_dyn()));
        out
    }

    /// Mutable counterpart of [`RouterParams::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let names: Vec<String> = self.tensors().into_iter().map(|(n, _)| n).collect();
        let mut views: Vec<ArrayViewMutD<'_, f64>> = Vec::new();
        for (w, b) in self.input_proj.iter_mut().zip(self.input_bias.iter_mut()) {
            views.push(w.view_mut().into_dyn());
            views.push(b.view_mut().into_dyn());
        }
        for layer in &mut self.layers {
            for m in &mut layer.message {
                views.push(m.view_mut().into_dyn());
            }
            views.push(layer.gate.view_mut().into_dyn());
            let LayerParams {
                update,
                update_bias,
                norm_scale,
                norm_shift,
                ..
            } = layer;
            for (((u, b), s), t) in update
                .iter_mut()
                .zip(update_bias.iter_mut())
                .zip(norm_scale.iter_mut())
                .zip(norm_shift.iter_mut())
            {
                views.push(u.view_mut().into_dyn());
                views.push(b.view_mut().into_dyn());
                views.push(s.view_mut().into_dyn());
                views.push(t.view_mut().into_dyn());
            }
        }
        views.push(self.score_hidden.view_mut().into_dyn());
        views.push(self.score_hidden_bias.view_mut().into_dyn());
        views.push(self.score_out.view_mut().into_dyn());
        views.push(self.aux_weight.view_mut().into_dyn());
        views.push(self.aux_bias.view_mut().into_dyn());
        names.into_iter().zip(views).collect()
    }

    /// Sets every entry to zero in place, keeping the allocations.
    pub fn zero_out(&mut self) {
        for (_, mut t) in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for (_, t) in self.tensors() {
            out.extend(t.iter().copied());
        }
        out
    }

    pub fn copy_from_flat(&mut self, flat: &[f64]) {
        let mut i = 0;
        for (_, mut t) in self.tensors_mut() {
            for x in t.iter_mut() {
                *x = flat[i];
                i += 1;
            }
        }
        assert_eq!(i, flat.len(), "flat parameter vector length mismatch");
    }

    /// Name of the first tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<String> {
        self.tensors()
            .into_iter()
            .find(|(_, t)| match t.as_slice() {
                Some(xs) => !xs.iter().all(|x| x.is_finite()),
                None => t.iter().any(|x| !x.is_finite()),
            })
            .map(|(n, _)| n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> ParamShape {
        ParamShape {
            input_dim: 8,
            hidden: 4,
            layers: 2,
            categories: vec!["a".into(), "b".into()],
        }
    }

    #[test]
    fn flat_round_trip_and_counts() {
        let p = RouterParams::init(&shape(), 7);
        let flat = p.to_flat();
        assert_eq!(flat.len(), p.parameter_count());
        let mut q = p.zeros_like();
        q.copy_from_flat(&flat);
        assert_eq!(p, q);
        let names: Vec<_> = p.tensors().into_iter().map(|(n, _)| n).collect();
        let names_mut: Vec<_> = q.tensors_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, names_mut);
        assert!(p.first_non_finite().is_none());
        assert!(p.layers.iter().all(|l| l.gate.iter().all(|&g| g == 1.0)));
    }

    #[test]
    fn init_is_seeded() {
        assert_eq!(RouterParams::init(&shape(), 1), RouterParams::init(&shape(), 1));
        assert_ne!(RouterParams::init(&shape(), 1), RouterParams::init(&shape(), 2));
    }
}
