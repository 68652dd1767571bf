//! Trainable parameter containers.
//!
//! [`Params`] is generic over the leaf type so the same layout describes plain
//! tensors ([`GilParameters`]) and their handles on a tape ([`ParamVars`]).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Architecture, Encoder, Readout, Weighting};
use crate::autodiff::{Tape, Var};
use crate::tensor::Tensor;

/// One Chebyshev convolution: a `d_in × d_out` coefficient matrix per order
/// plus a `1 × d_out` bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ChebLayerParams<T> {
    pub coeffs: Vec<T>,
    pub bias: T,
}

/// Output head. The relation head is one affine map over
/// `[aggregate | query]`, stored as its two row blocks.
#[derive(Clone, Debug, PartialEq)]
pub enum Head<T> {
    Relation { w_agg: T, w_query: T, bias: T },
    Linear { weight: T, bias: T },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub layers: Vec<ChebLayerParams<T>>,
    /// `[w1, b1, w2, b2, w3, b3]` of the reachability weigher, or empty when
    /// the architecture does not learn weights.
    pub phi_w: Vec<T>,
    pub head: Head<T>,
}

pub type GilParameters = Params<Tensor>;
pub type ParamVars = Params<Var>;

impl<T> Params<T> {
    /// Every block in declaration order: layers, weigher, head.
    pub fn blocks(&self) -> Vec<&T> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend(layer.coeffs.iter());
            out.push(&layer.bias);
        }
        out.extend(self.phi_w.iter());
        match &self.head {
            Head::Relation {
                w_agg,
                w_query,
                bias,
            } => out.extend([w_agg, w_query, bias]),
            Head::Linear { weight, bias } => out.extend([weight, bias]),
        }
        out
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks().len()
    }

    /// Same layout with every block transformed by `f`.
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Params<U> {
        let mut values = self.blocks().into_iter().map(&mut f).collect::<Vec<_>>().into_iter();
        self.rebuild(&mut values)
    }

    /// Fallible variant of [`Params::map`].
    pub fn try_map<U, E>(&self, f: impl FnMut(&T) -> Result<U, E>) -> Result<Params<U>, E> {
        let values = self.blocks().into_iter().map(f).collect::<Result<Vec<_>, E>>()?;
        Ok(self.rebuild(&mut values.into_iter()))
    }

    /// Same layout filled from `values` in declaration order.
    pub fn with_blocks<U>(&self, values: Vec<U>) -> Params<U> {
        assert_eq!(values.len(), self.num_blocks(), "block count mismatch");
        self.rebuild(&mut values.into_iter())
    }

    fn rebuild<U>(&self, values: &mut impl Iterator<Item = U>) -> Params<U> {
        let mut next = || values.next().expect("layout and values agree");
        let layers = self
            .layers
            .iter()
            .map(|l| ChebLayerParams {
                coeffs: l.coeffs.iter().map(|_| next()).collect(),
                bias: next(),
            })
            .collect();
        let phi_w = self.phi_w.iter().map(|_| next()).collect();
        let head = match &self.head {
            Head::Relation { .. } => Head::Relation {
                w_agg: next(),
                w_query: next(),
                bias: next(),
            },
            Head::Linear { .. } => Head::Linear {
                weight: next(),
                bias: next(),
            },
        };
        Params {
            layers,
            phi_w,
            head,
        }
    }
}

impl GilParameters {
    /// Glorot-uniform weights and zero biases, drawn from a seeded stream.
    pub fn init(arch: &Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut glorot = |rows: usize, cols: usize| {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| rng.random_range(-limit..=limit))
                .collect();
            Tensor::from_vec(rows, cols, data)
        };
        let mut layers = Vec::new();
        if let Encoder::Chebyshev { widths, order, .. } = &arch.encoder {
            let mut d_in = arch.feature_dim;
            for &d_out in widths {
                layers.push(ChebLayerParams {
                    coeffs: (0..*order).map(|_| glorot(d_in, d_out)).collect(),
                    bias: Tensor::zeros(1, d_out),
                });
                d_in = d_out;
            }
        }
        let phi_w = match arch.readout {
            Readout::Relation(Weighting::Reachability) => {
                let h = arch.phi_w_hidden;
                vec![
                    glorot(arch.steps, h),
                    Tensor::zeros(1, h),
                    glorot(h, h),
                    Tensor::zeros(1, h),
                    glorot(h, 1),
                    Tensor::zeros(1, 1),
                ]
            }
            _ => Vec::new(),
        };
        let e = arch.embedding_dim();
        let c = arch.num_classes;
        let head = match arch.readout {
            Readout::Relation(_) => {
                // Both blocks share the fan-in of the full `2e → C` map.
                let limit = (6.0 / (2 * e + c) as f64).sqrt();
                let mut draw = |rows: usize| {
                    let data = (0..rows * c)
                        .map(|_| rng.random_range(-limit..=limit))
                        .collect();
                    Tensor::from_vec(rows, c, data)
                };
                Head::Relation {
                    w_agg: draw(e),
                    w_query: draw(e),
                    bias: Tensor::zeros(1, c),
                }
            }
            Readout::Linear => Head::Linear {
                weight: glorot(e, c),
                bias: Tensor::zeros(1, c),
            },
        };
        Params {
            layers,
            phi_w,
            head,
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.blocks().iter().map(|t| t.len()).sum()
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.blocks().iter().map(|t| t.shape()).collect()
    }

    /// Records every block as a differentiable leaf.
    pub fn leaves(&self, tape: &mut Tape) -> ParamVars {
        self.map(|t| tape.leaf(t.clone()))
    }

    /// Records every block as a constant.
    pub fn constants(&self, tape: &mut Tape) -> ParamVars {
        self.map(|t| tape.constant(t.clone()))
    }

    /// `self − step · grads`, block by block.
    pub fn sgd_step(&self, grads: &[Tensor], step: f64) -> Self {
        let blocks = self.blocks();
        assert_eq!(blocks.len(), grads.len());
        let updated = blocks
            .iter()
            .zip(grads)
            .map(|(p, g)| p.zip_map(g, |a, b| a - step * b))
            .collect();
        self.with_blocks(updated)
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|t| t.is_finite())
    }
}

impl ParamVars {
    pub fn values(&self, tape: &Tape) -> GilParameters {
        self.map(|&v| tape.value(v).clone())
    }
}
