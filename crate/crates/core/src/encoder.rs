//! MLP encoder with projection head, kept as a query/key pair.
//!
//! The backbone maps raw features to the representation used by downstream
//! evaluation; the projection head (hidden + output layer) is only used by
//! the contrastive objectives, mirroring the usual practice of discarding it
//! after training. Both the backbone output and the head output are
//! L2-normalized, so every similarity in the crate is a cosine.
//!
//! Two forward paths exist on purpose: [`EncoderParams::embed`] computes
//! plain values (used for key embeddings, queue snapshots, and evaluation),
//! while [`BoundEncoder::embed`] runs the identical kernels through the tape
//! so gradients reach the parameters. Key and queue embeddings never touch
//! the tape's differentiable side, which is what makes "gradients flow only
//! through the query encoder" a structural property.

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tape::{Tape, TensorId};
use crate::tensor::{self, Tensor};

/// Layer widths for backbone and projection head.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    /// Hidden widths of the backbone MLP; may be empty for a linear backbone.
    pub backbone_hidden: Vec<usize>,
    /// Backbone output width (the representation evaluated downstream).
    pub backbone_out: usize,
    /// Projection head hidden width (ReLU in between).
    pub proj_hidden: usize,
    /// Projection head output width (the contrastive embedding).
    pub proj_out: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("backbone_out", self.backbone_out),
            ("proj_hidden", self.proj_hidden),
            ("proj_out", self.proj_out),
        ];
        for (name, d) in dims {
            if d == 0 {
                return Err(Error::contract(format!("encoder {name} must be positive")));
            }
        }
        if self.backbone_hidden.iter().any(|&h| h == 0) {
            return Err(Error::contract("encoder hidden widths must be positive"));
        }
        Ok(())
    }

    /// (in, out) pairs for the backbone layers, in forward order.
    fn backbone_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = self.input_dim;
        for &h in &self.backbone_hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.backbone_out));
        dims
    }

    /// (in, out) pairs for the projection head.
    fn projection_dims(&self) -> Vec<(usize, usize)> {
        vec![
            (self.backbone_out, self.proj_hidden),
            (self.proj_hidden, self.proj_out),
        ]
    }
}

/// One affine layer: weight `[out, in]`, bias `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// All parameters of one encoder (backbone plus projection head).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub backbone: Vec<LinearLayer>,
    pub projection: Vec<LinearLayer>,
}

/// Query/key encoder pair with the key-side momentum coefficient.
#[derive(Debug, Clone)]
pub struct EncoderPair {
    pub query: EncoderParams,
    pub key: EncoderParams,
    /// Momentum m in `key <- m * key + (1 - m) * query`; in [0, 1].
    /// m = 1 freezes the key encoder exactly, m = 0 copies the query.
    pub momentum: f64,
}

/// Fan-in-scaled symmetric uniform init: W ~ U(-1/sqrt(in), 1/sqrt(in)),
/// biases zero. Weights are drawn row-major, layers in forward order,
/// backbone before head — the draw order is part of the determinism contract.
fn init_layer(in_dim: usize, out_dim: usize, rng: &mut SeededRng) -> LinearLayer {
    let bound = 1.0 / (in_dim as f64).sqrt();
    let weight = Tensor::matrix(
        out_dim,
        in_dim,
        (0..out_dim * in_dim)
            .map(|_| rng.uniform_in(-bound, bound))
            .collect(),
    )
    .expect("init dimensions are consistent");
    LinearLayer {
        weight,
        bias: Tensor::zeros(vec![out_dim]),
    }
}

/// Builds a query/key pair with the key initialized as an exact copy of the
/// query, so the two start from the same point.
pub fn init_pair(config: &EncoderConfig, momentum: f64, rng: &mut SeededRng) -> Result<EncoderPair> {
    config.validate()?;
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::contract(format!(
            "encoder momentum must be in [0, 1], got {momentum}"
        )));
    }
    let backbone = config
        .backbone_dims()
        .into_iter()
        .map(|(i, o)| init_layer(i, o, rng))
        .collect::<Vec<_>>();
    let projection = config
        .projection_dims()
        .into_iter()
        .map(|(i, o)| init_layer(i, o, rng))
        .collect::<Vec<_>>();
    let query = EncoderParams {
        config: config.clone(),
        backbone,
        projection,
    };
    let key = query.clone();
    Ok(EncoderPair { query, key, momentum })
}

impl EncoderParams {
    /// All parameter tensors in canonical order: backbone layers then
    /// projection layers, weight before bias. Every consumer that needs
    /// alignment (optimizer buffers, checkpoints, momentum update, tape
    /// binding) iterates in this order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.backbone
            .iter()
            .chain(self.projection.iter())
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.backbone
            .iter_mut()
            .chain(self.projection.iter_mut())
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Tensors of the backbone only (the part kept for evaluation).
    pub fn backbone_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.backbone
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Untracked embedding: normalized backbone output, or normalized head
    /// output when `include_head`. Uses the same kernels as the tape path.
    pub fn embed(&self, features: &[f64], include_head: bool) -> Result<Vec<f64>> {
        if features.len() != self.config.input_dim {
            return Err(Error::ShapeMismatch {
                context: "EncoderParams::embed",
                expected: format!("{} features", self.config.input_dim),
                got: format!("{}", features.len()),
            });
        }
        let mut cur = features.to_vec();
        let mut next = Vec::new();
        let last = self.backbone.len() - 1;
        for (i, layer) in self.backbone.iter().enumerate() {
            tensor::affine_into(layer.weight.values(), layer.bias.values(), &cur, &mut next);
            std::mem::swap(&mut cur, &mut next);
            if i < last {
                tensor::relu_into(&cur, &mut next);
                std::mem::swap(&mut cur, &mut next);
            }
        }
        if !include_head {
            return tensor::l2_normalize(&cur);
        }
        // Head: affine, ReLU, affine. Input is the raw (unnormalized)
        // backbone output; only the final embedding is normalized.
        let hidden = &self.projection[0];
        tensor::affine_into(hidden.weight.values(), hidden.bias.values(), &cur, &mut next);
        std::mem::swap(&mut cur, &mut next);
        tensor::relu_into(&cur, &mut next);
        std::mem::swap(&mut cur, &mut next);
        let out = &self.projection[1];
        tensor::affine_into(out.weight.values(), out.bias.values(), &cur, &mut next);
        tensor::l2_normalize(&next)
    }

    /// Binds parameters as tape leaves. With `trainable = false` the bound
    /// encoder still computes through the tape but contributes no gradients.
    /// With `include_head = false` only the backbone is bound (finetuning).
    pub fn bind(&self, tape: &mut Tape, trainable: bool, include_head: bool) -> Result<BoundEncoder> {
        let bind_layer = |tape: &mut Tape, l: &LinearLayer| -> Result<(TensorId, TensorId)> {
            let w = tape.leaf(l.weight.shape().to_vec(), l.weight.values().to_vec(), trainable)?;
            let b = tape.leaf(l.bias.shape().to_vec(), l.bias.values().to_vec(), trainable)?;
            Ok((w, b))
        };
        let mut backbone = Vec::with_capacity(self.backbone.len());
        for l in &self.backbone {
            backbone.push(bind_layer(tape, l)?);
        }
        let projection = if include_head {
            let mut p = Vec::with_capacity(self.projection.len());
            for l in &self.projection {
                p.push(bind_layer(tape, l)?);
            }
            Some(p)
        } else {
            None
        };
        Ok(BoundEncoder {
            input_dim: self.config.input_dim,
            backbone,
            projection,
        })
    }
}

/// Encoder parameters bound to a specific tape as leaves.
pub struct BoundEncoder {
    input_dim: usize,
    backbone: Vec<(TensorId, TensorId)>,
    projection: Option<Vec<(TensorId, TensorId)>>,
}

impl BoundEncoder {
    /// Tracked embedding of `features`; mirrors [`EncoderParams::embed`].
    /// Requesting the head on a backbone-only binding is a contract error.
    pub fn embed(&self, tape: &mut Tape, features: &[f64], include_head: bool) -> Result<TensorId> {
        if features.len() != self.input_dim {
            return Err(Error::ShapeMismatch {
                context: "BoundEncoder::embed",
                expected: format!("{} features", self.input_dim),
                got: format!("{}", features.len()),
            });
        }
        let mut cur = tape.vector_leaf(features, false);
        let last = self.backbone.len() - 1;
        for (i, &(w, b)) in self.backbone.iter().enumerate() {
            cur = tape.affine(w, b, cur)?;
            if i < last {
                cur = tape.relu(cur);
            }
        }
        if !include_head {
            return tape.l2_normalize(cur);
        }
        let head = self
            .projection
            .as_ref()
            .ok_or_else(|| Error::contract("embed(include_head) on a backbone-only binding"))?;
        cur = tape.affine(head[0].0, head[0].1, cur)?;
        cur = tape.relu(cur);
        cur = tape.affine(head[1].0, head[1].1, cur)?;
        tape.l2_normalize(cur)
    }

    /// Bound parameter ids in the same canonical order as
    /// [`EncoderParams::tensors`] (restricted to what was bound).
    pub fn param_ids(&self) -> Vec<TensorId> {
        self.backbone
            .iter()
            .chain(self.projection.iter().flatten())
            .flat_map(|&(w, b)| [w, b])
            .collect()
    }
}

/// key <- m * key + (1 - m) * query, elementwise over all parameters.
/// The query side is untouched; this is the only way key parameters move.
pub fn momentum_update(pair: &mut EncoderPair) {
    let m = pair.momentum;
    let query: Vec<&Tensor> = pair.query.tensors();
    let mut key: Vec<&mut Tensor> = pair.key.tensors_mut();
    debug_assert_eq!(query.len(), key.len());
    for (k, q) in key.iter_mut().zip(query) {
        for (kv, qv) in k.values_mut().iter_mut().zip(q.values()) {
            *kv = m * *kv + (1.0 - m) * *qv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            input_dim: 4,
            backbone_hidden: vec![5],
            backbone_out: 3,
            proj_hidden: 6,
            proj_out: 2,
        }
    }

    #[test]
    fn init_is_deterministic_and_key_copies_query() {
        let cfg = tiny_config();
        let mut r1 = SeededRng::new(9);
        let mut r2 = SeededRng::new(9);
        let p1 = init_pair(&cfg, 0.99, &mut r1).unwrap();
        let p2 = init_pair(&cfg, 0.99, &mut r2).unwrap();
        assert_eq!(p1.query, p2.query);
        assert_eq!(p1.query, p1.key);
    }

    #[test]
    fn init_respects_fan_in_bound_and_zero_bias() {
        let cfg = tiny_config();
        let mut rng = SeededRng::new(3);
        let pair = init_pair(&cfg, 0.9, &mut rng).unwrap();
        let first = &pair.query.backbone[0];
        let bound = 1.0 / (cfg.input_dim as f64).sqrt();
        assert!(first.weight.values().iter().all(|w| w.abs() <= bound));
        assert!(first.bias.values().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn invalid_config_and_momentum_are_rejected() {
        let mut cfg = tiny_config();
        cfg.proj_out = 0;
        let mut rng = SeededRng::new(0);
        assert!(init_pair(&cfg, 0.9, &mut rng).is_err());
        assert!(init_pair(&tiny_config(), 1.5, &mut rng).is_err());
        assert!(init_pair(&tiny_config(), -0.1, &mut rng).is_err());
    }

    #[test]
    fn momentum_one_freezes_key_exactly() {
        let mut rng = SeededRng::new(7);
        let mut pair = init_pair(&tiny_config(), 1.0, &mut rng).unwrap();
        for t in pair.query.tensors_mut() {
            for v in t.values_mut() {
                *v += 1.0;
            }
        }
        let before: Vec<Tensor> = pair.key.tensors().into_iter().cloned().collect();
        momentum_update(&mut pair);
        for (after, b) in pair.key.tensors().iter().zip(&before) {
            assert_eq!(after.values(), b.values());
        }
    }

    #[test]
    fn embed_output_is_unit_norm_both_with_and_without_head() {
        let mut rng = SeededRng::new(11);
        let pair = init_pair(&tiny_config(), 0.9, &mut rng).unwrap();
        let x = [0.5, -1.0, 2.0, 0.1];
        let with_head = pair.query.embed(&x, true).unwrap();
        let without = pair.query.embed(&x, false).unwrap();
        assert_eq!(with_head.len(), 2);
        assert_eq!(without.len(), 3);
        assert!((tensor::norm(&with_head) - 1.0).abs() < 1e-9);
        assert!((tensor::norm(&without) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn embed_rejects_wrong_input_width() {
        let mut rng = SeededRng::new(11);
        let pair = init_pair(&tiny_config(), 0.9, &mut rng).unwrap();
        assert!(pair.query.embed(&[1.0, 2.0], true).is_err());
    }

    #[test]
    fn tracked_and_untracked_paths_agree_exactly() {
        let mut rng = SeededRng::new(21);
        let pair = init_pair(&tiny_config(), 0.9, &mut rng).unwrap();
        let x = [0.5, -1.0, 2.0, 0.1];
        for include_head in [true, false] {
            let untracked = pair.query.embed(&x, include_head).unwrap();
            let mut tape = Tape::new();
            let bound = pair.query.bind(&mut tape, true, include_head).unwrap();
            let id = bound.embed(&mut tape, &x, include_head).unwrap();
            assert_eq!(tape.values(id), &untracked[..]);
        }
    }

    #[test]
    fn untracked_embedding_contributes_no_gradient() {
        // An embedding produced by the value path enters the tape as a
        // constant; a loss built on it must not reach any parameter.
        let mut rng = SeededRng::new(5);
        let pair = init_pair(&tiny_config(), 0.9, &mut rng).unwrap();
        let x = [1.0, 0.0, -1.0, 0.5];
        // A different input for the frozen side: with key == query at init,
        // embedding the same x would make the loss gradient exactly radial
        // and the normalization would annihilate it.
        let frozen = pair.key.embed(&[0.2, 1.5, 0.3, -0.8], true).unwrap();

        let mut tape = Tape::new();
        let bound = pair.query.bind(&mut tape, true, true).unwrap();
        let q = bound.embed(&mut tape, &x, true).unwrap();
        let k = tape.vector_leaf(&frozen, false);
        let loss = tape.dot(q, k).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(k).is_none());
        // Parameters do get gradient through the query path.
        let some_param_grad = bound
            .param_ids()
            .iter()
            .any(|&id| tape.grad(id).is_some_and(|g| g.iter().any(|&v| v != 0.0)));
        assert!(some_param_grad);
    }

    #[test]
    fn momentum_update_moves_key_toward_query_and_m_one_would_freeze() {
        let mut rng = SeededRng::new(7);
        let mut pair = init_pair(&tiny_config(), 0.75, &mut rng).unwrap();
        // Nudge the query so the two differ.
        for t in pair.query.tensors_mut() {
            for v in t.values_mut() {
                *v += 0.5;
            }
        }
        let key_before: Vec<Vec<f64>> = pair.key.tensors().iter().map(|t| t.values().to_vec()).collect();
        let query_now: Vec<Vec<f64>> = pair.query.tensors().iter().map(|t| t.values().to_vec()).collect();
        momentum_update(&mut pair);
        for ((k_after, k_before), q) in pair.key.tensors().iter().zip(&key_before).zip(&query_now) {
            for ((&ka, &kb), &qv) in k_after.values().iter().zip(k_before).zip(q) {
                let expected = 0.75 * kb + 0.25 * qv;
                assert_eq!(ka, expected);
            }
        }
    }

    #[test]
    fn momentum_zero_copies_query_exactly() {
        let mut rng = SeededRng::new(7);
        let mut pair = init_pair(&tiny_config(), 0.0, &mut rng).unwrap();
        for t in pair.query.tensors_mut() {
            for v in t.values_mut() {
                *v -= 0.25;
            }
        }
        momentum_update(&mut pair);
        assert_eq!(pair.key, pair.query);
    }

    #[test]
    fn backbone_only_binding_rejects_head_request() {
        let mut rng = SeededRng::new(2);
        let pair = init_pair(&tiny_config(), 0.9, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bound = pair.query.bind(&mut tape, true, false).unwrap();
        let err = bound.embed(&mut tape, &[1.0, 2.0, 3.0, 4.0], true).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
