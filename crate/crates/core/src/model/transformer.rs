//! Pre-norm transformer block: masked top-k multi-head attention with
//! an optional per-layer relative-position table (shared across the
//! layer's heads), then a GELU feed-forward, each behind a residual.

use crate::attention::{AttnMask, MultiHeadAttention};
use crate::error::Result;
use crate::position::{RpeMap, RpeTable};
use crate::tensor::{layer_norm_last, Scalar, Tensor};

use super::layers::{trunc_normal, Linear};
use rand_chacha::ChaCha8Rng;

const LN_EPS: f64 = 1e-5;

pub struct TransformerBlock<T: Scalar> {
    pub attn: MultiHeadAttention<T>,
    pub rpe: Option<RpeTable<T>>,
    w1: Linear<T>,
    w2: Linear<T>,
    ln1_gamma: Tensor<T>,
    ln1_beta: Tensor<T>,
    ln2_gamma: Tensor<T>,
    ln2_beta: Tensor<T>,
}

impl<T: Scalar> TransformerBlock<T> {
    pub fn new(
        rng: &mut ChaCha8Rng,
        std: f64,
        d_model: usize,
        heads: usize,
        ffn_ratio: usize,
        rpe_h: Option<usize>,
    ) -> Self {
        let mut proj = || {
            Tensor::param(trunc_normal(rng, std, d_model * d_model), &[d_model, d_model])
        };
        let (wq, wk, wv, wo) = (proj(), proj(), proj(), proj());
        let attn = MultiHeadAttention::new(d_model, heads, wq, wk, wv, wo);
        let d_k = d_model / heads;
        let rpe = rpe_h.map(|h| {
            let side = 2 * h + 1;
            let table = Tensor::param(trunc_normal(rng, std, side * side * d_k), &[side * side, d_k]);
            RpeTable::from_tensor(h, d_k, table)
        });
        TransformerBlock {
            attn,
            rpe,
            w1: Linear::new(rng, std, d_model, ffn_ratio * d_model),
            w2: Linear::new(rng, std, ffn_ratio * d_model, d_model),
            ln1_gamma: Tensor::param(vec![T::ONE; d_model], &[d_model]),
            ln1_beta: Tensor::param(vec![T::ZERO; d_model], &[d_model]),
            ln2_gamma: Tensor::param(vec![T::ONE; d_model], &[d_model]),
            ln2_beta: Tensor::param(vec![T::ZERO; d_model], &[d_model]),
        }
    }

    /// x is [n, d_model]; the RPE map (when the layer has a table) and
    /// mask describe this token sequence.
    pub fn forward(
        &self,
        x: &Tensor<T>,
        map: Option<&RpeMap>,
        mask: Option<&AttnMask>,
        k: Option<usize>,
    ) -> Result<Tensor<T>> {
        let eps = T::from_f64(LN_EPS);
        let rpe = match (&self.rpe, map) {
            (Some(table), Some(m)) => Some((table, m)),
            _ => None,
        };
        let normed = layer_norm_last(x, &self.ln1_gamma, &self.ln1_beta, eps);
        let a = self.attn.forward(&normed, rpe, mask, k)?;
        let x = x.add(&a);
        let normed = layer_norm_last(&x, &self.ln2_gamma, &self.ln2_beta, eps);
        let f = self.w2.forward(&self.w1.forward(&normed).gelu());
        Ok(x.add(&f))
    }

    /// Post-softmax attention weights [heads, n, n] this block applies
    /// on input x; `forward` multiplies exactly these into the values.
    pub fn attention_map(
        &self,
        x: &Tensor<T>,
        map: Option<&RpeMap>,
        mask: Option<&AttnMask>,
        k: Option<usize>,
    ) -> Result<Tensor<T>> {
        let eps = T::from_f64(LN_EPS);
        let rpe = match (&self.rpe, map) {
            (Some(table), Some(m)) => Some((table, m)),
            _ => None,
        };
        let normed = layer_norm_last(x, &self.ln1_gamma, &self.ln1_beta, eps);
        let (logits, _, _) = self.attn.logits(&normed, rpe, mask, k)?;
        Ok(logits.softmax_last())
    }

    pub fn parameters(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        for (name, t) in self.attn.parameters() {
            out.push((format!("{prefix}.attn.{name}"), t));
        }
        if let Some(table) = &self.rpe {
            out.push((format!("{prefix}.rpe.table"), table.table.clone()));
        }
        self.w1.parameters(&format!("{prefix}.ffn.w1"), out);
        self.w2.parameters(&format!("{prefix}.ffn.w2"), out);
        out.push((format!("{prefix}.ln1.gamma"), self.ln1_gamma.clone()));
        out.push((format!("{prefix}.ln1.beta"), self.ln1_beta.clone()));
        out.push((format!("{prefix}.ln2.gamma"), self.ln2_gamma.clone()));
        out.push((format!("{prefix}.ln2.beta"), self.ln2_beta.clone()));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::position::PositionGrid;
    use rand::SeedableRng;

    #[test]
    fn output_shape_equals_input_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let block = TransformerBlock::<f64>::new(&mut rng, 0.02, 12, 3, 4, Some(2));
        let x = Tensor::from_vec((0..72).map(|i| (i as f64) * 0.01).collect(), &[6, 12]);
        let g = PositionGrid::new(2, 3);
        let map = RpeMap::aligned(2, &g);
        let y = block.forward(&x, Some(&map), None, None).unwrap();
        assert_eq!(y.shape(), &[6, 12]);
    }

    #[test]
    fn masked_row_isolation() {
        // with a causal mask, perturbing a later token leaves earlier
        // rows untouched even through two residual sublayers
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = TransformerBlock::<f64>::new(&mut rng, 0.05, 8, 2, 2, None);
        let mask = AttnMask::causal_raster(4);
        let base: Vec<f64> = (0..32).map(|i| (i as f64 * 0.7).sin() * 0.3).collect();
        let y0 = block
            .forward(&Tensor::from_vec(base.clone(), &[4, 8]), None, Some(&mask), None)
            .unwrap()
            .to_vec();
        let mut bumped = base;
        bumped[3 * 8 + 2] += 1.0;
        let y1 = block
            .forward(&Tensor::from_vec(bumped, &[4, 8]), None, Some(&mask), None)
            .unwrap()
            .to_vec();
        for i in 0..3 * 8 {
            assert_eq!(y0[i], y1[i], "row {} changed", i / 8);
        }
        assert!((0..8).any(|j| y0[3 * 8 + j] != y1[3 * 8 + j]));
    }

    #[test]
    fn gradients_reach_all_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let block = TransformerBlock::<f64>::new(&mut rng, 0.05, 8, 2, 2, Some(1));
        let g = PositionGrid::new(2, 2);
        let map = RpeMap::aligned(1, &g);
        let x = Tensor::from_vec((0..32).map(|i| (i as f64 * 0.13).cos()).collect(), &[4, 8])
            .requires_grad(true);
        let y = block.forward(&x, Some(&map), None, None).unwrap();
        y.square().sum_all().backward();
        let mut params = Vec::new();
        block.parameters("b", &mut params);
        assert_eq!(params.len(), 4 + 1 + 4 + 4);
        for (name, p) in params {
            let g = p.grad().unwrap_or_else(|| panic!("{name} missing grad"));
            assert!(g.iter().any(|v| v.abs() > 0.0), "{name} grad all zero");
        }
    }
}
