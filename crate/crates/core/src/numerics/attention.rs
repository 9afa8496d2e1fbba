use std::sync::Arc;

use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// Query/key/value/output projections of one attention block, as tape handles.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Eager projection weights, each `[d, d]`.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

/// Output of the attention block and its head-averaged attention map `[Lq, Lk]`.
pub struct Attended {
    pub output: Var,
    pub map: Tensor,
}

/// Scaled dot-product attention with `heads` heads. Keys where `key_mask` is
/// false receive exactly zero weight.
pub fn multi_head_attention(
    g: &mut Graph,
    query: Var,
    key: Var,
    value: Var,
    key_mask: &Arc<[bool]>,
    w: &AttentionVars,
    heads: usize,
) -> Result<Attended> {
    let d = g.value(query).cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::dim("multi_head_attention", format!("d={d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = g.matmul(query, w.wq)?;
    let k = g.matmul(key, w.wk)?;
    let v = g.matmul(value, w.wv)?;

    let (lq, lk) = (g.value(q).rows(), g.value(k).rows());
    let mut map = Tensor::zeros(&[lq, lk]);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let probs = g.masked_softmax(scores, Arc::clone(key_mask))?;
        map.add_assign(g.value(probs));
        outs.push(g.matmul(probs, vh)?);
    }
    let joined = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    let output = g.matmul(joined, w.wo)?;
    let map = map.map(|p| p / heads as f64);
    Ok(Attended { output, map })
}

/// Eager wrapper around [`multi_head_attention`].
pub fn attention(
    query: &Tensor,
    key: &Tensor,
    value: &Tensor,
    key_mask: &[bool],
    weights: &AttentionWeights,
    heads: usize,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let (q, k, v) = (g.constant(query.clone()), g.constant(key.clone()), g.constant(value.clone()));
    let w = AttentionVars {
        wq: g.constant(weights.wq.clone()),
        wk: g.constant(weights.wk.clone()),
        wv: g.constant(weights.wv.clone()),
        wo: g.constant(weights.wo.clone()),
    };
    let mask: Arc<[bool]> = key_mask.into();
    let out = multi_head_attention(&mut g, q, k, v, &mask, &w, heads)?;
    Ok(g.value(out.output).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::Rng;

    fn random(rng: &mut Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.normal()).collect()).unwrap()
    }

    fn project(x: &Tensor, w: &Tensor) -> Vec<Vec<f64>> {
        (0..x.rows())
            .map(|i| (0..w.cols()).map(|j| (0..x.cols()).map(|k| x.get2(i, k) * w.get2(k, j)).sum()).collect())
            .collect()
    }

    /// Per-head loops straight from the definition.
    fn naive(q: &Tensor, k: &Tensor, v: &Tensor, mask: &[bool], w: &AttentionWeights, heads: usize) -> Vec<Vec<f64>> {
        let d = q.cols();
        let dh = d / heads;
        let (qp, kp, vp) = (project(q, &w.wq), project(k, &w.wk), project(v, &w.wv));
        let mut concat = vec![vec![0.0; d]; q.rows()];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..q.rows() {
                let scores: Vec<f64> = (0..k.rows())
                    .map(|j| cols.clone().map(|c| qp[i][c] * kp[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let max = (0..k.rows()).filter(|&j| mask[j]).map(|j| scores[j]).fold(f64::MIN, f64::max);
                let e: Vec<f64> = (0..k.rows()).map(|j| if mask[j] { (scores[j] - max).exp() } else { 0.0 }).collect();
                let z: f64 = e.iter().sum();
                for c in cols.clone() {
                    concat[i][c] = (0..k.rows()).map(|j| e[j] / z * vp[j][c]).sum();
                }
            }
        }
        project(&Tensor::from_rows(&concat).unwrap(), &w.wo)
    }

    fn weights(rng: &mut Rng, d: usize) -> AttentionWeights {
        AttentionWeights { wq: random(rng, d, d), wk: random(rng, d, d), wv: random(rng, d, d), wo: random(rng, d, d) }
    }

    #[test]
    fn matches_naive_per_head_oracle() {
        let mut rng = Rng::new(11);
        let d = 4;
        let (q, k, v) = (random(&mut rng, 2, d), random(&mut rng, 3, d), random(&mut rng, 3, d));
        let w = weights(&mut rng, d);
        for mask in [[true, true, true], [true, false, true], [false, false, true]] {
            let got = attention(&q, &k, &v, &mask, &w, 2).unwrap();
            let want = Tensor::from_rows(&naive(&q, &k, &v, &mask, &w, 2)).unwrap();
            assert!(got.max_abs_diff(&want) <= 1e-10, "{mask:?}");
        }
    }

    #[test]
    fn zero_queries_give_the_mean_value() {
        let mut rng = Rng::new(2);
        let d = 4;
        let w = AttentionWeights {
            wq: Tensor::zeros(&[d, d]),
            wk: Tensor::zeros(&[d, d]),
            wv: Tensor::identity(d),
            wo: Tensor::identity(d),
        };
        let (q, v) = (random(&mut rng, 2, d), random(&mut rng, 3, d));
        let out = attention(&q, &v, &v, &[true; 3], &w, 2).unwrap();
        for i in 0..2 {
            for c in 0..d {
                let mean = (0..3).map(|j| v.get2(j, c)).sum::<f64>() / 3.0;
                assert!((out.get2(i, c) - mean).abs() < 1e-12);
            }
        }

        // A single valid key is copied to every query row.
        let out = attention(&q, &v, &v, &[false, true, false], &w, 2).unwrap();
        for i in 0..2 {
            assert!(out.row(i).iter().zip(v.row(1)).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn masked_keys_receive_no_weight() {
        let mut rng = Rng::new(5);
        let d = 4;
        let w = weights(&mut rng, d);
        let mut g = Graph::new();
        let q = g.constant(random(&mut rng, 3, d));
        let k = g.constant(random(&mut rng, 4, d));
        let vars = AttentionVars {
            wq: g.constant(w.wq.clone()),
            wk: g.constant(w.wk.clone()),
            wv: g.constant(w.wv.clone()),
            wo: g.constant(w.wo.clone()),
        };
        let mask: Arc<[bool]> = Arc::from([true, false, true, false]);
        let out = multi_head_attention(&mut g, q, k, k, &mask, &vars, 2).unwrap();
        for i in 0..3 {
            let row = out.map.row(i);
            assert_eq!((row[1], row[3]), (0.0, 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(matches!(
            multi_head_attention(&mut g, q, k, k, &mask, &vars, 3),
            Err(Error::Dimension { .. })
        ));
    }
}
