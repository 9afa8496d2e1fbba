//! Tape-building forward pass.
//!
//! Each sample is run on its padded tensors with explicit masks, so padded
//! rows never influence valid ones. Batch loss is the mean of per-sample
//! weighted cross-entropy.

use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::numerics::{multi_head_attention, AttentionVars, GradMap, Graph, ParamStore, Tensor, Var};

use super::config::ModelConfig;
use super::trace::{BridgeTrace, ForwardTrace, GateStats, RelevanceTrace};

/// Parameter leaves bound to one tape.
pub struct ParamVars {
    vars: HashMap<String, Var>,
    order: Vec<(String, Var)>,
}

impl ParamVars {
    pub fn bind(g: &mut Graph, params: &ParamStore) -> Result<Self> {
        let mut vars = HashMap::with_capacity(params.len());
        let mut order = Vec::with_capacity(params.len());
        for name in params.names() {
            let v = g.param(params.get_arc(name)?);
            vars.insert(name.to_string(), v);
            order.push((name.to_string(), v));
        }
        Ok(Self { vars, order })
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter `{name}` missing for this configuration")))
    }

    fn attention(&self, prefix: &str) -> Result<AttentionVars> {
        Ok(AttentionVars {
            wq: self.get(&format!("{prefix}.wq"))?,
            wk: self.get(&format!("{prefix}.wk"))?,
            wv: self.get(&format!("{prefix}.wv"))?,
            wo: self.get(&format!("{prefix}.wo"))?,
        })
    }

    /// Collects the gradient of every bound parameter, zero where none flowed.
    pub fn gradients(&self, g: &Graph, grads: &crate::numerics::Gradients) -> GradMap {
        self.order
            .iter()
            .map(|(name, v)| {
                let grad = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(g.value(*v).shape()));
                (name.clone(), grad)
            })
            .collect()
    }
}

fn mask_weights(mask: &[bool]) -> Arc<[f64]> {
    mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
}

/// Mean over rows where `mask` is set, as `[1, d]`.
pub fn masked_mean(g: &mut Graph, x: Var, mask: &[bool]) -> Result<Var> {
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::AllMasked { row: 0 });
    }
    let w: Vec<f64> = mask.iter().map(|&m| if m { 1.0 / count as f64 } else { 0.0 }).collect();
    let w = g.constant(Tensor::new(vec![1, mask.len()], w)?);
    g.matmul(w, x)
}

fn valid_rows(t: &Tensor, mask: &[bool]) -> Vec<Vec<f64>> {
    (0..t.rows()).filter(|&i| mask[i]).map(|i| t.row(i).to_vec()).collect()
}

struct Stream<'a> {
    x: Var,
    mask: &'a Arc<[bool]>,
}

/// Gated cross-modal exchange: each stream attends to the other and is fused
/// back through a sigmoid-gated residual and layer norm. Padded query rows are
/// zeroed on the way out.
fn cross_modal_bridge(
    g: &mut Graph,
    pv: &ParamVars,
    cfg: &ModelConfig,
    stage: &str,
    text: Stream<'_>,
    image: Stream<'_>,
) -> Result<(Var, Var, BridgeTrace)> {
    let mut trace = BridgeTrace::default();
    let mut outputs = Vec::with_capacity(2);
    for (name, query, keys) in [("text", &text, &image), ("image", &image, &text)] {
        let p = format!("{stage}.{name}");
        let attn = pv.attention(&format!("{p}.attn"))?;
        let attended = multi_head_attention(g, query.x, keys.x, keys.x, keys.mask, &attn, cfg.heads)?;
        let gate_pre = g.linear(query.x, pv.get(&format!("{p}.gate.w"))?, Some(pv.get(&format!("{p}.gate.b"))?))?;
        let gate = g.sigmoid(gate_pre);
        let gated = g.mul(gate, attended.output)?;
        let resid = g.add(query.x, gated)?;
        let normed = g.layer_norm(resid, pv.get(&format!("{p}.ln.gamma"))?, pv.get(&format!("{p}.ln.beta"))?, cfg.ln_eps)?;
        let out = g.row_scale(normed, mask_weights(query.mask))?;

        let gate_rows = valid_rows(g.value(gate), query.mask);
        let stats = GateStats::from_rows(gate_rows.iter().map(Vec::as_slice));
        let map = valid_rows(&attended.map, query.mask);
        if name == "text" {
            trace.text_gate = stats;
            trace.text_to_image = map;
        } else {
            trace.image_gate = stats;
            trace.image_to_text = map;
        }
        outputs.push(out);
    }
    Ok((outputs[0], outputs[1], trace))
}

/// Conv + selective-scan block with a gated residual. Masked steps are zeroed
/// before mixing and keep their input value on output.
fn sequential_block(g: &mut Graph, pv: &ParamVars, cfg: &ModelConfig, stream: &str, h: Var, mask: &[bool]) -> Result<Var> {
    let p = format!("seq.{stream}");
    let d = cfg.d;
    let w = mask_weights(mask);
    let normed = g.layer_norm(h, pv.get(&format!("{p}.ln.gamma"))?, pv.get(&format!("{p}.ln.beta"))?, cfg.ln_eps)?;
    let proj = g.matmul(normed, pv.get(&format!("{p}.w_in"))?)?;
    let u = g.slice_cols(proj, 0, d)?;
    let z = g.slice_cols(proj, d, d)?;
    let u = g.row_scale(u, Arc::clone(&w))?;
    let conv = g.conv1d(u, pv.get(&format!("{p}.conv"))?)?;
    let u_hat = g.silu(conv);
    let u_hat = g.row_scale(u_hat, Arc::clone(&w))?;

    let dt = g.linear(u_hat, pv.get(&format!("{p}.w_dt"))?, Some(pv.get(&format!("{p}.b_dt"))?))?;
    let delta = g.softplus(dt);
    let b = g.matmul(u_hat, pv.get(&format!("{p}.w_b"))?)?;
    let c = g.matmul(u_hat, pv.get(&format!("{p}.w_c"))?)?;
    let s = g.selective_scan(u_hat, delta, b, c, pv.get(&format!("{p}.a_log"))?, pv.get(&format!("{p}.skip"))?)?;

    let zg = g.silu(z);
    let gated = g.mul(s, zg)?;
    let y = g.matmul(gated, pv.get(&format!("{p}.w_out"))?)?;
    let y = g.row_scale(y, w)?;
    g.add(h, y)
}

struct Fusion {
    fused: Var,
    trace: RelevanceTrace,
}

/// Both streams attend over the OCR rows and keep a residual. A sample without
/// OCR text, or a model with OCR switched off, passes through unchanged.
#[allow(clippy::too_many_arguments)]
fn ocr_align(
    g: &mut Graph,
    pv: &ParamVars,
    cfg: &ModelConfig,
    text: Var,
    images: Var,
    ocr: Var,
    text_mask: &Arc<[bool]>,
    image_mask: &Arc<[bool]>,
    ocr_mask: &Arc<[bool]>,
    trace: &mut RelevanceTrace,
) -> Result<(Var, Var)> {
    if !cfg.toggles.ocr_active() || !ocr_mask.iter().any(|&m| m) {
        return Ok((text, images));
    }
    let t_att = multi_head_attention(g, text, ocr, ocr, ocr_mask, &pv.attention("ocr.text")?, cfg.heads)?;
    let v_att = multi_head_attention(g, images, ocr, ocr, ocr_mask, &pv.attention("ocr.image")?, cfg.heads)?;
    trace.ocr_text = valid_rows(&t_att.map, text_mask);
    trace.ocr_image = valid_rows(&v_att.map, image_mask);
    Ok((g.add(t_att.output, text)?, g.add(v_att.output, images)?))
}

/// OCR-guided alignment followed by relevance-weighted fusion over image slots.
#[allow(clippy::too_many_arguments)]
fn relevance_fusion(
    g: &mut Graph,
    pv: &ParamVars,
    cfg: &ModelConfig,
    text: Var,
    images: Var,
    ocr: Var,
    text_mask: &Arc<[bool]>,
    image_mask: &Arc<[bool]>,
    ocr_mask: &Arc<[bool]>,
) -> Result<Fusion> {
    let mut trace = RelevanceTrace::default();
    let (text_o, image_o) = ocr_align(g, pv, cfg, text, images, ocr, text_mask, image_mask, ocr_mask, &mut trace)?;

    let t_rel = masked_mean(g, text_o, text_mask)?;
    let pv_img = g.matmul(image_o, pv.get("rel.w_v")?)?;
    let pv_txt = g.matmul(t_rel, pv.get("rel.w_t")?)?;
    let s_cos = g.cosine_rows(pv_img, pv_txt)?;

    let slots = image_mask.len();
    let ones = g.constant(Tensor::full(&[slots, 1], 1.0));
    let t_rows = g.matmul(ones, t_rel)?;
    let pair = g.concat_cols(&[image_o, t_rows])?;
    let hidden = g.linear(pair, pv.get("rel.score.w1")?, Some(pv.get("rel.score.b1")?))?;
    let hidden = g.silu(hidden);
    let s_lrn = g.linear(hidden, pv.get("rel.score.w2")?, Some(pv.get("rel.score.b2")?))?;

    let a = g.scale(s_cos, cfg.alpha);
    let b = g.scale(s_lrn, 1.0 - cfg.alpha);
    let s = g.add(a, b)?;
    let s_row = g.transpose(s);
    let w = g.masked_softmax(s_row, Arc::clone(image_mask))?;

    // f = sum_i w_i (t_rel ⊙ v_i)
    let products = g.mul(t_rows, image_o)?;
    let fused = g.matmul(w, products)?;

    trace.s_cos = g.value(s_cos).data().to_vec();
    trace.s_lrn = g.value(s_lrn).data().to_vec();
    trace.s = g.value(s).data().to_vec();
    trace.w = g.value(w).data().to_vec();
    Ok(Fusion { fused, trace })
}

/// Handles produced for one sample.
pub struct SampleOutput {
    pub logits: Var,
    pub loss: Var,
    pub trace: ForwardTrace,
}

/// Builds one sample's forward pass on `g`.
pub fn sample_forward(g: &mut Graph, pv: &ParamVars, cfg: &ModelConfig, batch: &Batch, b: usize) -> Result<SampleOutput> {
    if batch.dim() != cfg.d || batch.slots() != cfg.n_max {
        return Err(Error::dim(
            "forward",
            format!("batch (d={}, N={}) vs model (d={}, N={})", batch.dim(), batch.slots(), cfg.d, cfg.n_max),
        ));
    }
    let t = cfg.toggles;
    let text_mask = &batch.text_mask[b];
    let image_mask = &batch.image_mask[b];
    let ocr_mask = &batch.ocr_mask[b];

    let text = g.constant(batch.text.slab(b));
    let raw_images = g.constant(batch.images.slab(b));
    let ocr = g.constant(batch.ocr.slab(b));

    let images = if t.pe { g.add(raw_images, pv.get("pe")?)? } else { raw_images };

    let mut trace = ForwardTrace {
        id: batch.ids[b].clone(),
        label: batch.label[b],
        image_mask: image_mask.iter().map(|&m| u8::from(m)).collect(),
        ..Default::default()
    };

    let (mut ts, mut vs) = (text, images);
    if t.pre_active() {
        let (a, b, tr) = cross_modal_bridge(
            g,
            pv,
            cfg,
            "pre",
            Stream { x: ts, mask: text_mask },
            Stream { x: vs, mask: image_mask },
        )?;
        (ts, vs) = (a, b);
        trace.pre_bridge = Some(tr);
    }
    if t.seq_active() {
        ts = sequential_block(g, pv, cfg, "text", ts, text_mask)?;
        vs = sequential_block(g, pv, cfg, "image", vs, image_mask)?;
    }
    if t.post_active() {
        let (a, b, tr) = cross_modal_bridge(
            g,
            pv,
            cfg,
            "post",
            Stream { x: ts, mask: text_mask },
            Stream { x: vs, mask: image_mask },
        )?;
        (ts, vs) = (a, b);
        trace.post_bridge = Some(tr);
    }

    // Relevance fusion reads the post-PE, pre-bridge streams.
    let fusion = if t.rgf {
        Some(relevance_fusion(g, pv, cfg, text, images, ocr, text_mask, image_mask, ocr_mask)?)
    } else {
        None
    };

    let text_pooled = masked_mean(g, ts, text_mask)?;
    let image_pooled = masked_mean(g, vs, image_mask)?;
    let rating = g.gather_row(pv.get("rating_emb")?, usize::from(batch.rating[b]))?;
    let mut parts = vec![text_pooled, image_pooled];
    if let Some(f) = &fusion {
        parts.push(f.fused);
    }
    parts.push(rating);
    let joint_in = g.concat_cols(&parts)?;
    let hidden = g.linear(joint_in, pv.get("fuse.w1")?, Some(pv.get("fuse.b1")?))?;
    let hidden = g.silu(hidden);
    let joint = g.linear(hidden, pv.get("fuse.w2")?, Some(pv.get("fuse.b2")?))?;
    let logits = g.linear(joint, pv.get("cls.w")?, Some(pv.get("cls.b")?))?;

    let label = usize::from(batch.label[b]);
    let loss = g.weighted_cross_entropy(logits, label, cfg.class_weights[label])?;

    let lv = g.value(logits).data();
    trace.logits = lv.to_vec();
    trace.prediction = predict(lv[0], lv[1]);
    trace.text_pooled = g.value(text_pooled).data().to_vec();
    trace.image_pooled = g.value(image_pooled).data().to_vec();
    trace.joint = g.value(joint).data().to_vec();
    if let Some(f) = fusion {
        trace.fused = Some(g.value(f.fused).data().to_vec());
        trace.relevance = Some(f.trace);
    }
    Ok(SampleOutput { logits, loss, trace })
}

/// Class 1 only when its logit is strictly larger.
pub fn predict(logit0: f64, logit1: f64) -> u8 {
    u8::from(logit1 > logit0)
}

/// Result of a whole-batch forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[B, 2]`
    pub logits: Tensor,
    pub loss: f64,
    pub traces: Vec<ForwardTrace>,
}

impl ForwardOutput {
    pub fn predictions(&self) -> Vec<u8> {
        (0..self.logits.rows()).map(|i| predict(self.logits.get2(i, 0), self.logits.get2(i, 1))).collect()
    }
}

/// Builds the batch on one tape; returns the tape and the mean-loss handle too.
pub fn forward_graph(batch: &Batch, params: &ParamStore, cfg: &ModelConfig) -> Result<(Graph, ParamVars, Var, ForwardOutput)> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let mut g = Graph::with_scan_mode(cfg.scan_mode());
    let pv = ParamVars::bind(&mut g, params)?;
    let mut logits = Tensor::zeros(&[batch.len(), 2]);
    let mut traces = Vec::with_capacity(batch.len());
    let mut total: Option<Var> = None;
    for b in 0..batch.len() {
        let out = sample_forward(&mut g, &pv, cfg, batch, b)?;
        logits.row_mut(b).copy_from_slice(g.value(out.logits).data());
        total = Some(match total {
            None => out.loss,
            Some(acc) => g.add(acc, out.loss)?,
        });
        traces.push(out.trace);
    }
    let mean = g.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64);
    let loss = g.value(mean).data()[0];
    Ok((g, pv, mean, ForwardOutput { logits, loss, traces }))
}

/// Logits, mean weighted cross-entropy and per-sample traces.
pub fn forward(batch: &Batch, params: &ParamStore, cfg: &ModelConfig) -> Result<ForwardOutput> {
    forward_graph(batch, params, cfg).map(|(_, _, _, out)| out)
}

/// Mean loss and its gradient from a single tape over the whole batch.
pub fn loss_and_grads(batch: &Batch, params: &ParamStore, cfg: &ModelConfig) -> Result<(f64, GradMap)> {
    let (g, pv, mean, out) = forward_graph(batch, params, cfg)?;
    let grads = g.backward(mean)?;
    Ok((out.loss, pv.gradients(&g, &grads)))
}

/// Mean loss and gradient computed one sample per tape, in parallel on the
/// current rayon pool. Per-sample results are reduced in batch order, so the
/// result does not depend on the number of workers.
pub fn loss_and_grads_parallel(batch: &Batch, params: &ParamStore, cfg: &ModelConfig) -> Result<(f64, GradMap)> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let per_sample: Vec<Result<(f64, GradMap)>> = (0..batch.len())
        .into_par_iter()
        .map(|b| {
            let mut g = Graph::with_scan_mode(cfg.scan_mode());
            let pv = ParamVars::bind(&mut g, params)?;
            let out = sample_forward(&mut g, &pv, cfg, batch, b)?;
            let scaled = g.scale(out.loss, scale);
            let grads = g.backward(scaled)?;
            Ok((g.value(out.loss).data()[0], pv.gradients(&g, &grads)))
        })
        .collect();

    let mut loss = 0.0;
    let mut total: Option<GradMap> = None;
    for item in per_sample {
        let (l, grads) = item?;
        loss += l;
        match &mut total {
            None => total = Some(grads),
            Some(acc) => crate::numerics::accumulate_grads(acc, &grads),
        }
    }
    Ok((loss * scale, total.expect("non-empty batch")))
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::data::{make_batch, random_record_sized, EmbeddingRecord};
    use crate::model::config::Toggles;
    use crate::model::params::init_parameters;
    use crate::numerics::kernels::{depthwise_causal_conv1d, layer_norm, linear, masked_softmax, sigmoid, silu, softplus};
    use crate::numerics::{selective_scan, Rng, ScanInputs};

    fn random(rng: &mut Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.normal()).collect()).unwrap()
    }

    fn mask(bits: &[bool]) -> Arc<[bool]> {
        Arc::from(bits)
    }

    fn set(p: &mut ParamStore, name: &str, value: Tensor) {
        let slot = p.get_mut(name).unwrap_or_else(|| panic!("{name}"));
        assert_eq!(slot.shape(), value.shape(), "{name}");
        *slot = value;
    }

    fn fill(p: &mut ParamStore, name: &str, v: f64) {
        let shape = p.get(name).unwrap().shape().to_vec();
        set(p, name, Tensor::full(&shape, v));
    }

    fn zero_padded(mut x: Tensor, m: &[bool]) -> Tensor {
        for (i, &keep) in m.iter().enumerate() {
            if !keep {
                x.row_mut(i).fill(0.0);
            }
        }
        x
    }

    fn eager_mha(q: &Tensor, kv: &Tensor, m: &[bool], p: &ParamStore, prefix: &str, heads: usize) -> Tensor {
        let w = |n: &str| p.get(&format!("{prefix}.{n}")).unwrap();
        let (qp, kp, vp) = (q.matmul(w("wq")).unwrap(), kv.matmul(w("wk")).unwrap(), kv.matmul(w("wv")).unwrap());
        let dh = q.cols() / heads;
        let mut rows = vec![Vec::new(); q.rows()];
        for h in 0..heads {
            let qh = qp.slice_cols(h * dh, dh).unwrap();
            let kh = kp.slice_cols(h * dh, dh).unwrap();
            let vh = vp.slice_cols(h * dh, dh).unwrap();
            let scores = qh.matmul(&kh.transpose()).unwrap().map(|s| s / (dh as f64).sqrt());
            let out = masked_softmax(&scores, m).unwrap().matmul(&vh).unwrap();
            for (i, r) in rows.iter_mut().enumerate() {
                r.extend_from_slice(out.row(i));
            }
        }
        Tensor::from_rows(&rows).unwrap().matmul(w("wo")).unwrap()
    }

    fn eager_bridge(x: &Tensor, other: &Tensor, xm: &[bool], om: &[bool], p: &ParamStore, prefix: &str, heads: usize) -> Tensor {
        let w = |n: &str| p.get(&format!("{prefix}.{n}")).unwrap();
        let a = eager_mha(x, other, om, p, &format!("{prefix}.attn"), heads);
        let gate = linear(x, w("gate.w"), Some(w("gate.b"))).unwrap().map(sigmoid);
        let resid = x.zip_map(&gate.zip_map(&a, "t", |g, a| g * a).unwrap(), "t", |x, y| x + y).unwrap();
        zero_padded(layer_norm(&resid, w("ln.gamma"), w("ln.beta"), 1e-5).unwrap(), xm)
    }

    fn run_bridge(p: &ParamStore, cfg: &ModelConfig, t: &Tensor, v: &Tensor, tm: &Arc<[bool]>, vm: &Arc<[bool]>) -> (Tensor, Tensor, BridgeTrace) {
        let mut g = Graph::new();
        let pv = ParamVars::bind(&mut g, p).unwrap();
        let (tx, vx) = (g.constant(t.clone()), g.constant(v.clone()));
        let (a, b, tr) =
            cross_modal_bridge(&mut g, &pv, cfg, "pre", Stream { x: tx, mask: tm }, Stream { x: vx, mask: vm }).unwrap();
        (g.value(a).clone(), g.value(b).clone(), tr)
    }

    #[test]
    fn closed_gate_bridge_is_layer_norm_of_input() {
        let cfg = ModelConfig::tiny();
        let mut p = init_parameters(&cfg);
        let mut rng = Rng::new(1);
        for s in ["text", "image"] {
            fill(&mut p, &format!("pre.{s}.gate.w"), 0.0);
            fill(&mut p, &format!("pre.{s}.gate.b"), -1000.0);
        }
        let (t, v) = (random(&mut rng, 3, cfg.d), random(&mut rng, 4, cfg.d));
        let (tm, vm) = (mask(&[true, true, false]), mask(&[true, true, true, false]));
        let (to, vo, trace) = run_bridge(&p, &cfg, &t, &v, &tm, &vm);
        let ones = Tensor::full(&[cfg.d], 1.0);
        let zeros = Tensor::zeros(&[cfg.d]);
        assert!(to.max_abs_diff(&zero_padded(layer_norm(&t, &ones, &zeros, 1e-5).unwrap(), &tm)) < 1e-12);
        assert!(vo.max_abs_diff(&zero_padded(layer_norm(&v, &ones, &zeros, 1e-5).unwrap(), &vm)) < 1e-12);
        assert_eq!(trace.text_gate.unwrap().max, 0.0);
    }

    #[test]
    fn single_valid_image_receives_all_text_attention() {
        let cfg = ModelConfig::tiny();
        let mut p = init_parameters(&cfg);
        fill(&mut p, "pre.text.attn.wq", 0.0);
        fill(&mut p, "pre.text.attn.wk", 0.0);
        set(&mut p, "pre.text.attn.wv", Tensor::identity(cfg.d));
        set(&mut p, "pre.text.attn.wo", Tensor::identity(cfg.d));
        fill(&mut p, "pre.text.gate.w", 0.0);
        fill(&mut p, "pre.text.gate.b", 1000.0);
        let mut rng = Rng::new(2);
        let (t, v) = (random(&mut rng, 3, cfg.d), random(&mut rng, 4, cfg.d));
        let (tm, vm) = (mask(&[true; 3]), mask(&[true, false, false, false]));
        let (to, _, trace) = run_bridge(&p, &cfg, &t, &v, &tm, &vm);
        assert!(trace.text_to_image.iter().all(|row| row == &[1.0, 0.0, 0.0, 0.0]));
        let shifted = Tensor::from_rows(&(0..3).map(|i| t.row(i).iter().zip(v.row(0)).map(|(a, b)| a + b).collect::<Vec<_>>()).collect::<Vec<_>>()).unwrap();
        let want = layer_norm(&shifted, &Tensor::full(&[cfg.d], 1.0), &Tensor::zeros(&[cfg.d]), 1e-5).unwrap();
        assert!(to.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn bridge_matches_equation_oracle() {
        let cfg = ModelConfig { heads: 1, ..ModelConfig::tiny() };
        let p = init_parameters(&ModelConfig { seed: 5, ..cfg.clone() });
        let mut rng = Rng::new(3);
        let (t, v) = (random(&mut rng, 3, cfg.d), random(&mut rng, 2, cfg.d));
        let (tm, vm) = (mask(&[true, true, false]), mask(&[true, true]));
        let (to, vo, trace) = run_bridge(&p, &cfg, &t, &v, &tm, &vm);
        assert!(to.max_abs_diff(&eager_bridge(&t, &v, &tm, &vm, &p, "pre.text", 1)) <= 1e-10);
        assert!(vo.max_abs_diff(&eager_bridge(&v, &t, &vm, &tm, &p, "pre.image", 1)) <= 1e-10);
        assert_eq!(trace.text_to_image.len(), 2);
        assert!(trace.image_to_text.iter().all(|row| row[2] == 0.0));
    }

    fn run_block(p: &ParamStore, cfg: &ModelConfig, h: &Tensor, m: &[bool]) -> Tensor {
        let mut g = Graph::new();
        let pv = ParamVars::bind(&mut g, p).unwrap();
        let x = g.constant(h.clone());
        let out = sequential_block(&mut g, &pv, cfg, "text", x, m).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn dead_or_closed_sequence_branch_is_identity() {
        let cfg = ModelConfig::tiny();
        let mut rng = Rng::new(4);
        let h = random(&mut rng, 5, cfg.d);
        let m = [true, true, true, true, false];

        let mut p = init_parameters(&cfg);
        fill(&mut p, "seq.text.w_out", 0.0);
        assert_eq!(run_block(&p, &cfg, &h, &m), h);

        // Constant normalized rows and a strongly negative Z half close the SiLU gate.
        let mut p = init_parameters(&cfg);
        fill(&mut p, "seq.text.ln.gamma", 0.0);
        fill(&mut p, "seq.text.ln.beta", 1.0);
        let mut w_in = p.get("seq.text.w_in").unwrap().clone();
        for i in 0..cfg.d {
            w_in.row_mut(i)[cfg.d..].fill(-100.0);
        }
        set(&mut p, "seq.text.w_in", w_in);
        assert!(run_block(&p, &cfg, &h, &m).max_abs_diff(&h) < 1e-12);
    }

    #[test]
    fn sequence_block_matches_composition_oracle() {
        let cfg = ModelConfig { conv_k: 2, d_state: 3, ..ModelConfig::tiny() };
        let p = init_parameters(&ModelConfig { seed: 8, ..cfg.clone() });
        let mut rng = Rng::new(6);
        let h = random(&mut rng, 5, cfg.d);
        let m = [true, true, true, false, false];
        let got = run_block(&p, &cfg, &h, &m);

        let w = |n: &str| p.get(&format!("seq.text.{n}")).unwrap();
        let d = cfg.d;
        let normed = layer_norm(&h, w("ln.gamma"), w("ln.beta"), 1e-5).unwrap();
        let proj = normed.matmul(w("w_in")).unwrap();
        let u = zero_padded(proj.slice_cols(0, d).unwrap(), &m);
        let z = proj.slice_cols(d, d).unwrap();
        let u_hat = zero_padded(depthwise_causal_conv1d(&u, w("conv")).unwrap().map(silu), &m);
        let delta = linear(&u_hat, w("w_dt"), Some(w("b_dt"))).unwrap().map(softplus);
        let b = u_hat.matmul(w("w_b")).unwrap();
        let c = u_hat.matmul(w("w_c")).unwrap();
        let s = selective_scan(&ScanInputs { u: &u_hat, delta: &delta, b: &b, c: &c, a_log: w("a_log"), skip: w("skip") })
            .unwrap()
            .y;
        let gated = s.zip_map(&z.map(silu), "t", |a, b| a * b).unwrap();
        let y = zero_padded(gated.matmul(w("w_out")).unwrap(), &m);
        let want = h.zip_map(&y, "t", |a, b| a + b).unwrap();
        assert!(got.max_abs_diff(&want) <= 1e-10);
        // Padded steps keep their input.
        assert_eq!(got.row(4), h.row(4));
    }

    struct OcrCase {
        t: Tensor,
        v: Tensor,
        o: Tensor,
        tm: Arc<[bool]>,
        vm: Arc<[bool]>,
        om: Arc<[bool]>,
    }

    fn run_ocr(p: &ParamStore, cfg: &ModelConfig, c: &OcrCase) -> (Tensor, Tensor, RelevanceTrace) {
        let mut g = Graph::new();
        let pv = ParamVars::bind(&mut g, p).unwrap();
        let (t, v, o) = (g.constant(c.t.clone()), g.constant(c.v.clone()), g.constant(c.o.clone()));
        let mut trace = RelevanceTrace::default();
        let (a, b) = ocr_align(&mut g, &pv, cfg, t, v, o, &c.tm, &c.vm, &c.om, &mut trace).unwrap();
        (g.value(a).clone(), g.value(b).clone(), trace)
    }

    fn ocr_case(rng: &mut Rng, d: usize, om: &[bool]) -> OcrCase {
        OcrCase {
            t: random(rng, 3, d),
            v: random(rng, 4, d),
            o: zero_padded(random(rng, 4, d), om),
            tm: mask(&[true, true, true]),
            vm: mask(&[true, true, true, false]),
            om: mask(om),
        }
    }

    #[test]
    fn ocr_alignment_examples() {
        let cfg = ModelConfig::tiny();
        let mut rng = Rng::new(7);

        let p = init_parameters(&cfg);
        let c = ocr_case(&mut rng, cfg.d, &[false; 4]);
        let (t, v, trace) = run_ocr(&p, &cfg, &c);
        assert_eq!((t, v), (c.t.clone(), c.v.clone()));
        assert!(trace.ocr_text.is_empty());

        let mut p = init_parameters(&cfg);
        for s in ["text", "image"] {
            fill(&mut p, &format!("ocr.{s}.wq"), 0.0);
            fill(&mut p, &format!("ocr.{s}.wk"), 0.0);
            set(&mut p, &format!("ocr.{s}.wv"), Tensor::identity(cfg.d));
            set(&mut p, &format!("ocr.{s}.wo"), Tensor::identity(cfg.d));
        }
        let c = ocr_case(&mut rng, cfg.d, &[false, true, false, false]);
        let (t, _, _) = run_ocr(&p, &cfg, &c);
        for i in 0..3 {
            for k in 0..cfg.d {
                assert!((t.get2(i, k) - c.t.get2(i, k) - c.o.get2(1, k)).abs() < 1e-12);
            }
        }

        let p = init_parameters(&ModelConfig { seed: 3, ..cfg.clone() });
        let c = ocr_case(&mut rng, cfg.d, &[true, false, true, false]);
        let (t, v, _) = run_ocr(&p, &cfg, &c);
        let want_t = eager_mha(&c.t, &c.o, &c.om, &p, "ocr.text", cfg.heads).zip_map(&c.t, "t", |a, b| a + b).unwrap();
        let want_v = eager_mha(&c.v, &c.o, &c.om, &p, "ocr.image", cfg.heads).zip_map(&c.v, "t", |a, b| a + b).unwrap();
        assert!(t.max_abs_diff(&want_t) <= 1e-10 && v.max_abs_diff(&want_v) <= 1e-10);
    }

    fn no_ocr(alpha: f64) -> ModelConfig {
        ModelConfig { alpha, toggles: Toggles { ocr: false, ..Toggles::default() }, ..ModelConfig::tiny() }
    }

    fn run_fusion(p: &ParamStore, cfg: &ModelConfig, t: &Tensor, v: &Tensor, tm: &[bool], vm: &[bool]) -> (Tensor, RelevanceTrace) {
        let mut g = Graph::new();
        let pv = ParamVars::bind(&mut g, p).unwrap();
        let (tx, vx) = (g.constant(t.clone()), g.constant(v.clone()));
        let o = g.constant(Tensor::zeros(v.shape()));
        let f = relevance_fusion(&mut g, &pv, cfg, tx, vx, o, &mask(tm), &mask(vm), &mask(&vec![false; vm.len()])).unwrap();
        (g.value(f.fused).clone(), f.trace)
    }

    #[test]
    fn relevance_score_examples() {
        let mut rng = Rng::new(9);
        let cfg = no_ocr(1.0);
        let mut p = init_parameters(&cfg);
        set(&mut p, "rel.w_v", Tensor::identity(cfg.d));
        set(&mut p, "rel.w_t", Tensor::identity(cfg.d));
        let t = random(&mut rng, 3, cfg.d);
        let tm = [true, true, false];
        let mean: Vec<f64> = (0..cfg.d).map(|k| (t.get2(0, k) + t.get2(1, k)) / 2.0).collect();
        let v = Tensor::from_rows(&[mean.clone(), mean.clone(), vec![0.0; cfg.d], vec![0.0; cfg.d]]).unwrap();
        let (_, tr) = run_fusion(&p, &cfg, &t, &v, &tm, &[true, true, true, false]);
        assert!((tr.s_cos[0] - 1.0).abs() < 1e-12 && (tr.s_cos[1] - 1.0).abs() < 1e-12);
        assert_eq!(tr.s_cos[2], 0.0);
        assert_eq!(tr.s, tr.s_cos);

        // Orthogonal image and text summaries.
        let mut e0 = vec![0.0; cfg.d];
        e0[0] = 1.0;
        let mut e1 = vec![0.0; cfg.d];
        e1[1] = 2.0;
        let t = Tensor::from_rows(&[e0]).unwrap();
        let v = Tensor::from_rows(&[e1.clone(), e1.clone(), e1.clone(), e1]).unwrap();
        let (_, tr) = run_fusion(&p, &cfg, &t, &v, &[true], &[true; 4]);
        assert!(tr.s_cos.iter().all(|&s| s.abs() < 1e-15));

        let cfg0 = no_ocr(0.0);
        let p = init_parameters(&cfg0);
        let (t, v) = (random(&mut rng, 3, cfg0.d), random(&mut rng, 4, cfg0.d));
        let (_, tr) = run_fusion(&p, &cfg0, &t, &v, &[true; 3], &[true; 4]);
        assert_eq!(tr.s, tr.s_lrn);
    }

    #[test]
    fn equal_scores_give_uniform_weights_over_valid_slots() {
        let cfg = no_ocr(0.3);
        let p = init_parameters(&cfg);
        let mut rng = Rng::new(10);
        let t = random(&mut rng, 2, cfg.d);
        let row = random(&mut rng, 1, cfg.d);
        let v = Tensor::from_rows(&[row.row(0), row.row(0), row.row(0), &vec![5.0; cfg.d]]).unwrap();
        let (_, tr) = run_fusion(&p, &cfg, &t, &v, &[true, true], &[true, true, true, false]);
        for (w, want) in tr.w.iter().zip([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0]) {
            assert!((w - want).abs() < 1e-15);
        }
    }

    #[test]
    fn fused_vector_examples() {
        let cfg = no_ocr(0.3);
        let p = init_parameters(&cfg);
        let mut rng = Rng::new(12);
        let (t, v) = (random(&mut rng, 3, cfg.d), random(&mut rng, 4, cfg.d));
        let tbar: Vec<f64> = (0..cfg.d).map(|k| (0..3).map(|i| t.get2(i, k)).sum::<f64>() / 3.0).collect();

        let (f, tr) = run_fusion(&p, &cfg, &t, &v, &[true; 3], &[true, false, false, false]);
        assert_eq!(tr.w, vec![1.0, 0.0, 0.0, 0.0]);
        for k in 0..cfg.d {
            assert!((f.data()[k] - tbar[k] * v.get2(0, k)).abs() < 1e-15);
        }

        let (f, _) = run_fusion(&p, &cfg, &Tensor::zeros(&[3, cfg.d]), &v, &[true; 3], &[true; 4]);
        assert!(f.data().iter().all(|&x| x == 0.0));

        let (f, tr) = run_fusion(&p, &cfg, &t, &v, &[true; 3], &[true, true, true, false]);
        for k in 0..cfg.d {
            let want: f64 = (0..4).map(|i| tr.w[i] * tbar[k] * v.get2(i, k)).sum();
            assert!((f.data()[k] - want).abs() < 1e-14);
        }
    }

    fn records(seed: u64, d: usize, n: usize) -> Vec<EmbeddingRecord> {
        let mut rng = Rng::new(seed);
        (0..n).map(|i| random_record_sized(&mut rng, format!("r{i}"), d, 2 + i % 4, 1 + i % 4)).collect()
    }

    #[test]
    fn bias_passthrough_and_duplicate_rows() {
        let cfg = ModelConfig::tiny();
        let mut p = init_parameters(&cfg);
        let names: Vec<String> = p.names().map(String::from).collect();
        for n in &names {
            fill(&mut p, n, 0.0);
        }
        set(&mut p, "cls.b", Tensor::from_vec(vec![0.3, -0.3]));
        let batch = make_batch(&records(1, cfg.d, 4), cfg.n_max).unwrap();
        let out = forward(&batch, &p, &cfg).unwrap();
        for i in 0..4 {
            assert_eq!(out.logits.row(i), &[0.3, -0.3]);
        }

        let p = init_parameters(&cfg);
        let mut recs = records(2, cfg.d, 2);
        recs.push(recs[0].clone());
        let out = forward(&make_batch(&recs, cfg.n_max).unwrap(), &p, &cfg).unwrap();
        assert_eq!(out.logits.row(0), out.logits.row(2));
    }

    #[test]
    fn rating_path_is_live() {
        let cfg = ModelConfig::tiny();
        let p = init_parameters(&cfg);
        let mut recs = records(3, cfg.d, 1);
        recs[0].rating = 0;
        let mut rated = recs[0].clone();
        rated.rating = 3;
        recs.push(rated);
        let out = forward(&make_batch(&recs, cfg.n_max).unwrap(), &p, &cfg).unwrap();
        assert_ne!(out.logits.row(0), out.logits.row(1));
    }

    #[test]
    fn head_only_config_sees_pooled_raw_inputs() {
        let cfg = ModelConfig { toggles: Toggles::all_off(), ..ModelConfig::tiny() };
        let p = init_parameters(&cfg);
        let recs = records(4, cfg.d, 3);
        let out = forward(&make_batch(&recs, cfg.n_max).unwrap(), &p, &cfg).unwrap();
        let w = |n: &str| p.get(n).unwrap();
        for (b, r) in recs.iter().enumerate() {
            let mean = |x: &Tensor| -> Vec<f64> {
                (0..x.cols()).map(|k| (0..x.rows()).map(|i| x.get2(i, k)).sum::<f64>() / x.rows() as f64).collect()
            };
            let mut joint = mean(&r.text);
            joint.extend(mean(&r.images));
            joint.extend_from_slice(w("rating_emb").row(usize::from(r.rating)));
            let x = Tensor::from_rows(&[joint]).unwrap();
            let hidden = linear(&x, w("fuse.w1"), Some(w("fuse.b1"))).unwrap().map(silu);
            let z = linear(&hidden, w("fuse.w2"), Some(w("fuse.b2"))).unwrap();
            let logits = linear(&z, w("cls.w"), Some(w("cls.b"))).unwrap();
            assert!(logits.row(0).iter().zip(out.logits.row(b)).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn ties_predict_the_majority_class_and_shifts_do_not_matter() {
        assert_eq!(predict(0.25, 0.25), 0);
        let mut rng = Rng::new(13);
        for _ in 0..200 {
            let (a, b, c) = (rng.normal(), rng.normal(), 100.0 * rng.normal());
            assert_eq!(predict(a, b), predict(a + c, b + c));
        }
    }

    #[test]
    fn per_sample_tapes_match_the_batch_tape() {
        let cfg = ModelConfig { class_weights: [0.8, 1.3], ..ModelConfig::tiny() };
        let p = init_parameters(&cfg);
        let batch = make_batch(&records(5, cfg.d, 5), cfg.n_max).unwrap();
        let (l1, g1) = loss_and_grads(&batch, &p, &cfg).unwrap();
        let (l2, g2) = loss_and_grads_parallel(&batch, &p, &cfg).unwrap();
        assert!((l1 - l2).abs() < 1e-14);
        assert_eq!(g1.keys().collect::<Vec<_>>(), g2.keys().collect::<Vec<_>>());
        for (name, a) in &g1 {
            assert!(a.max_abs_diff(&g2[name]) < 1e-13, "{name}");
        }
        assert!((forward(&batch, &p, &cfg).unwrap().loss - l1).abs() < 1e-15);
    }

    #[test]
    fn mismatched_batch_width_is_rejected() {
        let cfg = ModelConfig::tiny();
        let p = init_parameters(&cfg);
        let batch = make_batch(&records(6, cfg.d + 4, 2), cfg.n_max).unwrap();
        assert!(matches!(forward(&batch, &p, &cfg), Err(Error::Dimension { .. })));
    }
}
