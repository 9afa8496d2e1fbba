//! Parameter layout and initialization. Shapes depend only on the config.

use crate::numerics::{ParamStore, Rng, Tensor};

use super::config::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(1 / fan_in)`.
    FanIn(usize),
    Normal(f64),
    Zeros,
    Ones,
    /// Decay rates spanning timescales 1..16.
    DecaySpan,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn spec(name: impl Into<String>, shape: &[usize], init: Init) -> ParamSpec {
    ParamSpec { name: name.into(), shape: shape.to_vec(), init }
}

fn attention_specs(out: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    for w in ["wq", "wk", "wv", "wo"] {
        out.push(spec(format!("{prefix}.{w}"), &[d, d], Init::FanIn(d)));
    }
}

fn layer_norm_specs(out: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    out.push(spec(format!("{prefix}.gamma"), &[d], Init::Ones));
    out.push(spec(format!("{prefix}.beta"), &[d], Init::Zeros));
}

fn bridge_specs(out: &mut Vec<ParamSpec>, stage: &str, d: usize) {
    for stream in ["text", "image"] {
        let p = format!("{stage}.{stream}");
        attention_specs(out, &format!("{p}.attn"), d);
        out.push(spec(format!("{p}.gate.w"), &[d, d], Init::FanIn(d)));
        out.push(spec(format!("{p}.gate.b"), &[d], Init::Zeros));
        layer_norm_specs(out, &format!("{p}.ln"), d);
    }
}

fn sequence_specs(out: &mut Vec<ParamSpec>, stream: &str, cfg: &ModelConfig) {
    let (d, s, k) = (cfg.d, cfg.d_state, cfg.conv_k);
    let p = format!("seq.{stream}");
    layer_norm_specs(out, &format!("{p}.ln"), d);
    out.push(spec(format!("{p}.w_in"), &[d, 2 * d], Init::FanIn(d)));
    out.push(spec(format!("{p}.conv"), &[k, d], Init::FanIn(k)));
    out.push(spec(format!("{p}.w_dt"), &[d, d], Init::FanIn(d)));
    out.push(spec(format!("{p}.b_dt"), &[d], Init::Zeros));
    out.push(spec(format!("{p}.w_b"), &[d, s], Init::FanIn(d)));
    out.push(spec(format!("{p}.w_c"), &[d, s], Init::FanIn(d)));
    out.push(spec(format!("{p}.a_log"), &[s], Init::DecaySpan));
    out.push(spec(format!("{p}.skip"), &[d], Init::Ones));
    out.push(spec(format!("{p}.w_out"), &[d, d], Init::FanIn(d)));
}

/// Every learnable tensor the config enables, in a fixed order.
pub fn parameter_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.d;
    let t = cfg.toggles;
    let mut out = Vec::new();
    if t.pe {
        out.push(spec("pe", &[cfg.n_max, d], Init::Normal(0.02)));
    }
    if t.pre_active() {
        bridge_specs(&mut out, "pre", d);
    }
    if t.seq_active() {
        sequence_specs(&mut out, "text", cfg);
        sequence_specs(&mut out, "image", cfg);
    }
    if t.post_active() {
        bridge_specs(&mut out, "post", d);
    }
    if t.ocr_active() {
        attention_specs(&mut out, "ocr.text", d);
        attention_specs(&mut out, "ocr.image", d);
    }
    if t.rgf {
        out.push(spec("rel.w_v", &[d, d], Init::FanIn(d)));
        out.push(spec("rel.w_t", &[d, d], Init::FanIn(d)));
        out.push(spec("rel.score.w1", &[2 * d, cfg.fuse_hidden], Init::FanIn(2 * d)));
        out.push(spec("rel.score.b1", &[cfg.fuse_hidden], Init::Zeros));
        out.push(spec("rel.score.w2", &[cfg.fuse_hidden, 1], Init::FanIn(cfg.fuse_hidden)));
        out.push(spec("rel.score.b2", &[1], Init::Zeros));
    }
    out.push(spec("rating_emb", &[cfg.rating_vocab, cfg.rating_dim()], Init::Normal(0.02)));
    let fin = cfg.fuse_input_dim();
    out.push(spec("fuse.w1", &[fin, cfg.fuse_hidden], Init::FanIn(fin)));
    out.push(spec("fuse.b1", &[cfg.fuse_hidden], Init::Zeros));
    out.push(spec("fuse.w2", &[cfg.fuse_hidden, d], Init::FanIn(cfg.fuse_hidden)));
    out.push(spec("fuse.b2", &[d], Init::Zeros));
    out.push(spec("cls.w", &[d, 2], Init::FanIn(d)));
    out.push(spec("cls.b", &[2], Init::Zeros));
    out
}

pub fn parameter_count(cfg: &ModelConfig) -> usize {
    parameter_specs(cfg).iter().map(|s| s.shape.iter().product::<usize>()).sum()
}

fn init_values(rng: &mut Rng, spec: &ParamSpec) -> Vec<f64> {
    let n: usize = spec.shape.iter().product();
    match spec.init {
        Init::FanIn(fan_in) => {
            let bound = (1.0 / fan_in as f64).sqrt();
            (0..n).map(|_| rng.uniform_in(-bound, bound)).collect()
        }
        Init::Normal(std) => (0..n).map(|_| rng.normal() * std).collect(),
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::DecaySpan => (0..n)
            .map(|j| {
                let frac = if n > 1 { j as f64 / (n - 1) as f64 } else { 0.0 };
                // a = -exp(a_log) = -1 / timescale, timescale = 16^frac
                -frac * 16f64.ln()
            })
            .collect(),
    }
}

/// Fresh parameters drawn from `cfg.seed`.
pub fn init_parameters(cfg: &ModelConfig) -> ParamStore {
    let mut rng = Rng::new(cfg.seed);
    let mut store = ParamStore::new();
    for s in parameter_specs(cfg) {
        let values = init_values(&mut rng, &s);
        store.insert(s.name.clone(), Tensor::new(s.shape.clone(), values).expect("spec shape"));
    }
    store
}
