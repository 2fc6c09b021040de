//! Knowledge-specific adapters plugged outside the backbone.
//!
//! An adapter model is a chain of adapter layers, one per configured
//! injection layer. Each adapter layer concatenates the backbone hidden
//! state at its injection layer with the previous adapter layer's output,
//! down-projects, runs its own narrow transformer blocks, up-projects, and
//! adds the backbone hidden state back in (the skip across both
//! projections). The adapter model's final feature is the backbone's last
//! hidden state concatenated with the last adapter layer's output; multiple
//! adapters fuse by concatenating their final features.
//!
//! Up-projections initialize to zero, so a fresh adapter is an exact
//! identity on the backbone-hidden channel.

use serde::{Deserialize, Serialize};

use crate::backbone::{
    self, attention_mask, encoder_block_forward, encoder_block_shapes, BackboneConfig,
    HiddenStack, Init,
};
use crate::error::{Error, Result};
use crate::ndgrad::{Graph, Tensor, Var};
use crate::params::{Binder, ParamStore};
use crate::rng::Rng;

/// Adapter hyperparameters: K injection layers, N inner transformer layers
/// of width `hidden`, and the down/up projection dims.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub injection_layers: Vec<usize>,
    pub n_inner: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub down_dim: usize,
    pub up_dim: usize,
    pub ffn_inner: usize,
}

impl AdapterConfig {
    /// Desk-scale adapter mirroring the first/middle/last injection pattern.
    pub fn desk() -> Self {
        AdapterConfig {
            injection_layers: vec![0, 1, 3],
            n_inner: 1,
            hidden: 32,
            n_heads: 4,
            down_dim: 32,
            up_dim: 64,
            ffn_inner: 128,
        }
    }

    /// Paper-scale adapter: N=2, H_A=768, A_A=12, H_d=768, H_u=1024,
    /// injected at layers {0, 11, 23}; inner FFN width 4·H_A.
    pub fn paper() -> Self {
        AdapterConfig {
            injection_layers: vec![0, 11, 23],
            n_inner: 2,
            hidden: 768,
            n_heads: 12,
            down_dim: 768,
            up_dim: 1024,
            ffn_inner: 3072,
        }
    }

    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        if self.injection_layers.is_empty() {
            return Err(Error::Configuration("no injection layers".into()));
        }
        if !self.injection_layers.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Configuration(format!(
                "injection layers must be strictly increasing, got {:?}",
                self.injection_layers
            )));
        }
        if *self.injection_layers.last().unwrap() >= backbone.n_layers {
            return Err(Error::Configuration(format!(
                "injection layer {} out of range for {} backbone layers",
                self.injection_layers.last().unwrap(),
                backbone.n_layers
            )));
        }
        if self.hidden % self.n_heads != 0 {
            return Err(Error::Configuration(format!(
                "adapter hidden {} must be divisible by n_heads {}",
                self.hidden, self.n_heads
            )));
        }
        if self.up_dim != backbone.hidden {
            return Err(Error::Configuration(format!(
                "up_dim {} must equal backbone hidden {}; the skip-connection would be ill-typed",
                self.up_dim, backbone.hidden
            )));
        }
        if self.down_dim != self.hidden {
            return Err(Error::Configuration(format!(
                "down_dim {} must equal adapter hidden {}",
                self.down_dim, self.hidden
            )));
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.injection_layers.len()
    }
}

/// One adapter model's identity inside a fused model: its parameter-prefix
/// name, its configuration, and the kind of knowledge it was trained on.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSlot {
    pub name: String,
    pub knowledge_kind: String,
    pub cfg: AdapterConfig,
}

/// Output of one adapter model.
pub struct AdapterOutput {
    /// `concat(backbone last hidden, last adapter layer output)`,
    /// width `H + H_u`.
    pub final_features: Var,
    /// Output of each adapter layer, width `H_u`.
    pub per_layer: Vec<Var>,
}

// ── parameter layout ────────────────────────────────────────────────

/// Exact parameter layout of one adapter model under `adapter.<name>.`.
/// This is the single source of truth: initialization instantiates exactly
/// these tensors, and the count enumeration sums exactly these shapes.
pub fn adapter_param_shapes(
    name: &str,
    cfg: &AdapterConfig,
    backbone: &BackboneConfig,
) -> Vec<(String, Vec<usize>, Init)> {
    let mut v = Vec::new();
    let in_width = backbone.hidden + cfg.up_dim;
    for k in 0..cfg.n_layers() {
        let layer = format!("adapter.{name}.layer{k}.");
        v.push((format!("{layer}down.w"), vec![in_width, cfg.down_dim], Init::Normal));
        v.push((format!("{layer}down.b"), vec![cfg.down_dim], Init::Zero));
        for j in 0..cfg.n_inner {
            v.extend(encoder_block_shapes(
                &format!("{layer}block{j}."),
                cfg.hidden,
                cfg.ffn_inner,
            ));
        }
        // zero so the fresh adapter is an exact identity on the skip channel
        v.push((format!("{layer}up.w"), vec![cfg.hidden, cfg.up_dim], Init::Zero));
        v.push((format!("{layer}up.b"), vec![cfg.up_dim], Init::Zero));
    }
    v
}

/// Initialize one adapter model into `store`.
pub fn init_adapter(
    store: &mut ParamStore,
    name: &str,
    cfg: &AdapterConfig,
    backbone: &BackboneConfig,
    rng: &mut Rng,
) {
    backbone::init_params(store, &adapter_param_shapes(name, cfg, backbone), rng);
}

/// Trainable scalars in one encoder block of the given width.
fn block_param_count(width: u64, ffn_inner: u64) -> u64 {
    4 * (width * width + width)        // q, k, v, o projections with biases
        + 2 * 2 * width                // both layer norms
        + (width * ffn_inner + ffn_inner)
        + (ffn_inner * width + width)
}

/// Closed-form count of trainable scalars in one adapter model. Must agree
/// exactly with enumerating [`adapter_param_shapes`].
pub fn param_count(cfg: &AdapterConfig, backbone: &BackboneConfig) -> u64 {
    let h = backbone.hidden as u64;
    let (h_u, h_d, h_a) = (cfg.up_dim as u64, cfg.down_dim as u64, cfg.hidden as u64);
    let down = (h + h_u) * h_d + h_d;
    let inner = cfg.n_inner as u64 * block_param_count(h_a, cfg.ffn_inner as u64);
    let up = h_a * h_u + h_u;
    cfg.n_layers() as u64 * (down + inner + up)
}

/// Brute-force enumeration over the instantiated parameter layout.
pub fn param_count_enumerated(cfg: &AdapterConfig, backbone: &BackboneConfig) -> u64 {
    adapter_param_shapes("x", cfg, backbone)
        .iter()
        .map(|(_, shape, _)| shape.iter().product::<usize>() as u64)
        .sum()
}

// ── forward ─────────────────────────────────────────────────────────

/// One adapter layer: concat(h_i, prev) → down-projection + GELU → N inner
/// transformer blocks → up-projection → + h_i.
pub fn adapter_layer_forward(
    graph: &mut Graph,
    binder: &mut Binder,
    layer_prefix: &str,
    h_i: Var,
    prev: Var,
    mask_add: Var,
    cfg: &AdapterConfig,
) -> Result<Var> {
    let h_shape = graph.shape(h_i).to_vec();
    if *h_shape.last().unwrap() != cfg.up_dim {
        return Err(Error::Configuration(format!(
            "skip connection needs backbone hidden {} == up_dim {}",
            h_shape.last().unwrap(),
            cfg.up_dim
        )));
    }
    let x = graph.concat_lastdim(&[h_i, prev])?;
    let dw = binder.var(graph, &format!("{layer_prefix}down.w"))?;
    let db = binder.var(graph, &format!("{layer_prefix}down.b"))?;
    let down = graph.linear(x, dw, db)?;
    let mut t = graph.gelu(down);
    for j in 0..cfg.n_inner {
        t = encoder_block_forward(
            graph,
            binder,
            &format!("{layer_prefix}block{j}."),
            t,
            mask_add,
            cfg.n_heads,
        )?;
    }
    let uw = binder.var(graph, &format!("{layer_prefix}up.w"))?;
    let ub = binder.var(graph, &format!("{layer_prefix}up.b"))?;
    let up = graph.linear(t, uw, ub)?;
    graph.add(up, h_i)
}

/// Run one adapter model over a hidden stack. Injection index `i` taps the
/// output of backbone transformer layer `i` (stack state `i + 1`); the
/// first adapter layer's `prev` input is a zero tensor of width `up_dim`.
pub fn adapter_forward(
    graph: &mut Graph,
    binder: &mut Binder,
    name: &str,
    stack: &HiddenStack,
    cfg: &AdapterConfig,
) -> Result<AdapterOutput> {
    for &i in &cfg.injection_layers {
        if i + 1 >= stack.states.len() {
            return Err(Error::Configuration(format!(
                "injection layer {i} out of range for a stack of {} states",
                stack.states.len()
            )));
        }
    }
    let (b, l) = (stack.b, stack.l);
    let mask_add = attention_mask(graph, &stack.pad_mask, b, l, cfg.n_heads);
    let mut prev = graph.constant(Tensor::zeros(&[b, l, cfg.up_dim]));
    let mut per_layer = Vec::with_capacity(cfg.n_layers());
    for (k, &i) in cfg.injection_layers.iter().enumerate() {
        let h_i = stack.states[i + 1];
        prev = adapter_layer_forward(
            graph,
            binder,
            &format!("adapter.{name}.layer{k}."),
            h_i,
            prev,
            mask_add,
            cfg,
        )?;
        per_layer.push(prev);
    }
    let final_features = graph.concat_lastdim(&[stack.last(), *per_layer.last().unwrap()])?;
    Ok(AdapterOutput {
        final_features,
        per_layer,
    })
}

/// Concatenate the final features of several adapter models, in order.
/// Callers with no adapters fall back to backbone-only features explicitly.
pub fn fuse(graph: &mut Graph, outputs: &[AdapterOutput]) -> Result<Var> {
    if outputs.is_empty() {
        return Err(Error::Argument(
            "fuse: empty adapter list; use backbone features directly".into(),
        ));
    }
    if outputs.len() == 1 {
        return Ok(outputs[0].final_features);
    }
    let finals: Vec<Var> = outputs.iter().map(|o| o.final_features).collect();
    graph.concat_lastdim(&finals)
}

/// Width of the fused feature vector: one `(H + H_u)` block per adapter.
pub fn fused_width(backbone_hidden: usize, adapters: &[&AdapterConfig]) -> usize {
    adapters
        .iter()
        .map(|cfg| backbone_hidden + cfg.up_dim)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{make_batch, Annotation, EncodedExample};

    fn tiny_backbone() -> BackboneConfig {
        let mut cfg = BackboneConfig::desk(64);
        cfg.n_layers = 4;
        cfg.hidden = 16;
        cfg.n_heads = 2;
        cfg.ffn_inner = 32;
        cfg.max_len = 16;
        cfg
    }

    fn tiny_adapter() -> AdapterConfig {
        AdapterConfig {
            injection_layers: vec![0, 1, 3],
            n_inner: 1,
            hidden: 8,
            n_heads: 2,
            down_dim: 8,
            up_dim: 16,
            ffn_inner: 16,
        }
    }

    fn setup(seed: u64) -> (BackboneConfig, AdapterConfig, ParamStore) {
        let bcfg = tiny_backbone();
        let acfg = tiny_adapter();
        let mut rng = Rng::new(seed);
        let mut store = backbone::init_backbone(&bcfg, &mut rng);
        init_adapter(&mut store, "fac", &acfg, &bcfg, &mut rng);
        (bcfg, acfg, store)
    }

    fn toy_batch() -> crate::corpus::EncodedBatch {
        let rows = vec![
            EncodedExample { ids: vec![1, 2, 3, 4, 5], ann: Annotation::DepPretrain { heads: vec![] } },
            EncodedExample { ids: vec![6, 7, 8, 9, 10], ann: Annotation::DepPretrain { heads: vec![] } },
        ];
        make_batch(&rows).unwrap()
    }

    #[test]
    fn validate_catches_bad_configs() {
        let bcfg = tiny_backbone();
        let mut a = tiny_adapter();
        assert!(a.validate(&bcfg).is_ok());
        a.injection_layers = vec![1, 1];
        assert!(a.validate(&bcfg).is_err());
        let mut a = tiny_adapter();
        a.injection_layers = vec![0, 4];
        assert!(a.validate(&bcfg).is_err());
        let mut a = tiny_adapter();
        a.up_dim = 8;
        assert!(matches!(a.validate(&bcfg), Err(Error::Configuration(_))));
    }

    #[test]
    fn fresh_adapter_layer_is_identity_on_backbone_channel() {
        let (bcfg, acfg, store) = setup(42);
        let batch = toy_batch();
        let mut g = Graph::new();
        let mut binder = Binder::new(&store, &[]);
        let stack = backbone::encode(&mut g, &mut binder, &batch, &bcfg).unwrap();
        let h0 = stack.states[1];
        let mask = attention_mask(&mut g, &batch.pad_mask, 2, 5, acfg.n_heads);
        let prev = g.constant(Tensor::zeros(&[2, 5, acfg.up_dim]));
        let out = adapter_layer_forward(
            &mut g,
            &mut binder,
            "adapter.fac.layer0.",
            h0,
            prev,
            mask,
            &acfg,
        )
        .unwrap();
        // zero-initialized up-projection: bit-exact identity
        assert_eq!(g.data(out), g.data(h0));
    }

    #[test]
    fn adapter_layer_shape_law() {
        let (bcfg, acfg, store) = setup(7);
        let batch = toy_batch();
        let mut g = Graph::new();
        let mut binder = Binder::new(&store, &[]);
        let stack = backbone::encode(&mut g, &mut binder, &batch, &bcfg).unwrap();
        let mask = attention_mask(&mut g, &batch.pad_mask, 2, 5, acfg.n_heads);
        let prev = g.constant(Tensor::zeros(&[2, 5, acfg.up_dim]));
        let out = adapter_layer_forward(
            &mut g,
            &mut binder,
            "adapter.fac.layer0.",
            stack.states[1],
            prev,
            mask,
            &acfg,
        )
        .unwrap();
        assert_eq!(g.shape(out), &[2, 5, acfg.up_dim]);
    }

    #[test]
    fn fresh_adapter_forward_reproduces_backbone_states() {
        let (bcfg, acfg, store) = setup(42);
        let batch = toy_batch();
        let mut g = Graph::new();
        let mut binder = Binder::new(&store, &[]);
        let stack = backbone::encode(&mut g, &mut binder, &batch, &bcfg).unwrap();
        let out = adapter_forward(&mut g, &mut binder, "fac", &stack, &acfg).unwrap();
        // per_layer[k] equals the backbone hidden at injection layer k
        for (k, &i) in acfg.injection_layers.iter().enumerate() {
            assert_eq!(g.data(out.per_layer[k]), g.data(stack.states[i + 1]));
        }
        // final = concat(last backbone hidden, hidden at last injection layer)
        let expect = {
            let last_inj = *acfg.injection_layers.last().unwrap();
            let mut v = Vec::new();
            let h = bcfg.hidden;
            let a = g.data(stack.last());
            let b = g.data(stack.states[last_inj + 1]);
            for r in 0..2 * 5 {
                v.extend_from_slice(&a[r * h..(r + 1) * h]);
                v.extend_from_slice(&b[r * h..(r + 1) * h]);
            }
            v
        };
        assert_eq!(g.data(out.final_features), &expect[..]);
    }

    #[test]
    fn final_width_is_h_plus_hu() {
        let (bcfg, acfg, store) = setup(3);
        let batch = toy_batch();
        let mut g = Graph::new();
        let mut binder = Binder::new(&store, &[]);
        let stack = backbone::encode(&mut g, &mut binder, &batch, &bcfg).unwrap();
        let out = adapter_forward(&mut g, &mut binder, "fac", &stack, &acfg).unwrap();
        assert_eq!(
            g.shape(out.final_features),
            &[2, 5, bcfg.hidden + acfg.up_dim]
        );
    }

    #[test]
    fn fuse_laws() {
        let (bcfg, acfg, mut store) = setup(5);
        let mut rng = Rng::new(99);
        init_adapter(&mut store, "lin", &acfg, &bcfg, &mut rng);
        // make the two adapters distinguishable: perturb the LAST layer's
        // up-projection (earlier layers are wiped by later zero ups)
        for v in store
            .get_mut("adapter.lin.layer2.up.w")
            .unwrap()
            .data_mut()
        {
            *v = 0.5;
        }
        let batch = toy_batch();
        let mut g = Graph::new();
        let mut binder = Binder::new(&store, &[]);
        let stack = backbone::encode(&mut g, &mut binder, &batch, &bcfg).unwrap();
        let fac = adapter_forward(&mut g, &mut binder, "fac", &stack, &acfg).unwrap();
        let _lin = adapter_forward(&mut g, &mut binder, "lin", &stack, &acfg).unwrap();

        let single = fuse(&mut g, &[fac]).unwrap();
        assert_eq!(*g.shape(single).last().unwrap(), bcfg.hidden + acfg.up_dim);

        let fac2 = adapter_forward(&mut g, &mut binder, "fac", &stack, &acfg).unwrap();
        let lin2 = adapter_forward(&mut g, &mut binder, "lin", &stack, &acfg).unwrap();
        let ab = fuse(&mut g, &[fac2, lin2]).unwrap();
        let fac3 = adapter_forward(&mut g, &mut binder, "fac", &stack, &acfg).unwrap();
        let lin3 = adapter_forward(&mut g, &mut binder, "lin", &stack, &acfg).unwrap();
        let ba = fuse(&mut g, &[lin3, fac3]).unwrap();
        assert_eq!(
            *g.shape(ab).last().unwrap(),
            fused_width(bcfg.hidden, &[&acfg, &acfg])
        );
        // order matters, content does not
        assert_ne!(g.data(ab), g.data(ba));
        let w = bcfg.hidden + acfg.up_dim;
        let rows = 2 * 5;
        for r in 0..rows {
            let ab_row = &g.data(ab)[r * 2 * w..(r + 1) * 2 * w];
            let ba_row = &g.data(ba)[r * 2 * w..(r + 1) * 2 * w];
            assert_eq!(&ab_row[..w], &ba_row[w..]);
            assert_eq!(&ab_row[w..], &ba_row[..w]);
        }
    }

    #[test]
    fn fuse_rejects_empty_list() {
        let mut g = Graph::new();
        assert!(matches!(fuse(&mut g, &[]), Err(Error::Argument(_))));
    }

    #[test]
    fn paper_fused_width_is_4096() {
        let paper_adapter = AdapterConfig::paper();
        assert_eq!(
            fused_width(1024, &[&paper_adapter, &paper_adapter]),
            4096
        );
    }

    #[test]
    fn param_count_hand_example() {
        // all dims 1, N=0, K=1: down (2*1+1)=3 plus up (1*1+1)=2
        let mut bcfg = tiny_backbone();
        bcfg.hidden = 1;
        bcfg.n_heads = 1;
        let cfg = AdapterConfig {
            injection_layers: vec![0],
            n_inner: 0,
            hidden: 1,
            n_heads: 1,
            down_dim: 1,
            up_dim: 1,
            ffn_inner: 1,
        };
        assert_eq!(param_count(&cfg, &bcfg), 5);
        assert_eq!(param_count_enumerated(&cfg, &bcfg), 5);
    }

    #[test]
    fn param_count_matches_instantiated_store_on_desk_config() {
        let bcfg = BackboneConfig::desk(64);
        let acfg = AdapterConfig::desk();
        let mut store = ParamStore::new();
        init_adapter(&mut store, "fac", &acfg, &bcfg, &mut Rng::new(42));
        let instantiated = store.count_scalars("adapter.fac.");
        assert_eq!(param_count(&acfg, &bcfg), instantiated);
        assert_eq!(param_count_enumerated(&acfg, &bcfg), instantiated);
    }

    #[test]
    fn paper_param_count_is_about_42m() {
        let count = param_count(&AdapterConfig::paper(), &BackboneConfig::paper());
        assert_eq!(count, param_count_enumerated(&AdapterConfig::paper(), &BackboneConfig::paper()));
        let target = 42_000_000f64;
        assert!(
            (count as f64) >= target * 0.75 && (count as f64) <= target * 1.25,
            "count {count} outside the 42M +/- 25% band"
        );
    }

    #[test]
    fn down_projection_gradient_matches_finite_differences() {
        let (bcfg, acfg, mut store) = setup(42);
        // non-zero up so gradients reach the down projection
        {
            let mut rng = Rng::new(17);
            let up = store.get_mut("adapter.fac.layer0.up.w").unwrap();
            for v in up.data_mut() {
                *v = rng.normal(0.05);
            }
        }
        let rows = vec![EncodedExample {
            ids: vec![1, 2, 3],
            ann: Annotation::DepPretrain { heads: vec![] },
        }];
        let batch = make_batch(&rows).unwrap();
        let name = "adapter.fac.layer0.down.w";

        let run = |store: &ParamStore| -> (f64, Option<Vec<f64>>) {
            let mut g = Graph::new();
            let mut binder = Binder::new(store, &["backbone.".to_string()]);
            let stack = backbone::encode(&mut g, &mut binder, &batch, &bcfg).unwrap();
            let out = adapter_forward(&mut g, &mut binder, "fac", &stack, &acfg).unwrap();
            let loss = g.sum(out.final_features);
            g.backward(loss).unwrap();
            let v = binder
                .bound()
                .find(|(n, _)| n.as_str() == name)
                .map(|(_, v)| v)
                .unwrap();
            (g.data(loss)[0], g.grad(v).map(|gr| gr.to_vec()))
        };
        let (_, analytic) = run(&store);
        let analytic = analytic.unwrap();

        let base = store.get(name).unwrap().data().to_vec();
        let eps = 1e-5;
        // spot-check a spread of coordinates
        for &i in &[0usize, 7, 31, 64, 127] {
            let mut plus = store.clone();
            plus.get_mut(name).unwrap().data_mut()[i] = base[i] + eps;
            let (fp, _) = run(&plus);
            let mut minus = store.clone();
            minus.get_mut(name).unwrap().data_mut()[i] = base[i] - eps;
            let (fm, _) = run(&minus);
            let numeric = (fp - fm) / (2.0 * eps);
            let denom = analytic[i].abs().max(numeric.abs()).max(1.0);
            assert!(
                (analytic[i] - numeric).abs() / denom <= 1e-4,
                "coord {i}: analytic {} vs numeric {numeric}",
                analytic[i]
            );
        }
    }
}
