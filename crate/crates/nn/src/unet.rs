//! A compact U-Net with residual blocks, group norm and an optional additive
//! conditioning vector, used both as an ε-predictor and as a segmenter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParamSet};
use crate::tensor::Tensor;
use crate::NnError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    None,
    TriggerToken,
}

/// Architecture descriptor.
///
/// `patch` is a space-to-depth factor applied before the first level; the
/// hierarchy then runs at `size / patch`, `size / (2 * patch)`, and so on.
/// `timestep_embedding_dim = 0` disables timestep input entirely (segmenters).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetSpec {
    pub levels: usize,
    pub channel_widths: Vec<usize>,
    pub conditioning: Conditioning,
    pub timestep_embedding_dim: usize,
    pub input_channels: usize,
    pub output_channels: usize,
    #[serde(default = "default_patch")]
    pub patch: usize,
}

fn default_patch() -> usize {
    1
}

impl UNetSpec {
    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |msg: String| Err(NnError::InvalidSpec(msg));
        if self.levels == 0 {
            return bad("levels must be at least 1".into());
        }
        if self.channel_widths.len() != self.levels {
            return bad(format!(
                "channel_widths has {} entries but levels = {}",
                self.channel_widths.len(),
                self.levels
            ));
        }
        if self.channel_widths.contains(&0) {
            return bad("channel widths must be positive".into());
        }
        if self.input_channels == 0 || self.output_channels == 0 {
            return bad("input/output channels must be positive".into());
        }
        if self.patch == 0 {
            return bad("patch must be positive".into());
        }
        if self.conditioning == Conditioning::TriggerToken && self.timestep_embedding_dim == 0 {
            return bad("trigger-token conditioning needs a non-zero embedding dim".into());
        }
        Ok(())
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        self.patch << (self.levels - 1)
    }

    /// Width of the conditioning vector added to the time embedding.
    pub fn embedding_dim(&self) -> usize {
        self.timestep_embedding_dim
    }
}

#[derive(Clone)]
struct ResBlock {
    gn1: (ParamId, ParamId),
    conv1: (ParamId, ParamId),
    emb: Option<(ParamId, ParamId)>,
    gn2: (ParamId, ParamId),
    conv2: (ParamId, ParamId),
    skip: Option<(ParamId, ParamId)>,
    groups_in: usize,
    groups_out: usize,
}

/// Parameter layout of a U-Net; weights live in a separate [`ParamSet`].
#[derive(Clone)]
pub struct UNet {
    spec: UNetSpec,
    time_mlp: Option<[(ParamId, ParamId); 2]>,
    conv_in: (ParamId, ParamId),
    enc: Vec<ResBlock>,
    mid: ResBlock,
    dec: Vec<ResBlock>,
    gn_out: (ParamId, ParamId),
    conv_out: (ParamId, ParamId),
}

pub fn groups_for(channels: usize) -> usize {
    (1..=8).rev().find(|g| channels % g == 0).unwrap_or(1)
}

/// Allocates parameters in layout order. Without an RNG, random tensors are
/// left at zero (layout-only builds for checking stored weights).
struct Builder<'a> {
    params: &'a mut ParamSet,
    rng: Option<ChaCha8Rng>,
}

impl Builder<'_> {
    fn uniform(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> ParamId {
        match &mut self.rng {
            Some(rng) => self.params.push_uniform(&name, shape, fan_in, rng),
            None => self.params.push_const(&name, shape, 0.0),
        }
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> (ParamId, ParamId) {
        let fan_in = cin * k * k;
        let w = self.uniform(format!("{name}.weight"), vec![cout, cin, k, k], fan_in);
        let b = self.uniform(format!("{name}.bias"), vec![cout], fan_in);
        (w, b)
    }

    fn zero_conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> (ParamId, ParamId) {
        let w = self.params.push_const(&format!("{name}.weight"), vec![cout, cin, k, k], 0.0);
        let b = self.params.push_const(&format!("{name}.bias"), vec![cout], 0.0);
        (w, b)
    }

    fn linear(&mut self, name: &str, cin: usize, cout: usize) -> (ParamId, ParamId) {
        let w = self.uniform(format!("{name}.weight"), vec![cout, cin], cin);
        let b = self.uniform(format!("{name}.bias"), vec![cout], cin);
        (w, b)
    }

    fn norm(&mut self, name: &str, c: usize) -> (ParamId, ParamId) {
        let g = self.params.push_const(&format!("{name}.gamma"), vec![c], 1.0);
        let b = self.params.push_const(&format!("{name}.beta"), vec![c], 0.0);
        (g, b)
    }

    fn res_block(&mut self, name: &str, cin: usize, cout: usize, emb_dim: usize) -> ResBlock {
        ResBlock {
            gn1: self.norm(&format!("{name}.norm1"), cin),
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3),
            emb: (emb_dim > 0).then(|| self.linear(&format!("{name}.emb"), emb_dim, cout)),
            gn2: self.norm(&format!("{name}.norm2"), cout),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3),
            skip: (cin != cout).then(|| self.conv(&format!("{name}.skip"), cin, cout, 1)),
            groups_in: groups_for(cin),
            groups_out: groups_for(cout),
        }
    }
}

impl UNet {
    /// Builds the layout and freshly initialized weights, reproducible per seed.
    pub fn build(spec: &UNetSpec, seed: u64) -> Result<(UNet, ParamSet), NnError> {
        let mut params = ParamSet::new();
        let net = Self::layout(spec, &mut params, Some(ChaCha8Rng::seed_from_u64(seed)))?;
        Ok((net, params))
    }

    /// Rebuilds the layout against stored weights, checking that names and
    /// shapes agree.
    pub fn with_params(spec: &UNetSpec, params: &ParamSet) -> Result<UNet, NnError> {
        let mut fresh = ParamSet::new();
        let net = Self::layout(spec, &mut fresh, None)?;
        if fresh.infos() != params.infos() {
            return Err(NnError::ParamMismatch);
        }
        Ok(net)
    }

    fn layout(spec: &UNetSpec, params: &mut ParamSet, rng: Option<ChaCha8Rng>) -> Result<UNet, NnError> {
        spec.validate()?;
        let mut b = Builder { params, rng };
        let widths = &spec.channel_widths;
        let levels = spec.levels;
        let e = spec.timestep_embedding_dim;
        let time_mlp = (e > 0).then(|| [b.linear("time.fc1", e, e), b.linear("time.fc2", e, e)]);
        let p2 = spec.patch * spec.patch;
        let conv_in = b.conv("conv_in", spec.input_channels * p2, widths[0], 3);
        let mut enc = Vec::with_capacity(levels);
        for l in 0..levels {
            let cin = if l == 0 { widths[0] } else { widths[l - 1] };
            enc.push(b.res_block(&format!("down{l}"), cin, widths[l], e));
        }
        let mid = b.res_block("mid", widths[levels - 1], widths[levels - 1], e);
        let mut dec = Vec::with_capacity(levels);
        for l in (0..levels).rev() {
            let below = if l == levels - 1 { widths[l] } else { widths[l + 1] };
            dec.push(b.res_block(&format!("up{l}"), below + widths[l], widths[l], e));
        }
        let gn_out = b.norm("norm_out", widths[0]);
        let conv_out = b.zero_conv("conv_out", widths[0], spec.output_channels * p2, 3);
        Ok(UNet { spec: spec.clone(), time_mlp, conv_in, enc, mid, dec, gn_out, conv_out })
    }

    pub fn spec(&self) -> &UNetSpec {
        &self.spec
    }

    /// Records a forward pass on `g`.
    ///
    /// `timesteps` must have one entry per batch sample when the spec has a
    /// timestep embedding. `cond`, when given, is a `[n, embedding_dim, 1, 1]`
    /// node added to the time embedding.
    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId, timesteps: &[usize], cond: Option<NodeId>) -> NodeId {
        let shape = g.value(x).shape();
        let n = shape[0];
        let m = self.spec.size_multiple();
        assert_eq!(shape[1], self.spec.input_channels, "input channels");
        assert!(
            shape[2] % m == 0 && shape[3] % m == 0,
            "input {}x{} not divisible by {m}",
            shape[2],
            shape[3]
        );

        let emb = self.time_mlp.map(|[fc1, fc2]| {
            assert_eq!(timesteps.len(), n, "one timestep per sample");
            let sin = g.input(sinusoidal_embedding(timesteps, self.spec.timestep_embedding_dim));
            let h = g.linear(sin, fc1.0, fc1.1);
            let h = g.silu(h);
            let mut h = g.linear(h, fc2.0, fc2.1);
            if let Some(c) = cond {
                h = g.add(h, c);
            }
            g.silu(h)
        });

        let mut h = g.space_to_depth(x, self.spec.patch);
        h = g.conv2d(h, self.conv_in.0, self.conv_in.1);
        let mut skips = Vec::with_capacity(self.spec.levels);
        for (l, block) in self.enc.iter().enumerate() {
            h = block.forward(g, h, emb);
            skips.push(h);
            if l + 1 < self.spec.levels {
                h = g.avg_pool2(h);
            }
        }
        h = self.mid.forward(g, h, emb);
        for (i, block) in self.dec.iter().enumerate() {
            let l = self.spec.levels - 1 - i;
            h = g.concat(h, skips[l]);
            h = block.forward(g, h, emb);
            if l > 0 {
                h = g.upsample2(h);
            }
        }
        h = g.group_norm(h, self.gn_out.0, self.gn_out.1, groups_for(self.spec.channel_widths[0]));
        h = g.silu(h);
        h = g.conv2d(h, self.conv_out.0, self.conv_out.1);
        g.depth_to_space(h, self.spec.patch)
    }

    /// Forward pass without keeping the graph.
    pub fn predict(&self, params: &ParamSet, x: Tensor, timesteps: &[usize], cond: Option<Tensor>) -> Tensor {
        let mut g = Graph::new(params);
        let xi = g.input(x);
        let ci = cond.map(|c| g.input(c));
        let out = self.forward(&mut g, xi, timesteps, ci);
        g.value(out).clone()
    }
}

impl ResBlock {
    fn forward(&self, g: &mut Graph<'_>, x: NodeId, emb: Option<NodeId>) -> NodeId {
        let mut h = g.group_norm(x, self.gn1.0, self.gn1.1, self.groups_in);
        h = g.silu(h);
        h = g.conv2d(h, self.conv1.0, self.conv1.1);
        if let (Some((w, b)), Some(e)) = (self.emb, emb) {
            let proj = g.linear(e, w, b);
            h = g.add_channel(h, proj);
        }
        h = g.group_norm(h, self.gn2.0, self.gn2.1, self.groups_out);
        h = g.silu(h);
        h = g.conv2d(h, self.conv2.0, self.conv2.1);
        let skip = match self.skip {
            Some((w, b)) => g.conv2d(x, w, b),
            None => x,
        };
        g.add(h, skip)
    }
}

/// Standard transformer-style sinusoidal embedding of integer timesteps.
pub fn sinusoidal_embedding(timesteps: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0f32; timesteps.len() * dim];
    for (i, &t) in timesteps.iter().enumerate() {
        let row = &mut data[i * dim..(i + 1) * dim];
        for j in 0..half {
            let freq = (-(10_000f64.ln()) * j as f64 / half.max(1) as f64).exp();
            let arg = t as f64 * freq;
            row[j] = arg.sin() as f32;
            row[half + j] = arg.cos() as f32;
        }
    }
    Tensor::from_vec([timesteps.len(), dim, 1, 1], data)
}
