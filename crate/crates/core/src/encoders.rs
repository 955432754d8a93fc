//! Per-view encoders and the complementarity-factor network.
//!
//! For view `m` the extractor `f_omega^m` is an MLP whose output is reshaped
//! to a low-level map `z^m` of shape `n x h x w x C2`; the mapper
//! `f_theta^m` takes the flattened map to a unit-norm `C1` vector `h^m`.
//!
//! The complementarity factor of sample `i` is built from all views:
//! the `h_i^m` are concatenated (`M*C1`), tiled over the `h x w` grid and
//! concatenated channel-wise with the stacked maps `z_i^m` (`M*C2`), giving an
//! `h x w x M*(C1+C2)` embedding that `CfNet` projects to `C1` and L2-normalizes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub c1: usize,
    pub c2: usize,
    pub h: usize,
    pub w: usize,
    pub extract_hidden: usize,
    pub map_hidden: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        EncoderDims {
            c1: 64,
            c2: 32,
            h: 4,
            w: 4,
            extract_hidden: 128,
            map_hidden: 128,
        }
    }
}

impl EncoderDims {
    pub fn map_len(&self) -> usize {
        self.h * self.w * self.c2
    }

    pub fn fused_channels(&self, views: usize) -> usize {
        views * (self.c1 + self.c2)
    }
}

/// Affine layer whose parameters live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: usize,
    pub bias: Option<usize>,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.insert_glorot(format!("{name}.w"), fan_in, fan_out, rng);
        let bias = bias.then(|| store.insert_zeros(format!("{name}.b"), &[fan_out]));
        Dense { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let y = tape.matmul(x, vars[self.weight])?;
        match self.bias {
            Some(b) => tape.add(y, vars[b]),
            None => Ok(y),
        }
    }
}

/// Stack of dense layers with ReLU between them (and optionally after the last).
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub final_relu: bool,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        final_relu: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(store, &format!("{name}.l{i}"), w[0], w[1], true, rng))
            .collect();
        Mlp { layers, final_relu }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let mut y = x;
        for (i, l) in self.layers.iter().enumerate() {
            y = l.forward(tape, vars, y)?;
            if i + 1 < self.layers.len() || self.final_relu {
                y = tape.relu(y);
            }
        }
        Ok(y)
    }
}

/// View-specific extractors (`omega` parameters) and mappers (`theta` parameters).
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStack {
    pub dims: EncoderDims,
    pub input_dims: Vec<usize>,
    extractors: Vec<Mlp>,
    mappers: Vec<Mlp>,
    pub omega: ParamStore,
    pub theta: ParamStore,
}

/// Tape handles of the encoder parameters for one graph.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub omega: Vec<Var>,
    pub theta: Vec<Var>,
}

impl EncoderStack {
    pub fn new(dims: EncoderDims, input_dims: &[usize], rng: &mut impl Rng) -> Self {
        let mut omega = ParamStore::new();
        let mut theta = ParamStore::new();
        let mut extractors = Vec::new();
        let mut mappers = Vec::new();
        for (m, &d) in input_dims.iter().enumerate() {
            extractors.push(Mlp::new(
                &mut omega,
                &format!("view{m}.extract"),
                &[d, dims.extract_hidden, dims.map_len()],
                true,
                rng,
            ));
            mappers.push(Mlp::new(
                &mut theta,
                &format!("view{m}.map"),
                &[dims.map_len(), dims.map_hidden, dims.c1],
                false,
                rng,
            ));
        }
        EncoderStack {
            dims,
            input_dims: input_dims.to_vec(),
            extractors,
            mappers,
            omega,
            theta,
        }
    }

    pub fn num_views(&self) -> usize {
        self.input_dims.len()
    }

    pub fn attach(&self, tape: &mut Tape, trainable: bool) -> EncoderVars {
        EncoderVars {
            omega: self.omega.attach(tape, trainable),
            theta: self.theta.attach(tape, trainable),
        }
    }

    /// Encode rows `x` (`[n, input_dim_m]`) of view `m` into
    /// `z^m: [n, h, w, C2]` and unit-norm `h^m: [n, C1]`.
    pub fn encode_view(
        &self,
        tape: &mut Tape,
        vars: &EncoderVars,
        m: usize,
        x: Var,
    ) -> Result<(Var, Var)> {
        if m >= self.num_views() {
            return Err(Error::invalid(format!(
                "view {m} out of range for {} encoders",
                self.num_views()
            )));
        }
        let s = tape.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.input_dims[m] {
            return Err(Error::invalid(format!(
                "view {m}: input shape {s:?}, encoder expects [n, {}]",
                self.input_dims[m]
            )));
        }
        let n = s[0];
        let d = &self.dims;
        let flat = self.extractors[m].forward(tape, &vars.omega, x)?;
        let z = tape.reshape(flat, &[n, d.h, d.w, d.c2])?;
        let hidden = self.mappers[m].forward(tape, &vars.theta, flat)?;
        let h = tape.l2_normalize(hidden)?;
        Ok((z, h))
    }
}

/// Projection from the fused embedding to the complementarity factor.
#[derive(Clone, Debug, PartialEq)]
pub struct CfNet {
    pub dims: EncoderDims,
    pub views: usize,
    layer: Dense,
    pub params: ParamStore,
}

impl CfNet {
    pub fn new(dims: EncoderDims, views: usize, rng: &mut impl Rng) -> Self {
        let mut params = ParamStore::new();
        let fan_in = dims.h * dims.w * dims.fused_channels(views);
        let layer = Dense::new(&mut params, "cf.proj", fan_in, dims.c1, true, rng);
        CfNet {
            dims,
            views,
            layer,
            params,
        }
    }

    pub fn attach(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params.attach(tape, trainable)
    }
}

/// Per-batch features on the tape.
#[derive(Clone, Debug)]
pub struct FeaturePack {
    /// `z^m`, each `[n, h, w, C2]`
    pub z: Vec<Var>,
    /// `h^m`, each `[n, C1]`, unit rows
    pub h: Vec<Var>,
    /// syncretic vector `[n, M*C1]`
    pub h_cat: Option<Var>,
    /// syncretic map `[n, h, w, M*C2]`
    pub z_cat: Option<Var>,
    /// fused embedding `[n, h, w, M*(C1+C2)]`
    pub fused: Option<Var>,
    /// complementarity factor `[n, C1]`, unit rows
    pub cf: Option<Var>,
}

/// Encode every view of a batch.
pub fn encode_batch(
    stack: &EncoderStack,
    tape: &mut Tape,
    vars: &EncoderVars,
    views: &[Var],
) -> Result<FeaturePack> {
    if views.len() != stack.num_views() {
        return Err(Error::invalid(format!(
            "{} views given, encoder stack has {}",
            views.len(),
            stack.num_views()
        )));
    }
    let mut z = Vec::with_capacity(views.len());
    let mut h = Vec::with_capacity(views.len());
    for (m, &x) in views.iter().enumerate() {
        let (zm, hm) = stack.encode_view(tape, vars, m, x)?;
        z.push(zm);
        h.push(hm);
    }
    Ok(FeaturePack {
        z,
        h,
        h_cat: None,
        z_cat: None,
        fused: None,
        cf: None,
    })
}

/// Build the fused embedding and the complementarity factor for `pack`.
pub fn fuse_complementarity_factor(
    cfnet: &CfNet,
    tape: &mut Tape,
    cf_vars: &[Var],
    pack: &mut FeaturePack,
) -> Result<Var> {
    let m = pack.h.len();
    if m == 0 || m != pack.z.len() {
        return Err(Error::invalid(
            "feature pack needs matching z and h per view",
        ));
    }
    let zs = tape.shape(pack.z[0]).to_vec();
    if zs.len() != 4 {
        return Err(Error::invalid(format!(
            "low-level map must be [n, h, w, C2], got {zs:?}"
        )));
    }
    for &zv in &pack.z[1..] {
        if tape.shape(zv) != zs.as_slice() {
            return Err(Error::Shape {
                op: "fuse_complementarity_factor",
                lhs: zs.clone(),
                rhs: tape.shape(zv).to_vec(),
            });
        }
    }
    let (n, hh, ww) = (zs[0], zs[1], zs[2]);
    let c1 = tape.shape(pack.h[0])[1];
    if m != cfnet.views
        || (hh, ww, zs[3], c1) != (cfnet.dims.h, cfnet.dims.w, cfnet.dims.c2, cfnet.dims.c1)
    {
        return Err(Error::invalid(format!(
            "features ({m} views, {hh}x{ww}x{}, C1={c1}) do not match the CF network",
            zs[3]
        )));
    }
    let h_cat = tape.concat(&pack.h, 1)?;
    let z_cat = tape.concat(&pack.z, 3)?;
    let hc = m * c1;
    let mut index = Vec::with_capacity(n * hh * ww * hc);
    for i in 0..n {
        for _ in 0..hh * ww {
            index.extend((0..hc).map(|c| i * hc + c));
        }
    }
    let tiled = tape.gather(h_cat, index, &[n, hh, ww, hc])?;
    let fused = tape.concat(&[tiled, z_cat], 3)?;
    let flat_len = hh * ww * tape.shape(fused)[3];
    let flat = tape.reshape(fused, &[n, flat_len])?;
    let proj = cfnet.layer.forward(tape, cf_vars, flat)?;
    let cf = tape.l2_normalize(proj)?;
    pack.h_cat = Some(h_cat);
    pack.z_cat = Some(z_cat);
    pack.fused = Some(fused);
    pack.cf = Some(cf);
    Ok(cf)
}

/// Forward pass without gradients: `h^m` per view and the CF, as plain tensors.
pub fn infer_features(
    stack: &EncoderStack,
    cfnet: Option<&CfNet>,
    views: &[Tensor],
) -> Result<(Vec<Tensor>, Option<Tensor>)> {
    let mut tape = Tape::new();
    let vars = stack.attach(&mut tape, false);
    let xs: Vec<Var> = views.iter().map(|t| tape.constant(t.clone())).collect();
    let mut pack = encode_batch(stack, &mut tape, &vars, &xs)?;
    let cf = match cfnet {
        Some(net) => {
            let cv = net.attach(&mut tape, false);
            let cf = fuse_complementarity_factor(net, &mut tape, &cv, &mut pack)?;
            Some(tape.value(cf).clone())
        }
        None => None,
    };
    let hs = pack.h.iter().map(|&v| tape.value(v).clone()).collect();
    Ok((hs, cf))
}
