//! Conditional registration network `f(I_f, I_m, psi_t, t)`.
//!
//! A shared convolutional encoder builds feature pyramids for both images.
//! Decoding runs coarse to fine: at each scale the (time-conditioned) moving
//! features are warped by the current field estimate, correlated with the
//! fixed features in a small neighbourhood, and a per-voxel two-layer MLP
//! predicts a residual added to that estimate. The coarsest estimate is the
//! downsampled noisy input field, so the network refines `psi_t` rather than
//! predicting from scratch.
//!
//! Feature maps are channel-major `[channel][z][y][x]` buffers. Scale 1 is
//! full resolution and scale `k` is `2^(k-1)` times coarser.

pub mod checkpoint;
pub(crate) mod layers;

use std::hash::{Hash, Hasher};
use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{
    downsample_field, ensure_same_dims, interp, upsample_field, Dims, DisplacementField, Spacing, Volume,
};

const T_MAX: f64 = 1000.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub n_scales: usize,
    /// Encoder channels per scale, finest first.
    pub channels: Vec<usize>,
    pub corr_radius: usize,
    pub time_embed_dim: usize,
    pub mlp_hidden: usize,
    pub seed: u64,
}

impl Default for NetworkConfig {
    /// Desk-scale configuration for 64x64x16 grids.
    fn default() -> Self {
        Self {
            n_scales: 3,
            channels: vec![8, 16, 32],
            corr_radius: 1,
            time_embed_dim: 32,
            mlp_hidden: 32,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_scales < 2 {
            return Err(Error::invalid("n_scales", format!("{} must be at least 2", self.n_scales)));
        }
        if self.channels.len() != self.n_scales || self.channels.contains(&0) {
            return Err(Error::invalid(
                "channels",
                format!("need {} positive entries, got {:?}", self.n_scales, self.channels),
            ));
        }
        if self.corr_radius < 1 {
            return Err(Error::invalid("corr_radius", "must be at least 1"));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::invalid("time_embed_dim", format!("{} must be even and >= 2", self.time_embed_dim)));
        }
        if self.mlp_hidden == 0 {
            return Err(Error::invalid("mlp_hidden", "must be positive"));
        }
        Ok(())
    }

    /// Grid factor between full resolution and the coarsest scale.
    pub fn coarsest_factor(&self) -> usize {
        1 << (self.n_scales - 1)
    }

    pub fn check_dims(&self, dims: Dims) -> Result<()> {
        if dims.is_divisible_by(self.coarsest_factor()) {
            Ok(())
        } else {
            Err(Error::Divisibility {
                dims,
                factor: self.coarsest_factor(),
            })
        }
    }

    fn corr_channels(&self) -> usize {
        (2 * self.corr_radius + 1).pow(3)
    }

    /// Input width of the decoder MLP at 0-based scale `k`.
    fn decoder_inputs(&self, k: usize) -> usize {
        let context = if k + 1 < self.n_scales { self.mlp_hidden } else { 0 };
        self.corr_channels() + 2 * self.channels[k] + context
    }
}

/// One named tensor inside the flat parameter buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub range: Range<usize>,
}

/// Parameter ranges used by one scale.
#[derive(Clone, Debug)]
struct ScaleLayers {
    conv1_w: Range<usize>,
    conv1_b: Range<usize>,
    conv2_w: Range<usize>,
    conv2_b: Range<usize>,
    time_w: Range<usize>,
    time_b: Range<usize>,
    fc1_w: Range<usize>,
    fc1_b: Range<usize>,
    fc2_w: Range<usize>,
    fc2_b: Range<usize>,
}

fn build_layout(cfg: &NetworkConfig) -> (Vec<ParamEntry>, Vec<ScaleLayers>) {
    let mut entries = Vec::new();
    let mut push = |name: String, shape: Vec<usize>| -> Range<usize> {
        let start = entries.last().map_or(0, |e: &ParamEntry| e.range.end);
        let range = start..start + shape.iter().product::<usize>();
        entries.push(ParamEntry {
            name,
            shape,
            range: range.clone(),
        });
        range
    };
    let n = cfg.n_scales;
    let mut enc = Vec::new();
    for k in 0..n {
        let cin = if k == 0 { 1 } else { cfg.channels[k - 1] };
        let c = cfg.channels[k];
        let s = k + 1;
        enc.push((
            push(format!("enc.{s}.conv1.weight"), vec![c, cin, 3, 3, 3]),
            push(format!("enc.{s}.conv1.bias"), vec![c]),
            push(format!("enc.{s}.conv2.weight"), vec![c, c, 3, 3, 3]),
            push(format!("enc.{s}.conv2.bias"), vec![c]),
        ));
    }
    let mut time = Vec::new();
    for k in 0..n {
        let s = k + 1;
        time.push((
            push(format!("time.{s}.weight"), vec![cfg.channels[k], cfg.time_embed_dim]),
            push(format!("time.{s}.bias"), vec![cfg.channels[k]]),
        ));
    }
    let mut dec = Vec::new();
    for k in 0..n {
        let s = k + 1;
        let h = cfg.mlp_hidden;
        dec.push((
            push(format!("dec.{s}.fc1.weight"), vec![h, cfg.decoder_inputs(k)]),
            push(format!("dec.{s}.fc1.bias"), vec![h]),
            push(format!("dec.{s}.fc2.weight"), vec![3, h]),
            push(format!("dec.{s}.fc2.bias"), vec![3]),
        ));
    }
    let layers = (0..n)
        .map(|k| ScaleLayers {
            conv1_w: enc[k].0.clone(),
            conv1_b: enc[k].1.clone(),
            conv2_w: enc[k].2.clone(),
            conv2_b: enc[k].3.clone(),
            time_w: time[k].0.clone(),
            time_b: time[k].1.clone(),
            fc1_w: dec[k].0.clone(),
            fc1_b: dec[k].1.clone(),
            fc2_w: dec[k].2.clone(),
            fc2_b: dec[k].3.clone(),
        })
        .collect();
    (entries, layers)
}

/// All trainable weights in one flat buffer, addressed by layer name.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParameters {
    config: NetworkConfig,
    entries: Vec<ParamEntry>,
    values: Vec<f64>,
}

impl NetworkParameters {
    pub fn zeros(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let (entries, _) = build_layout(config);
        let len = entries.last().map_or(0, |e| e.range.end);
        Ok(Self {
            config: config.clone(),
            entries,
            values: vec![0.0; len],
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.entries.iter().find(|e| e.name == name).map(|e| &self.values[e.range.clone()])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.entries.iter().find(|e| e.name == name)?.range.clone();
        Some(&mut self.values[range])
    }

    pub fn same_topology(&self, other: &NetworkParameters) -> bool {
        self.config == other.config && self.entries == other.entries
    }

    /// Rounds every value to the nearest `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        self.values.iter_mut().for_each(|v| *v = f64::from(*v as f32));
    }

    /// Order-sensitive hash of the exact parameter bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for v in &self.values {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }

    fn layers(&self) -> Vec<ScaleLayers> {
        build_layout(&self.config).1
    }
}

/// Seeded initialisation: He-normal weights, zero biases, and zero
/// field-predicting heads so the untrained network adds no residual.
pub fn init_params<R: Rng + ?Sized>(cfg: &NetworkConfig, rng: &mut R) -> Result<NetworkParameters> {
    let mut p = NetworkParameters::zeros(cfg)?;
    for e in p.entries.clone() {
        if e.name.ends_with(".bias") || e.name.contains(".fc2.") {
            continue;
        }
        let fan_in: usize = e.shape[1..].iter().product();
        let std = (2.0 / fan_in as f64).sqrt();
        for v in &mut p.values[e.range] {
            let z: f64 = rng.sample(StandardNormal);
            *v = std * z;
        }
    }
    p.round_to_f32();
    Ok(p)
}

/// Sinusoidal embedding of `t * 1000`: `dim / 2` sines followed by the
/// matching cosines, frequencies `10000^(-j / (dim / 2))`.
pub fn time_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|j| (-(10000f64.ln()) * j as f64 / half as f64).exp())
        .collect();
    let arg = t * T_MAX;
    freqs
        .iter()
        .map(|w| (arg * w).sin())
        .chain(freqs.iter().map(|w| (arg * w).cos()))
        .collect()
}

/// Multi-channel grid used for feature maps.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub dims: Dims,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(dims: Dims, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * dims.len() || channels == 0 {
            return Err(Error::invalid(
                "data",
                format!("length {} does not match {channels} x {dims}", data.len()),
            ));
        }
        Ok(Self { dims, channels, data })
    }
}

/// Neighbourhood correlation volume with `(2r+1)^3` channels.
pub fn local_correlation(a: &FeatureMap, b: &FeatureMap, radius: usize) -> Result<FeatureMap> {
    ensure_same_dims("local_correlation", a.dims, b.dims)?;
    if a.channels != b.channels {
        return Err(Error::invalid("b", format!("{} channels, expected {}", b.channels, a.channels)));
    }
    if radius < 1 {
        return Err(Error::invalid("radius", "must be at least 1"));
    }
    let data = layers::correlation(&a.data, &b.data, a.channels, a.dims, radius);
    Ok(FeatureMap {
        dims: a.dims,
        channels: (2 * radius + 1).pow(3),
        data,
    })
}

#[derive(Clone, Debug)]
struct EncScale {
    dims: Dims,
    pre1: Vec<f64>,
    act1: Vec<f64>,
    pre2: Vec<f64>,
    out: Vec<f64>,
}

#[derive(Clone, Debug)]
struct Stage {
    dims: Dims,
    /// Moving features plus the time projection.
    moving_cond: Vec<f64>,
    /// Field estimate entering the stage (channel-major, 3 channels).
    base: Vec<f64>,
    /// Decoder MLP input: correlation, warped moving, fixed, context.
    mlp_in: Vec<f64>,
    pre_hidden: Vec<f64>,
    hidden: Vec<f64>,
    increment: Vec<f64>,
}

#[derive(Clone, Debug)]
struct Tape {
    fingerprint: u64,
    dims: Dims,
    spacing: Spacing,
    embedding: Vec<f64>,
    fixed: Vec<EncScale>,
    moving: Vec<EncScale>,
    /// Indexed by 0-based scale.
    stages: Vec<Stage>,
}

/// Activations retained by [`forward`] for a later [`backward`].
#[derive(Clone, Debug, Default)]
pub struct Workspace {
    tape: Option<Tape>,
}

impl Workspace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clear(&mut self) {
        self.tape = None;
    }

    /// Field entering and increment produced by 1-based scale `scale`.
    pub fn stage_fields(&self, scale: usize) -> Option<(DisplacementField, DisplacementField)> {
        let tape = self.tape.as_ref()?;
        let st = tape.stages.get(scale.checked_sub(1)?)?;
        let spacing = Spacing(tape.spacing.0.map(|s| s * (1 << (scale - 1)) as f64));
        let mk = |data: &[f64]| DisplacementField {
            dims: st.dims,
            spacing,
            data: data.to_vec(),
        };
        Some((mk(&st.base), mk(&st.increment)))
    }
}

fn encode(p: &NetworkParameters, layers: &[ScaleLayers], image: &Volume) -> Vec<EncScale> {
    let cfg = &p.config;
    let v = &p.values;
    let mut out: Vec<EncScale> = Vec::with_capacity(cfg.n_scales);
    for (k, l) in layers.iter().enumerate() {
        let (input, in_dims, cin) = match out.last() {
            None => (&image.data, image.dims, 1),
            Some(prev) => (&prev.out, prev.dims, cfg.channels[k - 1]),
        };
        let stride = if k == 0 { 1 } else { 2 };
        let c = cfg.channels[k];
        let dims = layers::conv_out_dims(in_dims, stride);
        let pre1 = layers::conv3d(input, cin, in_dims, &v[l.conv1_w.clone()], &v[l.conv1_b.clone()], c, stride);
        let act1 = layers::silu(&pre1);
        let pre2 = layers::conv3d(&act1, c, dims, &v[l.conv2_w.clone()], &v[l.conv2_b.clone()], c, 1);
        let out_k = layers::silu(&pre2);
        out.push(EncScale {
            dims,
            pre1,
            act1,
            pre2,
            out: out_k,
        });
    }
    out
}

/// Predicts the clean field `psi_hat_1` from a noisy field `psi_t` at time
/// `t`, recording activations in `ws`.
pub fn forward(
    params: &NetworkParameters,
    fixed: &Volume,
    moving: &Volume,
    psi_t: &DisplacementField,
    t: f64,
    ws: &mut Workspace,
) -> Result<DisplacementField> {
    let cfg = &params.config;
    ensure_same_dims("forward moving image", fixed.dims, moving.dims)?;
    ensure_same_dims("forward noisy field", fixed.dims, psi_t.dims)?;
    cfg.check_dims(fixed.dims)?;
    if !(t.is_finite() && (0.0..1.0).contains(&t)) {
        return Err(Error::TimeDomain { t });
    }
    ws.tape = None;
    let layers = params.layers();
    let v = &params.values;
    let n = cfg.n_scales;
    let hidden = cfg.mlp_hidden;
    let r = cfg.corr_radius;

    let enc_f = encode(params, &layers, fixed);
    let enc_m = encode(params, &layers, moving);
    let embedding = time_embedding(t, cfg.time_embed_dim);

    let mut stages: Vec<Option<Stage>> = vec![None; n];
    let mut field = downsample_field(psi_t, cfg.coarsest_factor())?;
    let mut context: Option<Vec<f64>> = None;
    for k in (0..n).rev() {
        let l = &layers[k];
        let dims = enc_m[k].dims;
        let nv = dims.len();
        let c = cfg.channels[k];
        if k + 1 < n {
            field = upsample_field(&field, 2)?;
        }
        let proj = layers::dense(&embedding, cfg.time_embed_dim, 1, &v[l.time_w.clone()], &v[l.time_b.clone()], c);
        let mut moving_cond = enc_m[k].out.clone();
        for (ch, &p) in proj.iter().enumerate() {
            moving_cond[ch * nv..(ch + 1) * nv].iter_mut().for_each(|x| *x += p);
        }
        let warped = interp::warp_channels(&moving_cond, c, dims, &field.data);
        let corr = layers::correlation(&warped, &enc_f[k].out, c, dims, r);
        let mut mlp_in = corr;
        mlp_in.extend_from_slice(&warped);
        mlp_in.extend_from_slice(&enc_f[k].out);
        if let Some(ctx) = context.take() {
            mlp_in.extend(interp::upsample_channels(&ctx, hidden, dims.scaled_down(2), 2));
        }
        let cin = cfg.decoder_inputs(k);
        debug_assert_eq!(mlp_in.len(), cin * nv);
        let pre_hidden = layers::dense(&mlp_in, cin, nv, &v[l.fc1_w.clone()], &v[l.fc1_b.clone()], hidden);
        let h = layers::silu(&pre_hidden);
        let increment = layers::dense(&h, hidden, nv, &v[l.fc2_w.clone()], &v[l.fc2_b.clone()], 3);
        let base = field.data.clone();
        for (u, d) in field.data.iter_mut().zip(&increment) {
            *u += d;
        }
        context = Some(h.clone());
        stages[k] = Some(Stage {
            dims,
            moving_cond,
            base,
            mlp_in,
            pre_hidden,
            hidden: h,
            increment,
        });
    }
    field.spacing = psi_t.spacing;
    ws.tape = Some(Tape {
        fingerprint: params.fingerprint(),
        dims: fixed.dims,
        spacing: psi_t.spacing,
        embedding,
        fixed: enc_f,
        moving: enc_m,
        stages: stages.into_iter().map(|s| s.expect("every stage ran")).collect(),
    });
    Ok(field)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn encode_backward(
    params: &NetworkParameters,
    layers: &[ScaleLayers],
    enc: &[EncScale],
    input: &[f64],
    mut grad_out: Vec<Vec<f64>>,
    grads: &mut [f64],
) {
    let cfg = &params.config;
    let v = &params.values;
    for k in (0..cfg.n_scales).rev() {
        let l = &layers[k];
        let e = &enc[k];
        let c = cfg.channels[k];
        let mut g = std::mem::take(&mut grad_out[k]);
        layers::silu_backward(&e.pre2, &mut g);
        let (g_act1, gw, gb) = layers::conv3d_backward(&e.act1, c, e.dims, &v[l.conv2_w.clone()], c, 1, &g, true);
        add_into(&mut grads[l.conv2_w.clone()], &gw);
        add_into(&mut grads[l.conv2_b.clone()], &gb);
        let mut g1 = g_act1.expect("requested");
        layers::silu_backward(&e.pre1, &mut g1);
        let (src, src_dims, cin, stride) = if k == 0 {
            (input, e.dims, 1, 1)
        } else {
            (&enc[k - 1].out[..], enc[k - 1].dims, cfg.channels[k - 1], 2)
        };
        let (g_in, gw, gb) =
            layers::conv3d_backward(src, cin, src_dims, &v[l.conv1_w.clone()], c, stride, &g1, k > 0);
        add_into(&mut grads[l.conv1_w.clone()], &gw);
        add_into(&mut grads[l.conv1_b.clone()], &gb);
        if let Some(gi) = g_in {
            add_into(&mut grad_out[k - 1], &gi);
        }
    }
}

/// Reverse-mode gradients of `<grad_output, forward(...)>` with respect to
/// every parameter, using the activations of the last [`forward`] call.
///
/// `fixed` and `moving` must be the images passed to that call.
pub fn backward(
    params: &NetworkParameters,
    fixed: &Volume,
    moving: &Volume,
    ws: &Workspace,
    grad_output: &DisplacementField,
) -> Result<NetworkParameters> {
    let tape = ws.tape.as_ref().ok_or(Error::StaleActivations)?;
    if tape.fingerprint != params.fingerprint() {
        return Err(Error::StaleActivations);
    }
    ensure_same_dims("backward upstream gradient", tape.dims, grad_output.dims)?;
    ensure_same_dims("backward fixed image", tape.dims, fixed.dims)?;
    ensure_same_dims("backward moving image", tape.dims, moving.dims)?;
    let cfg = &params.config;
    let layers = params.layers();
    let v = &params.values;
    let n = cfg.n_scales;
    let hidden = cfg.mlp_hidden;
    let r = cfg.corr_radius;
    let ncorr = cfg.corr_channels();
    let mut grads = NetworkParameters::zeros(cfg)?;
    let g = &mut grads.values;

    let mut g_fixed: Vec<Vec<f64>> = tape.fixed.iter().map(|e| vec![0.0; e.out.len()]).collect();
    let mut g_moving: Vec<Vec<f64>> = tape.moving.iter().map(|e| vec![0.0; e.out.len()]).collect();
    let mut g_field = grad_output.data.clone();
    let mut g_hidden_next: Option<Vec<f64>> = None;
    for k in 0..n {
        let l = &layers[k];
        let st = &tape.stages[k];
        let dims = st.dims;
        let nv = dims.len();
        let c = cfg.channels[k];
        let cin = cfg.decoder_inputs(k);

        let (mut g_h, gw, gb) = layers::dense_backward(&st.hidden, hidden, nv, &v[l.fc2_w.clone()], 3, &g_field);
        add_into(&mut g[l.fc2_w.clone()], &gw);
        add_into(&mut g[l.fc2_b.clone()], &gb);
        if let Some(extra) = g_hidden_next.take() {
            add_into(&mut g_h, &extra);
        }
        layers::silu_backward(&st.pre_hidden, &mut g_h);
        let (g_in, gw, gb) = layers::dense_backward(&st.mlp_in, cin, nv, &v[l.fc1_w.clone()], hidden, &g_h);
        add_into(&mut g[l.fc1_w.clone()], &gw);
        add_into(&mut g[l.fc1_b.clone()], &gb);

        let (g_corr, rest) = g_in.split_at(ncorr * nv);
        let (g_warped, rest) = rest.split_at(c * nv);
        let (g_fix, g_ctx) = rest.split_at(c * nv);
        let warped = &st.mlp_in[ncorr * nv..(ncorr + c) * nv];
        let (ga, gb_corr) = layers::correlation_backward(warped, &tape.fixed[k].out, c, dims, r, g_corr);
        let mut g_warped = g_warped.to_vec();
        add_into(&mut g_warped, &ga);
        add_into(&mut g_fixed[k], g_fix);
        add_into(&mut g_fixed[k], &gb_corr);

        let (g_cond, g_base_warp) =
            interp::warp_channels_backward(&st.moving_cond, c, dims, &st.base, &g_warped, true);
        let g_cond = g_cond.expect("requested");
        add_into(&mut g_moving[k], &g_cond);
        let e = &tape.embedding;
        for ch in 0..c {
            let s: f64 = g_cond[ch * nv..(ch + 1) * nv].iter().sum();
            g[l.time_b.start + ch] += s;
            for (j, ej) in e.iter().enumerate() {
                g[l.time_w.start + ch * cfg.time_embed_dim + j] += s * ej;
            }
        }

        if k + 1 < n {
            // base = upsample_field(previous output, 2)
            let mut g_base = g_field;
            add_into(&mut g_base, &g_base_warp);
            let coarse = dims.scaled_down(2);
            let mut g_prev = interp::upsample_channels_backward(&g_base, 3, coarse, 2);
            g_prev.iter_mut().for_each(|x| *x *= 2.0);
            g_field = g_prev;
            g_hidden_next = Some(interp::upsample_channels_backward(g_ctx, hidden, coarse, 2));
        } else {
            g_field = Vec::new();
        }
    }
    encode_backward(params, &layers, &tape.fixed, &fixed.data, g_fixed, g);
    encode_backward(params, &layers, &tape.moving, &moving.data, g_moving, g);
    Ok(grads)
}

/// Network parameters bundled with a private workspace.
#[derive(Clone, Debug)]
pub struct Model {
    pub params: NetworkParameters,
    ws: Workspace,
}

impl Model {
    pub fn new(params: NetworkParameters) -> Self {
        Self {
            params,
            ws: Workspace::new(),
        }
    }

    pub fn predict(
        &mut self,
        fixed: &Volume,
        moving: &Volume,
        psi_t: &DisplacementField,
        t: f64,
    ) -> Result<DisplacementField> {
        forward(&self.params, fixed, moving, psi_t, t, &mut self.ws)
    }
}
