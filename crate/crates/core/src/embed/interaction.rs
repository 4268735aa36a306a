//! Cross-frame feature interaction on the stride-16 level followed by a 2×
//! bilinear upsample and a residual `3×3` conv.
//!
//! Every query orders its keys (or sampling levels) as `[own frame, other
//! frame]`, so swapping the two inputs swaps the outputs bit for bit.

use rand::Rng;

use super::{Embedding, InteractionConfig, InteractionMode};
use crate::error::{Error, Result};
use crate::numkit::layers::{join, Conv, Linear, ParamSet};
use crate::numkit::{
    bilinear_upsample2x, bilinear_upsample2x_adjoint, dot, sample_bilinear,
    sample_bilinear_backward, softmax_in_place, Matrix, Tensor,
};
use crate::par::{self, Exec};

#[derive(Clone, Debug, PartialEq)]
pub enum InteractionLayer {
    Conv(Conv),
    Full {
        q: Linear,
        k: Linear,
        v: Linear,
        o: Linear,
    },
    Deformable {
        offsets: Linear,
        logits: Linear,
        value: Linear,
        out: Linear,
    },
}

impl InteractionLayer {
    fn mode(&self) -> InteractionMode {
        match self {
            Self::Conv(_) => InteractionMode::None,
            Self::Full { .. } => InteractionMode::Full,
            Self::Deformable { .. } => InteractionMode::Deformable,
        }
    }
}

impl ParamSet for InteractionLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        match self {
            Self::Conv(c) => c.visit(&join(prefix, "conv"), f),
            Self::Full { q, k, v, o } => {
                q.visit(&join(prefix, "q"), f);
                k.visit(&join(prefix, "k"), f);
                v.visit(&join(prefix, "v"), f);
                o.visit(&join(prefix, "o"), f);
            }
            Self::Deformable {
                offsets,
                logits,
                value,
                out,
            } => {
                offsets.visit(&join(prefix, "offsets"), f);
                logits.visit(&join(prefix, "logits"), f);
                value.visit(&join(prefix, "value"), f);
                out.visit(&join(prefix, "out"), f);
            }
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        match self {
            Self::Conv(c) => c.visit_mut(&join(prefix, "conv"), f),
            Self::Full { q, k, v, o } => {
                q.visit_mut(&join(prefix, "q"), f);
                k.visit_mut(&join(prefix, "k"), f);
                v.visit_mut(&join(prefix, "v"), f);
                o.visit_mut(&join(prefix, "o"), f);
            }
            Self::Deformable {
                offsets,
                logits,
                value,
                out,
            } => {
                offsets.visit_mut(&join(prefix, "offsets"), f);
                logits.visit_mut(&join(prefix, "logits"), f);
                value.visit_mut(&join(prefix, "value"), f);
                out.visit_mut(&join(prefix, "out"), f);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InteractionWeights {
    pub config: InteractionConfig,
    /// Input projection from backbone channels to the embedding width.
    pub proj_in: Linear,
    pub layers: Vec<InteractionLayer>,
    /// Residual conv applied after upsampling.
    pub post: Conv,
}

impl ParamSet for InteractionWeights {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.proj_in.visit(&join(prefix, "proj_in"), f);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layer{i}")), f);
        }
        self.post.visit(&join(prefix, "post"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.proj_in.visit_mut(&join(prefix, "proj_in"), f);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layer{i}")), f);
        }
        self.post.visit_mut(&join(prefix, "post"), f);
    }
}

fn sample_count(cfg: &InteractionConfig) -> usize {
    // two levels (own frame, other frame) per head
    cfg.heads * 2 * cfg.sample_points
}

impl InteractionWeights {
    /// All-zero weights of the right shapes.
    pub fn zeros(config: InteractionConfig, cin: usize, dim: usize) -> Result<Self> {
        config.validate(dim)?;
        let layers = (0..config.layers)
            .map(|_| match config.mode {
                InteractionMode::None => InteractionLayer::Conv(Conv::zeros(3, dim, dim, 1)),
                InteractionMode::Full => InteractionLayer::Full {
                    q: Linear::zeros(dim, dim),
                    k: Linear::zeros(dim, dim),
                    v: Linear::zeros(dim, dim),
                    o: Linear::zeros(dim, dim),
                },
                InteractionMode::Deformable => InteractionLayer::Deformable {
                    offsets: Linear::zeros(dim, 2 * sample_count(&config)),
                    logits: Linear::zeros(dim, sample_count(&config)),
                    value: Linear::zeros(dim, dim),
                    out: Linear::zeros(dim, dim),
                },
            })
            .collect();
        Ok(Self {
            config,
            proj_in: Linear::zeros(cin, dim),
            layers,
            post: Conv::zeros(3, dim, dim, 1),
        })
    }

    pub fn init<R: Rng>(
        config: InteractionConfig,
        cin: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate(dim)?;
        let layers = (0..config.layers)
            .map(|_| match config.mode {
                InteractionMode::None => InteractionLayer::Conv(Conv::init(3, dim, dim, 1, rng)),
                InteractionMode::Full => InteractionLayer::Full {
                    q: Linear::init(dim, dim, rng),
                    k: Linear::init(dim, dim, rng),
                    v: Linear::init(dim, dim, rng),
                    o: Linear::init(dim, dim, rng),
                },
                InteractionMode::Deformable => {
                    let mut offsets = Linear::init(dim, 2 * sample_count(&config), rng);
                    offsets.weight.scale(0.1);
                    ring_offsets(&config, &mut offsets.bias);
                    InteractionLayer::Deformable {
                        offsets,
                        logits: Linear::init(dim, sample_count(&config), rng),
                        value: Linear::init(dim, dim, rng),
                        out: Linear::init(dim, dim, rng),
                    }
                }
            })
            .collect();
        Ok(Self {
            config,
            proj_in: Linear::init(cin, dim, rng),
            layers,
            post: Conv::init(3, dim, dim, 1, rng),
        })
    }

    pub fn dim(&self) -> usize {
        self.proj_in.fan_out()
    }

    fn check(&self, cfg: &InteractionConfig) -> Result<()> {
        if *cfg != self.config || self.layers.len() != cfg.layers {
            return Err(Error::invalid("interaction config does not match weights"));
        }
        if self.layers.iter().any(|l| l.mode() != cfg.mode) {
            return Err(Error::invalid(
                "interaction layer kinds do not match config mode",
            ));
        }
        Ok(())
    }
}

/// Initial sampling pattern: point `k` of head `h` sits one cell away from
/// the query at angle `2π (k + h / heads) / K`.
fn ring_offsets(cfg: &InteractionConfig, bias: &mut Tensor) {
    let k = cfg.sample_points;
    let b = bias.data_mut();
    for h in 0..cfg.heads {
        for l in 0..2 {
            for p in 0..k {
                let ang =
                    std::f64::consts::TAU * (p as f64 + h as f64 / cfg.heads as f64) / k as f64;
                let i = ((h * 2 + l) * k + p) * 2;
                if k > 1 {
                    b[i] = ang.sin();
                    b[i + 1] = ang.cos();
                }
            }
        }
    }
}

enum LayerCache {
    Conv {
        x: [Tensor; 2],
    },
    Full {
        x: [Matrix; 2],
        q: [Matrix; 2],
        k: [Matrix; 2],
        v: [Matrix; 2],
        /// per frame: `n × heads × 2n` attention weights
        attn: [Vec<f64>; 2],
        out: [Matrix; 2],
    },
    Deformable {
        x: [Matrix; 2],
        offsets: [Matrix; 2],
        probs: [Matrix; 2],
        values: [Tensor; 2],
        out: [Matrix; 2],
    },
}

/// Forward activations kept for [`interact_backward`].
pub struct InteractionCache {
    h: usize,
    w: usize,
    tokens: [Matrix; 2],
    layers: Vec<LayerCache>,
    upsampled: [Tensor; 2],
}

fn tokens_of(map: &Tensor) -> Result<Matrix> {
    Matrix::from_map(map.clone())
}

fn full_forward(
    f: usize,
    heads: usize,
    q: &[Matrix; 2],
    k: &[Matrix; 2],
    v: &[Matrix; 2],
) -> (Vec<f64>, Matrix) {
    let n = q[0].rows();
    let d = q[0].cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let order = [f, 1 - f];
    let rows: Vec<(Vec<f64>, Vec<f64>)> = par::map_range(Exec::default(), n, |i| {
        let mut probs = vec![0.0; heads * 2 * n];
        let mut out = vec![0.0; d];
        for hd in 0..heads {
            let c0 = hd * dh;
            let qi = &q[f].row(i)[c0..c0 + dh];
            let p = &mut probs[hd * 2 * n..(hd + 1) * 2 * n];
            for (slot, &g) in order.iter().enumerate() {
                for j in 0..n {
                    p[slot * n + j] = dot(qi, &k[g].row(j)[c0..c0 + dh]) * scale;
                }
            }
            softmax_in_place(p, 1.0);
            let o = &mut out[c0..c0 + dh];
            for (slot, &g) in order.iter().enumerate() {
                for j in 0..n {
                    let pj = p[slot * n + j];
                    for (ov, vv) in o.iter_mut().zip(&v[g].row(j)[c0..c0 + dh]) {
                        *ov += pj * vv;
                    }
                }
            }
        }
        (probs, out)
    });
    let mut attn = Vec::with_capacity(n * heads * 2 * n);
    let mut out = Vec::with_capacity(n * d);
    for (p, o) in rows {
        attn.extend(p);
        out.extend(o);
    }
    (attn, Matrix::from_raw(n, d, out))
}

fn deformable_forward(
    f: usize,
    cfg: &InteractionConfig,
    grid_w: usize,
    offsets: &Matrix,
    probs: &Matrix,
    values: &[Tensor; 2],
) -> Matrix {
    let n = offsets.rows();
    let d = values[0].shape()[2];
    let dh = d / cfg.heads;
    let kp = cfg.sample_points;
    let order = [f, 1 - f];
    let rows: Vec<Vec<f64>> = par::map_range(Exec::default(), n, |i| {
        let (r, c) = ((i / grid_w) as f64, (i % grid_w) as f64);
        let off = offsets.row(i);
        let pr = probs.row(i);
        let mut out = vec![0.0; d];
        let mut s = vec![0.0; dh];
        for hd in 0..cfg.heads {
            for (l, &g) in order.iter().enumerate() {
                for p in 0..kp {
                    let idx = (hd * 2 + l) * kp + p;
                    sample_bilinear(
                        &values[g],
                        r + off[2 * idx],
                        c + off[2 * idx + 1],
                        hd * dh,
                        &mut s,
                    );
                    let w = pr[idx];
                    for (o, sv) in out[hd * dh..(hd + 1) * dh].iter_mut().zip(&s) {
                        *o += w * sv;
                    }
                }
            }
        }
        out
    });
    Matrix::from_raw(n, d, rows.concat())
}

fn head_softmax(logits: &Matrix, heads: usize) -> Matrix {
    let mut p = logits.clone();
    let per = logits.cols() / heads;
    for i in 0..p.rows() {
        for chunk in p.row_mut(i).chunks_mut(per) {
            softmax_in_place(chunk, 1.0);
        }
    }
    p
}

fn layer_forward(
    layer: &InteractionLayer,
    cfg: &InteractionConfig,
    h: usize,
    w: usize,
    x: [Matrix; 2],
) -> Result<([Matrix; 2], LayerCache)> {
    match layer {
        InteractionLayer::Conv(conv) => {
            let maps = [x[0].clone().into_map(h, w)?, x[1].clone().into_map(h, w)?];
            let mut y = Vec::with_capacity(2);
            for (m, xm) in maps.iter().zip(&x) {
                let mut t = Matrix::from_map(conv.forward(m)?)?;
                for (a, b) in t.data_mut().iter_mut().zip(xm.data()) {
                    *a += b;
                }
                y.push(t);
            }
            let y1 = y.pop().unwrap();
            let y0 = y.pop().unwrap();
            Ok(([y0, y1], LayerCache::Conv { x: maps }))
        }
        InteractionLayer::Full { q, k, v, o } => {
            let qs = [q.forward(&x[0])?, q.forward(&x[1])?];
            let ks = [k.forward(&x[0])?, k.forward(&x[1])?];
            let vs = [v.forward(&x[0])?, v.forward(&x[1])?];
            let (a0, out0) = full_forward(0, cfg.heads, &qs, &ks, &vs);
            let (a1, out1) = full_forward(1, cfg.heads, &qs, &ks, &vs);
            let mut y0 = o.forward(&out0)?;
            let mut y1 = o.forward(&out1)?;
            residual(&mut y0, &x[0]);
            residual(&mut y1, &x[1]);
            Ok((
                [y0, y1],
                LayerCache::Full {
                    x,
                    q: qs,
                    k: ks,
                    v: vs,
                    attn: [a0, a1],
                    out: [out0, out1],
                },
            ))
        }
        InteractionLayer::Deformable {
            offsets,
            logits,
            value,
            out,
        } => {
            let offs = [offsets.forward(&x[0])?, offsets.forward(&x[1])?];
            let probs = [
                head_softmax(&logits.forward(&x[0])?, cfg.heads),
                head_softmax(&logits.forward(&x[1])?, cfg.heads),
            ];
            let values = [
                value.forward(&x[0])?.into_map(h, w)?,
                value.forward(&x[1])?.into_map(h, w)?,
            ];
            let o0 = deformable_forward(0, cfg, w, &offs[0], &probs[0], &values);
            let o1 = deformable_forward(1, cfg, w, &offs[1], &probs[1], &values);
            let mut y0 = out.forward(&o0)?;
            let mut y1 = out.forward(&o1)?;
            residual(&mut y0, &x[0]);
            residual(&mut y1, &x[1]);
            Ok((
                [y0, y1],
                LayerCache::Deformable {
                    x,
                    offsets: offs,
                    probs,
                    values,
                    out: [o0, o1],
                },
            ))
        }
    }
}

fn residual(y: &mut Matrix, x: &Matrix) {
    for (a, b) in y.data_mut().iter_mut().zip(x.data()) {
        *a += b;
    }
}

fn check_inputs(
    f_ref: &Tensor,
    f_cur: &Tensor,
    weights: &InteractionWeights,
) -> Result<(usize, usize)> {
    if f_ref.shape() != f_cur.shape() {
        return Err(Error::shape(
            format!("{:?}", f_ref.shape()),
            format!("{:?}", f_cur.shape()),
        ));
    }
    let (h, w, c) = f_ref.hwc()?;
    if c != weights.proj_in.fan_in() {
        return Err(Error::shape(
            format!("{} channels", weights.proj_in.fan_in()),
            c,
        ));
    }
    Ok((h, w))
}

fn attend_cached(
    f_ref: &Tensor,
    f_cur: &Tensor,
    cfg: &InteractionConfig,
    weights: &InteractionWeights,
) -> Result<([Matrix; 2], [Matrix; 2], Vec<LayerCache>, usize, usize)> {
    weights.check(cfg)?;
    let (h, w) = check_inputs(f_ref, f_cur, weights)?;
    let tokens = [tokens_of(f_ref)?, tokens_of(f_cur)?];
    let mut x = [
        weights.proj_in.forward(&tokens[0])?,
        weights.proj_in.forward(&tokens[1])?,
    ];
    let mut caches = Vec::with_capacity(weights.layers.len());
    for layer in &weights.layers {
        let (y, cache) = layer_forward(layer, cfg, h, w, x)?;
        caches.push(cache);
        x = y;
    }
    Ok((tokens, x, caches, h, w))
}

/// Attended stride-16 maps `(ref, cur)` before upsampling.
pub fn attend(
    f_ref: &Tensor,
    f_cur: &Tensor,
    cfg: &InteractionConfig,
    weights: &InteractionWeights,
) -> Result<(Tensor, Tensor)> {
    let (_, [a, b], _, h, w) = attend_cached(f_ref, f_cur, cfg, weights)?;
    Ok((a.into_map(h, w)?, b.into_map(h, w)?))
}

/// Produces `(E_ref, E_cur)` on the stride-8 grid from the two stride-16
/// maps.
pub fn interact(
    f_ref: &Tensor,
    f_cur: &Tensor,
    cfg: &InteractionConfig,
    weights: &InteractionWeights,
) -> Result<(Embedding, Embedding)> {
    let (a, b, _) = interact_cached(f_ref, f_cur, cfg, weights)?;
    Ok((a, b))
}

pub fn interact_cached(
    f_ref: &Tensor,
    f_cur: &Tensor,
    cfg: &InteractionConfig,
    weights: &InteractionWeights,
) -> Result<(Embedding, Embedding, InteractionCache)> {
    let (tokens, x, layers, h, w) = attend_cached(f_ref, f_cur, cfg, weights)?;
    let [x0, x1] = x;
    let up = [
        bilinear_upsample2x(&x0.into_map(h, w)?)?,
        bilinear_upsample2x(&x1.into_map(h, w)?)?,
    ];
    let mut emb = Vec::with_capacity(2);
    for u in &up {
        let mut e = weights.post.forward(u)?;
        for (a, b) in e.data_mut().iter_mut().zip(u.data()) {
            *a += b;
        }
        emb.push(Embedding::new(2 * h, 2 * w, Matrix::from_map(e)?)?);
    }
    let e_cur = emb.pop().unwrap();
    let e_ref = emb.pop().unwrap();
    Ok((
        e_ref,
        e_cur,
        InteractionCache {
            h,
            w,
            tokens,
            layers,
            upsampled: up,
        },
    ))
}

/// Parameter gradients given `dL/dE_ref` and `dL/dE_cur` (each `hw × d`).
pub fn interact_backward(
    cache: &InteractionCache,
    weights: &InteractionWeights,
    d_ref: &Matrix,
    d_cur: &Matrix,
) -> Result<InteractionWeights> {
    let (h, w) = (cache.h, cache.w);
    let cfg = weights.config;
    let mut grads = InteractionWeights::zeros(cfg, weights.proj_in.fan_in(), weights.dim())?;
    let mut dx: Vec<Matrix> = Vec::with_capacity(2);
    for (f, de) in [d_ref, d_cur].into_iter().enumerate() {
        let de_map = de.clone().into_map(2 * h, 2 * w)?;
        let (mut du, gpost) = weights.post.backward(&cache.upsampled[f], &de_map)?;
        accumulate_conv(&mut grads.post, &gpost);
        for (a, b) in du.data_mut().iter_mut().zip(de_map.data()) {
            *a += b;
        }
        dx.push(Matrix::from_map(bilinear_upsample2x_adjoint(&du)?)?);
    }
    let mut dx: [Matrix; 2] = [dx.remove(0), dx.remove(0)];
    for (li, layer) in weights.layers.iter().enumerate().rev() {
        dx = layer_backward(
            layer,
            &cfg,
            h,
            w,
            &cache.layers[li],
            dx,
            &mut grads.layers[li],
        )?;
    }
    for f in 0..2 {
        let (_, g) = weights.proj_in.backward(&cache.tokens[f], &dx[f]);
        accumulate_linear(&mut grads.proj_in, &g);
    }
    Ok(grads)
}

fn accumulate_linear(acc: &mut Linear, g: &Linear) {
    acc.weight.axpy(1.0, &g.weight);
    acc.bias.axpy(1.0, &g.bias);
}

fn accumulate_conv(acc: &mut Conv, g: &Conv) {
    acc.kernel.axpy(1.0, &g.kernel);
    acc.bias.axpy(1.0, &g.bias);
}

fn add_into(a: &mut Matrix, b: &Matrix) {
    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
}

fn layer_backward(
    layer: &InteractionLayer,
    cfg: &InteractionConfig,
    h: usize,
    w: usize,
    cache: &LayerCache,
    dy: [Matrix; 2],
    grads: &mut InteractionLayer,
) -> Result<[Matrix; 2]> {
    match (layer, cache, grads) {
        (InteractionLayer::Conv(conv), LayerCache::Conv { x }, InteractionLayer::Conv(gconv)) => {
            let mut out = Vec::with_capacity(2);
            for f in 0..2 {
                let dmap = dy[f].clone().into_map(h, w)?;
                let (dxm, g) = conv.backward(&x[f], &dmap)?;
                accumulate_conv(gconv, &g);
                let mut d = Matrix::from_map(dxm)?;
                add_into(&mut d, &dy[f]);
                out.push(d);
            }
            Ok([out.remove(0), out.remove(0)])
        }
        (
            InteractionLayer::Full { q, k, v, o },
            LayerCache::Full {
                x,
                q: qs,
                k: ks,
                v: vs,
                attn,
                out,
            },
            InteractionLayer::Full {
                q: gq,
                k: gk,
                v: gv,
                o: go,
            },
        ) => {
            let n = x[0].rows();
            let d = x[0].cols();
            let heads = cfg.heads;
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let mut dq = [Matrix::zeros(n, d), Matrix::zeros(n, d)];
            let mut dk = [Matrix::zeros(n, d), Matrix::zeros(n, d)];
            let mut dv = [Matrix::zeros(n, d), Matrix::zeros(n, d)];
            let mut dx = [dy[0].clone(), dy[1].clone()];
            for f in 0..2 {
                let (dout, g) = o.backward(&out[f], &dy[f]);
                accumulate_linear(go, &g);
                let order = [f, 1 - f];
                for i in 0..n {
                    for hd in 0..heads {
                        let c0 = hd * dh;
                        let p = &attn[f][(i * heads + hd) * 2 * n..(i * heads + hd + 1) * 2 * n];
                        let dor = &dout.row(i)[c0..c0 + dh];
                        let mut dp = vec![0.0; 2 * n];
                        for (slot, &g) in order.iter().enumerate() {
                            for j in 0..n {
                                dp[slot * n + j] = dot(dor, &vs[g].row(j)[c0..c0 + dh]);
                                let pj = p[slot * n + j];
                                for (a, b) in dv[g].row_mut(j)[c0..c0 + dh].iter_mut().zip(dor) {
                                    *a += pj * b;
                                }
                            }
                        }
                        let s = dot(p, &dp);
                        for (slot, &g) in order.iter().enumerate() {
                            for j in 0..n {
                                let ds = p[slot * n + j] * (dp[slot * n + j] - s) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                for t in 0..dh {
                                    let kv = ks[g].get(j, c0 + t);
                                    let qv = qs[f].get(i, c0 + t);
                                    let a = dq[f].get(i, c0 + t);
                                    dq[f].set(i, c0 + t, a + ds * kv);
                                    let b = dk[g].get(j, c0 + t);
                                    dk[g].set(j, c0 + t, b + ds * qv);
                                }
                            }
                        }
                    }
                }
            }
            for f in 0..2 {
                for (lin, glin, dm) in [
                    (q, &mut *gq, &dq[f]),
                    (k, &mut *gk, &dk[f]),
                    (v, &mut *gv, &dv[f]),
                ] {
                    let (d_in, g) = lin.backward(&x[f], dm);
                    accumulate_linear(glin, &g);
                    add_into(&mut dx[f], &d_in);
                }
            }
            Ok(dx)
        }
        (
            InteractionLayer::Deformable {
                offsets,
                logits,
                value,
                out,
            },
            LayerCache::Deformable {
                x,
                offsets: offs,
                probs,
                values,
                out: outs,
            },
            InteractionLayer::Deformable {
                offsets: goffsets,
                logits: glogits,
                value: gvalue,
                out: gout,
            },
        ) => {
            let n = x[0].rows();
            let d = x[0].cols();
            let heads = cfg.heads;
            let dh = d / heads;
            let kp = cfg.sample_points;
            let ns = sample_count(cfg);
            let mut dvals = [values[0].zeros_like(), values[1].zeros_like()];
            let mut dx = [dy[0].clone(), dy[1].clone()];
            let mut s = vec![0.0; dh];
            let mut ds = vec![0.0; dh];
            for f in 0..2 {
                let (dout, g) = out.backward(&outs[f], &dy[f]);
                accumulate_linear(gout, &g);
                let order = [f, 1 - f];
                let mut doff = Matrix::zeros(n, 2 * ns);
                let mut dlog = Matrix::zeros(n, ns);
                for i in 0..n {
                    let (r, c) = ((i / w) as f64, (i % w) as f64);
                    let off = offs[f].row(i);
                    let pr = probs[f].row(i);
                    let mut dp = vec![0.0; ns];
                    for hd in 0..heads {
                        let dor = &dout.row(i)[hd * dh..(hd + 1) * dh];
                        for (l, &g) in order.iter().enumerate() {
                            for p in 0..kp {
                                let idx = (hd * 2 + l) * kp + p;
                                let (yy, xx) = (r + off[2 * idx], c + off[2 * idx + 1]);
                                sample_bilinear(&values[g], yy, xx, hd * dh, &mut s);
                                dp[idx] = dot(dor, &s);
                                for (a, b) in ds.iter_mut().zip(dor) {
                                    *a = pr[idx] * b;
                                }
                                let (gy, gx) = sample_bilinear_backward(
                                    &values[g],
                                    yy,
                                    xx,
                                    hd * dh,
                                    &ds,
                                    &mut dvals[g],
                                );
                                doff.set(i, 2 * idx, gy);
                                doff.set(i, 2 * idx + 1, gx);
                            }
                        }
                        let per = 2 * kp;
                        let lo = hd * per;
                        let sdot = dot(&pr[lo..lo + per], &dp[lo..lo + per]);
                        for j in lo..lo + per {
                            dlog.set(i, j, pr[j] * (dp[j] - sdot));
                        }
                    }
                }
                let (d1, g1) = offsets.backward(&x[f], &doff);
                accumulate_linear(goffsets, &g1);
                add_into(&mut dx[f], &d1);
                let (d2, g2) = logits.backward(&x[f], &dlog);
                accumulate_linear(glogits, &g2);
                add_into(&mut dx[f], &d2);
            }
            for f in 0..2 {
                let dv = Matrix::from_map(dvals[f].clone())?;
                let (d3, g3) = value.backward(&x[f], &dv);
                accumulate_linear(gvalue, &g3);
                add_into(&mut dx[f], &d3);
            }
            Ok(dx)
        }
        _ => Err(Error::invalid("gradient buffer does not match layer kind")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::layers::{add_scaled, flatten};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(mode: InteractionMode, heads: usize, points: usize) -> InteractionConfig {
        InteractionConfig {
            mode,
            heads,
            sample_points: points,
            layers: 1,
        }
    }

    fn map(h: usize, w: usize, c: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![h, w, c],
            (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn none_mode_with_identity_projection_is_upsample() {
        let c = cfg(InteractionMode::None, 1, 1);
        let mut wts = InteractionWeights::zeros(c, 4, 4).unwrap();
        wts.proj_in = Linear::identity(4);
        let a = map(2, 3, 4, 1);
        let b = map(2, 3, 4, 2);
        let (er, ec) = interact(&a, &b, &c, &wts).unwrap();
        assert_eq!(er.e.data(), bilinear_upsample2x(&a).unwrap().data());
        assert_eq!(ec.e.data(), bilinear_upsample2x(&b).unwrap().data());
        assert_eq!((er.h, er.w), (4, 6));
    }

    #[test]
    fn deformable_self_sampling_returns_own_value() {
        let c = cfg(InteractionMode::Deformable, 1, 1);
        let mut wts = InteractionWeights::zeros(c, 3, 3).unwrap();
        wts.proj_in = Linear::identity(3);
        if let InteractionLayer::Deformable { value, out, .. } = &mut wts.layers[0] {
            *value = Linear::identity(3);
            *out = Linear::identity(3);
        }
        // identical frames: both levels sample the same value at offset zero
        let a = map(3, 3, 3, 5);
        let (ar, ac) = attend(&a, &a, &c, &wts).unwrap();
        for (y, x) in ar.data().iter().zip(a.data()) {
            assert!((y - 2.0 * x).abs() < 1e-15, "residual plus own value");
        }
        assert_eq!(ar, ac);
    }

    fn dense_attention_oracle(
        tokens: &[Vec<f64>],
        q: &Linear,
        k: &Linear,
        v: &Linear,
        o: &Linear,
        heads: usize,
    ) -> Vec<Vec<f64>> {
        let lin = |l: &Linear, x: &[f64]| -> Vec<f64> {
            let (fi, fo) = (l.fan_in(), l.fan_out());
            (0..fo)
                .map(|j| {
                    l.bias.data()[j]
                        + (0..fi)
                            .map(|i| x[i] * l.weight.data()[i * fo + j])
                            .sum::<f64>()
                })
                .collect()
        };
        let d = q.fan_out();
        let dh = d / heads;
        let qs: Vec<_> = tokens.iter().map(|t| lin(q, t)).collect();
        let ks: Vec<_> = tokens.iter().map(|t| lin(k, t)).collect();
        let vs: Vec<_> = tokens.iter().map(|t| lin(v, t)).collect();
        tokens
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut att = vec![0.0; d];
                for hd in 0..heads {
                    let r = hd * dh..(hd + 1) * dh;
                    let s: Vec<f64> = ks
                        .iter()
                        .map(|kk| {
                            qs[i][r.clone()]
                                .iter()
                                .zip(&kk[r.clone()])
                                .map(|(a, b)| a * b)
                                .sum::<f64>()
                                / (dh as f64).sqrt()
                        })
                        .collect();
                    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for (j, vv) in vs.iter().enumerate() {
                        for c in r.clone() {
                            att[c] += e[j] / z * vv[c];
                        }
                    }
                }
                let y = lin(o, &att);
                y.iter().zip(t).map(|(a, b)| a + b).collect()
            })
            .collect()
    }

    #[test]
    fn full_mode_matches_dense_attention_over_both_frames() {
        let c = cfg(InteractionMode::Full, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut wts = InteractionWeights::init(c, 4, 4, &mut rng).unwrap();
        wts.proj_in = Linear::identity(4);
        let a = map(2, 2, 4, 7);
        let b = map(2, 2, 4, 8);
        let (ar, ac) = attend(&a, &b, &c, &wts).unwrap();
        let (q, k, v, o) = match &wts.layers[0] {
            InteractionLayer::Full { q, k, v, o } => (q, k, v, o),
            _ => unreachable!(),
        };
        // 8-token sequence: 4 reference tokens then 4 current tokens
        let tokens: Vec<Vec<f64>> = a
            .data()
            .chunks(4)
            .chain(b.data().chunks(4))
            .map(|t| t.to_vec())
            .collect();
        let expect = dense_attention_oracle(&tokens, q, k, v, o, 2);
        let got: Vec<f64> = ar.data().iter().chain(ac.data()).copied().collect();
        for (g, e) in got.iter().zip(expect.iter().flatten()) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn swap_symmetry_is_exact_for_all_modes() {
        for mode in [
            InteractionMode::None,
            InteractionMode::Full,
            InteractionMode::Deformable,
        ] {
            let c = cfg(mode, 2, 4);
            let wts = InteractionWeights::init(c, 6, 4, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
            let a = map(3, 2, 6, 21);
            let b = map(3, 2, 6, 22);
            let (r1, c1) = interact(&a, &b, &c, &wts).unwrap();
            let (r2, c2) = interact(&b, &a, &c, &wts).unwrap();
            assert_eq!(r1, c2, "{mode}");
            assert_eq!(c1, r2, "{mode}");
        }
    }

    #[test]
    fn none_mode_does_not_mix_frames() {
        let c = cfg(InteractionMode::None, 1, 1);
        let wts = InteractionWeights::init(c, 4, 4, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let a = map(2, 2, 4, 1);
        let (r1, _) = interact(&a, &map(2, 2, 4, 2), &c, &wts).unwrap();
        let (r2, _) = interact(&a, &map(2, 2, 4, 3), &c, &wts).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn mismatched_inputs_rejected() {
        let c = cfg(InteractionMode::None, 1, 1);
        let wts = InteractionWeights::zeros(c, 4, 4).unwrap();
        assert!(interact(&map(2, 2, 4, 1), &map(2, 3, 4, 1), &c, &wts).is_err());
        let other = cfg(InteractionMode::Full, 1, 1);
        assert!(interact(&map(2, 2, 4, 1), &map(2, 2, 4, 1), &other, &wts).is_err());
    }

    #[test]
    fn backward_matches_finite_differences_for_every_mode() {
        for mode in [
            InteractionMode::None,
            InteractionMode::Full,
            InteractionMode::Deformable,
        ] {
            let c = cfg(mode, 2, 2);
            let wts = InteractionWeights::init(c, 3, 4, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
            let a = map(2, 3, 3, 31);
            let b = map(2, 3, 3, 32);
            let gr = map(4, 6, 4, 33);
            let gc = map(4, 6, 4, 34);
            let loss = |wt: &InteractionWeights| -> f64 {
                let (er, ec) = interact(&a, &b, &c, wt).unwrap();
                dot(er.e.data(), gr.data()) + dot(ec.e.data(), gc.data())
            };
            let (_, _, cache) = interact_cached(&a, &b, &c, &wts).unwrap();
            let g = interact_backward(
                &cache,
                &wts,
                &Matrix::from_map(gr.clone()).unwrap(),
                &Matrix::from_map(gc.clone()).unwrap(),
            )
            .unwrap();
            let analytic = flatten(&g);
            let e = 1e-6;
            let mut worst: f64 = 0.0;
            for i in 0..analytic.len() {
                let mut delta = vec![0.0; analytic.len()];
                delta[i] = e;
                let mut p = wts.clone();
                add_scaled(&mut p, &delta, 1.0);
                let mut m = wts.clone();
                add_scaled(&mut m, &delta, -1.0);
                let fd = (loss(&p) - loss(&m)) / (2.0 * e);
                worst = worst.max((fd - analytic[i]).abs() / (1.0 + fd.abs()));
            }
            assert!(worst < 1e-6, "{mode}: worst {worst}");
        }
    }
}
