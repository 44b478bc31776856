use cyclevc_autograd::layers::{DepthwiseConv1d, LayerNorm, Linear};
use cyclevc_autograd::{rel_pos_bias, Binder, ParamId, ParamStore, Var};
use rand::Rng;

/// Macaron conformer block: half FFN, self-attention with learned relative
/// position bias, convolution module, half FFN, final layer norm.
#[derive(Clone, Debug)]
pub struct ConformerLayer {
    ff1: FeedForward,
    att_norm: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    pos: ParamId,
    heads: usize,
    conv_norm: LayerNorm,
    conv_in: Linear,
    depthwise: DepthwiseConv1d,
    conv_mid_norm: LayerNorm,
    conv_out: Linear,
    ff2: FeedForward,
    out_norm: LayerNorm,
    dim: usize,
}

#[derive(Clone, Debug)]
struct FeedForward {
    norm: LayerNorm,
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new(store: &mut ParamStore, name: &str, dim: usize, mult: usize, rng: &mut impl Rng) -> Self {
        FeedForward {
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            up: Linear::new(store, &format!("{name}.up"), dim, dim * mult, rng),
            down: Linear::new(store, &format!("{name}.down"), dim * mult, dim, rng),
        }
    }

    fn forward<'g>(&self, p: &Binder<'g, '_>, x: Var<'g>) -> Var<'g> {
        self.down.forward(p, self.up.forward(p, self.norm.forward(p, x)).silu())
    }
}

impl ConformerLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ff_mult: usize,
        kernel: usize,
        max_rel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let n = |s: &str| format!("{name}.{s}");
        ConformerLayer {
            ff1: FeedForward::new(store, &n("ff1"), dim, ff_mult, rng),
            att_norm: LayerNorm::new(store, &n("att.norm"), dim),
            q: Linear::new(store, &n("att.q"), dim, dim, rng),
            k: Linear::new(store, &n("att.k"), dim, dim, rng),
            v: Linear::new(store, &n("att.v"), dim, dim, rng),
            o: Linear::new(store, &n("att.o"), dim, dim, rng),
            pos: store.add_uniform(n("att.pos"), &[heads, 2 * max_rel + 1], 0.02, rng),
            heads,
            conv_norm: LayerNorm::new(store, &n("conv.norm"), dim),
            conv_in: Linear::new(store, &n("conv.in"), dim, 2 * dim, rng),
            depthwise: DepthwiseConv1d::new(store, &n("conv.depthwise"), dim, kernel, rng),
            conv_mid_norm: LayerNorm::new(store, &n("conv.mid_norm"), dim),
            conv_out: Linear::new(store, &n("conv.out"), dim, dim, rng),
            ff2: FeedForward::new(store, &n("ff2"), dim, ff_mult, rng),
            out_norm: LayerNorm::new(store, &n("out_norm"), dim),
            dim,
        }
    }

    fn attention<'g>(&self, p: &Binder<'g, '_>, x: Var<'g>) -> Var<'g> {
        let (b, l, h) = (x.dim(0), x.dim(1), self.heads);
        let dh = self.dim / h;
        let x = self.att_norm.forward(p, x);
        let split = |y: Var<'g>| y.reshape(&[b, l, h, dh]).permute(&[0, 2, 1, 3]);
        let q = split(self.q.forward(p, x));
        let k = self.k.forward(p, x).reshape(&[b, l, h, dh]).permute(&[0, 2, 3, 1]);
        let v = split(self.v.forward(p, x));
        let bias = rel_pos_bias(p.param(self.pos), l);
        let scores = q.matmul(k).scale(1.0 / (dh as f64).sqrt()).add(bias);
        let ctx = scores.softmax().matmul(v).permute(&[0, 2, 1, 3]).reshape(&[b, l, self.dim]);
        self.o.forward(p, ctx)
    }

    fn conv_module<'g>(&self, p: &Binder<'g, '_>, x: Var<'g>) -> Var<'g> {
        let y = self.conv_in.forward(p, self.conv_norm.forward(p, x));
        let gated = y.narrow(2, 0, self.dim).mul(y.narrow(2, self.dim, self.dim).sigmoid());
        let y = self.conv_mid_norm.forward(p, self.depthwise.forward(p, gated)).silu();
        self.conv_out.forward(p, y)
    }

    /// `(B, L, M)` → `(B, L, M)`.
    pub fn forward<'g>(&self, p: &Binder<'g, '_>, x: Var<'g>) -> Var<'g> {
        let x = x.add(self.ff1.forward(p, x).scale(0.5));
        let x = x.add(self.attention(p, x));
        let x = x.add(self.conv_module(p, x));
        let x = x.add(self.ff2.forward(p, x).scale(0.5));
        self.out_norm.forward(p, x)
    }
}
