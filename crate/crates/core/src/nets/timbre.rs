use cyclevc_autograd::layers::{Conv2d, Linear};
use cyclevc_autograd::{Binder, ParamStore, Var};
use rand::Rng;

/// Frame-wise frequency-axis convolutions followed by a time average.
///
/// Each frame is processed independently and the pooled sum is taken in a
/// fixed value order, so permuting the input frames leaves the output
/// bit-identical.
#[derive(Clone, Debug)]
pub struct TimbreTrunk {
    convs: Vec<Conv2d>,
    proj: Linear,
    bins: usize,
    channels: usize,
    hidden: usize,
}

impl TimbreTrunk {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        bins: usize,
        layers: usize,
        channels: usize,
        kernel: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let convs = (0..layers)
            .map(|i| {
                let cin = if i == 0 { 1 } else { channels };
                Conv2d::new(store, &format!("{prefix}.conv{i}"), cin, channels, (1, kernel), (1, 1), (0, kernel / 2), rng)
            })
            .collect();
        let proj = Linear::new(store, &format!("{prefix}.proj"), bins * channels, hidden, rng);
        TimbreTrunk { convs, proj, bins, channels, hidden }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// `(B, T, D)` normalized mel → `(B, hidden)`.
    pub fn forward<'g>(&self, p: &Binder<'g, '_>, x: Var<'g>) -> Var<'g> {
        let (b, t) = (x.dim(0), x.dim(1));
        let mut h = x.reshape(&[b, t, self.bins, 1]);
        for c in &self.convs {
            h = c.forward(p, h).relu();
        }
        let h = self.proj.forward(p, h.reshape(&[b, t, self.bins * self.channels])).relu();
        h.pool_mean_axis(1).reshape(&[b, self.hidden])
    }
}
