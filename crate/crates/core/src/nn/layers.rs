//! Batched layers over channels-last `[batch, height, width, channels]`
//! activations. Each layer has a forward pass returning whatever its
//! backward pass needs, and a backward pass that accumulates parameter
//! gradients into the parameter tensors and returns the input gradient.

use rand::Rng;

use super::tensor::{gemm, Tensor};
use crate::exec::Exec;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics for normalization, dropout active.
    Train,
    /// Running statistics, dropout off.
    Infer,
}

pub(crate) fn glorot_uniform<R: Rng + ?Sized>(
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(shape, data).expect("shape product matches")
}

/// Input channel count from which convolutions run as one matrix product
/// per kernel tap instead of over unfolded patches.
const SHIFTED_MIN_CHANNELS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Lowering {
    /// 1x1 kernel: the input already is the patch matrix.
    Direct,
    Im2col,
    Shifted,
}

/// Stride-1 convolution with "same" zero padding and an odd square kernel.
/// Weights are laid out `[kh][kw][in][out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv2d {
    pub fn zeros(kernel: usize, in_channels: usize, out_channels: usize) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        Self {
            kernel,
            in_channels,
            out_channels,
            weight: Tensor::zeros(vec![kernel, kernel, in_channels, out_channels]),
            bias: Tensor::zeros(vec![out_channels]),
        }
    }

    pub fn glorot<R: Rng + ?Sized>(
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        let mut c = Self::zeros(kernel, in_channels, out_channels);
        let area = kernel * kernel;
        c.weight = glorot_uniform(
            vec![kernel, kernel, in_channels, out_channels],
            area * in_channels,
            area * out_channels,
            rng,
        );
        c
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        let (b, h, w, c) = x.dims4()?;
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        Ok((b, h, w))
    }

    fn lowering(&self) -> Lowering {
        if self.kernel == 1 {
            Lowering::Direct
        } else if self.in_channels < SHIFTED_MIN_CHANNELS {
            Lowering::Im2col
        } else {
            Lowering::Shifted
        }
    }

    /// Unfolds one sample into `(h*w) x (k*k*cin)` patches.
    fn im2col(&self, x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (k, cin, plen) = (self.kernel, self.in_channels, self.patch_len());
        let pad = k / 2;
        let mut col = vec![0.0; h * w * plen];
        for y in 0..h {
            for xx in 0..w {
                let row = (y * w + xx) * plen;
                for dh in 0..k {
                    let Some(sy) = (y + dh).checked_sub(pad).filter(|&s| s < h) else {
                        continue;
                    };
                    for dw in 0..k {
                        let Some(sx) = (xx + dw).checked_sub(pad).filter(|&s| s < w) else {
                            continue;
                        };
                        let src = (sy * w + sx) * cin;
                        let dst = row + (dh * k + dw) * cin;
                        col[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[f64], h: usize, w: usize, dx: &mut [f64]) {
        let (k, cin, plen) = (self.kernel, self.in_channels, self.patch_len());
        let pad = k / 2;
        for y in 0..h {
            for xx in 0..w {
                let row = (y * w + xx) * plen;
                for dh in 0..k {
                    let Some(sy) = (y + dh).checked_sub(pad).filter(|&s| s < h) else {
                        continue;
                    };
                    for dw in 0..k {
                        let Some(sx) = (xx + dw).checked_sub(pad).filter(|&s| s < w) else {
                            continue;
                        };
                        let dst = (sy * w + sx) * cin;
                        let src = row + (dh * k + dw) * cin;
                        dx[dst..dst + cin]
                            .iter_mut()
                            .zip(&col[src..src + cin])
                            .for_each(|(d, s)| *d += s);
                    }
                }
            }
        }
    }

    /// Zero-padded copy of one sample with `k - 1` spare pixels at the end,
    /// so that every kernel tap is a contiguous `(h * wp) x cin` view
    /// (`wp = w + k - 1`) starting at the tap's pixel offset.
    fn pad_input(&self, x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (k, cin) = (self.kernel, self.in_channels);
        let (pad, wp) = (k / 2, w + k - 1);
        let mut xp = vec![0.0; ((h + k - 1) * wp + k - 1) * cin];
        for y in 0..h {
            let dst = ((y + pad) * wp + pad) * cin;
            xp[dst..dst + w * cin].copy_from_slice(&x[y * w * cin..(y + 1) * w * cin]);
        }
        xp
    }

    /// (weight slice start, pixel offset into the padded input) per tap.
    fn taps(&self, wp: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let (k, block) = (self.kernel, self.in_channels * self.out_channels);
        (0..k * k).map(move |t| (t * block, (t / k) * wp + t % k))
    }

    pub fn forward(&self, x: &Tensor, exec: Exec) -> Result<Tensor> {
        let (b, h, w) = self.check_input(x)?;
        let (cin, cout, plen) = (self.in_channels, self.out_channels, self.patch_len());
        let mut out = Tensor::zeros(vec![b, h, w, cout]);
        if b * h * w == 0 {
            return Ok(out);
        }
        let bias = self.bias.data();
        let weight = self.weight.data();
        exec.for_each_chunk(out.data_mut(), h * w * cout, |i, y| {
            let xs = &x.data()[i * h * w * cin..(i + 1) * h * w * cin];
            for px in y.chunks_mut(cout) {
                px.copy_from_slice(bias);
            }
            match self.lowering() {
                Lowering::Direct => gemm(
                    h * w,
                    cin,
                    cout,
                    xs,
                    (cin, 1),
                    weight,
                    (cout, 1),
                    1.0,
                    y,
                    cout,
                ),
                Lowering::Im2col => {
                    let col = self.im2col(xs, h, w);
                    gemm(
                        h * w,
                        plen,
                        cout,
                        &col,
                        (plen, 1),
                        weight,
                        (cout, 1),
                        1.0,
                        y,
                        cout,
                    );
                }
                Lowering::Shifted => {
                    let wp = w + self.kernel - 1;
                    let xp = self.pad_input(xs, h, w);
                    let mut yp = vec![0.0; h * wp * cout];
                    for (wo, po) in self.taps(wp) {
                        let wt = &weight[wo..wo + cin * cout];
                        gemm(
                            h * wp,
                            cin,
                            cout,
                            &xp[po * cin..],
                            (cin, 1),
                            wt,
                            (cout, 1),
                            1.0,
                            &mut yp,
                            cout,
                        );
                    }
                    for (row, src) in y.chunks_mut(w * cout).zip(yp.chunks(wp * cout)) {
                        row.iter_mut().zip(src).for_each(|(o, v)| *o += v);
                    }
                }
            }
        });
        Ok(out)
    }

    /// Accumulates weight and bias gradients; returns the input gradient
    /// when `need_dx` is set.
    pub fn backward(
        &mut self,
        x: &Tensor,
        dy: &Tensor,
        exec: Exec,
        need_dx: bool,
    ) -> Result<Option<Tensor>> {
        let (b, h, w) = self.check_input(x)?;
        let (cin, cout, plen) = (self.in_channels, self.out_channels, self.patch_len());
        if dy.shape() != [b, h, w, cout] {
            return Err(Error::Shape(format!(
                "conv output gradient {:?} does not match [{b}, {h}, {w}, {cout}]",
                dy.shape()
            )));
        }
        let this = &*self;
        let wt = this.weight.data();
        let per_item = exec.map(b, |i| {
            let xs = &x.data()[i * h * w * cin..(i + 1) * h * w * cin];
            let g = &dy.data()[i * h * w * cout..(i + 1) * h * w * cout];
            let mut dw = vec![0.0; plen * cout];
            let mut db = vec![0.0; cout];
            for px in g.chunks(cout) {
                db.iter_mut().zip(px).for_each(|(d, v)| *d += v);
            }
            let mut dx = need_dx.then(|| vec![0.0; xs.len()]);
            match this.lowering() {
                Lowering::Direct => {
                    gemm(
                        cin,
                        h * w,
                        cout,
                        xs,
                        (1, cin),
                        g,
                        (cout, 1),
                        0.0,
                        &mut dw,
                        cout,
                    );
                    if let Some(dx) = &mut dx {
                        gemm(h * w, cout, cin, g, (cout, 1), wt, (1, cout), 0.0, dx, cin);
                    }
                }
                Lowering::Im2col => {
                    let col = this.im2col(xs, h, w);
                    gemm(
                        plen,
                        h * w,
                        cout,
                        &col,
                        (1, plen),
                        g,
                        (cout, 1),
                        0.0,
                        &mut dw,
                        cout,
                    );
                    if let Some(dx) = &mut dx {
                        let mut dcol = vec![0.0; h * w * plen];
                        gemm(
                            h * w,
                            cout,
                            plen,
                            g,
                            (cout, 1),
                            wt,
                            (1, cout),
                            0.0,
                            &mut dcol,
                            plen,
                        );
                        this.col2im(&dcol, h, w, dx);
                    }
                }
                Lowering::Shifted => {
                    let (pad, wp) = (this.kernel / 2, w + this.kernel - 1);
                    let xp = this.pad_input(xs, h, w);
                    // output gradient on the padded-width grid, zero in the
                    // spare columns so they contribute nothing
                    let mut gp = vec![0.0; h * wp * cout];
                    for (dst, src) in gp.chunks_mut(wp * cout).zip(g.chunks(w * cout)) {
                        dst[..w * cout].copy_from_slice(src);
                    }
                    for (wo, po) in this.taps(wp) {
                        let dwt = &mut dw[wo..wo + cin * cout];
                        gemm(
                            cin,
                            h * wp,
                            cout,
                            &xp[po * cin..],
                            (1, cin),
                            &gp,
                            (cout, 1),
                            0.0,
                            dwt,
                            cout,
                        );
                    }
                    if let Some(dx) = &mut dx {
                        let mut dxp = vec![0.0; xp.len()];
                        for (wo, po) in this.taps(wp) {
                            let wtap = &wt[wo..wo + cin * cout];
                            gemm(
                                h * wp,
                                cout,
                                cin,
                                &gp,
                                (cout, 1),
                                wtap,
                                (1, cout),
                                1.0,
                                &mut dxp[po * cin..],
                                cin,
                            );
                        }
                        for y in 0..h {
                            let src = ((y + pad) * wp + pad) * cin;
                            dx[y * w * cin..(y + 1) * w * cin]
                                .copy_from_slice(&dxp[src..src + w * cin]);
                        }
                    }
                }
            }
            (dw, db, dx)
        });
        let mut dx_all = need_dx.then(|| Vec::with_capacity(x.len()));
        for (dw, db, dx) in per_item {
            self.weight.accumulate_grad(&dw);
            self.bias.accumulate_grad(&db);
            if let (Some(all), Some(dx)) = (&mut dx_all, dx) {
                all.extend_from_slice(&dx);
            }
        }
        dx_all
            .map(|d| Tensor::new(vec![b, h, w, cin], d))
            .transpose()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Per-channel batch normalization, `y = gamma * (x - mu) / sqrt(var + eps) + beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    /// `None` until the first training step.
    pub running: Option<RunningStats>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    batch_stats: Option<RunningStats>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::filled(vec![channels], 1.0),
            beta: Tensor::zeros(vec![channels]),
            running: None,
            momentum: 0.9,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, BnCache)> {
        let c = self.channels();
        let (b, h, w, xc) = x.dims4()?;
        if xc != c {
            return Err(Error::Shape(format!(
                "batch norm over {c} channels got {xc}"
            )));
        }
        let n = b * h * w;
        let (mean, var, batch_stats) = match mode {
            Mode::Train => {
                if n == 0 {
                    return Err(Error::Input("batch norm on an empty batch".into()));
                }
                let mut mean = vec![0.0; c];
                for px in x.data().chunks(c) {
                    mean.iter_mut().zip(px).for_each(|(m, v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; c];
                for px in x.data().chunks(c) {
                    for ((s, v), m) in var.iter_mut().zip(px).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= n as f64);
                let stats = RunningStats {
                    mean: mean.clone(),
                    var: var.clone(),
                };
                (mean, var, Some(stats))
            }
            Mode::Infer => {
                let r = self.running.as_ref().ok_or_else(|| {
                    Error::State("batch norm used for inference before any training step".into())
                })?;
                (r.mean.clone(), r.var.clone(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = vec![0.0; x.len()];
        let mut y = vec![0.0; x.len()];
        let (gamma, beta) = (self.gamma.data(), self.beta.data());
        for ((px, xo), yo) in x
            .data()
            .chunks_exact(c)
            .zip(xhat.chunks_exact_mut(c))
            .zip(y.chunks_exact_mut(c))
        {
            for ch in 0..c {
                let xh = (px[ch] - mean[ch]) * inv_std[ch];
                xo[ch] = xh;
                yo[ch] = gamma[ch] * xh + beta[ch];
            }
        }
        Ok((
            Tensor::new(x.shape().to_vec(), y)?,
            BnCache {
                xhat,
                inv_std,
                batch_stats,
            },
        ))
    }

    /// Folds the batch statistics of a training-mode forward pass into the
    /// running estimates (starting from mean 0, variance 1).
    pub fn update_running(&mut self, cache: &BnCache) {
        let Some(batch) = &cache.batch_stats else {
            return;
        };
        let c = self.channels();
        let m = self.momentum;
        let r = self.running.get_or_insert_with(|| RunningStats {
            mean: vec![0.0; c],
            var: vec![1.0; c],
        });
        for ch in 0..c {
            r.mean[ch] = m * r.mean[ch] + (1.0 - m) * batch.mean[ch];
            r.var[ch] = m * r.var[ch] + (1.0 - m) * batch.var[ch];
        }
    }

    pub fn backward(&mut self, cache: &BnCache, dy: &Tensor) -> Result<Tensor> {
        let c = self.channels();
        if dy.len() != cache.xhat.len() {
            return Err(Error::Shape(
                "batch norm gradient does not match cache".into(),
            ));
        }
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for (g, xh) in dy.data().chunks_exact(c).zip(cache.xhat.chunks_exact(c)) {
            for ch in 0..c {
                sum_dy[ch] += g[ch];
                sum_dy_xhat[ch] += g[ch] * xh[ch];
            }
        }
        self.gamma.accumulate_grad(&sum_dy_xhat);
        self.beta.accumulate_grad(&sum_dy);
        let gamma = self.gamma.data();
        let n = (dy.len() / c) as f64;
        let scale: Vec<f64> = gamma
            .iter()
            .zip(&cache.inv_std)
            .map(|(g, s)| g * s)
            .collect();
        let mut dx = vec![0.0; dy.len()];
        let rows = dy.data().chunks_exact(c).zip(cache.xhat.chunks_exact(c));
        if cache.batch_stats.is_some() {
            let mean_dy: Vec<f64> = sum_dy.iter().map(|v| v / n).collect();
            let mean_dy_xhat: Vec<f64> = sum_dy_xhat.iter().map(|v| v / n).collect();
            for ((g, xh), out) in rows.zip(dx.chunks_exact_mut(c)) {
                for ch in 0..c {
                    out[ch] = scale[ch] * (g[ch] - mean_dy[ch] - xh[ch] * mean_dy_xhat[ch]);
                }
            }
        } else {
            for ((g, _), out) in rows.zip(dx.chunks_exact_mut(c)) {
                for ch in 0..c {
                    out[ch] = scale[ch] * g[ch];
                }
            }
        }
        Tensor::new(dy.shape().to_vec(), dx)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Channel attention: spatial mean, a `C -> C/ratio -> C` bottleneck with
/// ReLU then sigmoid, and per-channel rescaling of the input.
#[derive(Debug, Clone, PartialEq)]
pub struct SqueezeExcite {
    pub channels: usize,
    pub hidden: usize,
    /// `[channels, hidden]`
    pub w1: Tensor,
    pub b1: Tensor,
    /// `[hidden, channels]`
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone)]
pub struct SeCache {
    z: Vec<f64>,
    pre: Vec<f64>,
    hid: Vec<f64>,
    s: Vec<f64>,
}

impl SeCache {
    /// Channel gates, `[batch * channels]`.
    pub fn gates(&self) -> &[f64] {
        &self.s
    }
}

impl SqueezeExcite {
    pub fn zeros(channels: usize, ratio: usize) -> Result<Self> {
        if ratio == 0 || !channels.is_multiple_of(ratio) {
            return Err(Error::Config(format!(
                "SE ratio {ratio} must divide {channels} channels"
            )));
        }
        let hidden = channels / ratio;
        Ok(Self {
            channels,
            hidden,
            w1: Tensor::zeros(vec![channels, hidden]),
            b1: Tensor::zeros(vec![hidden]),
            w2: Tensor::zeros(vec![hidden, channels]),
            b2: Tensor::zeros(vec![channels]),
        })
    }

    pub fn glorot<R: Rng + ?Sized>(channels: usize, ratio: usize, rng: &mut R) -> Result<Self> {
        let mut se = Self::zeros(channels, ratio)?;
        let hidden = se.hidden;
        se.w1 = glorot_uniform(vec![channels, hidden], channels, hidden, rng);
        se.w2 = glorot_uniform(vec![hidden, channels], hidden, channels, rng);
        Ok(se)
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn forward(&self, x: &Tensor, exec: Exec) -> Result<(Tensor, SeCache)> {
        let (b, h, w, c) = x.dims4()?;
        if c != self.channels {
            return Err(Error::Shape(format!(
                "SE over {} channels got {c}",
                self.channels
            )));
        }
        let hw = h * w;
        let hd = self.hidden;
        let per_item = exec.map(b, |i| {
            let xs = &x.data()[i * hw * c..(i + 1) * hw * c];
            let mut z = vec![0.0; c];
            for px in xs.chunks(c) {
                z.iter_mut().zip(px).for_each(|(a, v)| *a += v);
            }
            z.iter_mut().for_each(|a| *a /= hw as f64);
            let mut pre = self.b1.data().to_vec();
            for (ch, zc) in z.iter().enumerate() {
                let row = &self.w1.data()[ch * hd..(ch + 1) * hd];
                pre.iter_mut().zip(row).for_each(|(p, wv)| *p += zc * wv);
            }
            let hid: Vec<f64> = pre.iter().map(|&p| p.max(0.0)).collect();
            let mut s = self.b2.data().to_vec();
            for (j, hj) in hid.iter().enumerate() {
                let row = &self.w2.data()[j * c..(j + 1) * c];
                s.iter_mut().zip(row).for_each(|(a, wv)| *a += hj * wv);
            }
            s.iter_mut().for_each(|a| *a = sigmoid(*a));
            let y: Vec<f64> = xs
                .chunks(c)
                .flat_map(|px| px.iter().zip(&s).map(|(v, g)| v * g))
                .collect();
            (y, z, pre, hid, s)
        });
        let mut y = Vec::with_capacity(x.len());
        let mut cache = SeCache {
            z: Vec::with_capacity(b * c),
            pre: Vec::with_capacity(b * hd),
            hid: Vec::with_capacity(b * hd),
            s: Vec::with_capacity(b * c),
        };
        for (yi, z, pre, hid, s) in per_item {
            y.extend(yi);
            cache.z.extend(z);
            cache.pre.extend(pre);
            cache.hid.extend(hid);
            cache.s.extend(s);
        }
        Ok((Tensor::new(x.shape().to_vec(), y)?, cache))
    }

    pub fn backward(
        &mut self,
        x: &Tensor,
        cache: &SeCache,
        dy: &Tensor,
        exec: Exec,
    ) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        if dy.shape() != x.shape() {
            return Err(Error::Shape("SE gradient shape differs from input".into()));
        }
        let hw = h * w;
        let hd = self.hidden;
        let this = &*self;
        let per_item = exec.map(b, |i| {
            let xs = &x.data()[i * hw * c..(i + 1) * hw * c];
            let g = &dy.data()[i * hw * c..(i + 1) * hw * c];
            let s = &cache.s[i * c..(i + 1) * c];
            let z = &cache.z[i * c..(i + 1) * c];
            let pre = &cache.pre[i * hd..(i + 1) * hd];
            let hid = &cache.hid[i * hd..(i + 1) * hd];
            let mut ds = vec![0.0; c];
            for (px, gx) in xs.chunks(c).zip(g.chunks(c)) {
                for ch in 0..c {
                    ds[ch] += px[ch] * gx[ch];
                }
            }
            let dpre2: Vec<f64> = ds.iter().zip(s).map(|(d, s)| d * s * (1.0 - s)).collect();
            let mut dw2 = vec![0.0; hd * c];
            let mut dhid = vec![0.0; hd];
            for j in 0..hd {
                let row = &this.w2.data()[j * c..(j + 1) * c];
                for ch in 0..c {
                    dw2[j * c + ch] = hid[j] * dpre2[ch];
                    dhid[j] += row[ch] * dpre2[ch];
                }
            }
            let dpre1: Vec<f64> = dhid
                .iter()
                .zip(pre)
                .map(|(d, &p)| if p > 0.0 { *d } else { 0.0 })
                .collect();
            let mut dw1 = vec![0.0; c * hd];
            let mut dz = vec![0.0; c];
            for ch in 0..c {
                let row = &this.w1.data()[ch * hd..(ch + 1) * hd];
                for j in 0..hd {
                    dw1[ch * hd + j] = z[ch] * dpre1[j];
                    dz[ch] += row[j] * dpre1[j];
                }
            }
            let mut dx = Vec::with_capacity(g.len());
            for gx in g.chunks(c) {
                dx.extend((0..c).map(|ch| gx[ch] * s[ch] + dz[ch] / hw as f64));
            }
            (dx, dw1, dpre1, dw2, dpre2)
        });
        let mut dx = Vec::with_capacity(x.len());
        for (dxi, dw1, db1, dw2, db2) in per_item {
            dx.extend(dxi);
            self.w1.accumulate_grad(&dw1);
            self.b1.accumulate_grad(&db1);
            self.w2.accumulate_grad(&dw2);
            self.b2.accumulate_grad(&db2);
        }
        Tensor::new(x.shape().to_vec(), dx)
    }
}

/// Non-overlapping max pooling; trailing rows/columns that do not fill a
/// window are dropped. Returns the pooled tensor and, per output element,
/// the flat input index of its (first) maximum.
pub fn maxpool2d(x: &Tensor, pool: (usize, usize)) -> Result<(Tensor, Vec<usize>)> {
    let (b, h, w, c) = x.dims4()?;
    let (ph, pw) = pool;
    if ph == 0 || pw == 0 || h < ph || w < pw {
        return Err(Error::Shape(format!(
            "pool {pool:?} does not fit a {h}x{w} input"
        )));
    }
    let (oh, ow) = (h / ph, w / pw);
    let mut out = Vec::with_capacity(b * oh * ow * c);
    let mut argmax = Vec::with_capacity(b * oh * ow * c);
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = (usize::MAX, f64::NEG_INFINITY);
                    for dy in 0..ph {
                        for dx in 0..pw {
                            let idx = ((bi * h + oy * ph + dy) * w + ox * pw + dx) * c + ch;
                            let v = x.data()[idx];
                            if v > best.1 || best.0 == usize::MAX {
                                best = (idx, v);
                            }
                        }
                    }
                    out.push(best.1);
                    argmax.push(best.0);
                }
            }
        }
    }
    Ok((Tensor::new(vec![b, oh, ow, c], out)?, argmax))
}

pub fn maxpool2d_backward(dy: &Tensor, argmax: &[usize], input_shape: &[usize]) -> Result<Tensor> {
    if dy.len() != argmax.len() {
        return Err(Error::Shape("pool gradient does not match argmax".into()));
    }
    let mut dx = Tensor::zeros(input_shape.to_vec());
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(dy.data()) {
        d[i] += g;
    }
    Ok(dx)
}

/// Inverted dropout. In training mode each element is zeroed with
/// probability `rate` and survivors are scaled by `1 / (1 - rate)`; the
/// returned mask holds the per-element multiplier.
pub fn dropout<R: Rng + ?Sized>(
    x: &Tensor,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor, Option<Vec<f64>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Infer || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..x.len())
        .map(|_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        })
        .collect();
    let y = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
    Ok((Tensor::new(x.shape().to_vec(), y)?, Some(mask)))
}

pub fn dropout_backward(dy: &Tensor, mask: Option<&[f64]>) -> Result<Tensor> {
    match mask {
        None => Ok(dy.clone()),
        Some(m) => Tensor::new(
            dy.shape().to_vec(),
            dy.data().iter().zip(m).map(|(g, m)| g * m).collect(),
        ),
    }
}

/// `[B, H, W, C] -> [B, C]` spatial mean.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    let hw = h * w;
    if hw == 0 {
        return Err(Error::Shape("global average pool over an empty map".into()));
    }
    let mut out = vec![0.0; b * c];
    for (bi, item) in x.data().chunks(hw * c).enumerate() {
        let o = &mut out[bi * c..(bi + 1) * c];
        for px in item.chunks(c) {
            o.iter_mut().zip(px).for_each(|(a, v)| *a += v);
        }
        o.iter_mut().for_each(|a| *a /= hw as f64);
    }
    Tensor::new(vec![b, c], out)
}

pub fn global_avg_pool_backward(dy: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
    let [b, h, w, c] = input_shape[..] else {
        return Err(Error::Shape("expected a rank-4 input shape".into()));
    };
    if dy.shape() != [b, c] {
        return Err(Error::Shape("pool gradient shape mismatch".into()));
    }
    let scale = 1.0 / (h * w) as f64;
    let mut dx = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        let g = &dy.data()[bi * c..(bi + 1) * c];
        for _ in 0..h * w {
            dx.extend(g.iter().map(|v| v * scale));
        }
    }
    Tensor::new(input_shape.to_vec(), dx)
}

/// Fully connected layer, weights `[inputs, outputs]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: Tensor::zeros(vec![inputs, outputs]),
            bias: Tensor::zeros(vec![outputs]),
        }
    }

    pub fn glorot<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let mut d = Self::zeros(inputs, outputs);
        d.weight = glorot_uniform(vec![inputs, outputs], inputs, outputs, rng);
        d
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n) = x.dims2()?;
        if n != self.inputs {
            return Err(Error::Shape(format!(
                "dense expects {} inputs, got {n}",
                self.inputs
            )));
        }
        let mut out = Vec::with_capacity(b * self.outputs);
        for row in x.data().chunks(n) {
            let mut o = self.bias.data().to_vec();
            for (i, xi) in row.iter().enumerate() {
                let wr = &self.weight.data()[i * self.outputs..(i + 1) * self.outputs];
                o.iter_mut().zip(wr).for_each(|(a, w)| *a += xi * w);
            }
            out.extend(o);
        }
        Tensor::new(vec![b, self.outputs], out)
    }

    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Result<Tensor> {
        let (b, n) = x.dims2()?;
        if dy.shape() != [b, self.outputs] {
            return Err(Error::Shape("dense gradient shape mismatch".into()));
        }
        let m = self.outputs;
        let mut dw = vec![0.0; n * m];
        let mut db = vec![0.0; m];
        let mut dx = vec![0.0; b * n];
        for bi in 0..b {
            let xr = &x.data()[bi * n..(bi + 1) * n];
            let g = &dy.data()[bi * m..(bi + 1) * m];
            db.iter_mut().zip(g).for_each(|(d, v)| *d += v);
            for i in 0..n {
                let wr = &self.weight.data()[i * m..(i + 1) * m];
                let mut acc = 0.0;
                for o in 0..m {
                    dw[i * m + o] += xr[i] * g[o];
                    acc += wr[o] * g[o];
                }
                dx[bi * n + i] = acc;
            }
        }
        self.weight.accumulate_grad(&dw);
        self.bias.accumulate_grad(&db);
        Tensor::new(vec![b, n], dx)
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (_, k) = logits.dims2()?;
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(k) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = e.iter().sum();
        out.extend(e.into_iter().map(|v| v / sum));
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Dense layer followed by softmax.
pub fn dense_softmax(x: &Tensor, layer: &Dense) -> Result<Tensor> {
    softmax(&layer.forward(x)?)
}

/// Backpropagates a gradient with respect to probabilities through softmax.
pub fn softmax_backward(probs: &Tensor, dprobs: &Tensor) -> Result<Tensor> {
    let (_, k) = probs.dims2()?;
    if dprobs.shape() != probs.shape() {
        return Err(Error::Shape("softmax gradient shape mismatch".into()));
    }
    let mut out = Vec::with_capacity(probs.len());
    for (p, g) in probs.data().chunks(k).zip(dprobs.data().chunks(k)) {
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        out.extend(p.iter().zip(g).map(|(pi, gi)| pi * (gi - dot)));
    }
    Tensor::new(probs.shape().to_vec(), out)
}
