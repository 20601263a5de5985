use super::layers::{
    col2im3, conv_backward, conv_forward, im2col3, maxpool2, maxpool2_backward, silu,
    silu_backward, upsample2, upsample2_backward,
};
use super::{Grads, ModelConfig, Params, OUT_CHANNELS};
use crate::datamodel::{FeatureMap, Image};
use crate::error::{Error, Result};
use crate::real::Real;

/// Intermediates of one conv-act-conv-act block.
#[derive(Clone, Debug)]
struct BlockRec<T> {
    conv1: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    cols1: Vec<T>,
    pre1: Vec<T>,
    cols2: Vec<T>,
    pre2: Vec<T>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub struct Tape<T> {
    cfg: ModelConfig,
    h: usize,
    w: usize,
    ph: usize,
    pw: usize,
    enc: Vec<BlockRec<T>>,
    pools: Vec<Vec<u32>>,
    bottom: BlockRec<T>,
    /// Decoder blocks indexed by level (0 = full resolution).
    dec: Vec<BlockRec<T>>,
    head_in: Vec<T>,
}

impl<T> Tape<T> {
    pub fn shape(&self) -> (usize, usize) {
        (self.h, self.w)
    }
}

fn reflect(i: usize, n: usize) -> usize {
    if i < n {
        i
    } else {
        2 * (n - 1) - i
    }
}

fn check_finite<T: Real>(v: &[T], layer: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite activation in {layer}")))
    }
}

/// Parameter slot of conv `i` in [`ModelConfig::convs`] order.
fn wb<T>(params: &Params<T>, conv: usize) -> (&[T], &[T]) {
    (&params.tensors[2 * conv].data, &params.tensors[2 * conv + 1].data)
}

fn conv_name(cfg: &ModelConfig, conv: usize) -> String {
    cfg.convs()
        .get(conv)
        .map(|c| c.name.clone())
        .unwrap_or_else(|| format!("conv{conv}"))
}

#[allow(clippy::too_many_arguments)]
fn block_forward<T: Real>(
    params: &Params<T>,
    conv1: usize,
    x: &[T],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
) -> Result<(Vec<T>, BlockRec<T>)> {
    let hw = h * w;
    let mut cols1 = Vec::new();
    im2col3(x, cin, h, w, &mut cols1);
    let (w1, b1) = wb(params, conv1);
    let mut pre1 = Vec::new();
    conv_forward(w1, b1, &cols1, cout, cin * 9, hw, &mut pre1);
    check_finite(&pre1, &conv_name(&params.cfg, conv1))?;
    let a1 = silu(&pre1);
    let mut cols2 = Vec::new();
    im2col3(&a1, cout, h, w, &mut cols2);
    let (w2, b2) = wb(params, conv1 + 1);
    let mut pre2 = Vec::new();
    conv_forward(w2, b2, &cols2, cout, cout * 9, hw, &mut pre2);
    check_finite(&pre2, &conv_name(&params.cfg, conv1 + 1))?;
    let out = silu(&pre2);
    Ok((
        out,
        BlockRec {
            conv1,
            cin,
            cout,
            h,
            w,
            cols1,
            pre1,
            cols2,
            pre2,
        },
    ))
}

fn block_backward<T: Real>(
    params: &Params<T>,
    rec: &BlockRec<T>,
    mut d_out: Vec<T>,
    grads: &mut Grads<T>,
    need_input: bool,
) -> Option<Vec<T>> {
    let hw = rec.h * rec.w;
    silu_backward(&rec.pre2, &mut d_out);
    let (w2, _) = wb(params, rec.conv1 + 1);
    let mut d_cols = Vec::new();
    {
        let (dw, db) = grads.split_at_mut(2 * (rec.conv1 + 1) + 1);
        conv_backward(
            w2,
            &rec.cols2,
            &d_out,
            rec.cout,
            rec.cout * 9,
            hw,
            &mut dw[2 * (rec.conv1 + 1)],
            &mut db[0],
            Some(&mut d_cols),
        );
    }
    let mut d_a1 = vec![T::zero(); rec.cout * hw];
    col2im3(&d_cols, rec.cout, rec.h, rec.w, &mut d_a1);
    silu_backward(&rec.pre1, &mut d_a1);
    let (w1, _) = wb(params, rec.conv1);
    let (dw, db) = grads.split_at_mut(2 * rec.conv1 + 1);
    if need_input {
        conv_backward(
            w1,
            &rec.cols1,
            &d_a1,
            rec.cout,
            rec.cin * 9,
            hw,
            &mut dw[2 * rec.conv1],
            &mut db[0],
            Some(&mut d_cols),
        );
        let mut d_in = vec![T::zero(); rec.cin * hw];
        col2im3(&d_cols, rec.cin, rec.h, rec.w, &mut d_in);
        Some(d_in)
    } else {
        conv_backward(
            w1,
            &rec.cols1,
            &d_a1,
            rec.cout,
            rec.cin * 9,
            hw,
            &mut dw[2 * rec.conv1],
            &mut db[0],
            None,
        );
        None
    }
}

/// Runs the network on `image`, returning the feature map and the tape.
///
/// Inputs whose sides are not multiples of `2^levels` are reflect-padded at
/// the bottom/right and the output is cropped back.
pub fn forward<T: Real>(params: &Params<T>, image: &Image) -> Result<(FeatureMap<T>, Tape<T>)> {
    let cfg = &params.cfg;
    let (h, w) = image.shape();
    if h < 8 || w < 8 {
        return Err(Error::Contract(format!("network input {h}x{w} is below 8 px")));
    }
    let stride = cfg.stride();
    let ph = h.div_ceil(stride) * stride;
    let pw = w.div_ceil(stride) * stride;
    if ph - h >= h || pw - w >= w {
        return Err(Error::Contract(format!(
            "input {h}x{w} too small to reflect-pad to a multiple of {stride}"
        )));
    }
    let mut x = Vec::with_capacity(ph * pw);
    for y in 0..ph {
        for xx in 0..pw {
            x.push(T::of(image.at(reflect(y, h), reflect(xx, w)) as f64));
        }
    }

    let levels = cfg.levels;
    let (mut ch, mut cw) = (ph, pw);
    let mut cin = 1;
    let mut enc = Vec::with_capacity(levels);
    let mut pools = Vec::with_capacity(levels);
    let mut skips = Vec::with_capacity(levels);
    for l in 0..levels {
        let cout = cfg.channels(l);
        let (out, rec) = block_forward(params, 2 * l, &x, cin, cout, ch, cw)?;
        let (pooled, arg) = maxpool2(&out, cout, ch, cw);
        enc.push(rec);
        pools.push(arg);
        skips.push(out);
        x = pooled;
        cin = cout;
        ch /= 2;
        cw /= 2;
    }
    let (out, bottom) = block_forward(params, 2 * levels, &x, cin, cfg.channels(levels), ch, cw)?;
    x = out;

    let mut dec: Vec<Option<BlockRec<T>>> = (0..levels).map(|_| None).collect();
    for (i, l) in (0..levels).rev().enumerate() {
        let c_deep = cfg.channels(l + 1);
        let mut cat = upsample2(&x, c_deep, ch, cw);
        ch *= 2;
        cw *= 2;
        cat.extend_from_slice(&skips[l]);
        let conv1 = 2 * (levels + 1) + 2 * i;
        let (out, rec) = block_forward(params, conv1, &cat, c_deep + cfg.channels(l), cfg.channels(l), ch, cw)?;
        dec[l] = Some(rec);
        x = out;
    }
    let head = 2 * (2 * levels + 1);
    let (hw_, hb) = wb(params, head);
    let mut z = Vec::new();
    conv_forward(hw_, hb, &x, OUT_CHANNELS, cfg.channels(0), ph * pw, &mut z);
    check_finite(&z, "head.conv")?;

    let mut fm = FeatureMap::zeros(h, w);
    for (c, dst) in [&mut fm.phi, &mut fm.u1, &mut fm.u2, &mut fm.z].into_iter().enumerate() {
        for y in 0..h {
            dst[y * w..(y + 1) * w].copy_from_slice(&z[c * ph * pw + y * pw..][..w]);
        }
    }
    let tape = Tape {
        cfg: cfg.clone(),
        h,
        w,
        ph,
        pw,
        enc,
        pools,
        bottom,
        dec: dec.into_iter().map(|d| d.expect("every decoder level ran")).collect(),
        head_in: x,
    };
    Ok((fm, tape))
}

/// Forward pass without keeping the tape.
pub fn predict<T: Real>(params: &Params<T>, image: &Image) -> Result<FeatureMap<T>> {
    forward(params, image).map(|(fm, _)| fm)
}

/// Accumulates `d loss / d params` into `grads` given `d loss / d Z`.
pub fn backward<T: Real>(
    params: &Params<T>,
    tape: &Tape<T>,
    d_z: &FeatureMap<T>,
    grads: &mut Grads<T>,
) -> Result<()> {
    let cfg = &params.cfg;
    if *cfg != tape.cfg {
        return Err(Error::Contract("tape was recorded with a different architecture".into()));
    }
    if (d_z.h, d_z.w) != (tape.h, tape.w) {
        return Err(Error::Contract(format!(
            "gradient {}x{} does not match forward input {}x{}",
            d_z.h, d_z.w, tape.h, tape.w
        )));
    }
    if grads.len() != params.tensors.len()
        || grads.iter().zip(&params.tensors).any(|(g, t)| g.len() != t.data.len())
    {
        return Err(Error::Contract("gradient buffers do not match parameters".into()));
    }
    let (h, w, ph, pw) = (tape.h, tape.w, tape.ph, tape.pw);
    let phw = ph * pw;
    let levels = cfg.levels;

    let mut d_head = vec![T::zero(); OUT_CHANNELS * phw];
    for (c, src) in [&d_z.phi, &d_z.u1, &d_z.u2, &d_z.z].into_iter().enumerate() {
        for y in 0..h {
            d_head[c * phw + y * pw..][..w].copy_from_slice(&src[y * w..(y + 1) * w]);
        }
    }
    let head = 2 * (2 * levels + 1);
    let c0 = cfg.channels(0);
    let mut d_x = Vec::new();
    {
        let (hw_, _) = wb(params, head);
        let (dw, db) = grads.split_at_mut(2 * head + 1);
        conv_backward(hw_, &tape.head_in, &d_head, OUT_CHANNELS, c0, phw, &mut dw[2 * head], &mut db[0], Some(&mut d_x));
    }

    let mut d_skips: Vec<Vec<T>> = vec![Vec::new(); levels];
    for l in 0..levels {
        let rec = &tape.dec[l];
        let d_cat = block_backward(params, rec, d_x, grads, true).expect("input gradient requested");
        let c_deep = cfg.channels(l + 1);
        let hw = rec.h * rec.w;
        d_skips[l] = d_cat[c_deep * hw..].to_vec();
        d_x = upsample2_backward(&d_cat[..c_deep * hw], c_deep, rec.h / 2, rec.w / 2);
    }
    d_x = block_backward(params, &tape.bottom, d_x, grads, true).expect("input gradient requested");
    for l in (0..levels).rev() {
        let rec = &tape.enc[l];
        let mut d_out = vec![T::zero(); rec.cout * rec.h * rec.w];
        maxpool2_backward(&d_x, &tape.pools[l], &mut d_out);
        for (a, b) in d_out.iter_mut().zip(&d_skips[l]) {
            *a += *b;
        }
        match block_backward(params, rec, d_out, grads, l > 0) {
            Some(d) => d_x = d,
            None => break,
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize, seed: f64) -> Image {
        let data = (0..h * w)
            .map(|i| (0.5 + 0.5 * ((i as f64) * 0.37 + seed).sin()) as f32)
            .collect();
        Image::new(h, w, data).unwrap()
    }

    #[test]
    fn zero_model_gives_zero_output() {
        let p = Params::<f32>::zeros(&ModelConfig::default());
        let img = Image::new(16, 16, vec![0.0; 256]).unwrap();
        let fm = predict(&p, &img).unwrap();
        assert!(fm.to_channels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_matches_input_shape_with_padding() {
        let p = Params::init(&ModelConfig::default(), 3).unwrap();
        for (h, w) in [(16, 16), (21, 19), (8, 12)] {
            let fm = predict(&p, &image(h, w, 0.0)).unwrap();
            assert_eq!((fm.h, fm.w), (h, w));
            assert!(fm.is_finite());
        }
    }

    #[test]
    fn tiny_inputs_are_rejected() {
        let p = Params::init(&ModelConfig::default(), 3).unwrap();
        assert!(matches!(predict(&p, &image(4, 16, 0.0)), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_weights_name_the_layer() {
        let mut p = Params::init(&ModelConfig::default(), 3).unwrap();
        p.tensors[2].data[0] = f32::INFINITY;
        match predict(&p, &image(16, 16, 0.0)) {
            Err(Error::Numeric(m)) => assert!(m.contains("enc.0.conv2"), "{m}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn backward_rejects_mismatched_shapes() {
        let p = Params::init(&ModelConfig::default(), 3).unwrap();
        let (_, tape) = forward(&p, &image(16, 16, 0.0)).unwrap();
        let mut g = p.zero_grads();
        let dz = FeatureMap::<f32>::zeros(8, 16);
        assert!(matches!(backward(&p, &tape, &dz, &mut g), Err(Error::Contract(_))));
        let other = Params::init(&ModelConfig { levels: 1, base_channels: 8 }, 3).unwrap();
        let dz = FeatureMap::<f32>::zeros(16, 16);
        let mut g = other.zero_grads();
        assert!(backward(&other, &tape, &dz, &mut g).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences_on_one_level_model() {
        let cfg = ModelConfig { levels: 1, base_channels: 2 };
        let p = Params::init(&cfg, 11).unwrap().cast::<f64>();
        let img = image(16, 16, 1.3);
        // Loss = sum of c * Z with fixed random coefficients.
        let coef: Vec<f64> = (0..4 * 256).map(|i| ((i as f64) * 0.731).cos()).collect();
        let loss = |p: &Params<f64>| -> f64 {
            let fm = predict(p, &img).unwrap();
            fm.to_channels().iter().zip(&coef).map(|(a, b)| a * b).sum()
        };
        let (_, tape) = forward(&p, &img).unwrap();
        let mut g = p.zero_grads();
        backward(&p, &tape, &FeatureMap::from_channels(16, 16, &coef), &mut g).unwrap();
        let h = 1e-6;
        for (ti, t) in p.tensors.iter().enumerate() {
            for j in [0, t.data.len() / 2, t.data.len() - 1] {
                let mut plus = p.clone();
                plus.tensors[ti].data[j] += h;
                let mut minus = p.clone();
                minus.tensors[ti].data[j] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let an = g[ti][j];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                assert!(rel <= 1e-4, "{} [{j}]: fd {fd} vs analytic {an}", t.name);
            }
        }
    }

    #[test]
    fn parameters_outside_the_loss_get_zero_gradient() {
        let p = Params::init(&ModelConfig::default(), 2).unwrap();
        let img = image(16, 16, 0.2);
        let (_, tape) = forward(&p, &img).unwrap();
        let mut dz = FeatureMap::<f32>::zeros(16, 16);
        dz.phi.iter_mut().for_each(|v| *v = 1.0);
        let mut g = p.zero_grads();
        backward(&p, &tape, &dz, &mut g).unwrap();
        let head_w = p.tensors.len() - 2;
        let c0 = p.cfg.channels(0);
        // Head rows for u1, u2, z do not touch the loss.
        assert!(g[head_w][c0..].iter().all(|&v| v == 0.0));
        assert!(g[head_w + 1][1..].iter().all(|&v| v == 0.0));
        assert!(g[head_w][..c0].iter().any(|&v| v != 0.0));
    }
}
