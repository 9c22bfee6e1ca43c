//! Independent reference implementations shared by the integration tests.
//! The `naive_*` functions, [`cas_reference`] and [`brute_force_metrics`]
//! use plain index loops and never touch the tape.
#![allow(dead_code)]

pub mod gradsuite;

use cas_core::sharing::{cas_forward, AblationConfig, CasParams, MAP_KERNEL};
use cas_core::{Initializer, ParamStore, Shape, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: Shape, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn naive_gap(x: &Tensor) -> Tensor {
    let [n, h, w, c] = x.shape().0;
    let mut out = Tensor::zeros(Shape::new(n, 1, 1, c));
    for i in 0..n {
        for ch in 0..c {
            let mut s = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    s += x.at([i, y, xx, ch]);
                }
            }
            out.set([i, 0, 0, ch], s / (h * w) as f64);
        }
    }
    out
}

/// `w` is `[1, 1, Cout, Cin]`, `b` is `[1, 1, 1, Cout]`.
pub fn naive_linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let n = x.shape().n();
    let (cout, cin) = (w.shape().w(), w.shape().c());
    let mut out = Tensor::zeros(Shape::new(n, 1, 1, cout));
    for i in 0..n {
        for o in 0..cout {
            let mut s = b.at([0, 0, 0, o]);
            for k in 0..cin {
                s += w.at([0, 0, o, k]) * x.at([i, 0, 0, k]);
            }
            out.set([i, 0, 0, o], s);
        }
    }
    out
}

/// Six-loop zero-padded cross-correlation, kernel `[kh, kw, Cin, Cout]`.
pub fn naive_conv2d(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [n, h, w, cin] = x.shape().0;
    let [kh, kw, _, cout] = k.shape().0;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(Shape::new(n, oh, ow, cout));
    for i in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut s = b.at([0, 0, 0, co]);
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let y = (oy * stride + dy) as isize - pad as isize;
                            let xx = (ox * stride + dx) as isize - pad as isize;
                            if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                s += x.at([i, y as usize, xx as usize, ci]) * k.at([dy, dx, ci, co]);
                            }
                        }
                    }
                    out.set([i, oy, ox, co], s);
                }
            }
        }
    }
    out
}

/// Elementwise binary op with explicit copying along singleton axes.
pub fn naive_broadcast(x: &Tensor, y: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (xs, ys) = (x.shape().0, y.shape().0);
    let dims: Vec<usize> = (0..4).map(|i| xs[i].max(ys[i])).collect();
    Tensor::from_fn(Shape::new(dims[0], dims[1], dims[2], dims[3]), |idx| {
        let pick = |s: [usize; 4]| {
            let mut j = idx;
            for a in 0..4 {
                if s[a] == 1 {
                    j[a] = 0;
                }
            }
            j
        };
        f(x.at(pick(xs)), y.at(pick(ys)))
    })
}

/// Per-position channel mean and max.
pub fn naive_channel_stats(x: &Tensor) -> (Tensor, Tensor) {
    let [n, h, w, c] = x.shape().0;
    let s = Shape::new(n, h, w, 1);
    let mut avg = Tensor::zeros(s);
    let mut max = Tensor::zeros(s);
    for i in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let mut sum = 0.0;
                let mut m = f64::NEG_INFINITY;
                for ch in 0..c {
                    let v = x.at([i, y, xx, ch]);
                    sum += v;
                    if v > m {
                        m = v;
                    }
                }
                avg.set([i, y, xx, 0], sum / c as f64);
                max.set([i, y, xx, 0], m);
            }
        }
    }
    (avg, max)
}

pub fn naive_concat(a: &Tensor, b: &Tensor) -> Tensor {
    let [n, h, w, c1] = a.shape().0;
    let c2 = b.shape().c();
    Tensor::from_fn(Shape::new(n, h, w, c1 + c2), |[i, y, x, ch]| {
        if ch < c1 {
            a.at([i, y, x, ch])
        } else {
            b.at([i, y, x, ch - c1])
        }
    })
}

fn param(store: &ParamStore, name: &str) -> Tensor {
    let id = store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    store.value(id).clone()
}

fn has(store: &ParamStore, name: &str) -> bool {
    store.find(name).is_some()
}

/// Output of the reference co-attentive unit.
pub struct CasReference {
    pub a: Tensor,
    pub b: Tensor,
    pub maps: Option<(Tensor, Tensor)>,
}

/// Straight transliteration of the co-attentive unit, one equation per
/// statement, reading parameters `{prefix}.{A|B}.{layer}.{weight|bias}`
/// by name. Concatenation puts task A's channels first.
pub fn cas_reference(store: &ParamStore, prefix: &str, ab: AblationConfig, feat_a: &Tensor, feat_b: &Tensor) -> CasReference {
    let feats = [feat_a, feat_b];
    let tasks = ["A", "B"];
    let p = |t: usize, layer: &str, part: &str| param(store, &format!("{prefix}.{}.{layer}.{part}", tasks[t]));
    let present = |t: usize, layer: &str| has(store, &format!("{prefix}.{}.{layer}.weight", tasks[t]));
    let sig = |x: &Tensor| x.map(sigmoid);
    let relu = |x: &Tensor| x.map(|v| v.max(0.0));

    // V_m = ReLU(W_m GAP(feat))
    let mut v_m: [Option<Tensor>; 2] = [None, None];
    for t in 0..2 {
        if present(t, "reduce") {
            v_m[t] = Some(relu(&naive_linear(&naive_gap(feats[t]), &p(t, "reduce", "weight"), &p(t, "reduce", "bias"))));
        }
    }
    let gate = |t: usize, layer: &str, v_m: &Option<Tensor>| -> Option<Tensor> {
        if ab.channel_minus2 || !present(t, layer) {
            return None;
        }
        let vm = v_m.as_ref().expect("descriptor present");
        Some(sig(&naive_linear(vm, &p(t, layer, "weight"), &p(t, layer, "bias"))))
    };

    // V_sh = sigmoid(W_sh V_m); feat_sh = V_sh (x) feat
    let mut feat_sh = Vec::new();
    for t in 0..2 {
        feat_sh.push(match gate(t, "share_gate", &v_m[t]) {
            Some(v) => naive_broadcast(&v, feats[t], |a, b| a * b),
            None => feats[t].clone(),
        });
    }

    // feat_cat = [feat_sh^A, feat_sh^B], or their sum in the reduced variants
    let fuse_by_sum = ab.synergetic_minus || ab.synergetic_minus2;
    let feat_cat = if fuse_by_sum {
        naive_broadcast(&feat_sh[0], &feat_sh[1], |a, b| a + b)
    } else {
        naive_concat(&feat_sh[0], &feat_sh[1])
    };

    // M = sigmoid(conv7x7([Avg(feat_cat), Max(feat_cat)]))
    let (avg, max) = naive_channel_stats(&feat_cat);
    let pooled = naive_concat(&avg, &max);

    let mut outs = Vec::new();
    let mut maps = Vec::new();
    for t in 0..2 {
        let feat = feats[t];
        // feat_syn = conv1x1(feat_cat)
        let feat_syn = if ab.synergetic_minus2 {
            feat_cat.clone()
        } else {
            naive_conv2d(&feat_cat, &p(t, "fusion", "weight"), &p(t, "fusion", "bias"), 1, 0)
        };
        // A = V_a (x) M
        let attention = if ab.attentive_minus2 {
            None
        } else {
            let m = sig(&naive_conv2d(
                &pooled,
                &p(t, "spatial", "weight"),
                &p(t, "spatial", "bias"),
                1,
                MAP_KERNEL / 2,
            ));
            maps.push(m.clone());
            Some(match gate(t, "attention_gate", &v_m[t]) {
                Some(v_a) if !ab.attentive_minus => naive_broadcast(&v_a, &m, |a, b| a * b),
                _ => m,
            })
        };
        // feat_t = V_t (x) feat
        let feat_t = if ab.ts_minus2 {
            None
        } else {
            Some(match gate(t, "task_gate", &v_m[t]) {
                Some(v_t) => naive_broadcast(&v_t, feat, |a, b| a * b),
                None => feat.clone(),
            })
        };
        // feat' = (feat + feat_syn + feat_t) (x) A
        let mut sum = naive_broadcast(feat, &feat_syn, |a, b| a + b);
        if let Some(ft) = feat_t {
            sum = naive_broadcast(&sum, &ft, |a, b| a + b);
        }
        outs.push(match attention {
            Some(a) => naive_broadcast(&sum, &a, |x, y| x * y),
            None => sum,
        });
    }
    let maps = if maps.len() == 2 {
        Some((maps[0].clone(), maps[1].clone()))
    } else {
        None
    };
    CasReference {
        a: outs[0].clone(),
        b: outs[1].clone(),
        maps,
    }
}

/// Metrics computed straight from their per-sample definitions:
/// `[mA, accuracy, precision, recall, F1]`.
pub fn brute_force_metrics(scores: &[Vec<f64>], targets: &[Vec<u8>], threshold: f64) -> [f64; 5] {
    let n = scores.len();
    let l = scores[0].len();
    let pred: Vec<Vec<bool>> = scores.iter().map(|r| r.iter().map(|&s| s >= threshold).collect()).collect();
    let truth: Vec<Vec<bool>> = targets.iter().map(|r| r.iter().map(|&t| t == 1).collect()).collect();

    let mut ma_sum = 0.0;
    let mut ma_count = 0;
    for j in 0..l {
        let pos = (0..n).filter(|&i| truth[i][j]).count();
        let neg = n - pos;
        if pos == 0 || neg == 0 {
            continue;
        }
        let tp = (0..n).filter(|&i| truth[i][j] && pred[i][j]).count();
        let tn = (0..n).filter(|&i| !truth[i][j] && !pred[i][j]).count();
        ma_sum += 0.5 * (tp as f64 / pos as f64 + tn as f64 / neg as f64);
        ma_count += 1;
    }
    let ma = if ma_count == 0 { 0.0 } else { ma_sum / ma_count as f64 };

    let (mut acc, mut prec, mut rec) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let inter = (0..l).filter(|&j| truth[i][j] && pred[i][j]).count() as f64;
        let union = (0..l).filter(|&j| truth[i][j] || pred[i][j]).count() as f64;
        let npred = (0..l).filter(|&j| pred[i][j]).count() as f64;
        let ntrue = (0..l).filter(|&j| truth[i][j]).count() as f64;
        acc += if union == 0.0 { 1.0 } else { inter / union };
        prec += if npred == 0.0 {
            if ntrue == 0.0 {
                1.0
            } else {
                0.0
            }
        } else {
            inter / npred
        };
        rec += if ntrue == 0.0 { 1.0 } else { inter / ntrue };
    }
    let (acc, prec, rec) = (acc / n as f64, prec / n as f64, rec / n as f64);
    let f1 = if prec + rec == 0.0 { 0.0 } else { 2.0 * prec * rec / (prec + rec) };
    [ma, acc, prec, rec, f1]
}


/// Overwrites every parameter with uniform draws from `[-scale, scale]`.
pub fn randomize(store: &mut ParamStore, rng: &mut impl Rng, scale: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.value(id).shape();
        *store.value_mut(id) = random_tensor(rng, shape, -scale, scale);
    }
}

pub fn zero_params(store: &mut ParamStore) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.value_mut(id).fill(0.0);
    }
}

/// Largest absolute gap between `cas_forward` and [`cas_reference`] over
/// both outputs and both spatial maps, for one random draw of parameters
/// and `[2, 4, 4, 8]` inputs.
pub fn oracle_gap(ab: AblationConfig, reduction: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let p = CasParams::new(&mut store, &mut Initializer::new(seed), "u", 8, reduction, ab).unwrap();
    randomize(&mut store, &mut r, 1.0);
    let s = Shape::new(2, 4, 4, 8);
    let fa = random_tensor(&mut r, s, -2.0, 2.0);
    let fb = random_tensor(&mut r, s, -2.0, 2.0);

    let mut tape = Tape::new();
    let (va, vb) = (tape.input(fa.clone()), tape.input(fb.clone()));
    let out = cas_forward(&mut tape, &store, &p, va, vb).unwrap();
    let reference = cas_reference(&store, "u", ab, &fa, &fb);

    let mut gap = tape.value(out.a).max_abs_diff(&reference.a);
    gap = gap.max(tape.value(out.b).max_abs_diff(&reference.b));
    match (out.maps, reference.maps) {
        (Some((ma, mb)), Some((ra, rb))) => {
            gap = gap.max(tape.value(ma).max_abs_diff(&ra));
            gap = gap.max(tape.value(mb).max_abs_diff(&rb));
        }
        (None, None) => {}
        _ => return f64::INFINITY,
    }
    gap
}
