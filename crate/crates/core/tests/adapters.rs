use patrack_core::adapters::{
    cea_forward, cea_param_count, ha_forward, ha_param_count, init_cea, init_ha, init_mda,
    mda_forward, mda_param_count, AdapterAblationFlags, CeaTrace, MdaTrace, MdaWidths,
};
use patrack_core::backbone::{Region, TokenBatch, TokenLayout};
use patrack_core::tensor::{check_param_gradients, weighted_sum, ParamId, ParamStore, Rng, Tape};
use patrack_core::{Error, Tensor};

const SMALL: TokenLayout = TokenLayout {
    template_grid: (2, 2),
    search_grid: (2, 4),
};

fn randomize(store: &mut ParamStore<f64>, ids: &[ParamId], seed: u64) {
    let mut rng = Rng::new(seed);
    for &id in ids {
        let shape = store.value(id).shape().to_vec();
        store
            .assign(id, Tensor::from_fn(&shape, |_| rng.uniform(-0.5, 0.5)))
            .unwrap();
    }
}

fn random_tokens(n: usize, c: usize, seed: u64) -> Tensor<f64> {
    let mut rng = Rng::new(seed);
    Tensor::from_fn(&[n, c], |_| rng.uniform(-1.0, 1.0))
}

// ---- naive references --------------------------------------------------

type Grid = Vec<Vec<Vec<f64>>>;

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let c = t.shape()[1];
    t.data().chunks(c).map(|r| r.to_vec()).collect()
}

fn linear(x: &[Vec<f64>], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (cin, cout) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|r| {
            (0..cout)
                .map(|o| b.data()[o] + (0..cin).map(|i| r[i] * w.data()[i * cout + o]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn cols(x: &[Vec<f64>], a: usize, b: usize) -> Vec<Vec<f64>> {
    x.iter().map(|r| r[a..b].to_vec()).collect()
}

fn to_grid(x: &[Vec<f64>], h: usize, w: usize) -> Grid {
    let c = x[0].len();
    (0..c)
        .map(|ch| (0..h).map(|i| (0..w).map(|j| x[i * w + j][ch]).collect()).collect())
        .collect()
}

fn from_grid(g: &Grid) -> Vec<Vec<f64>> {
    let (h, w) = (g[0].len(), g[0][0].len());
    (0..h * w)
        .map(|t| g.iter().map(|plane| plane[t / w][t % w]).collect())
        .collect()
}

fn maxpool3(g: &Grid) -> Grid {
    let (h, w) = (g[0].len() as isize, g[0][0].len() as isize);
    g.iter()
        .map(|p| {
            (0..h)
                .map(|i| {
                    (0..w)
                        .map(|j| {
                            let mut m = f64::NEG_INFINITY;
                            for di in -1..=1 {
                                for dj in -1..=1 {
                                    let (y, x) = (i + di, j + dj);
                                    if y >= 0 && y < h && x >= 0 && x < w {
                                        m = m.max(p[y as usize][x as usize]);
                                    }
                                }
                            }
                            m
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Full 3×3 zero-padded convolution, `w` shaped `[cout, cin/groups, 3, 3]`
/// (or 1×1).
fn conv(g: &Grid, w: &Tensor<f64>, b: &Tensor<f64>, groups: usize) -> Grid {
    let s = w.shape();
    let (cout, cin_g, k) = (s[0], s[1], s[2]);
    let pad = (k / 2) as isize;
    let (h, wd) = (g[0].len() as isize, g[0][0].len() as isize);
    let out_per_group = cout / groups;
    (0..cout)
        .map(|o| {
            let grp = o / out_per_group;
            (0..h)
                .map(|i| {
                    (0..wd)
                        .map(|j| {
                            let mut acc = b.data()[o];
                            for ci in 0..cin_g {
                                let c = grp * cin_g + ci;
                                for ki in 0..k {
                                    for kj in 0..k {
                                        let y = i + ki as isize - pad;
                                        let x = j + kj as isize - pad;
                                        if y >= 0 && y < h && x >= 0 && x < wd {
                                            acc += g[c][y as usize][x as usize]
                                                * w.data()[((o * cin_g + ci) * k + ki) * k + kj];
                                        }
                                    }
                                }
                            }
                            acc
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn avg_up(g: &Grid) -> Grid {
    let (h, w) = (g[0].len(), g[0][0].len());
    g.iter()
        .map(|p| {
            (0..h)
                .map(|i| {
                    (0..w)
                        .map(|j| {
                            let (a, b) = (i / 2 * 2, j / 2 * 2);
                            (p[a][b] + p[a + 1][b] + p[a][b + 1] + p[a + 1][b + 1]) / 4.0
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn concat(parts: &[Grid]) -> Grid {
    parts.iter().flatten().cloned().collect()
}

fn per_region_ref(layout: TokenLayout, inputs: &[Vec<Vec<f64>>], f: impl Fn(&[Grid]) -> Grid) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for region in [Region::Template, Region::Search] {
        let r = layout.rows(region);
        let (h, w) = layout.grid(region);
        let grids: Vec<Grid> = inputs.iter().map(|x| to_grid(&x[r.clone()], h, w)).collect();
        out.extend(from_grid(&f(&grids)));
    }
    out
}

fn attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], heads: usize) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let c = q[0].len();
    let d = c / heads;
    let n = q.len();
    let mut out = vec![vec![0.0; c]; n];
    let mut probs = Vec::new();
    for h in 0..heads {
        let mut ph = Vec::new();
        for i in 0..n {
            let s: Vec<f64> = (0..n)
                .map(|j| (0..d).map(|t| q[i][h * d + t] * k[j][h * d + t]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let p: Vec<f64> = e.iter().map(|x| x / z).collect();
            for t in 0..d {
                out[i][h * d + t] = (0..n).map(|j| p[j] * v[j][h * d + t]).sum();
            }
            ph.push(p);
        }
        probs.push(ph);
    }
    (out, probs)
}

fn add(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn max_diff(a: &[Vec<f64>], b: &Tensor<f64>) -> f64 {
    a.iter()
        .flatten()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

// ---- MDA ---------------------------------------------------------------

#[test]
fn mda_channel_arithmetic_for_hidden_eight() {
    let w = MdaWidths::new(8, &AdapterAblationFlags::default()).unwrap();
    assert_eq!((w.high, w.low), (4, 4));
    assert_eq!((w.hm, w.hd), (2, 2));
    assert_eq!((w.hm_out, w.hd_out, w.low_out), (4, 4, 4));
    assert_eq!(w.concat, 12);
    assert!(matches!(
        MdaWidths::new(6, &AdapterAblationFlags::default()),
        Err(Error::Config(_))
    ));
}

#[test]
fn mda_zero_up_gives_zero_delta_of_same_shape() {
    let mut store = ParamStore::<f64>::new();
    let w = init_mda(&mut store, "mda", 16, 8, AdapterAblationFlags::default(), &mut Rng::new(3)).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(random_tokens(SMALL.len(), 16, 1));
    let batch = TokenBatch::new(&tape, x, SMALL).unwrap();
    let d = mda_forward(&mut tape, &store, &w, &batch, None).unwrap();
    assert_eq!(tape.shape(d), &[SMALL.len(), 16]);
    assert!(tape.value(d).data().iter().all(|&v| v == 0.0));
}

#[test]
fn mda_matches_loop_reference() {
    let c = 12;
    let mut store = ParamStore::<f64>::new();
    let w = init_mda(&mut store, "mda", c, 8, AdapterAblationFlags::default(), &mut Rng::new(5)).unwrap();
    randomize(&mut store, &w.ids(), 77);
    let x = random_tokens(SMALL.len(), c, 9);

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let batch = TokenBatch::new(&tape, xv, SMALL).unwrap();
    let d = mda_forward(&mut tape, &store, &w, &batch, None).unwrap();

    let v = |id: ParamId| store.value(id).clone();
    let down = linear(&rows(&x), &v(w.down_w), &v(w.down_b));
    let (fc1, fc1b) = w.fc1_w.unwrap();
    let (fc2, fc2b) = w.fc2_w.unwrap();
    let (dw, dwb) = w.dw.unwrap();
    let parts = [cols(&down, 0, 2), cols(&down, 2, 4), cols(&down, 4, 8)];
    let fused = per_region_ref(SMALL, &parts, |g| {
        let y_hm = conv(&maxpool3(&g[0]), &v(fc1), &v(fc1b), 1);
        let y_hd = conv(&conv(&g[1], &v(fc2), &v(fc2b), 1), &v(dw), &v(dwb), 4);
        let y_l = avg_up(&g[2]);
        concat(&[y_hm, y_hd, y_l])
    });
    let expect = linear(&fused, &v(w.up_w), &v(w.up_b));
    let err = max_diff(&expect, tape.value(d));
    assert!(err < 1e-6, "max diff {err}");
}

/// Down = identity so chosen token channels land on chosen branches.
fn identity_mda(flags: AdapterAblationFlags) -> (ParamStore<f64>, patrack_core::adapters::MdaWeights) {
    let mut store = ParamStore::<f64>::new();
    let w = init_mda(&mut store, "mda", 8, 8, flags, &mut Rng::new(1)).unwrap();
    store
        .assign(w.down_w, Tensor::from_fn(&[8, 8], |i| if i / 8 == i % 8 { 1.0 } else { 0.0 }))
        .unwrap();
    if let Some((fw, fb)) = w.fc1_w {
        // out channel o copies hm channel o % 2
        store
            .assign(fw, Tensor::from_fn(&[4, 2, 1, 1], |i| if i % 2 == (i / 2) % 2 { 1.0 } else { 0.0 }))
            .unwrap();
        store.assign(fb, Tensor::zeros(&[4])).unwrap();
    }
    (store, w)
}

#[test]
fn mda_frequency_behavior_on_checkerboards() {
    let layout = TokenLayout {
        template_grid: (4, 4),
        search_grid: (4, 4),
    };
    let (store, w) = identity_mda(AdapterAblationFlags::default());
    // channels 0-1: {0,1} checkerboard for the max branch; 4-7: ±1 checkerboard
    let x = Tensor::from_fn(&[32, 8], |k| {
        let (t, ch) = (k / 8, k % 8);
        let (i, j) = ((t % 16) / 4, t % 4);
        let parity = ((i + j) % 2) as f64;
        match ch {
            0 | 1 => parity,
            4..=7 => 2.0 * parity - 1.0,
            _ => 0.3,
        }
    });
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let batch = TokenBatch::new(&tape, xv, layout).unwrap();
    let mut trace = MdaTrace::default();
    mda_forward(&mut tape, &store, &w, &batch, Some(&mut trace)).unwrap();
    assert_eq!(trace.regions.len(), 2);
    for (_, y_hm, _, y_l, cat) in &trace.regions {
        assert!(tape.value(y_hm.unwrap()).data().iter().all(|&v| v == 1.0));
        assert!(tape.value(y_l.unwrap()).data().iter().all(|&v| v == 0.0));
        assert_eq!(tape.shape(*cat), &[12, 4, 4]);
    }
}

#[test]
fn mda_avg_branch_is_identity_on_block_constant_maps() {
    let layout = TokenLayout {
        template_grid: (2, 2),
        search_grid: (4, 4),
    };
    let (store, w) = identity_mda(AdapterAblationFlags::default());
    let x = Tensor::from_fn(&[20, 8], |k| {
        let (t, ch) = (k / 8, k % 8);
        let (i, j) = if t < 4 { (t / 2, t % 2) } else { ((t - 4) / 4, (t - 4) % 4) };
        (i / 2 * 3 + j / 2) as f64 + ch as f64 * 0.25
    });
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let batch = TokenBatch::new(&tape, xv, layout).unwrap();
    let mut trace = MdaTrace::default();
    mda_forward(&mut tape, &store, &w, &batch, Some(&mut trace)).unwrap();
    let low = tape.slice_cols(trace.down.unwrap(), 4, 8).unwrap();
    let low_search = tape.narrow(low, 4, 20).unwrap();
    let (_, _, _, y_l, _) = trace.regions[1];
    let y = patrack_core::backbone::grid_to_tokens(&mut tape, y_l.unwrap()).unwrap();
    assert_eq!(tape.value(y).data(), tape.value(low_search).data());
}

#[test]
fn mda_branch_flags_reproduce_ablation_structure() {
    let c = 16;
    for mask in 0u8..8 {
        let flags = AdapterAblationFlags {
            mda_use_max: mask & 1 != 0,
            mda_use_dwconv: mask & 2 != 0,
            mda_use_avg: mask & 4 != 0,
            ..Default::default()
        };
        let mut store = ParamStore::<f64>::new();
        let res = init_mda(&mut store, "m", c, 8, flags, &mut Rng::new(2));
        if mask == 0 {
            assert!(matches!(res, Err(Error::Config(_))));
            continue;
        }
        let w = res.unwrap();
        let branches = mask.count_ones() as usize;
        assert_eq!(store.num_elements(w.ids()), mda_param_count(c, 8, &flags).unwrap());
        let mut tape = Tape::new();
        let x = tape.constant(random_tokens(SMALL.len(), c, 4));
        let batch = TokenBatch::new(&tape, x, SMALL).unwrap();
        let mut trace = MdaTrace::default();
        mda_forward(&mut tape, &store, &w, &batch, Some(&mut trace)).unwrap();
        for (_, hm, hd, l, cat) in &trace.regions {
            assert_eq!(hm.is_some(), flags.mda_use_max);
            assert_eq!(hd.is_some(), flags.mda_use_dwconv);
            assert_eq!(l.is_some(), flags.mda_use_avg);
            assert_eq!(tape.shape(*cat)[0], branches * 4);
        }
    }
}

#[test]
fn mda_odd_grid_names_region() {
    let mut store = ParamStore::<f64>::new();
    let w = init_mda(&mut store, "m", 8, 8, AdapterAblationFlags::default(), &mut Rng::new(2)).unwrap();
    let layout = TokenLayout {
        template_grid: (2, 2),
        search_grid: (3, 3),
    };
    let mut tape = Tape::new();
    let x = tape.constant(random_tokens(13, 8, 4));
    let batch = TokenBatch::new(&tape, x, layout).unwrap();
    match mda_forward(&mut tape, &store, &w, &batch, None) {
        Err(Error::Config(m)) => assert!(m.contains("Search"), "{m}"),
        other => panic!("expected config error, got {other:?}"),
    }
}

#[test]
fn mda_gradients_match_finite_differences() {
    let c = 8;
    let mut store = ParamStore::<f64>::new();
    let w = init_mda(&mut store, "mda", c, 8, AdapterAblationFlags::default(), &mut Rng::new(5)).unwrap();
    randomize(&mut store, &w.ids(), 11);
    let input = store.add("input", random_tokens(SMALL.len(), c, 12));
    let mut ids = w.ids();
    ids.push(input);
    let report = check_param_gradients(&mut store, &ids, None, 1e-5, 1.0, |tape, store| {
        let x = tape.param(store, input);
        let batch = TokenBatch::new(tape, x, SMALL)?;
        let d = mda_forward(tape, store, &w, &batch, None)?;
        weighted_sum(tape, d, 3)
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

// ---- CEA ---------------------------------------------------------------

fn cea_setup(c: usize, hidden: usize, heads: usize, flags: AdapterAblationFlags, seed: u64) -> (ParamStore<f64>, patrack_core::adapters::CeaWeights) {
    let mut store = ParamStore::<f64>::new();
    let w = init_cea(&mut store, "cea", c, hidden, heads, flags, &mut Rng::new(seed)).unwrap();
    (store, w)
}

fn run_cea(
    store: &ParamStore<f64>,
    w: &patrack_core::adapters::CeaWeights,
    layout: TokenLayout,
    a: &Tensor<f64>,
    b: &Tensor<f64>,
) -> (Tensor<f64>, Tensor<f64>, Tape<f64>, CeaTrace) {
    let mut tape = Tape::new();
    let av = tape.constant(a.clone());
    let bv = tape.constant(b.clone());
    let ba = TokenBatch::new(&tape, av, layout).unwrap();
    let bb = TokenBatch::new(&tape, bv, layout).unwrap();
    let mut trace = CeaTrace::default();
    let (dr, dx) = cea_forward(&mut tape, store, w, &ba, &bb, Some(&mut trace)).unwrap();
    (tape.value(dr).clone(), tape.value(dx).clone(), tape, trace)
}

#[test]
fn cea_zero_up_gives_zero_deltas() {
    let (store, w) = cea_setup(16, 8, 8, AdapterAblationFlags::default(), 1);
    let (dr, dx, _, _) = run_cea(&store, &w, SMALL, &random_tokens(12, 16, 1), &random_tokens(12, 16, 2));
    assert!(dr.data().iter().chain(dx.data()).all(|&v| v == 0.0));
    assert_eq!(dr.shape(), &[12, 16]);
}

#[test]
fn cea_identical_inputs_give_identical_deltas() {
    let (mut store, w) = cea_setup(16, 8, 8, AdapterAblationFlags::default(), 1);
    randomize(&mut store, &w.ids(), 8);
    let x = random_tokens(12, 16, 5);
    let (dr, dx, _, _) = run_cea(&store, &w, SMALL, &x, &x);
    assert_eq!(dr.data(), dx.data());
}

#[test]
fn cea_attention_rows_sum_to_one() {
    let (mut store, w) = cea_setup(16, 8, 8, AdapterAblationFlags::default(), 1);
    randomize(&mut store, &w.ids(), 8);
    let (_, _, tape, trace) = run_cea(&store, &w, SMALL, &random_tokens(12, 16, 5), &random_tokens(12, 16, 6));
    assert_eq!(trace.attn_rgb.len(), 8);
    for a in trace.attn_rgb.iter().chain(&trace.attn_x) {
        for row in tape.value(*a).data().chunks(12) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn cea_matches_loop_reference() {
    let (c, hc, heads) = (12, 8, 2);
    let (mut store, w) = cea_setup(c, hc, heads, AdapterAblationFlags::default(), 4);
    randomize(&mut store, &w.ids(), 21);
    let (a, b) = (random_tokens(12, c, 30), random_tokens(12, c, 31));
    let (dr, dx, _, _) = run_cea(&store, &w, SMALL, &a, &b);

    let v = |id: ParamId| store.value(id).clone();
    let hat_r = linear(&rows(&a), &v(w.down_w), &v(w.down_b));
    let hat_x = linear(&rows(&b), &v(w.down_w), &v(w.down_b));
    let (q, k, vv) = (w.conv_q.unwrap(), w.conv_k.unwrap(), w.conv_v.unwrap());
    let fus = per_region_ref(SMALL, &[hat_r.clone(), hat_x.clone()], |g| {
        conv(&concat(&[g[0].clone(), g[1].clone()]), &v(q.0), &v(q.1), 1)
    });
    let kv = |src: &Vec<Vec<f64>>, p: (ParamId, ParamId)| {
        per_region_ref(SMALL, &[src.clone()], |g| conv(&g[0], &v(p.0), &v(p.1), 1))
    };
    let (ca_r, _) = attention(&fus, &kv(&hat_x, k), &kv(&hat_x, vv), heads);
    let (ca_x, _) = attention(&fus, &kv(&hat_r, k), &kv(&hat_r, vv), heads);
    let er = linear(&add(&hat_r, &ca_r), &v(w.up_w), &v(w.up_b));
    let ex = linear(&add(&hat_x, &ca_x), &v(w.up_w), &v(w.up_b));
    let err = max_diff(&er, &dr).max(max_diff(&ex, &dx));
    assert!(err < 1e-6, "max diff {err}");
}

#[test]
fn cea_fusion_guided_off_queries_own_branch() {
    let flags = AdapterAblationFlags {
        cea_fusion_guided: false,
        ..Default::default()
    };
    let (mut store, w) = cea_setup(16, 8, 8, flags, 1);
    randomize(&mut store, &w.ids(), 8);
    let (_, _, _, trace) = run_cea(&store, &w, SMALL, &random_tokens(12, 16, 5), &random_tokens(12, 16, 6));
    assert_eq!(trace.q_rgb, trace.hat_rgb);
    assert_eq!(trace.q_x, trace.hat_x);

    let (mut store, w) = cea_setup(16, 8, 8, AdapterAblationFlags::default(), 1);
    randomize(&mut store, &w.ids(), 8);
    let (_, _, _, trace) = run_cea(&store, &w, SMALL, &random_tokens(12, 16, 5), &random_tokens(12, 16, 6));
    assert_eq!(trace.q_rgb, trace.fus);
    assert_eq!(trace.q_x, trace.fus);
}

#[test]
fn cea_without_conv_has_no_conv_parameters() {
    let flags = AdapterAblationFlags {
        cea_use_conv: false,
        ..Default::default()
    };
    let (store, w) = cea_setup(16, 8, 8, flags, 1);
    assert!(w.conv_q.is_none() && w.conv_k.is_none() && w.conv_v.is_none());
    assert_eq!(store.num_elements(w.ids()), cea_param_count(16, 8, &flags));
    assert_eq!(cea_param_count(16, 8, &flags), 16 * 8 + 8 + 8 * 16 + 16);
    let (store, w) = cea_setup(16, 8, 8, AdapterAblationFlags::default(), 1);
    assert_eq!(store.num_elements(w.ids()), cea_param_count(16, 8, &AdapterAblationFlags::default()));
}

#[test]
fn cea_skip_term_is_the_reduced_features() {
    let off = AdapterAblationFlags {
        cea_use_skip: false,
        ..Default::default()
    };
    let (mut s_on, w_on) = cea_setup(16, 8, 8, AdapterAblationFlags::default(), 1);
    randomize(&mut s_on, &w_on.ids(), 8);
    let (mut s_off, w_off) = cea_setup(16, 8, 8, off, 1);
    randomize(&mut s_off, &w_off.ids(), 8);
    let (a, b) = (random_tokens(12, 16, 5), random_tokens(12, 16, 6));
    let (on, _, tape, trace) = run_cea(&s_on, &w_on, SMALL, &a, &b);
    let (no, _, _, _) = run_cea(&s_off, &w_off, SMALL, &a, &b);
    // on − off == Ĥ_rgb · U_w
    let hat = rows(tape.value(trace.hat_rgb.unwrap()));
    let skip = linear(&hat, s_on.value(w_on.up_w), &Tensor::zeros(&[16]));
    let diff: Vec<Vec<f64>> = rows(&on).iter().zip(rows(&no)).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p - q).collect()).collect();
    let err = diff.iter().flatten().zip(skip.iter().flatten()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    assert!(err < 1e-12, "{err}");
}

#[test]
fn cea_rejects_mismatched_branches() {
    let (store, w) = cea_setup(16, 8, 8, AdapterAblationFlags::default(), 1);
    let mut tape = Tape::new();
    let a = tape.constant(random_tokens(12, 16, 1));
    let b = tape.constant(random_tokens(20, 16, 1));
    let ba = TokenBatch::new(&tape, a, SMALL).unwrap();
    let other = TokenLayout {
        template_grid: (2, 2),
        search_grid: (4, 4),
    };
    let bb = TokenBatch::new(&tape, b, other).unwrap();
    assert!(matches!(cea_forward(&mut tape, &store, &w, &ba, &bb, None), Err(Error::Usage(_))));
}

#[test]
fn cea_key_value_order_equivariance() {
    // Without convs, CA over flattened tokens; permuting both branches'
    // tokens permutes the deltas the same way.
    let flags = AdapterAblationFlags {
        cea_use_conv: false,
        ..Default::default()
    };
    let (mut store, w) = cea_setup(16, 8, 4, flags, 1);
    randomize(&mut store, &w.ids(), 8);
    let (a, b) = (random_tokens(12, 16, 5), random_tokens(12, 16, 6));
    let perm: Vec<usize> = vec![3, 0, 2, 1, 11, 10, 9, 8, 4, 5, 7, 6];
    let permute = |t: &Tensor<f64>| {
        let r = rows(t);
        Tensor::new(&[12, 16], perm.iter().flat_map(|&p| r[p].clone()).collect()).unwrap()
    };
    let (dr, dx, _, _) = run_cea(&store, &w, SMALL, &a, &b);
    let (pr, px, _, _) = run_cea(&store, &w, SMALL, &permute(&a), &permute(&b));
    assert!(permute(&dr).max_abs_diff(&pr) < 1e-12);
    assert!(permute(&dx).max_abs_diff(&px) < 1e-12);
}

#[test]
fn cea_gradients_match_finite_differences() {
    for flags in [
        AdapterAblationFlags::default(),
        AdapterAblationFlags {
            cea_use_conv: false,
            cea_fusion_guided: false,
            ..Default::default()
        },
    ] {
        let c = 8;
        let (mut store, w) = cea_setup(c, 8, 2, flags, 3);
        randomize(&mut store, &w.ids(), 13);
        let ia = store.add("a", random_tokens(12, c, 40));
        let ib = store.add("b", random_tokens(12, c, 41));
        let mut ids = w.ids();
        ids.extend([ia, ib]);
        let report = check_param_gradients(&mut store, &ids, None, 1e-5, 1.0, |tape, store| {
            let a = tape.param(store, ia);
            let b = tape.param(store, ib);
            let ba = TokenBatch::new(tape, a, SMALL)?;
            let bb = TokenBatch::new(tape, b, SMALL)?;
            let (dr, dx) = cea_forward(tape, store, &w, &ba, &bb, None)?;
            let both = tape.concat(&[dr, dx])?;
            weighted_sum(tape, both, 5)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{flags:?} {report:?}");
    }
}

// ---- HA ----------------------------------------------------------------

#[test]
fn ha_zero_up_is_bit_exact_identity() {
    let mut store = ParamStore::<f64>::new();
    let w = init_ha(&mut store, "ha", 16, 8, &mut Rng::new(1)).unwrap();
    let x = random_tokens(64, 16, 2);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = ha_forward(&mut tape, &store, &w, xv).unwrap();
    assert_eq!(tape.value(y).data(), x.data());
    assert_eq!(store.num_elements(w.ids()), ha_param_count(16, 8));
}

#[test]
fn ha_matches_hand_computation() {
    let mut store = ParamStore::<f64>::new();
    let w = init_ha(&mut store, "ha", 4, 2, &mut Rng::new(1)).unwrap();
    // Down picks (x0 + x1, x2 − x3); Up writes unit 0 to channel 0, unit 1 to channel 3.
    store
        .assign(w.down_w, Tensor::from_f64(&[4, 2], &[1., 0., 1., 0., 0., 1., 0., -1.]).unwrap())
        .unwrap();
    store.assign(w.down_b, Tensor::from_f64(&[2], &[0.0, 0.5]).unwrap()).unwrap();
    store
        .assign(w.up_w, Tensor::from_f64(&[2, 4], &[1., 0., 0., 0., 0., 0., 0., 2.]).unwrap())
        .unwrap();
    store.assign(w.up_b, Tensor::from_f64(&[4], &[0., 0.1, 0., 0.]).unwrap()).unwrap();
    let x = Tensor::from_f64(&[2, 4], &[1.0, 0.0, 2.0, 1.0, -0.5, -0.5, 0.0, 0.0]).unwrap();
    let gelu = |v: f64| 0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v * v * v)).tanh());
    // token 0: z = (1, 1.5); token 1: z = (−1, 0.5)
    let expect = [
        1.0 + gelu(1.0),
        0.1,
        2.0,
        1.0 + 2.0 * gelu(1.5),
        -0.5 + gelu(-1.0),
        -0.4,
        0.0,
        2.0 * gelu(0.5),
    ];
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let y = ha_forward(&mut tape, &store, &w, xv).unwrap();
    for (a, b) in tape.value(y).data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn ha_gradients_match_finite_differences() {
    let mut store = ParamStore::<f64>::new();
    let w = init_ha(&mut store, "ha", 8, 4, &mut Rng::new(1)).unwrap();
    randomize(&mut store, &w.ids(), 2);
    let input = store.add("input", random_tokens(6, 8, 3));
    let mut ids = w.ids();
    ids.push(input);
    let report = check_param_gradients(&mut store, &ids, None, 1e-5, 1.0, |tape, store| {
        let x = tape.param(store, input);
        let y = ha_forward(tape, store, &w, x)?;
        weighted_sum(tape, y, 9)
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn gradient_checker_flags_corrupted_gradient() {
    let mut store = ParamStore::<f64>::new();
    let w = init_ha(&mut store, "ha", 8, 4, &mut Rng::new(1)).unwrap();
    randomize(&mut store, &w.ids(), 2);
    let input = store.add("input", random_tokens(6, 8, 3));
    let report = check_param_gradients(&mut store, &w.ids(), Some((10, &mut Rng::new(4))), 1e-5, 1.01, |tape, store| {
        let x = tape.param(store, input);
        let y = ha_forward(tape, store, &w, x)?;
        weighted_sum(tape, y, 9)
    })
    .unwrap();
    assert!(report.max_rel_err > 1e-3);
    assert_eq!(report.checked, 10);
    assert!(report.worst.is_some());
}
