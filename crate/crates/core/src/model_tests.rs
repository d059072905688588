use super::*;
use crate::encoder::{Engagement, SideInfo};
use crate::numerics::Rng;

type M = Vec<Vec<f64>>;

fn enc_cfg(d: usize) -> EncoderConfig {
    EncoderConfig {
        d_model: d,
        max_n: 8,
        id_buckets: 32,
        cat_buckets: 16,
        ..EncoderConfig::default()
    }
}

fn build(cfg: ModelConfig, d: usize, seed: u64) -> (Model, ParamStore) {
    let mut store = ParamStore::new();
    let m = Model::new(cfg, enc_cfg(d), &mut store, &mut Rng::new(seed)).unwrap();
    (m, store)
}

fn cfg(layers: usize, cond: Conditioning, gate: GateMode) -> ModelConfig {
    ModelConfig {
        layers,
        conditioning: cond,
        gate,
        ..ModelConfig::default()
    }
}

fn randv(n: usize, seed: u64) -> Vec<f64> {
    normal_sample(&mut Rng::new(seed), &[n], 0.0, 1.0)
        .unwrap()
        .into_data()
}

fn randm(n: usize, d: usize, seed: u64) -> Tensor {
    Tensor::new(vec![n, d], randv(n * d, seed)).unwrap()
}

fn to_m(t: &Tensor) -> M {
    t.rows().map(|r| r.to_vec()).collect()
}

fn mm(a: &M, w: &Tensor) -> M {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| (0..k).map(|i| row[i] * w.at(&[i, j])).sum())
                .collect()
        })
        .collect()
}

fn add_bias(a: &M, b: &Tensor) -> M {
    a.iter()
        .map(|r| r.iter().zip(b.data()).map(|(x, y)| x + y).collect())
        .collect()
}

fn add(a: &M, b: &M) -> M {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

fn layer_norm(a: &M, gamma: &Tensor, beta: &Tensor) -> M {
    a.iter()
        .map(|r| {
            let d = r.len() as f64;
            let mean = r.iter().sum::<f64>() / d;
            let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d;
            let inv = 1.0 / (var + 1e-5).sqrt();
            r.iter()
                .enumerate()
                .map(|(j, x)| gamma.data()[j] * (x - mean) * inv + beta.data()[j])
                .collect()
        })
        .collect()
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Gate rows for `rows` positions.
fn gate_rows(mode: GateMode, pre: &[f64], x: &M, p: &AttnParams, s: &ParamStore) -> M {
    match mode {
        GateMode::Profile => vec![pre.iter().map(|&v| sig(v)).collect(); x.len()],
        GateMode::Learnt => mm(x, s.value(p.wu.unwrap()))
            .into_iter()
            .map(|r| r.into_iter().map(sig).collect())
            .collect(),
        GateMode::None => vec![vec![1.0; pre.len()]; x.len()],
    }
}

fn attn(xq: &M, xkv: &M, u: &M, p: &AttnParams, s: &ParamStore) -> M {
    let q = mm(xq, s.value(p.wq));
    let k = mm(xkv, s.value(p.wk));
    let v = mm(xkv, s.value(p.wv));
    let n = xkv.len() as f64;
    let d = q[0].len();
    let mut out = vec![vec![0.0; d]; xq.len()];
    for i in 0..xq.len() {
        for m in 0..xkv.len() {
            let a: f64 = (0..d).map(|c| q[i][c] * k[m][c]).sum::<f64>() / n;
            for j in 0..d {
                out[i][j] += a * v[m][j];
            }
        }
        for j in 0..d {
            out[i][j] *= u[i][j];
        }
    }
    out
}

fn udl(x: &M, mode: GateMode, pre: &[f64], p: &UdlParams, s: &ParamStore) -> M {
    let u = gate_rows(mode, pre, x, &p.attn, s);
    let h = mm(&attn(x, x, &u, &p.attn, s), s.value(p.attn.wo));
    let x1 = layer_norm(&add(x, &h), s.value(p.ln1.0), s.value(p.ln1.1));
    let f = add_bias(&mm(&x1, s.value(p.ffn_in.w)), s.value(p.ffn_in.b.unwrap()));
    let f: M = f
        .into_iter()
        .map(|r| r.into_iter().map(silu).collect())
        .collect();
    let f = add_bias(&mm(&f, s.value(p.ffn_out.w)), s.value(p.ffn_out.b.unwrap()));
    layer_norm(&add(&x1, &f), s.value(p.ln2.0), s.value(p.ln2.1))
}

/// Loop-level forward pass; `skip_cross` drops the cross layer's contribution.
fn oracle(
    m: &Model,
    s: &ParamStore,
    x_t: &Tensor,
    t: usize,
    q: &[f64],
    pre: &[f64],
    skip_cross: bool,
) -> (M, M) {
    let step = step_embedding(t, m.d_model());
    let mut h: M = to_m(x_t)
        .into_iter()
        .map(|r| r.iter().zip(&step).map(|(a, b)| a + b).collect())
        .collect();
    let cond = m.cfg.conditioning;
    if cond == Conditioning::Concat {
        h.insert(0, q.to_vec());
    }
    for (l, p) in m.layers.iter().enumerate() {
        h = udl(&h, m.cfg.gate, pre, p, s);
        if cond == Conditioning::Additive && l + 1 == m.cfg.inject_after() {
            let qs = vec![q.to_vec(); h.len()];
            h = add(&h, &qs);
        }
    }
    if let (Some(c), false) = (&m.cross, skip_cross) {
        let qm = vec![q.to_vec()];
        let u = gate_rows(m.cfg.gate, pre, &qm, c, s);
        let o = mm(&attn(&qm, &h, &u, c, s), s.value(c.wo));
        let os = vec![o[0].clone(); h.len()];
        h = add(&h, &os);
    }
    if cond == Conditioning::Concat {
        h.remove(0);
    }
    (mm(&h, s.value(m.ws)), mm(&h, s.value(m.wd)))
}

fn assert_close(got: &Tensor, want: &M, tol: f64) {
    for (r, w) in got.rows().zip(want) {
        for (a, b) in r.iter().zip(w) {
            assert!((a - b).abs() < tol, "{a} vs {b}");
        }
    }
    assert_eq!(got.shape()[0], want.len());
}

const ALL_COND: [Conditioning; 4] = [
    Conditioning::Additive,
    Conditioning::Concat,
    Conditioning::Cross,
    Conditioning::None,
];
const ALL_GATE: [GateMode; 3] = [GateMode::Profile, GateMode::Learnt, GateMode::None];

#[test]
fn forward_matches_loop_oracle() {
    for (ci, cond) in ALL_COND.into_iter().enumerate() {
        for (gi, gate) in ALL_GATE.into_iter().enumerate() {
            for (d, n, layers) in [(2, 1, 2), (4, 3, 3)] {
                let seed = (ci * 10 + gi) as u64;
                let (m, s) = build(cfg(layers, cond, gate), d, seed);
                let x = randm(n, d, seed + 100);
                let q = randv(d, seed + 200);
                let pre = randv(d, seed + 300);
                let out = m.denoise_one(&s, &x, 7, Some(&q), Some(&pre)).unwrap();
                let (ws, wd) = oracle(&m, &s, &x, 7, &q, &pre, false);
                assert_close(&out.s, &ws, 1e-12);
                assert_close(&out.d, &wd, 1e-12);
                assert_eq!(out.x0_hat, out.s.zip_map(&out.d, |a, b| a + b).unwrap());
            }
        }
    }
}

#[test]
fn zero_params_give_zero_components() {
    for cond in ALL_COND {
        let (m, mut s) = build(cfg(2, cond, GateMode::Profile), 4, 1);
        let ids: Vec<_> = s.ids().collect();
        for id in ids {
            s.value_mut(id).data_mut().fill(0.0);
        }
        let out = m
            .denoise_one(
                &s,
                &randm(3, 4, 2),
                5,
                Some(&randv(4, 3)),
                Some(&randv(4, 4)),
            )
            .unwrap();
        assert!(out.s.data().iter().chain(out.d.data()).all(|&v| v == 0.0));
    }
}

#[test]
fn additive_zero_query_is_unconditioned() {
    let (m, s) = build(cfg(4, Conditioning::Additive, GateMode::Profile), 8, 5);
    let mut plain = m.clone();
    plain.cfg.conditioning = Conditioning::None;
    let x = randm(5, 8, 6);
    let pre = randv(8, 7);
    let a = m
        .denoise_one(&s, &x, 12, Some(&[0.0; 8]), Some(&pre))
        .unwrap();
    let b = plain.denoise_one(&s, &x, 12, None, Some(&pre)).unwrap();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.s), bits(&b.s));
    assert_eq!(bits(&a.d), bits(&b.d));
}

#[test]
fn query_reaches_output_in_every_mode() {
    for cond in [
        Conditioning::Additive,
        Conditioning::Concat,
        Conditioning::Cross,
    ] {
        let (m, s) = build(cfg(3, cond, GateMode::Profile), 8, 8);
        let x = randm(4, 8, 9);
        let pre = randv(8, 10);
        let a = m
            .denoise_one(&s, &x, 3, Some(&randv(8, 11)), Some(&pre))
            .unwrap();
        let b = m
            .denoise_one(&s, &x, 3, Some(&randv(8, 12)), Some(&pre))
            .unwrap();
        assert!(a.d.max_abs_diff(&b.d) > 1e-6, "{cond:?}");
    }
}

#[test]
fn concat_drops_query_row() {
    let (m, s) = build(cfg(2, Conditioning::Concat, GateMode::Learnt), 4, 13);
    let out = m
        .denoise_one(&s, &randm(3, 4, 14), 1, Some(&randv(4, 15)), None)
        .unwrap();
    assert_eq!(out.s.shape(), &[3, 4]);
    assert_eq!(out.d.shape(), &[3, 4]);
}

#[test]
fn cross_zero_query_contributes_nothing() {
    let (m, s) = build(cfg(3, Conditioning::Cross, GateMode::Profile), 4, 16);
    assert_eq!(m.layers.len(), 2);
    let x = randm(3, 4, 17);
    let pre = randv(4, 18);
    let out = m
        .denoise_one(&s, &x, 2, Some(&[0.0; 4]), Some(&pre))
        .unwrap();
    let (ws, wd) = oracle(&m, &s, &x, 2, &[0.0; 4], &pre, true);
    assert_close(&out.s, &ws, 1e-12);
    assert_close(&out.d, &wd, 1e-12);
}

#[test]
fn missing_condition_inputs_rejected() {
    let (m, s) = build(cfg(2, Conditioning::Additive, GateMode::Profile), 4, 19);
    let x = randm(2, 4, 20);
    assert!(m.denoise_one(&s, &x, 1, None, Some(&[0.0; 4])).is_err());
    assert!(m.denoise_one(&s, &x, 1, Some(&[0.0; 4]), None).is_err());
}

#[test]
fn config_validation() {
    let bad = [
        cfg(1, Conditioning::Additive, GateMode::Profile),
        ModelConfig {
            inject_after: Some(4),
            ..cfg(4, Conditioning::Additive, GateMode::Profile)
        },
        ModelConfig {
            inject_after: Some(0),
            ..cfg(4, Conditioning::Additive, GateMode::Profile)
        },
        cfg(0, Conditioning::None, GateMode::Profile),
    ];
    for c in bad {
        assert!(c.validate().is_err(), "{c:?}");
    }
    assert!(cfg(1, Conditioning::Concat, GateMode::None)
        .validate()
        .is_ok());
    assert_eq!(ModelConfig::default().inject_after(), 2);
    assert_eq!(
        cfg(5, Conditioning::Additive, GateMode::None).inject_after(),
        2
    );
}

#[test]
fn parameter_count_grows_with_depth() {
    let counts: Vec<usize> = [2, 4, 6, 8]
        .iter()
        .map(|&l| {
            build(cfg(l, Conditioning::Additive, GateMode::Profile), 8, 1)
                .1
                .num_scalars()
        })
        .collect();
    assert!(counts.windows(2).all(|w| w[1] > w[0]), "{counts:?}");
}

fn target() -> BehaviorToken {
    BehaviorToken {
        item_id: 3,
        side: SideInfo {
            price: 9.0,
            category: 2,
            seller: 1,
            view_time: 0.0,
            engagement: Engagement::Impressed,
        },
        timestamp: 0,
    }
}

#[test]
fn orthogonal_interest_scores_half() {
    let (m, s) = build(cfg(2, Conditioning::Additive, GateMode::Profile), 2, 21);
    let e = m.encoder.encode_item(&s, &target()).unwrap();
    // rows average to a vector orthogonal to e
    let d = Tensor::new(vec![2, 2], vec![-e[1], e[0], -e[1], e[0]]).unwrap();
    let p = m.score(&s, &d, &target(), Task::Ctr).unwrap();
    assert!((p.y_hat - 0.5).abs() < 1e-15);
}

#[test]
fn aligned_interest_saturates() {
    let (m, s) = build(cfg(2, Conditioning::Additive, GateMode::Profile), 2, 22);
    let e = m.encoder.encode_item(&s, &target()).unwrap();
    let d = Tensor::new(vec![1, 2], vec![1e6 * e[0], 1e6 * e[1]]).unwrap();
    assert!(m.score(&s, &d, &target(), Task::Ctr).unwrap().y_hat > 1.0 - 1e-12);
}

#[test]
fn dot_head_hand_value() {
    let (m, s) = build(cfg(2, Conditioning::Additive, GateMode::Profile), 2, 23);
    let e = m.encoder.encode_item(&s, &target()).unwrap();
    let d = Tensor::new(vec![2, 2], vec![0.3, -0.1, 0.5, 0.7]).unwrap();
    let mean = [0.4, 0.3];
    let z = (mean[0] * e[0] + mean[1] * e[1]) / 2f64.sqrt();
    let p = m.score(&s, &d, &target(), Task::Cvr).unwrap();
    assert!((p.logit - z).abs() < 1e-15);
    assert!((p.y_hat - sig(z)).abs() < 1e-15);
    assert_eq!(p.task, Task::Cvr);
}

#[test]
fn mlp_head_hand_value() {
    let c = ModelConfig {
        head: HeadType::Mlp,
        ..cfg(2, Conditioning::Additive, GateMode::Profile)
    };
    let (m, s) = build(c, 2, 24);
    let e = m.encoder.encode_item(&s, &target()).unwrap();
    let d = Tensor::new(vec![2, 2], vec![0.3, -0.1, 0.5, 0.7]).unwrap();
    let x = vec![vec![0.4, 0.3, e[0], e[1]]];
    let mlp = m.score_mlp.unwrap();
    let h = add_bias(
        &mm(&x, s.value(mlp.hidden.w)),
        s.value(mlp.hidden.b.unwrap()),
    );
    let h: M = vec![h[0].iter().map(|&v| silu(v)).collect()];
    let z = add_bias(&mm(&h, s.value(mlp.out.w)), s.value(mlp.out.b.unwrap()))[0][0];
    let p = m.score(&s, &d, &target(), Task::Ctr).unwrap();
    assert!((p.logit - z).abs() < 1e-14);
}

#[test]
fn interest_norms() {
    assert_eq!(inspect_interest(&Tensor::zeros(&[3, 2])), vec![0.0; 3]);
    let one_hot = Tensor::new(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap();
    assert_eq!(inspect_interest(&one_hot), vec![1.0]);
    let d = randm(3, 4, 25);
    let norms = inspect_interest(&d);
    for (i, n) in norms.iter().enumerate() {
        let mut acc = 0.0;
        for j in 0..4 {
            acc += d.at(&[i, j]) * d.at(&[i, j]);
        }
        assert!((n - acc.sqrt()).abs() < 1e-15);
    }
}

#[test]
fn batched_scoring_matches_single() {
    let (m, s) = build(cfg(2, Conditioning::Additive, GateMode::Profile), 4, 26);
    let d1 = randm(3, 4, 27);
    let d2 = randm(3, 4, 28);
    let mut g = Graph::new(&s);
    let mut both = d1.data().to_vec();
    both.extend_from_slice(d2.data());
    let dv = g.constant(Tensor::new(vec![2, 3, 4], both).unwrap());
    let t = target();
    let tv = m.encoder.encode_items(&mut g, &[&t, &t, &t]).unwrap();
    let z = m.score_logits(&mut g, dv, tv, &[1, 0, 1]).unwrap();
    let z = g.value(z).data().to_vec();
    let a = m.score(&s, &d1, &t, Task::Ctr).unwrap().logit;
    let b = m.score(&s, &d2, &t, Task::Ctr).unwrap().logit;
    assert!((z[0] - b).abs() < 1e-14 && (z[1] - a).abs() < 1e-14 && (z[2] - b).abs() < 1e-14);
}
