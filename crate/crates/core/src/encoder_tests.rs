use super::*;
use crate::numerics::finite_diff_check;

fn small_cfg(d: usize) -> EncoderConfig {
    EncoderConfig {
        d_model: d,
        max_n: 4,
        id_buckets: 16,
        cat_buckets: 8,
        ..EncoderConfig::default()
    }
}

fn build(cfg: EncoderConfig, seed: u64) -> (Encoder, ParamStore) {
    let mut store = ParamStore::new();
    let enc = Encoder::new(cfg, &mut store, &mut Rng::new(seed)).unwrap();
    (enc, store)
}

fn zero_all(store: &mut ParamStore) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.value_mut(id).data_mut().fill(0.0);
    }
}

fn token(item_id: u64, category: u32, ts: i64) -> BehaviorToken {
    BehaviorToken {
        item_id,
        side: SideInfo {
            price: 12.5,
            category,
            seller: item_id % 5,
            view_time: 30.0,
            engagement: Engagement::Clicked,
        },
        timestamp: ts,
    }
}

fn gate(age: u32) -> GateFeatures {
    GateFeatures {
        user: UserFeatures {
            user_id: 17,
            gender: 1,
            age_bucket: age,
            location: 3,
        },
        context: ContextFeatures {
            timestamp: 1_700_000_000,
            search_scene: 2,
            client: 0,
        },
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Row-vector times matrix stored row-major `[rows, cols]`.
fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let cols = w.shape()[1];
    (0..cols)
        .map(|j| {
            b.data()[j]
                + x.iter()
                    .enumerate()
                    .map(|(i, xi)| xi * w.at(&[i, j]))
                    .sum::<f64>()
        })
        .collect()
}

fn set_row(store: &mut ParamStore, id: ParamId, row: usize, vals: &[f64]) {
    let t = store.value_mut(id);
    let w = t.shape()[1];
    t.data_mut()[row * w..(row + 1) * w].copy_from_slice(vals);
}

#[test]
fn zero_params_encode_to_zero() {
    let (enc, mut store) = build(small_cfg(4), 1);
    zero_all(&mut store);
    assert!(enc
        .encode_item(&store, &token(3, 2, 0))
        .unwrap()
        .iter()
        .all(|&x| x == 0.0));
    let q = QueryFeatures {
        keywords: vec![1, 2],
        predicted_age: 3,
        predicted_gender: 1,
    };
    assert!(enc
        .encode_query(&store, &q)
        .unwrap()
        .iter()
        .all(|&x| x == 0.0));
    assert!(enc
        .encode_gate(&store, &gate(2))
        .unwrap()
        .iter()
        .all(|&x| x == 0.0));
}

#[test]
fn zero_tables_leave_only_the_time_code() {
    let (enc, mut store) = build(small_cfg(4), 1);
    zero_all(&mut store);
    let tok = token(3, 2, 86_400);
    let seq = enc.encode_sequence(&store, &[tok]).unwrap();
    assert_eq!(seq.x0.shape(), &[1, 4]);
    assert_eq!(seq.x0.data(), enc.time_embedding(86_400).as_slice());
}

#[test]
fn identical_tokens_identical_outputs() {
    let (enc, store) = build(small_cfg(4), 2);
    let a = enc.encode_item(&store, &token(9, 1, 5)).unwrap();
    let b = enc.encode_item(&store, &token(9, 1, 5)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn hand_set_item_encoding() {
    let (enc, mut store) = build(small_cfg(2), 3);
    let p = enc.p.clone();
    for id in [p.item_id, p.category, p.seller, p.engagement] {
        store.value_mut(id).data_mut().fill(0.0);
    }
    let tok = token(11, 4, 0);
    set_row(&mut store, p.item_id, enc.item_slot(11), &[1.0, 0.0]);
    set_row(&mut store, p.category, enc.category_slot(4), &[0.0, 1.0]);
    set_row(
        &mut store,
        p.engagement,
        Engagement::Clicked.index(),
        &[0.5, -0.5],
    );
    let input = [
        1.0,
        0.0,
        0.0,
        1.0,
        0.0,
        0.0,
        0.5,
        -0.5,
        12.5f64.ln_1p(),
        30.0f64.ln_1p(),
    ];
    let h = affine(
        &input,
        store.value(p.item_mlp.hidden.w),
        store.value(p.item_mlp.hidden.b.unwrap()),
    );
    let h: Vec<f64> = h.into_iter().map(silu).collect();
    let expected = affine(
        &h,
        store.value(p.item_mlp.out.w),
        store.value(p.item_mlp.out.b.unwrap()),
    );
    let got = enc.encode_item(&store, &tok).unwrap();
    for (a, b) in got.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12, "{got:?} vs {expected:?}");
    }
}

#[test]
fn sequence_row_is_sum_of_three_terms() {
    let (enc, store) = build(small_cfg(4), 4);
    let hist = vec![token(1, 0, 1000), token(2, 1, 2000), token(3, 2, 3500)];
    let seq = enc.encode_sequence(&store, &hist).unwrap();
    let pos = store.value(enc.p.pos);
    for (t, tok) in hist.iter().enumerate() {
        let item = enc.encode_item(&store, tok).unwrap();
        let time = enc.time_embedding(tok.timestamp);
        for j in 0..4 {
            let expected = item[j] + time[j] + pos.at(&[t, j]);
            assert!((seq.x0.at(&[t, j]) - expected).abs() < 1e-14);
        }
    }
    assert_eq!(seq.meta, vec![(1, 0), (2, 1), (3, 2)]);
}

#[test]
fn swapping_positions_changes_rows() {
    let (enc, store) = build(small_cfg(4), 5);
    let a = token(1, 0, 1000);
    let b = token(2, 1, 1000);
    let s1 = enc
        .encode_sequence(&store, &[a.clone(), b.clone()])
        .unwrap();
    let s2 = enc.encode_sequence(&store, &[b, a]).unwrap();
    assert_ne!(s1.x0.row(0), s2.x0.row(1));
    assert_ne!(s1.x0, s2.x0);
}

#[test]
fn truncation_keeps_most_recent_in_order() {
    let (enc, store) = build(small_cfg(4), 6);
    let hist: Vec<_> = (0..7).map(|i| token(i, 0, i as i64 * 10)).collect();
    let seq = enc.encode_sequence(&store, &hist).unwrap();
    assert!(seq.truncated);
    assert_eq!(seq.n, 4);
    assert_eq!(
        seq.meta.iter().map(|m| m.0).collect::<Vec<_>>(),
        vec![3, 4, 5, 6]
    );
    let direct = enc.encode_sequence(&store, &hist[3..]).unwrap();
    assert_eq!(direct.x0, seq.x0);
    assert!(!direct.truncated);
}

#[test]
fn nan_side_info_is_rejected() {
    let (enc, store) = build(small_cfg(4), 7);
    let mut tok = token(1, 0, 0);
    tok.side.price = f64::NAN;
    assert!(matches!(
        enc.encode_item(&store, &tok),
        Err(Error::Input(_))
    ));
}

#[test]
fn query_mean_pooling_is_order_free() {
    let (enc, store) = build(small_cfg(4), 8);
    let q1 = QueryFeatures {
        keywords: vec![3, 5, 7],
        predicted_age: 1,
        predicted_gender: 0,
    };
    let q2 = QueryFeatures {
        keywords: vec![7, 3, 5],
        ..q1.clone()
    };
    let (a, b) = (
        enc.encode_query(&store, &q1).unwrap(),
        enc.encode_query(&store, &q2).unwrap(),
    );
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-15);
    }
}

#[test]
fn two_keyword_query_matches_hand_computation() {
    let (enc, store) = build(small_cfg(3), 9);
    let q = QueryFeatures {
        keywords: vec![2, 6],
        predicted_age: 4,
        predicted_gender: 1,
    };
    let p = &enc.p;
    let kw = store.value(p.keyword);
    let mut input = Vec::new();
    for j in 0..3 {
        input.push(0.5 * (kw.at(&[enc.keyword_slot(2), j]) + kw.at(&[enc.keyword_slot(6), j])));
    }
    input.extend_from_slice(store.value(p.query_age).row(enc.query_age_slot(4)));
    input.extend_from_slice(store.value(p.query_gender).row(enc.query_gender_slot(1)));
    let expected = affine(
        &input,
        store.value(p.query_proj.w),
        store.value(p.query_proj.b.unwrap()),
    );
    let got = enc.encode_query(&store, &q).unwrap();
    for (a, b) in got.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-13);
    }
}

#[test]
fn empty_keywords_rejected() {
    let (enc, store) = build(small_cfg(3), 9);
    let q = QueryFeatures {
        keywords: vec![],
        predicted_age: 0,
        predicted_gender: 0,
    };
    assert!(matches!(enc.encode_query(&store, &q), Err(Error::Input(_))));
}

#[test]
fn gate_features_distinguish_age() {
    let (enc, store) = build(small_cfg(4), 10);
    assert_ne!(
        enc.encode_gate(&store, &gate(1)).unwrap(),
        enc.encode_gate(&store, &gate(2)).unwrap()
    );
}

#[test]
fn hand_set_gate_encoding() {
    let (enc, store) = build(small_cfg(2), 11);
    let f = gate(3);
    let p = &enc.p;
    let c = &enc.cfg;
    let mut input = Vec::new();
    input.extend_from_slice(
        store
            .value(p.user_id)
            .row(hash_id(Field::User, 17, c.id_buckets)),
    );
    input.extend_from_slice(
        store
            .value(p.gender)
            .row(hash_id(Field::Gender, 1, c.cat_buckets)),
    );
    input.extend_from_slice(store.value(p.age).row(enc.age_slot(3)));
    input.extend_from_slice(store.value(p.location).row(hash_id(
        Field::Location,
        3,
        c.cat_buckets,
    )));
    input.extend_from_slice(
        store
            .value(p.scene)
            .row(hash_id(Field::Scene, 2, c.cat_buckets)),
    );
    input.extend_from_slice(
        store
            .value(p.client)
            .row(hash_id(Field::Client, 0, c.cat_buckets)),
    );
    input.extend(enc.time_embedding(f.context.timestamp));
    let h: Vec<f64> = affine(
        &input,
        store.value(p.gate_mlp.hidden.w),
        store.value(p.gate_mlp.hidden.b.unwrap()),
    )
    .into_iter()
    .map(silu)
    .collect();
    let expected = affine(
        &h,
        store.value(p.gate_mlp.out.w),
        store.value(p.gate_mlp.out.b.unwrap()),
    );
    let got = enc.encode_gate(&store, &f).unwrap();
    for (a, b) in got.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12);
    }
}

fn check_grads(store: &ParamStore, f: impl Fn(&mut Graph) -> Result<Var>) {
    let report = finite_diff_check(
        |s| {
            let mut g = Graph::new(s);
            let loss = f(&mut g)?;
            Ok((g.value(loss).item(), g.backward(loss)?))
        },
        store,
        1e-5,
        3,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn sequence_gradients_match_finite_differences() {
    let (enc, store) = build(small_cfg(3), 12);
    let hist = vec![token(1, 0, 100), token(2, 3, 200), token(1, 0, 300)];
    check_grads(&store, |g| {
        let x = enc.encode_sequences(g, &[&hist])?;
        let x = g.square(x);
        Ok(g.sum_all(x))
    });
}

#[test]
fn query_and_gate_gradients_match_finite_differences() {
    let (enc, store) = build(small_cfg(3), 13);
    let q = QueryFeatures {
        keywords: vec![1, 4],
        predicted_age: 2,
        predicted_gender: 1,
    };
    let gf = gate(2);
    let w = g_weights();
    check_grads(&store, |g| {
        let qv = enc.encode_queries(g, &[&q])?;
        let gv = enc.encode_gate_features(g, &[&gf])?;
        let m = g.add(qv, gv)?;
        let c = g.constant(w.clone());
        let m = g.mul(m, c)?;
        Ok(g.sum_all(m))
    });
}

fn g_weights() -> Tensor {
    Tensor::new(vec![1, 3], vec![0.7, -1.3, 0.4]).unwrap()
}

#[test]
fn token_json_shape_is_flat() {
    let tok = token(5, 2, 77);
    let v = serde_json::to_value(&tok).unwrap();
    assert_eq!(v["item_id"], 5);
    assert_eq!(v["engagement"], "clicked");
    assert_eq!(v["timestamp"], 77);
    let back: BehaviorToken = serde_json::from_value(v).unwrap();
    assert_eq!(back, tok);
}
