use super::gradcheck::{compare, finite_difference};
use super::*;
use crate::rng::seeded;

fn store_with(shapes: &[(&str, usize, usize)], seed: u64) -> ParamStore {
    let mut rng = seeded(seed);
    let mut store = ParamStore::new();
    for &(name, r, c) in shapes {
        store.insert(name, truncated_normal(r, c, 0.5, &mut rng));
    }
    store
}

fn check(store: &ParamStore, f: impl for<'t> Fn(&Binder<'t>) -> Var<'t>) -> f64 {
    let tape = Tape::new();
    let b = Binder::new(&tape, store);
    let loss = f(&b);
    let grads = tape.backward(loss);
    let analytic = b.collect(&grads);
    let numeric = finite_difference(store, 1e-5, |s| {
        let tape = Tape::new();
        let b = Binder::new(&tape, s);
        f(&b).item()
    });
    let report = compare(&analytic, &numeric);
    report.max_relative_error()
}

#[test]
fn matmul_transpose_add_sub_mul() {
    let s = store_with(&[("a", 3, 4), ("b", 4, 2), ("c", 3, 2)], 1);
    let err = check(&s, |b| {
        let x = b.param("a").matmul(b.param("b"));
        let y = x.add(b.param("c")).mul(x).sub(b.param("c").scale(0.3));
        y.t().matmul(b.param("c")).sum()
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn broadcasts_and_pointwise() {
    let s = store_with(&[("a", 4, 3), ("r", 1, 3), ("c", 4, 1)], 2);
    let err = check(&s, |b| {
        let x = b.param("a").add_row(b.param("r")).mul_row(b.param("r"));
        let y = x.mul_col(b.param("c")).gelu().leaky_relu(0.2);
        let z = y.exp().add_scalar(1.0).ln();
        z.mean()
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn row_gather_scatter_group() {
    let s = store_with(&[("a", 5, 3), ("b", 2, 3)], 3);
    let err = check(&s, |b| {
        let a = b.param("a");
        let g = a.gather_rows(&[4, 0, 0, 2]);
        let sc = g.scatter_add_rows(&[1, 1, 0, 2], 3);
        let gm = a.group_mean(&[vec![0, 1], vec![2, 3, 4]]);
        let cat = Var::concat_rows(&[sc, gm, b.param("b")]);
        let wide = Var::concat_cols(&[cat, cat.scale(2.0)]);
        wide.mul(wide).sum().add(a.pick(&[(0, 0), (4, 2), (0, 0)]).sum())
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn layer_norm_gradients() {
    let s = store_with(&[("x", 4, 6), ("g", 1, 6), ("b", 1, 6), ("w", 6, 1)], 4);
    let err = check(&s, |b| {
        b.param("x")
            .layer_norm(b.param("g"), b.param("b"))
            .matmul(b.param("w"))
            .exp()
            .sum()
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn attention_gradients_with_padding() {
    let s = store_with(&[("q", 7, 4), ("k", 7, 4), ("v", 7, 4), ("w", 4, 4)], 5);
    let segs = [Segment { start: 0, len: 3 }, Segment { start: 3, len: 4 }];
    let valid = [true, true, true, true, true, false, true];
    let err = check(&s, |b| {
        let o = Var::attention(b.param("q"), b.param("k"), b.param("v"), &segs, &valid, 2);
        o.matmul(b.param("w")).mul(o).sum()
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn attention_rows_are_convex_combinations() {
    let tape = Tape::new();
    let q = tape.leaf(Matrix::zeros((3, 2)));
    let v = tape.leaf(ndarray::array![[1.0, 2.0], [3.0, 4.0], [100.0, 100.0]]);
    let segs = [Segment { start: 0, len: 3 }];
    // Zero scores give uniform weights over the valid keys only.
    let o = Var::attention(q, q, v, &segs, &[true, true, false], 1).value();
    assert_eq!(o.row(0).to_vec(), vec![2.0, 3.0]);
}

#[test]
fn segment_softmax_and_normalize() {
    let s = store_with(&[("a", 5, 2), ("x", 3, 4)], 6);
    let err = check(&s, |b| {
        let p = b.param("a").segment_softmax(&[0, 0, 1, 1, 1]);
        let n = b.param("x").row_normalize();
        p.mul(p).sum().add(n.matmul(n.t()).exp().sum())
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn segment_softmax_sums_to_one() {
    let tape = Tape::new();
    let a = tape.leaf(ndarray::array![[1.0], [2.0], [-3.0], [0.5]]);
    let p = a.segment_softmax(&[1, 0, 1, 1]).value();
    assert!((p[[0, 0]] + p[[2, 0]] + p[[3, 0]] - 1.0).abs() < 1e-12);
    assert_eq!(p[[1, 0]], 1.0);
}

#[test]
fn classification_losses() {
    let s = store_with(&[("z", 4, 5), ("y", 3, 1)], 7);
    let err = check(&s, |b| {
        let ce = b.param("z").cross_entropy(&[0, 4, 2, 2]);
        let bce = b.param("y").bce_with_logits(&[1.0, 0.0, 1.0]);
        ce.add(bce)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn cross_entropy_uniform_is_log_v() {
    let tape = Tape::new();
    let z = tape.leaf(Matrix::zeros((2, 7)));
    let l = z.cross_entropy(&[3, 6]).item();
    assert!((l - 7f64.ln()).abs() < 1e-12);
}

#[test]
fn detach_blocks_gradient() {
    let s = store_with(&[("a", 2, 2)], 8);
    let tape = Tape::new();
    let b = Binder::new(&tape, &s);
    let a = b.param("a");
    let loss = a.detach().mul(a.detach()).sum();
    let grads = tape.backward(loss);
    assert!(b.collect(&grads).is_empty());
}

#[test]
fn unused_parameters_get_no_gradient() {
    let s = store_with(&[("a", 2, 2), ("b", 2, 2)], 9);
    let tape = Tape::new();
    let b = Binder::new(&tape, &s);
    let _unused = b.param("b").sum();
    let loss = b.param("a").sum();
    let grads = b.collect(&tape.backward(loss));
    assert!(grads.contains_key("a"));
    assert!(!grads.contains_key("b"));
}
