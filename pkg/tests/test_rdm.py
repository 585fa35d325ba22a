import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from _synthetic import mixture_instance, true_importance
from artifact.errors import (
    DegenerateTarget,
    DimensionMismatch,
    IncompleteGrid,
    KTooLarge,
    LabelMismatch,
    NonConvergence,
    TooFewPatches,
    ZeroVector,
)
from artifact.rdm import (
    RDM,
    FitOptions,
    LayerWeights,
    average_importance,
    compute_rdm,
    compute_rdm_multi,
    cosine_distance,
    fit_weights,
    load_layer_weights,
    load_rdm,
    save_layer_weights,
    save_rdm,
    select_top_layers,
    vectorize_rdm,
)


def _rdm_from(rng, n, d, labels=None):
    labels = labels or [f"p{i}" for i in range(n)]
    return compute_rdm(dict(zip(labels, rng.normal(size=(n, d)))), labels)


# --- compute_rdm ---------------------------------------------------------------

def test_identical_vectors():
    r = compute_rdm({"a": np.ones(4), "b": np.ones(4)}, ["a", "b"])
    np.testing.assert_array_equal(r.matrix, np.zeros((2, 2)))


def test_three_four_five():
    r = compute_rdm({"a": np.array([0.0, 0.0]), "b": np.array([3.0, 4.0])}, ["a", "b"])
    assert r.matrix[0, 1] == r.matrix[1, 0] == 5.0


def test_99_patches(rng):
    r = _rdm_from(rng, 99, 16)
    assert r.matrix.shape == (99, 99)
    assert vectorize_rdm(r).shape == (4851,)


def test_rank3_features_are_flattened(rng):
    feats = {k: rng.normal(size=(4, 4, 3)) for k in "abc"}
    r = compute_rdm(feats, list("abc"))
    assert r.matrix[0, 2] == pytest.approx(np.linalg.norm(feats["a"].ravel() - feats["c"].ravel()), rel=1e-12)


def test_label_order_is_respected(rng):
    feats = {k: rng.normal(size=5) for k in "abc"}
    r = compute_rdm(feats, ["c", "a", "b"])
    assert r.labels == ("c", "a", "b")
    assert r.matrix[0, 1] == pytest.approx(np.linalg.norm(feats["c"] - feats["a"]))


def test_rdm_errors(rng):
    with pytest.raises(TooFewPatches):
        compute_rdm({"a": np.ones(3)}, ["a"])
    with pytest.raises(DimensionMismatch):
        compute_rdm({"a": np.ones(3), "b": np.ones(4)}, ["a", "b"])
    with pytest.raises(LabelMismatch):
        compute_rdm({"a": np.ones(3)}, ["a", "b"])


def test_multi_layer_rdm_equals_concatenation(rng):
    labels = [f"p{i}" for i in range(6)]
    layers = [{k: rng.normal(size=(3, 3, c)) for k in labels} for c in (2, 5)]
    joined = {k: np.concatenate([layers[0][k].ravel(), layers[1][k].ravel()]) for k in labels}
    np.testing.assert_allclose(compute_rdm_multi(layers, labels).matrix, compute_rdm(joined, labels).matrix, rtol=1e-12)


def test_long_vectors_are_chunked(rng):
    # longer than one accumulation chunk
    labels = ["a", "b", "c"]
    x = rng.normal(size=(3, 200_000)).astype(np.float32)
    r = compute_rdm(dict(zip(labels, x)), labels)
    expect = np.linalg.norm(x[0].astype(np.float64) - x[2].astype(np.float64))
    assert r.matrix[0, 2] == pytest.approx(expect, rel=1e-10)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 8), st.integers(1, 6)), elements=st.floats(-1e3, 1e3)))
def test_rdm_invariants_hold(x):
    labels = [str(i) for i in range(len(x))]
    r = compute_rdm(dict(zip(labels, x)), labels)
    r.check()


# --- vectorize / cosine ---------------------------------------------------------

def test_vectorize_small_cases(rng):
    r = RDM(("a", "b"), np.array([[0.0, 5.0], [5.0, 0.0]]))
    np.testing.assert_array_equal(vectorize_rdm(r), [5.0])
    m = np.array([[0, 1, 2], [1, 0, 3], [2, 3, 0]], float)
    np.testing.assert_array_equal(vectorize_rdm(RDM(("a", "b", "c"), m)), [1, 2, 3])


def test_cosine_distance_examples():
    assert cosine_distance([1, 0], [1, 0]) == 0.0
    assert cosine_distance([1, 0], [0, 1]) == 1.0
    assert cosine_distance([1, 2, 3], [2, 4, 6]) == pytest.approx(0.0, abs=1e-15)
    assert cosine_distance([1, 0], [-1, 0]) == 2.0
    with pytest.raises(ZeroVector):
        cosine_distance([0, 0], [1, 0])


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, 5, elements=st.floats(-10, 10)),
    arrays(np.float64, 5, elements=st.floats(-10, 10)),
    st.floats(0.01, 100),
)
def test_cosine_distance_range_and_scale(u, v, s):
    if np.linalg.norm(u) < 1e-3 or np.linalg.norm(v) < 1e-3:
        return
    d = cosine_distance(u, v)
    assert -1e-12 <= d <= 2 + 1e-12
    assert cosine_distance(s * u, v) == pytest.approx(d, abs=1e-9)


# --- fit_weights -----------------------------------------------------------------

def test_exact_member_recovery():
    target, cands, _, _ = mixture_instance(101)
    cell = (2, 4)
    w = fit_weights(RDM(target.labels, cands[cell].matrix.copy()), cands)
    assert w.residual < 1e-6
    assert max(w.beta, key=w.beta.get) == cell
    assert w.beta[cell] / sum(w.beta.values()) > 0.99


def test_mixture_ranking_and_non_negativity():
    hits = 0
    for seed in range(5):
        target, cands, bstar, _ = mixture_instance(seed)
        w = fit_weights(target, cands)
        assert all(b >= 0 for b in w.beta.values())
        hits += select_top_layers(w.importance, 2).selected == select_top_layers(true_importance(bstar), 2).selected
    assert hits >= 4


def test_residual_not_worse_than_initial():
    target, cands, _, _ = mixture_instance(7)
    w = fit_weights(target, cands)
    assert w.residual <= w.initial_residual


def test_importance_is_mean_over_crfs():
    target, cands, _, _ = mixture_instance(3)
    w = fit_weights(target, cands)
    for z in w.layers:
        assert w.importance[z] == sum(w.beta[(c, z)] for c in w.crfs) / len(w.crfs)


def test_fit_is_deterministic():
    target, cands, _, _ = mixture_instance(4)
    a, b = fit_weights(target, cands), fit_weights(target, cands)
    assert a.beta == b.beta
    assert a.residual == b.residual


def test_per_crf_mode():
    target, cands, _, _ = mixture_instance(5)
    w = fit_weights(target, cands, FitOptions(mode="per_crf"))
    assert sorted(w.residual_per_crf) == list(range(6))
    assert all(b >= 0 for b in w.beta.values())
    assert set(w.importance) == set(range(7))


def test_fit_errors(rng):
    labels = [f"p{i}" for i in range(5)]
    cand = {(0, 0): _rdm_from(rng, 5, 3, labels)}
    with pytest.raises(DegenerateTarget):
        fit_weights(RDM(tuple(labels), np.zeros((5, 5))), cand)
    other = _rdm_from(rng, 5, 3, [f"q{i}" for i in range(5)])
    with pytest.raises(LabelMismatch):
        fit_weights(_rdm_from(rng, 5, 3, labels), {(0, 0): other})
    with pytest.raises(ValueError):
        fit_weights(_rdm_from(rng, 5, 3, labels), {})
    with pytest.raises(ValueError):
        fit_weights(_rdm_from(rng, 5, 3, labels), cand, FitOptions(mode="bogus"))


def test_zero_candidate_is_excluded(rng):
    labels = [f"p{i}" for i in range(6)]
    cands = {(0, 0): _rdm_from(rng, 6, 3, labels), (0, 1): RDM(tuple(labels), np.zeros((6, 6)))}
    with pytest.warns(RuntimeWarning):
        w = fit_weights(_rdm_from(rng, 6, 3, labels), cands)
    assert w.beta[(0, 1)] == 0.0
    assert w.excluded == [(0, 1)]


def test_nonconvergence_flag_and_raise():
    target, cands, _, _ = mixture_instance(9)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        w = fit_weights(target, cands, FitOptions(max_iter=1))
    assert not w.converged
    assert all(b >= 0 for b in w.beta.values())
    with pytest.raises(NonConvergence):
        fit_weights(target, cands, FitOptions(max_iter=1, raise_on_nonconvergence=True))


@pytest.mark.parametrize("s", [0.1, 10.0])
def test_scale_invariant_ranking(s):
    target, cands, _, _ = mixture_instance(11)
    base = fit_weights(target, cands)
    scaled = fit_weights(RDM(target.labels, target.matrix * s), cands)
    order = lambda w: np.argsort([-w.importance[z] for z in w.layers], kind="stable")
    np.testing.assert_array_equal(order(base), order(scaled))


# --- average_importance / selection ------------------------------------------------

def _weights(beta, crfs, layers):
    return LayerWeights(crfs=crfs, layers=layers, beta=beta, importance={}, residual=0.0, initial_residual=0.0, converged=True, iterations=0)


def test_average_importance_examples():
    crfs, layers = list(range(6)), [0, 1]
    ones = _weights({(c, z): 1.0 for c in crfs for z in layers}, crfs, layers)
    assert average_importance(ones) == {0: 1.0, 1: 1.0}
    spike = {(c, 0): (6.0 if c == 5 else 0.0) for c in crfs} | {(c, 1): 0.0 for c in crfs}
    assert average_importance(_weights(spike, crfs, layers))[0] == 1.0
    holes = {k: v for k, v in spike.items() if k != (3, 1)}
    with pytest.raises(IncompleteGrid):
        average_importance(_weights(holes, crfs, layers))


def test_select_top_layers_examples():
    assert select_top_layers({0: 0.9, 1: 0.1, 2: 0.1, 3: 0.8}, 2).selected == (0, 3)
    assert select_top_layers({z: 0.5 for z in range(7)}, 2).selected == (0, 1)
    imp = {0: 0.1, 1: 0.7, 2: 0.3}
    full = select_top_layers(imp, 3)
    assert full.ranked_layers == full.selected == (1, 2, 0)
    with pytest.raises(KTooLarge):
        select_top_layers(imp, 4)


@settings(max_examples=50, deadline=None)
@given(st.dictionaries(st.integers(0, 10), st.floats(0, 1), min_size=1, max_size=8), st.data())
def test_selection_properties(importance, data):
    k = data.draw(st.integers(0, len(importance)))
    res = select_top_layers(importance, k)
    assert res == select_top_layers(dict(importance), k)
    assert set(res.selected) <= set(res.ranked_layers)
    assert len(res.selected) == k
    values = [importance[z] for z in res.ranked_layers]
    assert values == sorted(values, reverse=True)


# --- file formats ---------------------------------------------------------------------

def test_rdm_file_round_trip(tmp_path, rng):
    r = _rdm_from(rng, 7, 4)
    r.kind, r.crf, r.layer = "degraded", 30, 3
    save_rdm(tmp_path / "x.rdm", r)
    back = load_rdm(tmp_path / "x.rdm")
    assert back.labels == r.labels
    assert (back.kind, back.crf, back.layer) == ("degraded", 30, 3)
    np.testing.assert_allclose(back.matrix, r.matrix, rtol=1e-6)
    raw = (tmp_path / "x.rdm").read_bytes()
    assert raw[:4] == b"RDM1"
    np.testing.assert_array_equal(np.frombuffer(raw[-4 * 49:], "<f4").reshape(7, 7), r.matrix.astype("<f4"))


def test_layer_weights_round_trip(tmp_path):
    target, cands, _, _ = mixture_instance(2)
    w = fit_weights(target, cands)
    sel = select_top_layers(w.importance, 2)
    save_layer_weights(tmp_path / "lw.json", w, sel)
    doc = json.loads((tmp_path / "lw.json").read_text())
    assert {"beta", "importance", "residual", "options", "selected"} <= set(doc)
    assert len(doc["beta"]) == 42
    back, back_sel = load_layer_weights(tmp_path / "lw.json")
    assert back.beta == w.beta
    assert back.importance == w.importance
    assert back_sel == sel
