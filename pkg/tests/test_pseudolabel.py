import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfseg.errors import ShapeError
from sfseg.pseudolabel import (
    dataset_thresholds,
    ema_update,
    image_thresholds,
    lower_median,
    pseudo_label,
    thresholds_from_probs,
)
from sfseg.segmodel import predict_proba
from sfseg.tensorcore import NO_LABEL
from sfseg.transforms import Kind, Role, Transform

from .oracles import sorted_lower_median, threshold_oracle


def _pix(*p):
    return np.array(p, dtype=np.float64)[:, None, None]


def _rand_prob(rng, C=4, H=6, W=7):
    return rng.dirichlet(np.ones(C), size=(H, W)).transpose(2, 0, 1)


def test_pseudo_label_clears_threshold():
    assert pseudo_label(_pix(0.7, 0.2, 0.1), [0.6] * 3)[0, 0] == 0


def test_pseudo_label_below_threshold():
    assert pseudo_label(_pix(0.5, 0.3, 0.2), [0.6, 0.6, 0.6])[0, 0] == NO_LABEL


def test_pseudo_label_equal_is_not_above():
    assert pseudo_label(_pix(0.6, 0.4), [0.6, 0.6])[0, 0] == NO_LABEL


def test_pseudo_label_zero_thresholds_is_argmax(rng):
    p = _rand_prob(rng)
    np.testing.assert_array_equal(pseudo_label(p, np.zeros(4)), p.argmax(axis=0))
    assert (pseudo_label(p[None], np.ones(4)) == NO_LABEL).all()


def test_pseudo_label_tie_lowest_index():
    assert pseudo_label(_pix(0.4, 0.4, 0.2), [0.0] * 3)[0, 0] == 0


def test_pseudo_label_length_mismatch(rng):
    with pytest.raises(ShapeError):
        pseudo_label(_rand_prob(rng), [0.5] * 3)


@settings(max_examples=50)
@given(seed=st.integers(0, 10**6), j=st.integers(0, 3), bump=st.floats(0, 1))
def test_pseudo_label_monotone(seed, j, bump):
    r = np.random.default_rng(seed)
    p = _rand_prob(r)
    t = r.uniform(0, 1, size=4)
    t2 = t.copy()
    t2[j] = min(1.0, t2[j] + bump)
    a = pseudo_label(p, t) != NO_LABEL
    b = pseudo_label(p, t2) != NO_LABEL
    assert not (b & ~a).any()


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), c=st.integers(1, 11), theta=st.floats(-5, 5))
def test_pseudo_label_commutes_with_spatial(seed, c, theta):
    r = np.random.default_rng(seed)
    p = _rand_prob(r, H=9, W=12)
    t = r.uniform(0.2, 0.6, size=4)
    for tr in (Transform(Kind.MIRROR, {"c": c}), Transform(Kind.ROTATE, {"theta": theta})):
        lhs = pseudo_label(tr.apply(p, Role.PROB), t)
        rhs = tr.apply(pseudo_label(p, t), Role.LABEL)
        if tr.kind is Kind.ROTATE:
            keep = tr.apply(np.zeros((9, 12), np.uint8), Role.LABEL) != NO_LABEL
        else:
            keep = np.ones((9, 12), bool)
        np.testing.assert_array_equal(lhs[keep], rhs[keep])


def test_lower_median_examples():
    assert lower_median([0.7, 0.9, 0.95]) == 0.9
    assert lower_median([0.5, 0.6, 0.7]) == 0.6
    assert lower_median([4.0, 1.0, 3.0, 2.0]) == 2.0


def _maps_with_confidences(confs_by_class, C=3):
    """One (C, 1, N) map whose pixel k predicts class j with the given confidence."""
    cols = []
    for j, confs in confs_by_class.items():
        for c in confs:
            col = np.full(C, (1 - c) / (C - 1))
            col[j] = c
            cols.append(col)
    return np.array(cols).T[:, None, :]


def test_thresholds_examples():
    p = _maps_with_confidences({0: [0.7, 0.9, 0.95], 1: [0.5, 0.6, 0.7]})
    t = thresholds_from_probs([p], 3)
    np.testing.assert_allclose(t, [0.9, 0.6, 0.9])


def test_thresholds_match_python_oracle(rng):
    maps = [_rand_prob(rng, C=5, H=5, W=6) for _ in range(4)]
    got = thresholds_from_probs(maps, 5)
    np.testing.assert_array_equal(got, threshold_oracle(maps, 5))
    assert (got <= 0.9).all()


def test_dataset_thresholds_from_model(tiny_model, rng):
    imgs = [rng.uniform(size=(3, 5, 6)) for _ in range(3)]
    probs = [predict_proba(tiny_model, x) for x in imgs]
    np.testing.assert_array_equal(dataset_thresholds(tiny_model, imgs), threshold_oracle(probs, 3))


def test_image_thresholds_single_pixel():
    vals, valid = image_thresholds(_pix(0.8, 0.2))
    assert vals[0] == 0.8 and list(valid) == [True, False]
    vals, valid = image_thresholds(_pix(0.8, 0.2), current=[0.3, 0.45])
    assert vals[1] == 0.45


def test_image_thresholds_cap():
    p = np.zeros((2, 3, 3))
    p[0], p[1] = 0.95, 0.05
    vals, _ = image_thresholds(p)
    assert vals[0] == 0.9


def test_image_thresholds_sort_oracle(rng):
    p = _rand_prob(rng, C=3, H=8, W=8)
    vals, valid = image_thresholds(p)
    best, conf = p.argmax(0).ravel(), p.max(0).ravel()
    for j in range(3):
        sel = conf[best == j].tolist()
        assert valid[j] == bool(sel)
        if sel:
            assert vals[j] == min(0.9, sorted_lower_median(sel))


def test_ema_examples():
    np.testing.assert_array_equal(ema_update([0.3, 0.4], [0.9, 0.1], lam=1.0), [0.3, 0.4])
    assert abs(ema_update([0.9], [0.5], lam=0.99)[0] - 0.896) < 1e-12
    out = ema_update([0.9, 0.9], [0.5, 0.5], mask=[True, False])
    assert out[1] == 0.9


def test_ema_closed_form():
    p, pk, lam = np.array([0.9, 0.2]), np.array([0.4, 0.7]), 0.99
    cur = p.copy()
    for t in range(1, 301):
        cur = ema_update(cur, pk, lam=lam)
        np.testing.assert_allclose(cur, lam**t * (p - pk) + pk, atol=1e-12, rtol=0)


@given(st.lists(st.floats(0, 1), min_size=3, max_size=3), st.lists(st.floats(0, 1), min_size=3, max_size=3), st.floats(0, 1))
def test_ema_stays_between(p, pk, lam):
    out = ema_update(p, pk, lam=lam)
    lo, hi = np.minimum(p, pk), np.maximum(p, pk)
    assert ((out >= lo - 1e-15) & (out <= hi + 1e-15)).all()


@pytest.mark.parametrize("lam", [-0.1, 1.01])
def test_ema_bad_lambda(lam):
    with pytest.raises(ValueError):
        ema_update([0.5], [0.5], lam=lam)
