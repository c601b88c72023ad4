import math

import numpy as np
import pytest

from sfseg.adapt import (
    AdaptConfig,
    AdaptState,
    TtaConfig,
    adapt,
    entropy_loss,
    history_csv,
    training_iteration,
    tta_episode,
    tta_step,
)
from sfseg.errors import ConfigError
from sfseg.segmodel import ArchConfig, checkpoint_bytes, forward, init_model, parameters_equal, predict, predict_proba, update_norm_pass
from sfseg.tensorcore import Tensor, no_grad, softmax, zero_grad
from sfseg.transforms import Kind, Transform, TransformPair

from .oracles import max_rel_error, numeric_grad

ARCH = ArchConfig(n_classes=3, widths=[4, 4])


def _source(rng, n=4, h=8, w=10):
    imgs = [rng.uniform(size=(3, h, w)) for _ in range(n)]
    m = update_norm_pass(init_model(ARCH, seed=1), imgs)
    return m, imgs


def _grads(model):
    return [None if p.grad is None else p.grad.copy() for p in model.parameters()]


def _pair(*transforms):
    return TransformPair.from_chain(transforms)


MIXED_PAIR = _pair(
    Transform(Kind.MIRROR, {"c": 6}),
    Transform(Kind.ROTATE, {"theta": 4.0}),
    Transform(Kind.GAUSSIAN, {"ks": 3, "sigma": 0.7}),
    Transform(Kind.CUTOUT, {"b": 3, "p": 0.2, "origins": ((1, 2),)}),
)


# --- config ---------------------------------------------------------------


def test_config_defaults_and_round_trip():
    cfg = AdaptConfig()
    assert (cfg.collage, cfg.soft, cfg.hard, cfg.init_mode) == (True, True, True, "scratch")
    assert cfg.lr_power == 0.9 and cfg.epochs == 20
    assert cfg.total_iters(100) == 2000
    back = AdaptConfig.from_dict(cfg.to_dict())
    assert back == cfg
    with pytest.raises(ConfigError):
        AdaptConfig.from_dict({"nope": 1})
    with pytest.raises(ConfigError):
        AdaptConfig(init_mode="warm").validate()


def test_pl_only_has_no_consistency():
    cfg = AdaptConfig.pl_only()
    assert not cfg.consistency and not cfg.collage


# --- adapt contracts --------------------------------------------------------


def test_epochs_zero_returns_initialised_model(rng):
    src, imgs = _source(rng)
    before = checkpoint_bytes(src)
    st = AdaptState()
    m_t = adapt(src, imgs, AdaptConfig(epochs=0, seed=5), state=st)
    fresh = init_model(ARCH, seed=5)
    assert parameters_equal(m_t, fresh)
    assert checkpoint_bytes(src) == before
    assert st.history == []


def test_finetune_starts_from_norm_updated_source(rng):
    src, imgs = _source(rng)
    m_t = adapt(src, imgs, AdaptConfig(epochs=0, init_mode="finetune"))
    assert parameters_equal(m_t, src)


def test_thresholds_one_without_consistency_is_inert(rng):
    src, imgs = _source(rng)
    cfg = AdaptConfig.pl_only(epochs=2, uniform_threshold=1.0, seed=2)
    st = AdaptState()
    m_t = adapt(src, imgs, cfg, state=st)
    assert parameters_equal(m_t, init_model(ARCH, seed=2))
    assert all(row["loss_c"] == 0 and row["loss_r_soft"] == 0 and row["loss_r_hard"] == 0 for row in st.history)
    assert all(row["labeled_pixel_fraction"] == 0 for row in st.history)


def test_collage_needs_two_images(rng):
    src, imgs = _source(rng, n=1)
    with pytest.raises(ConfigError):
        adapt(src, imgs, AdaptConfig(epochs=1))


def test_cached_pseudo_labels_use_norm_updated_source(rng):
    src, imgs = _source(rng)
    st = AdaptState()
    adapt(src, imgs, AdaptConfig(epochs=0), state=st)
    from sfseg.pseudolabel import dataset_thresholds, pseudo_label

    thr = dataset_thresholds(st.source_model, imgs)
    np.testing.assert_array_equal(st.source_thresholds, thr)
    for x, y in zip(imgs, st.pseudo_labels):
        np.testing.assert_array_equal(y, pseudo_label(predict_proba(st.source_model, x), thr))


def test_adapt_reproducible_and_logged(rng):
    src, imgs = _source(rng)
    runs = []
    for _ in range(2):
        st = AdaptState()
        m = adapt(src, imgs, AdaptConfig(epochs=2, seed=9), state=st)
        runs.append((checkpoint_bytes(m), st))
    assert runs[0][0] == runs[1][0]
    h = runs[0][1].history
    assert len(h) == 2 and [r["iter"] for r in h] == [4, 8]
    csv = history_csv(h)
    assert csv == history_csv(runs[1][1].history)
    header = csv.splitlines()[0].split(",")
    assert header == ["epoch", "iter", "lr", "loss_c", "loss_r_soft", "loss_r_hard", "labeled_pixel_fraction", "thr_0", "thr_1", "thr_2"]


def test_adapt_seed_changes_result(rng):
    src, imgs = _source(rng)
    a = adapt(src, imgs, AdaptConfig(epochs=1, seed=1))
    b = adapt(src, imgs, AdaptConfig(epochs=1, seed=2))
    assert not parameters_equal(a, b)


def test_ema_thresholds_stay_capped(rng):
    src, imgs = _source(rng)
    st = AdaptState()
    adapt(src, imgs, AdaptConfig(epochs=3, ema_lambda=0.5), state=st)
    assert (st.thresholds <= 0.9).all() and (st.thresholds >= 0).all()


# --- training iteration -------------------------------------------------------


def test_identity_pair_soft_term_is_self_entropy(rng):
    m = init_model(ARCH, seed=4)
    x = rng.uniform(size=(3, 6, 7))
    y = np.full((6, 7), 255, np.uint8)
    pair = _pair(Transform(Kind.ROTATE, {"theta": 0.0}))
    res = training_iteration(m, x, y, np.ones(3), rng, AdaptConfig(hard=False), pair=pair)
    with no_grad():
        p = softmax(forward(m, x)).data
    expected = float(np.mean(-(p * np.log(p)).sum(axis=1)))
    assert abs(res.loss_r_soft - expected) < 1e-12
    assert res.loss_c == 0


def test_thresholds_one_hard_term_is_zero(rng):
    m = init_model(ARCH, seed=4)
    x = rng.uniform(size=(3, 6, 7))
    y = rng.integers(0, 3, size=(6, 7)).astype(np.uint8)
    res = training_iteration(m, x, y, np.ones(3), rng, AdaptConfig(), pair=MIXED_PAIR)
    assert res.loss_r_hard == 0.0 and res.loss_r_soft > 0


@pytest.mark.parametrize("pair", [MIXED_PAIR, _pair(Transform(Kind.GAUSSIAN, {"ks": 3, "sigma": 1.0}))])
@pytest.mark.parametrize("scale", [1.0, 1e3])
def test_stop_gradient_probe_is_bitwise_inert(rng, pair, scale):
    """A zero-valued but parameter-dependent term on the target branch must not move any gradient."""
    m = init_model(ARCH, seed=6)
    x = rng.uniform(size=(3, 8, 10))
    y = rng.integers(0, 3, size=(8, 10)).astype(np.uint8)
    thr = np.full(3, 0.3)
    training_iteration(m, x, y, thr, np.random.default_rng(0), AdaptConfig(), pair=pair)
    base = _grads(m)
    zero_grad(m.parameters())
    calls = []

    def probe(p):
        calls.append(1)
        return (p - p.detach()) * scale

    training_iteration(m, x, y, thr, np.random.default_rng(0), AdaptConfig(), pair=pair, target_probe=probe)
    assert calls
    for a, b in zip(base, _grads(m)):
        assert np.max(np.abs(a - b)) == 0.0
        assert a.tobytes() == b.tobytes()


def test_stop_gradient_probe_leaf_gets_no_grad(rng):
    m = init_model(ARCH, seed=6)
    x = rng.uniform(size=(3, 8, 10))
    y = rng.integers(0, 3, size=(8, 10)).astype(np.uint8)
    leaf = Tensor(np.zeros((1, 3, 8, 10)), requires_grad=True)
    training_iteration(m, x, y, np.full(3, 0.3), rng, AdaptConfig(), pair=MIXED_PAIR, target_probe=lambda p: leaf)
    assert leaf.grad is None or not leaf.grad.any()
    assert all(p.grad is not None for p in m.parameters())


def test_training_iteration_gradcheck(rng):
    """loss_c + loss_r gradient against central differences with frozen targets."""
    m = init_model(ArchConfig(n_classes=3, widths=[3]), seed=8)
    x = rng.uniform(size=(3, 5, 6))
    y = rng.integers(0, 3, size=(5, 6)).astype(np.uint8)
    y[0, :2] = 255
    thr = np.full(3, 0.2)
    pair = _pair(Transform(Kind.MIRROR, {"c": 2}), Transform(Kind.GAUSSIAN, {"ks": 3, "sigma": 0.9}))
    training_iteration(m, x, y, thr, rng, AdaptConfig(), pair=pair)
    analytic = _grads(m)
    zero_grad(m.parameters())

    # targets are constants: freeze them at the unperturbed model's output
    from sfseg.pseudolabel import pseudo_label
    from sfseg.tensorcore import hard_ce_masked, soft_ce
    from sfseg.transforms import Role, apply_pair

    with no_grad():
        p0 = softmax(forward(m, x)).data[0]
    soft_t = apply_pair(pair, p0, Role.PROB)[None]
    hard_t = apply_pair(pair, pseudo_label(p0, thr), Role.LABEL)
    xt = apply_pair(pair, x, Role.IMAGE)

    def loss():
        with no_grad():
            lc, _ = hard_ce_masked(forward(m, x), y)
            q = forward(m, xt)
            return lc.item() + soft_ce(q, soft_t).item() + hard_ce_masked(q, hard_t)[0].item()

    for p, g in zip(m.parameters(), analytic):
        num = numeric_grad(loss, p.data, step=1e-5)
        assert max_rel_error(g, num) < 1e-4


def test_source_teacher_targets(rng):
    src, imgs = _source(rng)
    m_t = init_model(ARCH, seed=0)
    x = imgs[0]
    y = np.full(x.shape[-2:], 255, np.uint8)
    res = training_iteration(m_t, x, y, np.ones(3), rng, AdaptConfig(hard=False), pair=_pair(Transform(Kind.ROTATE, {"theta": 0.0})), teacher=src)
    with no_grad():
        p_s = predict_proba(src, x)
        q = softmax(forward(m_t, x)).data[0]
    expected = float(np.mean(-(p_s * np.log(q)).sum(axis=0)))
    assert abs(res.loss_r_soft - expected) < 1e-12


# --- TTA ----------------------------------------------------------------------


def test_entropy_loss_examples():
    u = Tensor(np.full((1, 4, 1, 1), 0.25))
    assert abs(entropy_loss(u).item() - math.log(4)) < 1e-12
    assert entropy_loss(Tensor(np.array([1.0, 0.0])[None, :, None, None])).item() == 0.0
    v = entropy_loss(Tensor(np.array([0.6, 0.4])[None, :, None, None])).item()
    assert abs(v - 0.67301) < 1e-5


def test_tta_iters_zero_is_plain_prediction(rng):
    src, imgs = _source(rng)
    pred, restored = tta_episode(src, imgs[0], TtaConfig(iters_per_image=0))
    np.testing.assert_array_equal(pred, predict(src, imgs[0]))
    assert restored


@pytest.mark.parametrize("kind,subset", [("consistency", "all"), ("consistency", "norm_affine"), ("entropy", "all"), ("entropy", "norm_affine")])
def test_tta_resets_source(rng, kind, subset):
    src, imgs = _source(rng)
    before = checkpoint_bytes(src)
    pred, restored = tta_episode(src, imgs[0], TtaConfig(loss_kind=kind, iters_per_image=3, lr=0.05, param_subset=subset))
    assert restored
    assert checkpoint_bytes(src) == before
    assert pred.shape == imgs[0].shape[-2:]


def test_tta_norm_affine_only_touches_affine(rng):
    src, imgs = _source(rng)
    m = src.clone()
    tta_step(m, imgs[0], TtaConfig(loss_kind="entropy", param_subset="norm_affine", lr=0.1), np.random.default_rng(0))
    affine = {id(p) for p in m.norm_affine_parameters()}
    for p, q in zip(src.parameters(), m.parameters()):
        same = p.data.tobytes() == q.data.tobytes()
        assert same or id(q) in affine


def test_tta_order_independent(rng):
    src, imgs = _source(rng)
    cfg = TtaConfig(iters_per_image=2, lr=0.05)
    fwd = [tta_episode(src, x, cfg)[0] for x in imgs]
    rev = [tta_episode(src, x, cfg)[0] for x in imgs[::-1]][::-1]
    for a, b in zip(fwd, rev):
        np.testing.assert_array_equal(a, b)


def test_tta_entropy_step_descends(rng):
    src, imgs = _source(rng)
    x = imgs[1]

    def mean_entropy(model):
        with no_grad():
            return entropy_loss(softmax(forward(model, x))).item()

    for lr in (1e-3, 1e-2):
        m = src.clone()
        before = mean_entropy(m)
        tta_step(m, x, TtaConfig(loss_kind="entropy", lr=lr), np.random.default_rng(0))
        assert mean_entropy(m) <= before


def test_tta_config_validation():
    with pytest.raises(ConfigError):
        TtaConfig(loss_kind="kl").validate()
    with pytest.raises(ConfigError):
        TtaConfig(iters_per_image=-1).validate()
    with pytest.raises(ConfigError):
        TtaConfig.from_dict({"iters": 1})
