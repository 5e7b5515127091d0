import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from metaspeaker.errors import ConfigError, InputError
from metaspeaker.objective import (
    GlobalPrototypes,
    LossConfig,
    combined_loss,
    compute_prototypes,
    episode_loss,
    global_loss,
    scaled_cosine,
)

import oracles

D = torch.float64


def t(x):
    return torch.tensor(x, dtype=D)


def random_instance(seed, n_way=3, k=2, m=2, dim=3, n_classes=6):
    g = np.random.default_rng(seed)
    s_lab = np.repeat(np.arange(n_way), k)
    q_lab = np.repeat(np.arange(n_way), m)
    glob_of = g.choice(n_classes, size=n_way, replace=False)
    return dict(
        support=g.normal(size=(n_way * k, dim)),
        s_lab=s_lab,
        query=g.normal(size=(n_way * m, dim)),
        q_lab=q_lab,
        omega=g.normal(size=(n_classes, dim)),
        s_glob=glob_of[s_lab],
        q_glob=glob_of[q_lab],
    )


def torch_loss(inst, cfg):
    return combined_loss(
        t(inst["support"]),
        torch.tensor(inst["s_lab"]),
        t(inst["query"]),
        torch.tensor(inst["q_lab"]),
        t(inst["omega"]),
        torch.tensor(inst["s_glob"]),
        torch.tensor(inst["q_glob"]),
        cfg,
    )


# -- prototypes ------------------------------------------------------------------


def test_single_shot_prototype_is_the_support():
    s = t([[1.0, 2.0], [3.0, -1.0]])
    np.testing.assert_array_equal(compute_prototypes(s, torch.tensor([0, 1])).numpy(), s.numpy())


def test_two_supports_same_class():
    p = compute_prototypes(t([[1.0, 0.0], [0.0, 1.0]]), torch.tensor([0, 0]))
    np.testing.assert_allclose(p.numpy(), [[0.5, 0.5]])


def test_prototypes_match_independent_means():
    g = np.random.default_rng(0)
    s = g.normal(size=(5, 3))
    labels = [0, 0, 1, 1, 1]
    p = compute_prototypes(t(s), torch.tensor(labels)).numpy()
    for c in (0, 1):
        np.testing.assert_allclose(p[c], oracles.proto(s.tolist(), labels, c), atol=1e-12)


def test_missing_label():
    with pytest.raises(InputError):
        compute_prototypes(t([[1.0], [2.0]]), torch.tensor([0, 2]), n_way=3)


# -- scaled cosine -----------------------------------------------------------------


def test_scaled_cosine_example():
    assert float(scaled_cosine(t([3.0, 4.0]), t([[1.0, 0.0]]))[0]) == pytest.approx(3.0, abs=1e-7)


def test_scaled_cosine_extremes():
    x = t([3.0, 4.0])
    assert float(scaled_cosine(x, t([[0.6, 0.8]]))[0]) == pytest.approx(5.0, abs=1e-7)
    assert float(scaled_cosine(x, t([[-4.0, 3.0]]))[0]) == pytest.approx(0.0, abs=1e-12)


def test_zero_prototype_guarded():
    out = scaled_cosine(t([1.0, 2.0]), t([[0.0, 0.0]]))
    assert torch.isfinite(out).all() and float(out[0]) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.01, 100.0))
def test_prototype_scale_cancels(seed, alpha):
    g = np.random.default_rng(seed)
    x, p = t(g.normal(size=(4, 5))), t(g.normal(size=(3, 5)))
    np.testing.assert_allclose(scaled_cosine(x, alpha * p).numpy(), scaled_cosine(x, p).numpy(), atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.01, 100.0))
def test_query_scale_equivariance(seed, alpha):
    g = np.random.default_rng(seed)
    x, p = t(g.normal(size=(4, 5))), t(g.normal(size=(3, 5)))
    base = scaled_cosine(x, p)
    scaled = scaled_cosine(alpha * x, p)
    np.testing.assert_allclose(scaled.numpy(), alpha * base.numpy(), rtol=1e-9, atol=1e-12)
    assert torch.equal(scaled.argmax(dim=1), base.argmax(dim=1))


# -- episode and global losses ---------------------------------------------------------


@pytest.mark.parametrize("n_way", [2, 5, 17])
def test_uniform_logits_give_log_n(n_way):
    protos = t(np.random.default_rng(n_way).normal(size=(n_way, 4)))
    loss = episode_loss(torch.zeros(3, 4, dtype=D), torch.tensor([0, 1, 0]), protos)
    assert float(loss) == pytest.approx(math.log(n_way), abs=1e-12)


def test_two_way_logit_example():
    # logits (2, 0): query (2, 0) against unit prototypes e1, e2
    loss = episode_loss(t([[2.0, 0.0]]), torch.tensor([0]), t([[1.0, 0.0], [0.0, 1.0]]))
    expected = -math.log(math.exp(2) / (math.exp(2) + 1))
    assert float(loss) == pytest.approx(expected, abs=1e-7)
    assert expected == pytest.approx(0.1269, abs=1e-4)


def test_loss_decreases_as_aligned_queries_grow():
    protos = t([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    values = [float(episode_loss(s * protos, torch.tensor([0, 1, 2]), protos)) for s in (1.0, 10.0, 100.0)]
    # at norm 100 the true loss (~7e-44) rounds to 0 inside log-sum-exp
    assert values[0] > values[1] > values[2] >= 0
    assert values[2] < 1e-30


def test_episode_label_out_of_range():
    with pytest.raises(InputError):
        episode_loss(t([[1.0, 0.0]]), torch.tensor([2]), t([[1.0, 0.0], [0.0, 1.0]]))


def test_global_equidistant_is_log_two():
    loss = global_loss(t([[1.0, 1.0]]), torch.tensor([0]), t([[1.0, 0.0], [0.0, 1.0]]))
    assert float(loss) == pytest.approx(math.log(2), abs=1e-7)


def test_global_three_class_example():
    loss = global_loss(t([[1.0, 0.0, 0.0]]), torch.tensor([0]), torch.eye(3, dtype=D))
    expected = -math.log(math.e / (math.e + 2))
    assert float(loss) == pytest.approx(expected, abs=1e-7)
    assert expected == pytest.approx(0.5514, abs=1e-4)


def test_global_averages_over_support_and_query():
    inst = random_instance(3, n_way=2, k=1, m=2)
    omega = t(inst["omega"])
    embs = np.r_[inst["support"], inst["query"]]
    labels = np.r_[inst["s_glob"], inst["q_glob"]]
    assert len(embs) == 6
    per_sample = [oracles.nll([oracles.dist(x, w) for w in inst["omega"].tolist()], y) for x, y in zip(embs.tolist(), labels)]
    out = torch_loss(inst, LossConfig(mode="meta_global")).global_
    assert float(out) == pytest.approx(sum(per_sample) / 6, abs=1e-12)


def test_global_label_out_of_range():
    with pytest.raises(InputError):
        global_loss(t([[1.0, 0.0]]), torch.tensor([5]), torch.eye(2, dtype=D))


def test_softmax_normalization():
    inst = random_instance(11, n_way=4, k=1, m=3, dim=5, n_classes=9)
    protos = compute_prototypes(t(inst["support"]), torch.tensor(inst["s_lab"]))
    for logits in (scaled_cosine(t(inst["query"]), protos), scaled_cosine(t(inst["query"]), t(inst["omega"]))):
        sums = torch.softmax(logits, dim=1).sum(dim=1)
        assert torch.all((sums - 1).abs() < 1e-6)


# -- combined ----------------------------------------------------------------------


def test_lambda_one_is_plain_sum():
    inst = random_instance(1)
    out = torch_loss(inst, LossConfig(lam=1.0, mode="meta_global"))
    assert float(out.total) == float(out.episode + out.global_)


def test_lambda_zero_is_episode_loss():
    inst = random_instance(2)
    out = torch_loss(inst, LossConfig(lam=0.0, mode="meta_global"))
    meta = torch_loss(inst, LossConfig(mode="meta"))
    assert float(out.total) == pytest.approx(float(meta.total), abs=1e-15)
    assert meta.global_ is None


def test_vanilla_mode_is_global_only():
    inst = random_instance(4)
    out = torch_loss(inst, LossConfig(mode="vanilla"))
    assert out.episode is None
    assert float(out.total) == float(out.global_)


def test_tiny_episode_matches_oracle():
    inst = random_instance(7, n_way=2, k=1, m=1, dim=3, n_classes=4)
    for mode in ("meta_global", "meta", "vanilla"):
        for lam in (1.0, 0.3):
            got = float(torch_loss(inst, LossConfig(lam=lam, mode=mode)).total)
            want = oracles.combined(
                inst["support"].tolist(), list(inst["s_lab"]), inst["query"].tolist(), list(inst["q_lab"]),
                inst["omega"].tolist(), list(inst["s_glob"]), list(inst["q_glob"]), lam, mode,
            )
            assert got == pytest.approx(want, abs=1e-6)


def test_permutation_invariance():
    inst = random_instance(5, n_way=3, k=2, m=2)
    base = torch_loss(inst, LossConfig())
    g = np.random.default_rng(0)
    ps, pq = g.permutation(6), g.permutation(6)
    perm = dict(inst)
    perm.update(
        support=inst["support"][ps], s_lab=inst["s_lab"][ps], s_glob=inst["s_glob"][ps],
        query=inst["query"][pq], q_lab=inst["q_lab"][pq], q_glob=inst["q_glob"][pq],
    )
    out = torch_loss(perm, LossConfig())
    assert float(out.episode) == pytest.approx(float(base.episode), abs=1e-12)
    assert float(out.global_) == pytest.approx(float(base.global_), abs=1e-12)


def test_gradients_reach_supports_queries_and_omega():
    inst = random_instance(8)
    s = t(inst["support"]).requires_grad_()
    q = t(inst["query"]).requires_grad_()
    w = t(inst["omega"]).requires_grad_()
    out = combined_loss(s, torch.tensor(inst["s_lab"]), q, torch.tensor(inst["q_lab"]), w,
                        torch.tensor(inst["s_glob"]), torch.tensor(inst["q_glob"]))
    out.total.backward()
    for x in (s, q, w):
        assert x.grad is not None and x.grad.abs().sum() > 0


def test_missing_global_inputs():
    inst = random_instance(9)
    with pytest.raises(InputError):
        combined_loss(t(inst["support"]), torch.tensor(inst["s_lab"]), t(inst["query"]), torch.tensor(inst["q_lab"]), None)


def test_loss_config_validation():
    with pytest.raises(ConfigError):
        LossConfig(lam=-1.0)
    with pytest.raises(ConfigError, match="vanilla, meta, meta_global"):
        LossConfig(mode="both")


def test_global_prototype_init_scale():
    torch.manual_seed(0)
    w = GlobalPrototypes(2000, 256).weight.detach()
    assert w.shape == (2000, 256)
    assert float(w.std()) == pytest.approx(1 / 16, rel=0.02)
    assert abs(float(w.mean())) < 1e-3
