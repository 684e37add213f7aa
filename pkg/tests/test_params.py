import numpy as np
import pytest

from hierenv import autodiff as ad
from hierenv.errors import ContractError, GradCheckError
from hierenv.params import AdamState, ParamStore, adam_step, finite_difference_check
from hierenv.rng import RngStreams


def test_duplicate_parameter_rejected():
    p = ParamStore()
    p.add("w", [1.0])
    with pytest.raises(ContractError):
        p.add("w", [2.0])


def test_iteration_order_is_insertion_order():
    p = ParamStore()
    for name in ["b", "a", "c"]:
        p.add(name, [0.0])
    assert list(p) == ["b", "a", "c"]


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    p = ParamStore()
    p.uniform("w", (5, 3), rng)
    p.add("odd", [np.pi, 1e-300, -0.1, 1 / 3])
    p.save(tmp_path / "ckpt.json")
    q = ParamStore()
    q.zeros("w", (5, 3))
    q.zeros("odd", (4,))
    q.load(tmp_path / "ckpt.json")
    for name in p:
        assert np.array_equal(p[name].data, q[name].data)
        assert p[name].data.tobytes() == q[name].data.tobytes()


def test_uniform_init_bounds():
    p = ParamStore()
    w = p.uniform("w", (16, 4), np.random.default_rng(1))
    assert np.all(np.abs(w.data) <= 1 / 4)


def test_adam_first_step_moves_by_lr():
    p = ParamStore()
    w = p.add("w", [1.0, -2.0])
    w.grad = np.array([0.3, -5.0])
    adam_step(p, AdamState(lr=1e-3))
    np.testing.assert_allclose(w.data - np.array([1.0, -2.0]), [-1e-3, 1e-3], rtol=1e-6)
    assert w.grad is None


def test_adam_zero_gradient_leaves_parameter():
    p = ParamStore()
    w = p.add("w", [1.5])
    w.grad = np.zeros(1)
    state = AdamState()
    adam_step(p, state)
    assert w.data[0] == 1.5
    assert state.step == 1


def test_adam_second_step_matches_hand_recurrence():
    lr, b1, b2, eps, g = 1e-3, 0.9, 0.999, 1e-8, 0.5
    # hand recurrence
    m1, v1 = (1 - b1) * g, (1 - b2) * g * g
    d1 = lr * (m1 / (1 - b1)) / (np.sqrt(v1 / (1 - b2)) + eps)
    m2, v2 = b1 * m1 + (1 - b1) * g, b2 * v1 + (1 - b2) * g * g
    d2 = lr * (m2 / (1 - b1**2)) / (np.sqrt(v2 / (1 - b2**2)) + eps)

    p = ParamStore()
    w = p.add("w", [0.0])
    state = AdamState(lr=lr)
    w.grad = np.array([g])
    adam_step(p, state)
    after1 = w.data[0]
    w.grad = np.array([g])
    adam_step(p, state)
    assert after1 == pytest.approx(-d1, rel=1e-12)
    assert after1 - w.data[0] == pytest.approx(d2, rel=1e-9)
    assert abs(after1 - w.data[0]) < lr


def test_adam_missing_gradient():
    p = ParamStore()
    p.add("w", [0.0])
    with pytest.raises(ContractError):
        adam_step(p, AdamState())


@pytest.mark.parametrize("eps", [1e-6, 1e-5, 1e-4])
def test_fd_exact_for_quadratic(eps):
    p = ParamStore()
    x = p.add("x", np.random.default_rng(2).normal(size=(4,)))
    a = np.diag([1.0, 2.0, 3.0, 4.0])

    def loss():
        ax = ad.matmul(ad.reshape(x, (1, 4)), a)
        return ad.sum_(ax * ad.reshape(x, (1, 4))) + ad.sum_(x * 3.0)

    assert max(finite_difference_check(loss, p, eps=eps).values()) < 1e-8


def test_fd_detects_unfrozen_dropout():
    p = ParamStore()
    x = p.add("x", np.random.default_rng(1).normal(size=(4, 4)))
    rng = np.random.default_rng(0)
    with pytest.raises(GradCheckError):
        finite_difference_check(lambda: ad.sum_(ad.dropout(x, 0.5, rng)), p, 1e-5)


def test_streams_replay_and_independence():
    s = RngStreams(3)
    snap = s.snapshot()
    first = s.get("gumbel").random(5)
    s.restore(snap)
    assert np.array_equal(first, s.get("gumbel").random(5))
    t = RngStreams(3)
    t.get("dropout").random(100)  # other streams do not disturb gumbel
    assert np.array_equal(first, t.get("gumbel").random(5))
