import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quant.dynamics import (
    EnsembleModel,
    Normalizer,
    ReplayBuffer,
    Transitions,
    UntrainedModel,
    mask_rollouts,
    rollout,
    train_model,
)


def linear_data(n=2000, seed=0):
    rng = np.random.default_rng(seed)
    obs = rng.uniform(-1, 1, (n, 2))
    a = rng.uniform(-1, 1, (n, 2))
    return Transitions(obs, a, obs + 0.1 * a, -np.abs(a).sum(axis=1), np.zeros(n))


@pytest.fixture(scope="module")
def linear_model():
    model = EnsembleModel(2, 2, members=5, elites=3, hidden=(128, 128), rng=np.random.default_rng(1))
    report = train_model(model, linear_data(), epochs=40, batch_size=64, rng=np.random.default_rng(2))
    return model, report


# --- buffers and normalizer ----------------------------------------------------------------------

def _tr(n, start=0):
    v = np.arange(start, start + n, dtype=float)
    return Transitions(v[:, None], v[:, None], v[:, None] + 1, v, np.zeros(n))


def test_replay_fifo_and_capacity():
    buf = ReplayBuffer(5, 1, 1)
    buf.add_batch(_tr(3))
    buf.add(np.array([3.0]), np.array([3.0]), 3.0, np.array([4.0]), False)
    buf.add_batch(_tr(4, start=4))
    assert len(buf) == 5
    np.testing.assert_array_equal(buf.all().reward, [3, 4, 5, 6, 7])


def test_replay_oversized_batch_keeps_newest():
    buf = ReplayBuffer(3, 1, 1)
    buf.add_batch(_tr(10))
    np.testing.assert_array_equal(buf.all().reward, [7, 8, 9])


def test_replay_sample_without_replacement():
    buf = ReplayBuffer(100, 1, 1)
    buf.add_batch(_tr(50))
    s = buf.sample(50, np.random.default_rng(0))
    assert sorted(s.reward.tolist()) == list(range(50))
    with pytest.raises(ValueError):
        ReplayBuffer(4, 1, 1).sample(1, np.random.default_rng(0))


@given(st.integers(1, 30), st.lists(st.integers(0, 12), min_size=1, max_size=10))
@settings(max_examples=60, deadline=None)
def test_replay_size_bounded(capacity, sizes):
    buf = ReplayBuffer(capacity, 1, 1)
    total = 0
    for n in sizes:
        buf.add_batch(_tr(n, start=total))
        total += n
        assert len(buf) == min(total, capacity)
    if total:
        np.testing.assert_array_equal(buf.all().reward, np.arange(max(0, total - capacity), total))


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_normalizer_round_trip(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(3.0, 5.0, size=(40, 4))
    x[:, 2] = 1.0  # constant column hits the std floor
    norm = Normalizer.fit(x)
    np.testing.assert_allclose(norm.denormalize(norm.normalize(x)), x, atol=1e-10)
    assert np.all(norm.std > 0)


# --- training ------------------------------------------------------------------------------------

def test_linear_system_holdout_mse(linear_model):
    _, report = linear_model
    assert report.holdout_mse < 1e-3
    assert report.epoch_holdout_nll[-1] < report.epoch_holdout_nll[0]
    assert len(report.train_nll) == 5 and len(report.elites) == 3
    worst = [report.holdout_nll[i] for i in report.elites]
    others = [report.holdout_nll[i] for i in range(5) if i not in report.elites]
    assert max(worst) <= min(others)


def test_linear_system_deterministic_prediction(linear_model):
    model, _ = linear_model
    rng = np.random.default_rng(9)
    obs = rng.uniform(-0.9, 0.9, (50, 2))
    a = rng.uniform(-0.9, 0.9, (50, 2))
    for m in model.elites:
        nxt, _ = model.predict(obs, a, member=m, deterministic=True)
        assert np.max(np.abs(nxt - (obs + 0.1 * a))) < 0.05


def test_zero_noise_equals_deterministic(linear_model):
    model, _ = linear_model
    obs, a = np.zeros((3, 2)), np.full((3, 2), 0.5)
    det = model.predict(obs, a, member=1, deterministic=True)
    z = model.predict(obs, a, member=1, noise=np.zeros((3, 3)))
    np.testing.assert_array_equal(det[0], z[0])
    np.testing.assert_array_equal(det[1], z[1])


def test_member_out_of_range(linear_model):
    model, _ = linear_model
    with pytest.raises(IndexError):
        model.predict(np.zeros(2), np.zeros(2), member=5, deterministic=True)


def test_untrained_model_rejects_predict():
    model = EnsembleModel(2, 2, hidden=(8,))
    with pytest.raises(UntrainedModel):
        model.predict(np.zeros(2), np.zeros(2), member=0, deterministic=True)


def test_train_needs_data():
    model = EnsembleModel(2, 2, hidden=(8,))
    with pytest.raises(ValueError):
        train_model(model, ReplayBuffer(10, 2, 2))


def test_duplicate_transitions_collapse_sigma():
    n = 64
    obs = np.tile([0.5, -0.5], (n, 1))
    act = np.tile([0.2, 0.1], (n, 1))
    data = Transitions(obs, act, obs + 0.1 * act, np.full(n, -0.3), np.zeros(n))
    model = EnsembleModel(2, 2, members=2, elites=2, hidden=(16,), rng=np.random.default_rng(0))
    report = train_model(model, data, epochs=5, batch_size=16, rng=np.random.default_rng(1))
    nll = report.epoch_holdout_nll
    assert all(b < a for a, b in zip(nll, nll[1:]))


def test_ensemble_bundle_round_trip(linear_model):
    model, _ = linear_model
    clone = EnsembleModel.from_bytes(model.to_bytes())
    obs, a = np.array([[0.1, 0.2]]), np.array([[0.3, -0.4]])
    for m in range(model.n_members):
        x, y = model.predict(obs, a, member=m, deterministic=True), clone.predict(obs, a, member=m, deterministic=True)
        assert x[0].tobytes() == y[0].tobytes() and x[1].tobytes() == y[1].tobytes()
    assert clone.elites == model.elites


# --- rollouts ------------------------------------------------------------------------------------

def test_rollout_counts_and_consistency(linear_model):
    model, _ = linear_model
    rng = np.random.default_rng(3)
    starts = rng.uniform(-1, 1, (16, 2))
    one = rollout(model, lambda o: np.full((len(o), 2), 0.5), starts, 1, rng)
    assert len(one) == 16 and not one.done.any()
    three = rollout(model, lambda o: np.full((len(o), 2), 0.5), starts, 3, rng)
    assert len(three) == 48
    # step-major layout: row i of step s+1 starts where row i of step s ended
    np.testing.assert_array_equal(three.obs[16:32], three.next_obs[:16])
    np.testing.assert_array_equal(three.obs[32:], three.next_obs[16:32])


def test_rollout_deterministic_repeatable(linear_model):
    model, _ = linear_model
    starts = np.array([[0.2, -0.3], [0.0, 0.4]])
    policy = lambda o: np.full((len(o), 2), -0.4)  # noqa: E731
    a = rollout(model, policy, starts, 4, member=model.elites[0], deterministic=True)
    b = rollout(model, policy, starts, 4, member=model.elites[0], deterministic=True)
    assert a.next_obs.tobytes() == b.next_obs.tobytes()


def test_rollout_matches_closed_form(linear_model):
    model, _ = linear_model
    k = 5
    start = np.array([[-0.5, 0.5]])
    tr = rollout(model, lambda o: np.full((len(o), 2), 0.3), start, k, member="mean", deterministic=True)
    truth = start[0] + 0.1 * 0.3 * np.arange(1, k + 1)[:, None]
    assert np.max(np.abs(tr.next_obs - truth)) < 0.1 * k


def test_rollout_rejects_zero_length(linear_model):
    with pytest.raises(ValueError):
        rollout(linear_model[0], lambda o: o, np.zeros((1, 2)), 0)


# --- uncertainty and masking ----------------------------------------------------------------------

def test_uncertainty_identical_members():
    model = EnsembleModel(2, 2, members=3, elites=3, hidden=(8,), rng=np.random.default_rng(0))
    for net in model.nets[1:]:
        net.load_from(model.nets[0])
    model.trained = True
    obs, a = np.random.default_rng(1).normal(size=(2, 10, 2))
    means, log_stds = model.member_outputs(obs, a)
    score = model.uncertainty(obs, a)
    sigma = np.linalg.norm(np.exp(log_stds), axis=-1).mean(axis=0)
    np.testing.assert_allclose(score, sigma, atol=1e-12)


def test_uncertainty_needs_two_elites():
    model = EnsembleModel(2, 2, members=2, elites=1, hidden=(8,))
    model.trained = True
    with pytest.raises(ValueError):
        model.uncertainty(np.zeros((1, 2)), np.zeros((1, 2)))


def test_uncertainty_non_negative_and_ood(linear_model):
    model, _ = linear_model
    rng = np.random.default_rng(4)
    inside_obs, inside_a = rng.uniform(-1, 1, (2, 100, 2))
    far_obs, far_a = rng.uniform(8, 12, (100, 2)), rng.uniform(-1, 1, (100, 2))
    s_in = model.uncertainty(inside_obs, inside_a)
    s_out = model.uncertainty(far_obs, far_a)
    assert np.all(s_in >= 0) and np.all(s_out >= 0)
    assert np.mean(s_out > s_in) >= 0.9


def test_mask_examples():
    tr = _tr(4)
    kept = mask_rollouts(tr, np.array([3.0, 1.0, 4.0, 2.0]), 0.5)
    np.testing.assert_array_equal(kept.reward, [1, 3])
    assert mask_rollouts(tr, np.array([3.0, 1.0, 4.0, 2.0]), 1.0).reward.tolist() == [0, 1, 2, 3]
    np.testing.assert_array_equal(mask_rollouts(tr, np.ones(4), 0.5).reward, [0, 1])
    with pytest.raises(ValueError):
        mask_rollouts(tr, np.ones(3), 0.5)


@given(st.lists(st.floats(0, 10), min_size=1, max_size=40), st.floats(0.01, 1.0))
@settings(max_examples=100, deadline=None)
def test_mask_preserves_order_and_shrinks(scores, frac):
    tr = _tr(len(scores))
    kept = mask_rollouts(tr, np.array(scores), frac)
    assert len(kept) <= len(scores)
    assert list(kept.reward) == sorted(kept.reward)
