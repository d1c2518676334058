import itertools
import math
from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from src.agents import him
from src.agents.him import (HybridInternalModel, SinkhornError, assign_probs, hio_update,
                            shared_sequence_noise, sinkhorn, swav_loss, velocity_loss, velocity_mse)
from src.agents.nn import precision
from src.utils.config import AblationSpec, HimConfig, NetworkConfig

HIM = HimConfig(latent_dim=4, num_prototypes=4)
NETWORK = replace(NetworkConfig(), encoder_hidden=(16, 16), target_hidden=(8,))
FRAME_DIM = 2
HISTORY_DIM = (HIM.history_len + 1) * FRAME_DIM


def make_model(seed=0, cfg=HIM):
    return HybridInternalModel(cfg, NETWORK, HISTORY_DIM, FRAME_DIM, np.random.default_rng(seed))


def make_batch(rng, n=5):
    return (rng.normal(size=(n, HISTORY_DIM)), rng.normal(size=(n, FRAME_DIM)), rng.normal(size=(n, 3)))


def _fd_check(fn, params, analytic, h=1e-5, tol=1e-4):
    for name, p in params.items():
        flat = p.reshape(-1)
        grad = analytic[name].reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + h
            up = fn()
            flat[k] = old - h
            down = fn()
            flat[k] = old
            numeric = (up - down) / (2 * h)
            scale = max(abs(numeric), abs(grad[k]), 1e-6)
            assert abs(numeric - grad[k]) / scale < tol, (name, k, numeric, grad[k])


def test_assign_probs_one_hot_latent():
    latents = np.zeros((1, 16))
    latents[0, 0] = 1.0
    probs = assign_probs(latents, np.eye(16), 1.0)
    assert probs[0, 0] == pytest.approx(math.e / (math.e + 15), abs=1e-12)
    assert probs[0, 0] == pytest.approx(0.15334, abs=1e-5)
    assert np.allclose(probs.sum(axis=1), 1.0)


def test_assign_probs_large_temperature_is_uniform():
    rng = np.random.default_rng(0)
    latents = rng.normal(size=(3, 4))
    probs = assign_probs(latents, np.eye(4), 1e9)
    assert np.allclose(probs, 0.25)


def test_sinkhorn_constant_scores_are_uniform():
    q = sinkhorn(np.full((8, 4), 0.3))
    assert np.allclose(q, 0.25)


def _loop_sinkhorn(scores, eps, n_iter, tol=1e-5):
    b, k = len(scores), len(scores[0])
    q = [[math.exp(s / eps) for s in row] for row in scores]
    total = sum(sum(row) for row in q)
    q = [[x / total for x in row] for row in q]
    rounds = 0
    while True:
        cols = [sum(q[i][j] for i in range(b)) for j in range(k)]
        q = [[q[i][j] / cols[j] / k for j in range(k)] for i in range(b)]
        rows = [sum(q[i]) for i in range(b)]
        rounds += 1
        balanced = max(abs(r * b - 1.0) for r in rows) <= tol
        q = [[q[i][j] / rows[i] / b for j in range(k)] for i in range(b)]
        if rounds >= n_iter and balanced:
            return np.array(q) * b


def test_sinkhorn_identity_scores_match_loop_oracle():
    scores = [[1.0, 0.0], [0.0, 1.0]]
    q = sinkhorn(np.array(scores), 0.05, 3)
    assert np.allclose(q, _loop_sinkhorn(scores, 0.05, 3), rtol=0, atol=1e-12)
    assert q[0, 0] > 0.999 and q[1, 1] > 0.999


def test_sinkhorn_matches_loop_oracle():
    rng = np.random.default_rng(12)
    for shape in [(2, 2), (6, 3), (9, 4)]:
        scores = rng.uniform(-1.0, 1.0, size=shape)
        expected = _loop_sinkhorn(scores.tolist(), 0.05, 3)
        assert np.allclose(sinkhorn(scores, 0.05, 3), expected, rtol=0, atol=1e-6)


def _assert_marginals(q):
    b, k = q.shape
    assert np.allclose(q.sum(axis=1), 1.0, rtol=0, atol=1e-5)
    assert np.allclose(q.sum(axis=0), b / k, rtol=1e-3, atol=0)


def test_sinkhorn_balances_columns_at_default_iterations():
    rng = np.random.default_rng(1)
    for _ in range(20):
        _assert_marginals(sinkhorn(rng.uniform(-1.0, 1.0, size=(256, 16)), 0.05, 3))


@pytest.mark.slow
def test_sinkhorn_marginals_on_many_matrices():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        _assert_marginals(sinkhorn(rng.uniform(-1.0, 1.0, size=(256, 16)), 0.05, 3))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1), rows=st.integers(2, 40), cols=st.integers(2, 12))
def test_sinkhorn_rows_are_distributions(seed, rows, cols):
    scores = np.random.default_rng(seed).uniform(-1.0, 1.0, size=(rows, cols))
    q = sinkhorn(scores)
    assert np.all(q >= 0.0)
    assert np.allclose(q.sum(axis=1), 1.0)


def test_sinkhorn_rejects_empty_rows():
    scores = np.zeros((3, 4))
    scores[1] = -np.inf
    with pytest.raises(SinkhornError):
        sinkhorn(scores)
    with pytest.raises(SinkhornError):
        sinkhorn(np.full((2, 2), -np.inf))


def test_swav_loss_values():
    one_hot = np.eye(4)
    assert swav_loss(one_hot, one_hot, one_hot, one_hot) == pytest.approx(0.0, abs=1e-12)
    uniform = np.full((3, 16), 1 / 16)
    q = np.eye(16)[:3]
    assert swav_loss(uniform, uniform, q, q) == pytest.approx(math.log(16))


def test_swav_loss_is_symmetric():
    rng = np.random.default_rng(2)
    p_s, p_t, q_s, q_t = (rng.dirichlet(np.ones(5), size=4) for _ in range(4))
    assert swav_loss(p_s, p_t, q_s, q_t) == pytest.approx(swav_loss(p_t, p_s, q_t, q_s))


def test_velocity_loss_unit_offset():
    assert velocity_loss(np.zeros((1, 3)), np.array([[1.0, 0.0, 0.0]])) == pytest.approx(1 / 3)


def test_encoder_shapes_and_unit_latents():
    model = make_model()
    rng = np.random.default_rng(3)
    histories, frames, _ = make_batch(rng, 7)
    embedding = model.encode_source(histories)
    assert embedding.velocity.shape == (7, 3)
    assert embedding.latent.shape == (7, 4)
    assert embedding.concat().shape == (7, 7)
    assert np.allclose(np.linalg.norm(embedding.latent, axis=1), 1.0, atol=1e-5)
    assert np.allclose(np.linalg.norm(model.encode_target(frames), axis=1), 1.0, atol=1e-5)


def test_frozen_prototypes_are_not_trained():
    model = make_model(cfg=replace(HIM, frozen_prototypes=True))
    assert "prototypes" not in model.parameters()
    _, grads, _ = model.losses_and_grads(*make_batch(np.random.default_rng(4)))
    assert "prototypes" not in grads


def test_swapped_prediction_gradient_matches_finite_differences(monkeypatch):
    with precision("float64"):
        model = make_model(5)
        batch = make_batch(np.random.default_rng(6))
        assignments = []

        def recording(scores, epsilon, n_iter):
            q = sinkhorn(scores, epsilon, n_iter)
            assignments.append(q)
            return q

        monkeypatch.setattr(him, "sinkhorn", recording)
        _, grads, _ = model.losses_and_grads(*batch)
        # assignments are targets, held fixed while differentiating
        fixed = itertools.cycle(assignments)
        monkeypatch.setattr(him, "sinkhorn", lambda scores, epsilon, n_iter: next(fixed))
        _fd_check(lambda: model.losses_and_grads(*batch)[2], model.parameters(), grads)


def test_regression_gradient_matches_finite_differences():
    ablation = AblationSpec(regression_mode=True)
    with precision("float64"):
        model = make_model(7)
        batch = make_batch(np.random.default_rng(8))
        losses, grads, _ = model.losses_and_grads(*batch, ablation)
        assert math.isfinite(losses.regression_loss) and math.isnan(losses.swav_loss)
        _fd_check(lambda: model.losses_and_grads(*batch, ablation)[2], model.parameters(), grads)


def test_velocity_only_leaves_target_untouched():
    model = make_model()
    losses, grads, objective = model.losses_and_grads(*make_batch(np.random.default_rng(9)),
                                                      AblationSpec(drop_latent_loss=True))
    assert objective == pytest.approx(losses.velocity_loss)
    assert all(np.all(g == 0) for k, g in grads.items() if k.startswith("target."))


def test_shared_sequence_noise_is_one_vector_per_sample():
    rng = np.random.default_rng(10)
    histories, frames, _ = make_batch(rng, 4)
    noisy_h, noisy_f = shared_sequence_noise(histories, frames, 0.1, rng)
    noise = noisy_f - frames
    assert np.allclose((noisy_h - histories).reshape(4, -1, FRAME_DIM), noise[:, None, :])
    same_h, same_f = shared_sequence_noise(histories, frames, 0.0, rng)
    assert same_h is histories and same_f is frames


def _rollout(num_steps, num_envs=3, seed=11):
    rng = np.random.default_rng(seed)
    return SimpleNamespace(num_steps=num_steps,
                           histories=rng.normal(size=(num_steps, num_envs, HISTORY_DIM)),
                           next_frames=rng.normal(size=(num_steps, num_envs, FRAME_DIM)),
                           true_velocity=rng.normal(size=(num_steps, num_envs, 3)))


def test_hio_update_skips_short_rollouts(caplog):
    model = make_model()
    losses = hio_update(model, _rollout(HIM.history_len), np.random.default_rng(0))
    assert losses.skipped
    assert "Skipping HIO update" in caplog.text
    dropped = AblationSpec(drop_velocity_loss=True, drop_latent_loss=True)
    assert hio_update(model, _rollout(8), np.random.default_rng(0), dropped).skipped


def test_hio_update_trains_encoders():
    model = make_model()
    rollout = _rollout(8)
    before = {k: v.copy() for k, v in model.parameters().items()}
    mse_before = velocity_mse(model, rollout.histories.reshape(-1, HISTORY_DIM),
                              rollout.true_velocity.reshape(-1, 3))
    losses = hio_update(model, rollout, np.random.default_rng(0))
    assert not losses.skipped and not losses.aborted
    assert math.isfinite(losses.swav_loss) and math.isfinite(losses.velocity_loss)
    assert losses.grad_norm > 0
    assert any(not np.array_equal(v, before[k]) for k, v in model.parameters().items())
    assert math.isfinite(mse_before)


def test_state_dict_roundtrip():
    model = make_model(0)
    hio_update(model, _rollout(8), np.random.default_rng(1))
    other = make_model(99)
    other.load_state_dict(model.state_dict())
    histories = np.random.default_rng(2).normal(size=(4, HISTORY_DIM))
    assert np.array_equal(model.encode_source(histories).concat(), other.encode_source(histories).concat())
    assert np.array_equal(model.prototypes, other.prototypes)
    assert all(k.startswith("him.") for k in model.state_dict())


def test_sinkhorn_propagates_nan_scores():
    scores = np.zeros((3, 4))
    scores[2, 1] = np.nan
    assert np.all(np.isnan(sinkhorn(scores)))


def test_hio_update_restores_state_when_a_later_minibatch_fails(monkeypatch, caplog):
    model = make_model(cfg=replace(HIM, num_minibatches=2))
    before = model.state_dict()
    original = model.losses_and_grads
    objectives = []

    def failing_second_call(*args):
        losses, grads, objective = original(*args)
        objectives.append(objective)
        return losses, grads, objective if len(objectives) == 1 else float("nan")

    monkeypatch.setattr(model, "losses_and_grads", failing_second_call)
    losses = hio_update(model, _rollout(8), np.random.default_rng(0))
    assert losses.aborted and len(objectives) == 2
    assert "Non-finite HIO loss" in caplog.text
    after = model.state_dict()
    for key, value in before.items():
        assert np.array_equal(after[key], value), key


def test_swav_loss_falls_on_a_fixed_rollout():
    cfg = replace(HIM, augment_noise=0.0)
    only_latent = AblationSpec(drop_velocity_loss=True)
    improved = 0
    for seed in range(20):
        model = make_model(seed, cfg)
        rollout = _rollout(8, num_envs=4, seed=100 + seed)
        batch = (rollout.histories.reshape(-1, HISTORY_DIM), rollout.next_frames.reshape(-1, FRAME_DIM),
                 rollout.true_velocity.reshape(-1, 3))
        start = model.losses_and_grads(*batch, only_latent)[0].swav_loss
        rng = np.random.default_rng(seed)
        for _ in range(50):
            hio_update(model, rollout, rng, only_latent)
        end = model.losses_and_grads(*batch, only_latent)[0].swav_loss
        improved += end <= start
    assert improved >= 19
