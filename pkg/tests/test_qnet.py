import json

import numpy as np
import pytest

from aloha_dqn.qnet import (
    CHECKPOINT_FORMAT, LAYER_SIZES, Adam, DivergenceError, QNetwork, ReplayBuffer, Transition,
    TransitionBatch, apply_gradients, bellman_targets, forward, from_checkpoint, grad_step,
    init_network, load_checkpoint, loss_and_grads, q_loss, replay_push, replay_sample,
    save_checkpoint, sync_target, to_checkpoint, zeros_network,
)

HISTORIES = np.array([(a, f, b) for a in (0, 1) for f in (0, 1) for b in (1, 0)], dtype=np.float64)


def random_batch(rng, m):
    states = rng.integers(0, 2, size=(m, 3)).astype(float)
    next_states = rng.integers(0, 2, size=(m, 3)).astype(float)
    return TransitionBatch(states, rng.integers(0, 2, size=m), rng.integers(0, 2, size=m).astype(float),
                           next_states)


def numeric_grads(net, batch, target, gamma, h=1e-6):
    out = []
    for p in net.parameters():
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + h
            up = q_loss(batch, net, target, gamma)
            p[i] = old - h
            down = q_loss(batch, net, target, gamma)
            p[i] = old
            g[i] = (up - down) / (2 * h)
        out.append(g)
    return out


class TestForward:
    def test_shapes(self):
        net = init_network(np.random.default_rng(0))
        assert net.sizes == LAYER_SIZES
        assert forward(net, (1, 0, 1)).shape == (2,)
        assert forward(net, HISTORIES).shape == (8, 2)

    def test_zero_network_outputs_zero(self):
        assert np.all(forward(zeros_network(), HISTORIES) == 0)

    def test_matches_explicit_layers(self):
        net = init_network(np.random.default_rng(3))
        x = HISTORIES
        h1 = np.maximum(x @ net.weights[0] + net.biases[0], 0)
        h2 = np.maximum(h1 @ net.weights[1] + net.biases[1], 0)
        np.testing.assert_allclose(forward(net, x), h2 @ net.weights[2] + net.biases[2], rtol=0, atol=1e-15)

    def test_hand_built_network(self):
        net = QNetwork([np.array([[1.0], [-2.0], [0.5]]), np.array([[3.0, -1.0]])],
                       [np.array([0.25]), np.array([0.1, 0.2])])
        # hidden = relu(1 - 0 + 0.5 + 0.25) = 1.75
        np.testing.assert_array_equal(forward(net, (1, 0, 1)), [5.35, -1.55])
        # hidden = relu(0 - 2 + 0 + 0.25) = 0
        np.testing.assert_array_equal(forward(net, (0, 1, 0)), [0.1, 0.2])

    def test_init_scale(self):
        net = init_network(np.random.default_rng(0), sizes=(400, 300, 2))
        assert net.weights[0].std() == pytest.approx(1 / np.sqrt(400), rel=0.02)
        assert np.all(net.biases[0] == 0)


class TestGradients:
    @pytest.mark.parametrize("seed", range(12))
    def test_finite_difference(self, seed):
        rng = np.random.default_rng(seed)
        sizes = (3, int(rng.integers(3, 8)), int(rng.integers(3, 8)), 2)
        net = init_network(rng, sizes)
        for b in net.biases:
            b += rng.normal(0, 0.5, size=b.shape)
        target = init_network(rng, sizes)
        batch = random_batch(rng, 16)
        gamma = float(rng.uniform(0, 1))
        _, gw, gb = loss_and_grads(batch, net, target, gamma)
        analytic = [g for pair in zip(gw, gb) for g in pair]
        numeric = numeric_grads(net, batch, target, gamma)
        for a, n in zip(analytic, numeric):
            scale = np.maximum(np.abs(a), np.abs(n))
            mask = scale > 1e-6
            rel = np.where(mask, np.abs(a - n) / np.where(mask, scale, 1.0), 0.0)
            assert rel.max() < 1e-4

    def test_loss_value_matches_definition(self):
        rng = np.random.default_rng(1)
        net, target = init_network(rng), init_network(rng)
        batch = random_batch(rng, 32)
        total = 0.0
        for s, a, r, s2 in zip(batch.states, batch.actions, batch.rewards, batch.next_states):
            y = r + 0.9 * max(forward(target, s2))
            total += (y - forward(net, s)[a]) ** 2
        assert q_loss(batch, net, target, 0.9) == pytest.approx(total / 32, rel=1e-12)
        loss, _, _ = loss_and_grads(batch, net, target, 0.9)
        assert loss == pytest.approx(total / 32, rel=1e-12)

    def test_target_is_constant(self):
        rng = np.random.default_rng(2)
        net, target = init_network(rng), init_network(rng)
        before = to_checkpoint(target)
        grad_step(net, random_batch(rng, 8), target, 0.95, 0.01)
        assert to_checkpoint(target) == before

    def test_rejects_empty_batch_and_bad_gamma(self):
        net = zeros_network()
        with pytest.raises(ValueError):
            q_loss([], net, net, 0.9)
        with pytest.raises(ValueError):
            q_loss(random_batch(np.random.default_rng(0), 2), net, net, 1.5)


class TestBellman:
    def test_targets_from_constant_target_net(self):
        target = zeros_network()
        target.biases[-1][:] = (0.25, 0.75)
        batch = TransitionBatch.from_transitions([
            Transition((0, 1, 1), 1, 1, (1, 1, 0)),
            Transition((1, 0, 1), 0, 0, (0, 0, 1)),
        ])
        np.testing.assert_array_equal(bellman_targets(batch, target, 0.5), [1.375, 0.375])

    def test_single_state_fixed_point(self):
        # One history, reward 1 always, self loop: Q* = 1 / (1 - gamma).
        gamma = 0.5
        rng = np.random.default_rng(0)
        net = init_network(rng)
        target = net.copy()
        batch = TransitionBatch.from_transitions([Transition((1, 1, 1), 1, 1, (1, 1, 1))] * 4
                                                 + [Transition((1, 1, 1), 0, 1, (1, 1, 1))] * 4)
        for step in range(4000):
            grad_step(net, batch, target, gamma, 0.02)
            if step % 50 == 49:
                sync_target(net, target)
        np.testing.assert_allclose(forward(net, (1, 1, 1)), [2.0, 2.0], atol=1e-3)

    def test_contextual_bandit_prefers_rewarded_action(self):
        # gamma = 0: Q(a, s) regresses onto the mean reward of (s, a).
        rng = np.random.default_rng(5)
        net = init_network(rng)
        data = [Transition((0, 1, 1), 1, 1, (1, 1, 0)), Transition((0, 1, 1), 0, 0, (0, 1, 1)),
                Transition((1, 0, 1), 1, 0, (1, 0, 1)), Transition((1, 0, 1), 0, 1, (0, 1, 1))]
        batch = TransitionBatch.from_transitions(data)
        for _ in range(3000):
            grad_step(net, batch, net.copy(), 0.0, 0.05)
        q = forward(net, np.array([[0, 1, 1], [1, 0, 1]]))
        np.testing.assert_allclose(q, [[0, 1], [1, 0]], atol=1e-3)


class TestUpdates:
    def test_apply_gradients_bumps_version(self):
        net = init_network(np.random.default_rng(0))
        gw = [np.zeros_like(w) for w in net.weights]
        gb = [np.zeros_like(b) for b in net.biases]
        apply_gradients(net, gw, gb, 0.1)
        assert net.version == 1

    def test_divergence_detected(self):
        net = init_network(np.random.default_rng(0))
        gw = [np.full_like(w, np.nan) for w in net.weights]
        gb = [np.zeros_like(b) for b in net.biases]
        with pytest.raises(DivergenceError):
            apply_gradients(net, gw, gb, 0.1)

    def test_adam_first_step_is_sign(self):
        net = zeros_network((3, 2))
        gw = [np.array([[1.0, -2.0], [0.5, 3.0], [-1.0, 4.0]])]
        gb = [np.array([0.3, -0.1])]
        apply_gradients(net, gw, gb, 0.01, Adam())
        np.testing.assert_allclose(net.weights[0], -0.01 * np.sign(gw[0]), rtol=1e-6)

    def test_sync_copies_and_checks_shape(self):
        rng = np.random.default_rng(0)
        net, target = init_network(rng), init_network(rng)
        net.version = 7
        sync_target(net, target)
        np.testing.assert_array_equal(forward(net, HISTORIES), forward(target, HISTORIES))
        assert target.version == 7
        net.weights[0][0, 0] += 1
        assert not np.array_equal(forward(net, HISTORIES), forward(target, HISTORIES))
        with pytest.raises(ValueError):
            sync_target(net, zeros_network((3, 5, 2)))


class TestReplay:
    def test_fifo_eviction(self):
        buf = ReplayBuffer(3)
        for r in range(5):
            replay_push(buf, Transition((0, 0, 1), 0, r % 2, (0, 0, r % 2)))
        assert len(buf) == 3
        assert [t.next_state for t in buf.items()] == [(0, 0, 0), (0, 0, 1), (0, 0, 0)]

    def test_push_many_matches_push(self):
        rng = np.random.default_rng(0)
        states = rng.integers(0, 2, (7, 3))
        actions = rng.integers(0, 2, 7)
        nxt = rng.integers(0, 2, (7, 3))
        a, b = ReplayBuffer(5), ReplayBuffer(5)
        a.push_many(states, actions, 1, nxt)
        for s, act, s2 in zip(states, actions, nxt):
            b.push(Transition(tuple(s), int(act), 1, tuple(s2)))
        assert a.items() == b.items()
        assert a.cursor == b.cursor

    def test_sampling_is_uniform(self):
        buf = ReplayBuffer(8)
        for i in range(8):
            buf.push(Transition((i & 1, (i >> 1) & 1, (i >> 2) & 1), 0, 0, (0, 0, 0)))
        rng = np.random.default_rng(0)
        states = np.concatenate([replay_sample(buf, 8, rng).states for _ in range(10_000)])
        codes = (states @ np.array([1, 2, 4])).astype(int)
        counts = np.bincount(codes, minlength=8)
        expected = 10_000
        chi2 = float(((counts - expected) ** 2 / expected).sum())
        assert chi2 < 24.3  # 0.999 quantile, 7 dof

    def test_underfilled_sample_raises(self):
        buf = ReplayBuffer(10)
        buf.push(Transition((0, 0, 1), 1, 0, (1, 0, 1)))
        with pytest.raises(ValueError):
            buf.sample(2, np.random.default_rng(0))

    def test_rejects_nonbinary_reward(self):
        with pytest.raises(ValueError):
            ReplayBuffer(2).push(Transition((0, 0, 1), 1, 2, (1, 0, 1)))


class TestCheckpoint:
    def test_round_trip_is_exact(self, tmp_path):
        net = init_network(np.random.default_rng(11))
        net.version = 42
        path = tmp_path / "sub" / "net.json"
        save_checkpoint(net, path)
        back = load_checkpoint(path)
        assert back.version == 42
        for p, q in zip(net.parameters(), back.parameters()):
            assert np.array_equal(p, q)
        probe = np.random.default_rng(0).uniform(-3, 3, size=(100, 3))
        assert np.array_equal(forward(net, probe), forward(back, probe))

    def test_file_bytes_are_stable(self, tmp_path):
        net = init_network(np.random.default_rng(4))
        save_checkpoint(net, tmp_path / "a.json")
        save_checkpoint(load_checkpoint(tmp_path / "a.json"), tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        assert not [p for p in tmp_path.iterdir() if p.name.startswith(".tmp-")]

    def test_rejects_foreign_or_truncated(self):
        doc = to_checkpoint(zeros_network())
        assert doc["format"] == CHECKPOINT_FORMAT
        with pytest.raises(ValueError):
            from_checkpoint(dict(doc, format="other"))
        with pytest.raises(ValueError):
            from_checkpoint(dict(doc, values=doc["values"][:-1]))

    def test_json_serializable(self):
        doc = to_checkpoint(init_network(np.random.default_rng(0)))
        assert from_checkpoint(json.loads(json.dumps(doc))).sizes == LAYER_SIZES

    def test_copy_is_independent(self):
        net = init_network(np.random.default_rng(0))
        other = net.copy()
        other.weights[0][0, 0] += 1
        assert net.weights[0][0, 0] != other.weights[0][0, 0]
        assert isinstance(other, QNetwork)
