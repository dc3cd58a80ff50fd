import numpy as np
import pytest

from conftest import random_table
from udef._validation import ConfigurationError, ContractError
from udef.games import (
    CHANCE,
    PolicyTable,
    best_response,
    build_from_rules,
    counterfactual_values,
    expected_value,
    infoset_reach,
    matrix_game,
    reach_matrix,
)
from udef.nn import Mlp
from udef.response_oracle import (
    Buffer,
    RoHyper,
    RoNetworks,
    exploration_schedule,
    neural_ro,
    sampling_policy,
    simulate,
    tabular_ro,
    train_ro,
)


class _Rules:
    """Shared boilerplate for the tiny one-player test games below."""

    action_names = ["a0", "a1"]

    def is_terminal(self, state):
        return len(state) == self.depth

    def next_state(self, state, a):
        return state + (a,)

    def infoset_key(self, state, player):
        return "/".join(map(str, state)) or "root"

    def infoset_features(self, state, player):
        f = np.zeros(8)
        f[min(len(state), 3)] = 1.0
        for k, a in enumerate(state[:2]):
            f[4 + 2 * k + a] = 1.0
        return f


class ChainRules(_Rules):
    """Player 0 moves twice along a single legal action."""

    depth = 2

    def initial_state(self):
        return ()

    def current_player(self, state):
        return 0

    def chance_outcomes(self, state):
        return []

    def legal_actions(self, state):
        return [0]

    def returns(self, state):
        return (1.0, -1.0)


class TwoLevelRules(_Rules):
    """Visible chance move with probabilities 0.3/0.7, then two player-0 moves."""

    depth = 3

    def initial_state(self):
        return ()

    def current_player(self, state):
        return CHANCE if len(state) == 0 else 0

    def chance_outcomes(self, state):
        return [(0, 0.3), (1, 0.7)]

    def legal_actions(self, state):
        return [0, 1]

    def returns(self, state):
        u = float(state[0] + 2 * state[1] - state[2])
        return (u, -u)


class NoisyStepRules(_Rules):
    """Hidden chance draws a payoff in {2, -1} w.p. 0.25/0.75; action 1 pays 0.5."""

    depth = 2

    def initial_state(self):
        return ()

    def current_player(self, state):
        return CHANCE if len(state) == 0 else 0

    def chance_outcomes(self, state):
        return [(0, 0.25), (1, 0.75)]

    def legal_actions(self, state):
        return [0, 1]

    def infoset_key(self, state, player):
        return "decide"

    def returns(self, state):
        u = (2.0 if state[0] == 0 else -1.0) if state[1] == 0 else 0.5
        return (u, -u)


@pytest.fixture(scope="module")
def two_level():
    return build_from_rules(TwoLevelRules(), "two_level")


def edge_product(game, probs, node, next_node):
    """Probability of the path between two nodes, by walking parent pointers."""
    out, h = 1.0, int(next_node)
    while h != node:
        p, a = int(game.node_parent[h]), int(game.node_action[h])
        if game.node_player[p] == CHANCE:
            out *= game.chance_probs[p, a]
        else:
            out *= probs[game.node_infoset[p], a]
        h = p
    return out


class TestSamplingPolicy:
    def test_endpoints(self, kuhn):
        rng = np.random.default_rng(0)
        hist, new = random_table(kuhn, rng), random_table(kuhn, rng)
        np.testing.assert_array_equal(sampling_policy(1.0, hist, new).probs, new.probs)
        np.testing.assert_array_equal(sampling_policy(0.0, hist, new).probs, hist.probs)

    def test_half(self):
        np.testing.assert_allclose(sampling_policy(0.5, [1.0, 0.0], [0.0, 1.0]), [0.5, 0.5])

    @pytest.mark.parametrize("hs", [-0.1, 1.5, float("nan")])
    def test_out_of_range(self, hs):
        with pytest.raises(ConfigurationError):
            sampling_policy(hs, [1.0], [1.0])


class TestSimulate:
    def test_chain_game(self):
        game = build_from_rules(ChainRules(), "chain")
        buf = simulate(game, 0, PolicyTable.uniform(game), 1, seed=0)
        assert len(buf) == 2
        np.testing.assert_array_equal(buf.node, [0, 1])
        np.testing.assert_array_equal(buf.next_infoset[1], -1)
        assert buf.reward.tolist() == [0.0, 1.0]
        np.testing.assert_array_equal(buf.own * buf.ext, [1.0, 1.0])
        np.testing.assert_array_equal(buf.own_next * buf.ext_next, [1.0, 1.0])
        t = buf[1]
        assert t.s_next is None and t.legal_mask_next is None

    def test_chain_rule(self, leduc):
        probs = random_table(leduc, np.random.default_rng(1)).probs
        buf = simulate(leduc, 1, probs, 60_000, seed=2)
        assert len(buf) >= 100_000
        total, total_next = buf.own * buf.ext, buf.own_next * buf.ext_next
        path = np.array([edge_product(leduc, probs, n, m) for n, m in zip(buf.node, buf.next_node)])
        np.testing.assert_allclose(total * path, total_next, rtol=0, atol=1e-12)

    def test_reach_components_in_unit_interval(self, leduc):
        buf = simulate(leduc, 0, PolicyTable.uniform(leduc), 2000, seed=0)
        for col in (buf.own, buf.ext, buf.own_next, buf.ext_next):
            assert col.min() >= 0.0 and col.max() <= 1.0
        lo, hi = leduc.utility_range.min(), leduc.utility_range.max()
        assert np.abs(buf.reward).max() <= max(abs(lo), hi)

    def test_visit_frequency(self, kuhn):
        n = 100_000
        uniform = PolicyTable.uniform(kuhn)
        r = reach_matrix(kuhn, uniform)
        total = r.prod(axis=1)
        for player in (0, 1):
            buf = simulate(kuhn, player, uniform, n, seed=player)
            counts = np.bincount(buf.infoset, minlength=kuhn.num_infosets)
            for i in kuhn.infosets_of(player):
                p = total[kuhn.node_infoset == i].sum()
                se = np.sqrt(p * (1.0 - p) / n)
                assert abs(counts[i] / n - p) <= 3.0 * se

    def test_deterministic(self, kuhn):
        a = simulate(kuhn, 0, PolicyTable.uniform(kuhn), 500, seed=11)
        b = simulate(kuhn, 0, PolicyTable.uniform(kuhn), 500, seed=11)
        for name, col in a.columns().items():
            np.testing.assert_array_equal(col, b.columns()[name])

    def test_zero_episodes(self, kuhn):
        with pytest.raises(ContractError):
            simulate(kuhn, 0, PolicyTable.uniform(kuhn), 0)


class TestBuffer:
    def test_round_trip(self, kuhn, tmp_path):
        buf = simulate(kuhn, 1, random_table(kuhn, np.random.default_rng(3)), 300, seed=4)
        buf.dump(tmp_path / "buf.bin")
        back = Buffer.restore(kuhn, tmp_path / "buf.bin")
        assert back.player == 1
        for name, col in buf.columns().items():
            np.testing.assert_array_equal(back.columns()[name], col)
            assert back.columns()[name].dtype == col.dtype

    def test_capacity_drops_oldest(self, kuhn):
        a = simulate(kuhn, 0, PolicyTable.uniform(kuhn), 100, seed=0)
        small = Buffer(kuhn, 0, capacity=50).extend(a)
        assert len(small) == 50
        np.testing.assert_array_equal(small.node, a.node[-50:])

    def test_empty_sample(self, kuhn):
        with pytest.raises(ContractError):
            Buffer(kuhn, 0).sample(np.random.default_rng(0), 4)


def _train(game, nets, buffer, hyper, seed=0):
    rng = np.random.default_rng(seed)
    return train_ro(game, nets, buffer, hyper, rng, PolicyTable.uniform(game).probs)


class TestTrainRo:
    def test_bandit(self):
        game = matrix_game([[1.0], [0.0]], "bandit")
        hyper = RoHyper(q_hidden=16, rp_hidden=8, policy_hidden=8, q_steps=2000, rp_steps=1, distill_epochs=1)
        nets = RoNetworks.create(game, hyper, seed=0)
        buf = simulate(game, 0, PolicyTable.uniform(game), 5000, seed=0)
        nets, _ = _train(game, nets, buf, hyper)
        q = nets.output(game, 0).q[game.infosets_of(0)[0]]
        np.testing.assert_allclose(q, [1.0, 0.0], atol=0.05)

    def test_terminal_target_is_mean_reward(self):
        game = build_from_rules(NoisyStepRules(), "noisy")
        hyper = RoHyper(q_hidden=16, rp_hidden=8, policy_hidden=8, lr=0.003, q_steps=3000, rp_steps=1, distill_epochs=1)
        nets = RoNetworks.create(game, hyper, seed=1)
        buf = simulate(game, 0, PolicyTable.uniform(game), 20_000, seed=1)
        assert np.all(buf.terminal)
        nets, _ = _train(game, nets, buf, hyper, seed=1)
        q = nets.output(game, 0).q[0]
        np.testing.assert_allclose(q, [-0.25, 0.5], atol=0.05)

    def test_reach_network(self, two_level):
        game = two_level
        hyper = RoHyper(q_hidden=8, rp_hidden=32, policy_hidden=8, q_steps=1, rp_steps=3000, distill_epochs=1, lr=0.003)
        nets = RoNetworks.create(game, hyper, seed=2)
        uniform = PolicyTable.uniform(game)
        buf = simulate(game, 0, uniform, 20_000, seed=2)
        nets, _ = _train(game, nets, buf, hyper, seed=2)
        out = nets.output(game, 0)
        own, _ = infoset_reach(game, uniform, 0)
        r = reach_matrix(game, uniform)
        ext = np.array([r[game.node_infoset == i, CHANCE].sum() for i in range(game.num_infosets)])
        rows = game.infosets_of(0)
        np.testing.assert_allclose(out.own[rows], own[rows], atol=0.02)
        np.testing.assert_allclose(out.external[rows], ext[rows], atol=0.02)

    def test_distillation_monotone(self, kuhn):
        hyper = RoHyper(q_hidden=16, rp_hidden=8, policy_hidden=32, q_steps=1, rp_steps=1)
        nets = RoNetworks.create(kuhn, hyper, seed=3)
        target = random_table(kuhn, np.random.default_rng(3)).probs
        buf = simulate(kuhn, 0, target, 2000, seed=3)
        nets, stats = train_ro(kuhn, nets, buf, hyper, np.random.default_rng(3), target)
        losses = stats["distill_loss"]
        assert len(losses) == 5
        assert np.all(np.diff(losses) <= 0.0)

    def test_policy_promoted_after_training(self, kuhn):
        hyper = RoHyper(q_hidden=8, rp_hidden=8, policy_hidden=8, q_steps=2, rp_steps=2, distill_epochs=2)
        nets = RoNetworks.create(kuhn, hyper, seed=4)
        before = nets.policy.checksum()
        buf = simulate(kuhn, 0, PolicyTable.uniform(kuhn), 100, seed=4)
        nets, _ = _train(kuhn, nets, buf, hyper)
        assert nets.policy.checksum() == nets.pending.checksum() != before
        assert nets.policy is not nets.pending

    def test_empty_buffer(self, kuhn):
        nets = RoNetworks.create(kuhn, RoHyper(q_hidden=4, rp_hidden=4, policy_hidden=4))
        with pytest.raises(ContractError):
            _train(kuhn, nets, Buffer(kuhn, 0), RoHyper())

    def test_outputs(self, kuhn):
        nets = RoNetworks.create(kuhn, RoHyper(q_hidden=4, rp_hidden=4, policy_hidden=4), seed=5)
        out = nets.output(kuhn, 1).check_baseline()
        rows = kuhn.infosets_of(1)
        np.testing.assert_allclose(out.sampling[rows].sum(axis=1), 1.0)
        assert out.own.min() >= 0.0 and out.own.max() <= 1.0
        assert isinstance(nets.q_online, Mlp) and nets.q_online.same_architecture(nets.q_target)


class TestExploration:
    def test_schedule(self):
        eps = exploration_schedule(RoHyper(rounds=4))
        assert eps[0] == pytest.approx(0.06) and eps[-1] == pytest.approx(0.001)
        assert np.all(np.diff(eps) < 0)
        assert exploration_schedule(RoHyper(rounds=1)).tolist() == [0.06]


class TestTabularRo:
    def test_matches_counterfactual_values(self, kuhn):
        profile = random_table(kuhn, np.random.default_rng(6))
        for player in (0, 1):
            out = tabular_ro(kuhn, player, profile)
            cf = counterfactual_values(kuhn, profile, player)
            for i in kuhn.infosets_of(player):
                ext = out.external[i]
                np.testing.assert_allclose(ext * out.q[i], cf.v_per_action[i], atol=1e-12)
                assert ext * out.bv[i] == pytest.approx(cf.v[i], abs=1e-12)

    def test_baseline_identity(self, leduc):
        out = tabular_ro(leduc, 0, random_table(leduc, np.random.default_rng(7)), hs=0.3)
        out.check_baseline(atol=1e-12)

    def test_greedy_attains_best_response(self, kuhn):
        profile = random_table(kuhn, np.random.default_rng(8))
        for player in (0, 1):
            out = tabular_ro(kuhn, player, profile, hs=1.0)
            _, br_value = best_response(kuhn, profile, player)
            joint = np.array(profile.probs)
            rows = kuhn.infoset_player == player
            joint[rows] = out.greedy_policy(kuhn).probs[rows]
            assert expected_value(kuhn, joint)[player] == pytest.approx(br_value, abs=1e-12)

    def test_greedy_ties_lowest_index(self, pennies):
        out = tabular_ro(pennies, 0, PolicyTable.uniform(pennies), hs=1.0)
        assert out.greedy[pennies.infosets_of(0)[0]] == 0

    def test_merge(self, kuhn):
        profile = PolicyTable.uniform(kuhn)
        joint = tabular_ro(kuhn, 0, profile).__class__.merge(
            kuhn, [tabular_ro(kuhn, 0, profile), tabular_ro(kuhn, 1, profile)]
        )
        assert joint.players == (0, 1)
        joint.check_baseline()


class TestNeuralRo:
    def test_kuhn_smoke(self, kuhn):
        hyper = RoHyper(q_hidden=64, rp_hidden=32, policy_hidden=32, episodes=4000, rounds=4, q_steps=400, rp_steps=100)
        nets = RoNetworks.create(kuhn, hyper, seed=9)
        profile = PolicyTable.uniform(kuhn)
        out, stats = neural_ro(kuhn, 0, nets, profile, 0.0, hyper, np.random.default_rng(9))
        exact = tabular_ro(kuhn, 0, profile)
        rows = kuhn.infosets_of(0)
        assert len(stats["rounds"]) == 4 and stats["buffer_size"] > 0
        # a smoke bound at a tenth of the utility range; tight fits are checked on small games above
        assert np.abs(out.q[rows] - exact.q[rows]).max() <= 0.1 * kuhn.utility_range.max()
        out.check_baseline()
