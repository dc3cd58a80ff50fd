from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import kuhn_table, random_table, table_to_kuhn
from udef._validation import ConfigurationError, IncompletePolicyError
from udef.games import (
    CHANCE,
    TERMINAL,
    PolicyTable,
    best_response,
    build_from_rules,
    build_game,
    counterfactual_values,
    expected_value,
    matrix_game,
    nash_conv,
    reach,
    reach_matrix,
)
from udef.games.poker import KuhnRules

GOLDEN = Path(__file__).parent / "golden"

# Regression constant from exhaustive enumeration (see oracles.leduc_infoset_count).
LEDUC_INFOSETS_PER_PLAYER = 144


class TestConstruction:
    def test_kuhn_infosets_match_enumeration(self, kuhn):
        expected = oracles.kuhn_infosets()
        for p in (0, 1):
            keys = {kuhn.infoset_keys[i] for i in kuhn.infosets_of(p)}
            assert keys == expected[p]
            assert len(keys) == 6
        assert np.all(kuhn.legal_mask.sum(axis=1) == 2)

    def test_leduc_infosets_match_enumeration(self, leduc):
        counts = oracles.leduc_infoset_count()
        assert counts == {0: LEDUC_INFOSETS_PER_PLAYER, 1: LEDUC_INFOSETS_PER_PLAYER}
        for p in (0, 1):
            assert len(leduc.infosets_of(p)) == counts[p]

    def test_leduc_ruleset(self, leduc):
        assert leduc.num_actions == 3
        assert leduc.utility_range.tolist() == [26.0, 26.0]

    @pytest.mark.parametrize("name", ["kuhn", "leduc", "rps", "random_matrix(4)"])
    def test_invariants(self, name):
        g = build_game(name, seed=3)
        nonroot = np.arange(1, g.num_nodes)
        assert g.node_parent[0] == -1
        assert np.all(g.node_parent[nonroot] < nonroot)
        for h in range(g.num_nodes):
            if g.node_player[h] == TERMINAL:
                assert abs(g.node_utility[h].sum()) <= 1e-12
            else:
                assert np.any(g.children[h] >= 0)
            if g.node_player[h] == CHANCE:
                assert abs(g.chance_probs[h].sum() - 1.0) <= 1e-12
        for i, members in enumerate(g.infoset_members):
            assert set(g.node_player[members]) == {g.infoset_player[i]}
            for h in members:
                assert np.array_equal(g.children[h, : g.num_actions] >= 0, g.legal_mask[i])

    def test_random_matrix_one(self):
        g = build_game("random_matrix(1)", seed=11)
        assert [len(g.infosets_of(p)) for p in (0, 1)] == [1, 1]
        entry = g.node_utility[g.terminal_nodes[0], 0]
        assert expected_value(g, PolicyTable.uniform(g))[0] == entry

    def test_pure_strategies_pick_matrix_entry(self):
        payoffs = np.arange(9.0).reshape(3, 3) - 4.0
        g = matrix_game(payoffs)
        for r in range(3):
            for c in range(3):
                probs = np.zeros((2, 3))
                probs[0, r] = probs[1, c] = 1.0
                assert expected_value(g, PolicyTable(g, probs))[0] == payoffs[r, c]

    def test_deterministic(self):
        assert build_game("random_matrix(5)", seed=2).dump() == build_game("random_matrix:5", seed=2).dump()
        assert build_game("leduc").dump() == build_game("leduc").dump()

    def test_unknown_name(self):
        with pytest.raises(ConfigurationError):
            build_game("texas")

    def test_kuhn_dump_golden(self, kuhn):
        text = kuhn.dump()
        assert len(text.splitlines()) == 1 + kuhn.num_nodes + kuhn.num_infosets
        assert text == (GOLDEN / "kuhn_dump.txt").read_text()


class TestExpectedValue:
    def test_matching_pennies_uniform(self, pennies):
        assert np.allclose(expected_value(pennies, PolicyTable.uniform(pennies)), 0.0)

    def test_kuhn_uniform_matches_monte_carlo(self, kuhn):
        uniform = {k: 0.5 for k in kuhn.infoset_keys}
        samples = oracles.kuhn_sample_values(uniform, 10**6, seed=0)
        se = samples.std() / np.sqrt(len(samples))
        u = expected_value(kuhn, kuhn_table(kuhn, uniform))
        assert abs(u[0] - samples.mean()) <= 3 * se
        assert abs(u.sum()) <= 1e-9

    @pytest.mark.parametrize("alpha", [0.0, 0.1, 1.0 / 3.0])
    def test_kuhn_equilibrium_value(self, kuhn, alpha):
        u = expected_value(kuhn, kuhn_table(kuhn, oracles.kuhn_nash_policy(alpha)))
        assert u[0] == pytest.approx(-1.0 / 18.0, abs=1e-12)

    def test_matches_brute_force(self, kuhn):
        rng = np.random.default_rng(0)
        for _ in range(10):
            t = random_table(kuhn, rng)
            assert expected_value(kuhn, t)[0] == pytest.approx(oracles.kuhn_value(table_to_kuhn(t)), abs=1e-12)

    def test_incomplete_policy(self, kuhn):
        with pytest.raises(IncompletePolicyError):
            expected_value(kuhn, {0: [0.5, 0.5]})


class TestReach:
    def test_root(self, kuhn):
        r = reach(kuhn, PolicyTable.uniform(kuhn), 0, 0)
        assert (r.own, r.external, r.total) == (1.0, 1.0, 1.0)

    def test_after_chance(self, kuhn):
        h = kuhn.children[0, 0]
        r = reach(kuhn, PolicyTable.uniform(kuhn), h, 0)
        assert r.own == 1.0
        assert r.external == pytest.approx(1.0 / 6.0, abs=1e-15)

    def test_total_is_product(self, leduc):
        t = random_table(leduc, np.random.default_rng(1))
        for h in [0, 7, 100, 1500, leduc.num_nodes - 1]:
            for viewer in (0, 1):
                r = reach(leduc, t, h, viewer)
                assert r.total == pytest.approx(r.own * r.external, abs=1e-12)
                assert 0.0 <= r.own <= 1.0 and 0.0 <= r.external <= 1.0

    def test_matches_visit_frequency(self, kuhn):
        t = random_table(kuhn, np.random.default_rng(2))
        n = 10**6
        rng = np.random.default_rng(3)
        P = np.zeros(kuhn.children.shape)
        for h in range(kuhn.num_nodes):
            if kuhn.node_player[h] == CHANCE:
                P[h] = kuhn.chance_probs[h]
            elif kuhn.node_player[h] in (0, 1):
                P[h, :2] = t.probs[kuhn.node_infoset[h]]
        visits = np.zeros(kuhn.num_nodes)
        cur = np.zeros(n, dtype=np.int64)
        np.add.at(visits, cur, 1)
        while True:
            live = kuhn.node_player[cur] != TERMINAL
            if not live.any():
                break
            c = cur[live]
            pick = (rng.random(len(c))[:, None] > np.cumsum(P[c], axis=1)).sum(axis=1)
            cur[live] = kuhn.children[c, pick]
            np.add.at(visits, cur[live], 1)
        freq = visits / n
        total = reach_matrix(kuhn, t).prod(axis=1)
        se = np.sqrt(total * (1 - total) / n) + 1e-12
        assert np.all(np.abs(freq - total) <= 3 * se + 1e-9)


class TestCounterfactualValues:
    def test_matrix_row_averages(self):
        payoffs = np.array([[1.0, -2.0, 0.5], [0.0, 3.0, -1.0]])
        g = matrix_game(payoffs)
        cf = counterfactual_values(g, PolicyTable.uniform(g), 0)
        row = g.infosets_of(0)[0]
        assert np.allclose(cf.v_per_action[row, :2], payoffs.mean(axis=1), atol=1e-12)

    def test_kuhn_brute_force(self, kuhn):
        rng = np.random.default_rng(4)
        for t in [PolicyTable.uniform(kuhn), random_table(kuhn, rng)]:
            for p in (0, 1):
                cf = counterfactual_values(kuhn, t, p)
                ref = oracles.kuhn_cf_values(table_to_kuhn(t), p)
                for i in cf.infosets:
                    v, vpa = ref[kuhn.infoset_keys[i]]
                    assert cf.v[i] == pytest.approx(v, abs=1e-12)
                    assert np.allclose(cf.v_per_action[i], vpa, atol=1e-12)

    def test_identity(self, leduc):
        t = random_table(leduc, np.random.default_rng(5))
        for p in (0, 1):
            cf = counterfactual_values(leduc, t, p)
            assert np.allclose(cf.v, (t.probs * cf.v_per_action).sum(axis=1), atol=1e-9)

    def test_terminal_adjacent(self, kuhn):
        # Player 1 facing a bet: both actions end the game.
        t = PolicyTable.uniform(kuhn)
        i = kuhn.infoset_index("Kb")
        cf = counterfactual_values(kuhn, t, 1)
        ext = 2 * (1.0 / 6.0) * 0.5  # two deals, opponent bets with 1/2
        # fold loses 1, call wins 2 against either J or Q
        assert np.allclose(cf.v_per_action[i], [ext * -1.0, ext * 2.0], atol=1e-15)


class TestBestResponse:
    def test_against_equilibrium(self, kuhn):
        t = kuhn_table(kuhn, oracles.kuhn_nash_policy(0.2))
        _, v0 = best_response(kuhn, t, 0)
        _, v1 = best_response(kuhn, t, 1)
        assert v0 == pytest.approx(-1.0 / 18.0, abs=1e-6)
        assert v1 == pytest.approx(1.0 / 18.0, abs=1e-6)

    def test_uniform_pennies(self, pennies):
        br, v = best_response(pennies, PolicyTable.uniform(pennies), 0)
        assert v == pytest.approx(0.0, abs=1e-12)
        assert np.array_equal(br.probs[0], [1.0, 0.0])  # tie -> lowest index

    def test_dominates_random_strategies(self, kuhn):
        rng = np.random.default_rng(6)
        opp = random_table(kuhn, rng)
        for p in (0, 1):
            _, v = best_response(kuhn, opp, p)
            for _ in range(100):
                mine = random_table(kuhn, rng)
                joint = PolicyTable.combine(kuhn, [mine, opp] if p == 0 else [opp, mine])
                assert v >= expected_value(kuhn, joint)[p] - 1e-12

    def test_matches_pure_enumeration(self, kuhn):
        rng = np.random.default_rng(7)
        for _ in range(5):
            t = random_table(kuhn, rng)
            ref = table_to_kuhn(t)
            for p in (0, 1):
                br, v = best_response(kuhn, t, p)
                assert v == pytest.approx(oracles.kuhn_best_response_value(ref, p), abs=1e-12)
                assert expected_value(kuhn, br)[p] == pytest.approx(v, abs=1e-12)
                rows = br.probs[kuhn.infosets_of(p)]
                assert np.all((rows == 0.0) | (rows == 1.0))

    def test_best_response_cycle(self, kuhn):
        t = PolicyTable.uniform(kuhn)
        for k in range(6):
            t, v = best_response(kuhn, t, k % 2)
            assert np.isfinite(v)


class TestNashConv:
    def test_zero_at_equilibrium(self, kuhn):
        nc = nash_conv(kuhn, kuhn_table(kuhn, oracles.kuhn_nash_policy(0.3)))
        assert abs(nc.total) <= 1e-6

    def test_uniform_matches_oracle(self, kuhn):
        uniform = {k: 0.5 for k in kuhn.infoset_keys}
        nc = nash_conv(kuhn, kuhn_table(kuhn, uniform))
        assert nc.total == pytest.approx(oracles.kuhn_nash_conv(uniform), abs=1e-12)
        assert nc.per_player.sum() == pytest.approx(nc.total)

    def test_invariant_under_action_relabeling(self, kuhn):
        class Swapped(KuhnRules):
            action_names = ["b", "p"]

        swapped = build_from_rules(Swapped(), "kuhn-swapped")
        rng = np.random.default_rng(8)
        for _ in range(5):
            t = random_table(kuhn, rng)
            probs = np.zeros_like(t.probs)
            for i, key in enumerate(kuhn.infoset_keys):
                # same semantics and keys, action ids reversed
                j = swapped.infoset_index(key)
                probs[j] = t.probs[i, ::-1]
            assert nash_conv(swapped, PolicyTable(swapped, probs)).total == pytest.approx(
                nash_conv(kuhn, t).total, abs=1e-12
            )

    @settings(max_examples=60, deadline=None)
    @given(st.integers(min_value=0, max_value=2**32 - 1))
    def test_nonnegative(self, seed):
        g = build_game("leduc") if seed % 4 == 0 else build_game("kuhn")
        nc = nash_conv(g, random_table(g, np.random.default_rng(seed)))
        assert nc.total >= -1e-9
        assert np.all(nc.per_player >= -1e-9)
