import csv
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import random_table, table_to_kuhn
from udef._validation import ConfigurationError, ContractError
from udef.games import PolicyTable, build_game, expected_value, nash_conv, playout, reach_matrix, respond
from udef.tabular import (
    CONVERGENCE_COLUMNS,
    CFRSolver,
    CfrState,
    FictitiousPlay,
    MetaGame,
    augment_meta_game,
    average_strategy,
    cfr_iteration,
    fictitious_play_step,
    matrix_exploitability,
    meta_solve,
    regret_bound,
    regret_matching,
    sampled_entry_stats,
    solve_zero_sum,
    solve_zero_sum_batch,
    write_convergence_log,
)

RPS = np.array([[0.0, -1.0, 1.0], [1.0, 0.0, -1.0], [-1.0, 1.0, 0.0]])


class TestRegretMatching:
    @pytest.mark.parametrize(
        "regrets, expected",
        [([2, 0, -1], [1, 0, 0]), ([-1, -2], [0.5, 0.5]), ([3, 1], [0.75, 0.25])],
    )
    def test_examples(self, regrets, expected):
        np.testing.assert_allclose(regret_matching(regrets), expected, atol=1e-15)

    def test_mask_restricts_support(self):
        out = regret_matching([-1.0, 5.0, -3.0], mask=[True, False, True])
        np.testing.assert_allclose(out, [0.5, 0.0, 0.5])

    def test_nan_rejected(self):
        with pytest.raises(ContractError):
            regret_matching([np.nan, 1.0])

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=8))
    @settings(max_examples=200, deadline=None)
    def test_always_distribution(self, regrets):
        out = regret_matching(regrets)
        assert np.all(out >= 0.0)
        assert abs(out.sum() - 1.0) <= 1e-12


class TestCfr:
    def test_first_iteration_uniform(self, kuhn):
        state = CfrState.initial(kuhn)
        np.testing.assert_array_equal(state.current_strategy().probs, PolicyTable.uniform(kuhn).probs)
        state = cfr_iteration(kuhn, state)
        assert state.iteration == 1
        np.testing.assert_allclose(average_strategy(state).probs, 0.5)

    def test_average_needs_an_iteration(self, kuhn):
        with pytest.raises(ContractError):
            average_strategy(CfrState.initial(kuhn))

    @pytest.mark.parametrize("linear", [False, True])
    def test_matches_recursive_oracle(self, kuhn, linear):
        ref = oracles.kuhn_cfr(60, linear=linear)
        got = table_to_kuhn(CFRSolver("linear" if linear else "vanilla", 60).fit(kuhn).average_policy_)
        for key in ref:
            assert got[key] == pytest.approx(ref[key], abs=1e-12)

    def test_convergence_decades(self, kuhn):
        solver = CFRSolver("vanilla", 10_000, log_every=10).fit(kuhn)
        by_t = {row["iteration"]: row["nash_conv_total"] for row in solver.log_}
        assert by_t[10_000] <= by_t[1000] <= by_t[100]
        assert by_t[1000] <= 0.05
        assert by_t[10_000] <= 0.01

    @pytest.mark.parametrize("variant", ["vanilla", "plus", "linear"])
    def test_regret_bound(self, kuhn, variant):
        state = CfrState.initial(kuhn, variant)
        for _ in range(300):
            state = cfr_iteration(kuhn, state)
            if variant == "plus":
                assert np.all(state.cumulative_regret >= 0.0)
        if variant != "linear":
            bound = regret_bound(kuhn, state.iteration)
            assert np.all(state.cumulative_regret.max(axis=1) <= bound)

    def test_folklore_bound(self, kuhn):
        # NashConv of the average is at most the sum of per-player average regret.
        # The best fixed strategy against the opponent's iterate sequence earns
        # T times its best-response value against the opponent's average.
        state = CfrState.initial(kuhn)
        iterates = []
        for _ in range(200):
            iterates.append(state.current_strategy())
            state = cfr_iteration(kuhn, state)
        avg = average_strategy(state)
        T = len(iterates)
        bound = 0.0
        for p in (0, 1):
            realised = sum(expected_value(kuhn, s)[p] for s in iterates)
            regret = T * respond(kuhn, p, avg).value - realised
            bound += max(regret, 0.0) / T
        assert nash_conv(kuhn, avg).total <= bound + 1e-9

    def test_repeated_iterate_average_is_iterate(self, kuhn):
        sigma = random_table(kuhn, np.random.default_rng(0))
        state = CfrState.initial(kuhn)
        r = reach_matrix(kuhn, sigma)[kuhn.infoset_representative]
        own = r[np.arange(kuhn.num_infosets), kuhn.infoset_player]
        state.cumulative_strategy = 7 * own[:, None] * sigma.probs
        state.iteration = 7
        np.testing.assert_allclose(average_strategy(state).probs, sigma.probs, atol=1e-12)

    def test_alternating_variants_order(self, kuhn):
        nc = {v: CFRSolver(v, 1000, alternating=True).fit(kuhn).nash_conv() for v in ("vanilla", "plus", "linear")}
        assert nc["plus"] <= nc["vanilla"]
        assert nc["linear"] <= nc["vanilla"]

    def test_speed(self, kuhn):
        start = time.perf_counter()
        CFRSolver("vanilla", 10_000).fit(kuhn)
        assert time.perf_counter() - start <= 10.0

    def test_estimator_api(self, kuhn):
        solver = CFRSolver(variant="plus", iterations=5)
        assert solver.get_params()["variant"] == "plus"
        with pytest.raises(ConfigurationError):
            CFRSolver(variant="nope").fit(kuhn)

    def test_convergence_log_csv(self, kuhn, tmp_path):
        solver = CFRSolver("vanilla", 20, log_every=5).fit(kuhn)
        path = tmp_path / "log.csv"
        write_convergence_log(path, solver.log_)
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        assert tuple(rows[0].keys()) == CONVERGENCE_COLUMNS
        assert [int(r["iteration"]) for r in rows] == [5, 10, 15, 20]
        for r, src in zip(rows, solver.log_):
            assert float(r["nash_conv_total"]) == src["nash_conv_total"]


class TestMetaSolve:
    def test_schemes(self):
        A = np.zeros((4, 3))
        np.testing.assert_allclose(meta_solve(A, "uniform")[0], [0.25] * 4)
        np.testing.assert_allclose(meta_solve(A, "linear")[1], [1 / 6, 2 / 6, 3 / 6])
        np.testing.assert_allclose(meta_solve(A, "last")[0], [0, 0, 0, 1])

    def test_rps_nash(self):
        x, y = meta_solve(RPS, "nash")
        np.testing.assert_allclose(x, [1 / 3] * 3, atol=1e-2)
        np.testing.assert_allclose(y, [1 / 3] * 3, atol=1e-2)

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            meta_solve(np.zeros((0, 0)), "nash")
        with pytest.raises(ConfigurationError):
            meta_solve(np.ones((2, 2)), "alpha_rank")

    @given(st.integers(2, 8), st.integers(2, 8), st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_nash_exploitability(self, n, m, seed):
        A = np.random.default_rng(seed).uniform(-1, 1, size=(n, m))
        x, y = meta_solve(A, "nash")
        delta = A.max() - A.min()
        assert oracles.matrix_exploitability_bruteforce(A.tolist(), x, y) <= 1e-3 * delta
        assert matrix_exploitability(A, x, y) == pytest.approx(
            oracles.matrix_exploitability_bruteforce(A.tolist(), x, y), abs=1e-12
        )

    def test_batch_matches_single_runs(self):
        rng = np.random.default_rng(5)
        As = rng.uniform(-1, 1, size=(4, 3, 3))
        xs, ys = solve_zero_sum_batch(As, steps=500)
        for k in range(4):
            x, y = solve_zero_sum(As[k], steps=500)
            np.testing.assert_allclose(xs[k], x, atol=1e-12)
            np.testing.assert_allclose(ys[k], y, atol=1e-12)


class TestMetaGame:
    def test_exact_entries(self, kuhn):
        rng = np.random.default_rng(1)
        tables = [random_table(kuhn, rng) for _ in range(3)]
        meta = augment_meta_game(kuhn, MetaGame(), (tables[:2], tables[1:]))
        assert meta.shape == (2, 2)
        for r in range(2):
            for c in range(2):
                u = expected_value(kuhn, PolicyTable.combine(kuhn, [tables[r], tables[1 + c]]))
                assert meta.payoff_matrix[r, c] == pytest.approx(u[0], abs=1e-12)
                assert meta.payoff_matrix[r, c] == pytest.approx(-u[1], abs=1e-9)

    def test_incremental_growth_keeps_old_entries(self, kuhn):
        rng = np.random.default_rng(2)
        a, b, c = (random_table(kuhn, rng) for _ in range(3))
        m1 = augment_meta_game(kuhn, MetaGame(), ([a], [a]))
        m2 = augment_meta_game(kuhn, m1, ([b], [c]))
        assert m2.shape == (2, 2)
        assert m2.payoff_matrix[0, 0] == m1.payoff_matrix[0, 0]
        assert len(m2.row_iterations) == 2

    def test_sampled_entry_within_three_se(self, kuhn):
        rng = np.random.default_rng(3)
        a, b = random_table(kuhn, rng), random_table(kuhn, rng)
        exact = expected_value(kuhn, PolicyTable.combine(kuhn, [a, b]))[0]
        mean, se = sampled_entry_stats(kuhn, a, b, 100_000, seed=11)
        assert abs(mean - exact) <= 3 * se

    def test_sampled_duplicate_rows_close(self, kuhn):
        rng = np.random.default_rng(4)
        a, b = random_table(kuhn, rng), random_table(kuhn, rng)
        meta = augment_meta_game(kuhn, MetaGame(estimation="sampled", episodes=20_000), ([a, a], [b]), seed=9)
        assert abs(meta.payoff_matrix[0, 0] - meta.payoff_matrix[1, 0]) <= 0.1

    def test_parallel_bit_identical(self, kuhn):
        rng = np.random.default_rng(6)
        tables = [random_table(kuhn, rng) for _ in range(3)]
        base = MetaGame(estimation="sampled", episodes=2000)
        seq = augment_meta_game(kuhn, base, (tables, tables), seed=4, n_jobs=1)
        par = augment_meta_game(kuhn, base, (tables, tables), seed=4, n_jobs=3)
        np.testing.assert_array_equal(seq.payoff_matrix, par.payoff_matrix)

    def test_bad_estimation(self):
        with pytest.raises(ConfigurationError):
            MetaGame(estimation="guess")


class TestFictitiousPlay:
    def test_matching_pennies_from_pure(self, pennies):
        pure = PolicyTable(pennies, np.array([[1.0, 0.0], [1.0, 0.0]]))
        fp = FictitiousPlay(iterations=200, initial_policy=pure).fit(pennies)
        np.testing.assert_allclose(fp.average_policy_.probs, 0.5, atol=0.05)

    def test_step_bookkeeping(self, kuhn):
        meta = augment_meta_game(kuhn, MetaGame(), ([PolicyTable.uniform(kuhn)], [PolicyTable.uniform(kuhn)]))
        for k in range(1, 4):
            meta = fictitious_play_step(kuhn, meta)
            assert meta.shape == (k + 1, k + 1)

    def test_kuhn_trend(self, kuhn):
        fp = FictitiousPlay(iterations=100).fit(kuhn)
        nc = np.array([nash_conv(kuhn, p).total for p in fp.policies_[1:]])
        windows = nc.reshape(10, 10).mean(axis=1)
        assert windows[-1] < nc[0]
        assert windows[-1] < windows[0]


class TestPlayout:
    def test_antithetic_determinism(self, kuhn):
        a = playout(kuhn, PolicyTable.uniform(kuhn), 1001, np.random.default_rng(0), antithetic=True)
        b = playout(kuhn, PolicyTable.uniform(kuhn), 1001, np.random.default_rng(0), antithetic=True)
        np.testing.assert_array_equal(a, b)
        assert np.all(kuhn.node_player[a] == -1)

    def test_visit_frequency_matches_reach(self, kuhn):
        table = random_table(kuhn, np.random.default_rng(7))
        n = 200_000
        _, path = playout(kuhn, table, n, np.random.default_rng(8), record=True)
        counts = np.bincount(path[path >= 0], minlength=kuhn.num_nodes) / n
        r = reach_matrix(kuhn, table).prod(axis=1)
        se = np.sqrt(r * (1 - r) / n)
        assert np.all(np.abs(counts - r) <= 3 * se + 1e-12)

    def test_never_picks_zero_probability(self):
        g = build_game("rps")
        probs = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        term = playout(g, PolicyTable(g, probs), 500, np.random.default_rng(1))
        assert np.all(g.node_utility[term, 0] == RPS[1, 2])
