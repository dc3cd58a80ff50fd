"""Exact tabular baselines: the CFR family, meta-games and fictitious play."""

from __future__ import annotations

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import ConfigurationError, ContractError, check_random_state
from .games import PolicyTable, expected_value, mixture_policy, nash_conv
from .games.evaluation import _all_counterfactual, best_response
from .games.sampling import sample_payoffs

CFR_VARIANTS = ("vanilla", "plus", "linear")
META_SOLVERS = ("uniform", "nash", "linear", "last")
CONVERGENCE_COLUMNS = ("iteration", "nash_conv_total", "nash_conv_p1", "nash_conv_p2", "wall_time_ms")


def regret_matching(regrets, mask=None):
    """Distribution proportional to positive regrets, uniform when none are positive.

    Works row-wise on 2-D input; ``mask`` restricts the support to legal
    actions.
    """
    r = np.asarray(regrets, dtype=float)
    if np.any(np.isnan(r)):
        raise ContractError("regret vector contains NaN")
    if mask is None:
        mask = np.ones(r.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    pos = np.where(mask, np.maximum(r, 0.0), 0.0)
    total = pos.sum(axis=-1, keepdims=True)
    uniform = mask / mask.sum(axis=-1, keepdims=True)
    return np.where(total > 0.0, pos / np.where(total > 0.0, total, 1.0), uniform)


@dataclass
class CfrState:
    """Cumulative regrets and strategy weights for every infoset of a game."""

    game: object
    cumulative_regret: np.ndarray
    cumulative_strategy: np.ndarray
    iteration: int = 0
    variant: str = "vanilla"
    alternating: bool = False

    @classmethod
    def initial(cls, game, variant="vanilla", alternating=False):
        if variant not in CFR_VARIANTS:
            raise ConfigurationError(f"unknown CFR variant {variant!r}")
        shape = (game.num_infosets, game.num_actions)
        return cls(game, np.zeros(shape), np.zeros(shape), 0, variant, bool(alternating))

    def current_strategy(self):
        return PolicyTable(self.game, regret_matching(self.cumulative_regret, self.game.legal_mask), validate=False)


def instantaneous_regrets(game, probs):
    """Counterfactual regret of every action under ``probs``, plus own reach per infoset."""
    v, vpa, r = _all_counterfactual(game, probs)
    inst = np.where(game.legal_mask, vpa - v[:, None], 0.0)
    rep = game.infoset_representative
    own = r[rep, game.infoset_player]
    return inst, own


def cfr_iteration(game, state):
    """One CFR iteration; returns a new state.

    Both players update against the same current strategy unless the
    state asks for alternating updates, in which case player 1 sees
    player 0's freshly updated regrets.
    """
    t = state.iteration + 1
    regret = state.cumulative_regret
    strategy = state.cumulative_strategy
    weight = float(t) if state.variant == "linear" else 1.0
    groups = [game.infoset_player == p for p in (0, 1)] if state.alternating else [np.ones(game.num_infosets, bool)]
    for rows in groups:
        sigma = regret_matching(regret, game.legal_mask)
        inst, own = instantaneous_regrets(game, sigma)
        if state.variant == "vanilla":
            updated = regret + inst
        elif state.variant == "plus":
            updated = np.maximum(regret + inst, 0.0)
        else:
            updated = regret + t * inst
        regret = np.where(rows[:, None], updated, regret)
        strategy = np.where(rows[:, None], strategy + weight * own[:, None] * sigma, strategy)
    return replace(state, cumulative_regret=regret, cumulative_strategy=strategy, iteration=t)


def average_strategy(state):
    """Normalised cumulative strategy; unreached infosets fall back to uniform."""
    if state.iteration < 1:
        raise ContractError("average strategy needs at least one iteration")
    mask = state.game.legal_mask
    total = state.cumulative_strategy.sum(axis=1, keepdims=True)
    uniform = mask / mask.sum(axis=1, keepdims=True)
    probs = np.where(total > 0.0, state.cumulative_strategy / np.where(total > 0.0, total, 1.0), uniform)
    return PolicyTable(state.game, probs, validate=False)


def regret_bound(game, iteration):
    """Per-infoset bound ``Delta_i * sqrt(|A_i|) * sqrt(T)`` for each infoset's player."""
    bounds = np.array(
        [game.utility_range[p] * np.sqrt(game.max_legal_actions(p)) * np.sqrt(iteration) for p in (0, 1)]
    )
    return bounds[game.infoset_player]


def write_convergence_log(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CONVERGENCE_COLUMNS)
        for row in rows:
            writer.writerow([row[c] for c in CONVERGENCE_COLUMNS])


class CFRSolver(BaseEstimator):
    """Tabular CFR (vanilla, CFR+ or linear) as an estimator over games.

    Parameters
    ----------
    variant : {"vanilla", "plus", "linear"}
    iterations : int
    log_every : int or None
        Record NashConv of the average strategy every ``log_every``
        iterations (and at the last one).  ``None`` disables logging.
    alternating : bool
        Update player 0 then player 1 within an iteration instead of both
        against the same strategy.
    """

    def __init__(self, variant="vanilla", iterations=1000, log_every=None, alternating=False):
        self.variant = variant
        self.iterations = iterations
        self.log_every = log_every
        self.alternating = alternating

    def fit(self, game, y=None):
        if self.variant not in CFR_VARIANTS:
            raise ConfigurationError(f"unknown CFR variant {self.variant!r}")
        if int(self.iterations) < 0:
            raise ConfigurationError("iterations must be nonnegative")
        state = CfrState.initial(game, self.variant, self.alternating)
        log = []
        start = time.perf_counter()
        for t in range(1, int(self.iterations) + 1):
            state = cfr_iteration(game, state)
            if self.log_every and (t % self.log_every == 0 or t == self.iterations):
                nc = nash_conv(game, average_strategy(state))
                log.append(
                    {
                        "iteration": t,
                        "nash_conv_total": nc.total,
                        "nash_conv_p1": nc.per_player[0],
                        "nash_conv_p2": nc.per_player[1],
                        "wall_time_ms": 1000.0 * (time.perf_counter() - start),
                    }
                )
        self.state_ = state
        self.log_ = log
        self.game_ = game
        return self

    @property
    def average_policy_(self):
        check_is_fitted(self, "state_")
        return average_strategy(self.state_)

    def nash_conv(self):
        return nash_conv(self.game_, self.average_policy_).total


# Meta-games -----------------------------------------------------------------


@dataclass
class MetaGame:
    """Empirical game between populations of row (player 0) and column (player 1) policies.

    ``payoff_matrix[r, c]`` is player 0's payoff when row response ``r``
    meets column response ``c``.  ``row_iterations`` / ``col_iterations``
    record the iteration that produced each response.
    """

    payoff_matrix: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    row_responses: list = field(default_factory=list)
    col_responses: list = field(default_factory=list)
    estimation: str = "exact"
    episodes: int = 1000
    row_iterations: list = field(default_factory=list)
    col_iterations: list = field(default_factory=list)

    def __post_init__(self):
        if self.estimation not in ("exact", "sampled"):
            raise ConfigurationError(f"unknown meta-game estimation {self.estimation!r}")
        self.payoff_matrix = np.asarray(self.payoff_matrix, dtype=float).reshape(
            len(self.row_responses), len(self.col_responses)
        )
        if not self.row_iterations:
            self.row_iterations = list(range(len(self.row_responses)))
        if not self.col_iterations:
            self.col_iterations = list(range(len(self.col_responses)))

    @property
    def shape(self):
        return self.payoff_matrix.shape

    def __len__(self):
        return len(self.row_responses)


def _entry_seed(seed, r, c):
    return np.random.SeedSequence(entropy=0 if seed is None else seed, spawn_key=(r, c))


def _estimate_entry(game, row, col, estimation, episodes, seed, r, c):
    profile = PolicyTable.combine(game, [row, col])
    if estimation == "exact":
        return float(expected_value(game, profile)[0])
    rng = np.random.default_rng(_entry_seed(seed, r, c))
    return float(sample_payoffs(game, profile, episodes, rng, antithetic=True).mean())


def augment_meta_game(game, meta, new_responses, episodes=None, seed=None, iteration=None, n_jobs=1):
    """Append new row and/or column responses and fill the missing entries.

    ``new_responses`` is ``(rows, cols)``: lists of policies for player 0
    and player 1.  Sampled entries use their own seed derived from
    ``(seed, r, c)``, so results do not depend on ``n_jobs``.
    """
    rows_new, cols_new = new_responses
    episodes = meta.episodes if episodes is None else int(episodes)
    rows = list(meta.row_responses) + list(rows_new)
    cols = list(meta.col_responses) + list(cols_new)
    old_r, old_c = meta.shape
    M = np.zeros((len(rows), len(cols)))
    M[:old_r, :old_c] = meta.payoff_matrix
    todo = [(r, c) for r in range(len(rows)) for c in range(len(cols)) if r >= old_r or c >= old_c]

    def work(rc):
        r, c = rc
        return _estimate_entry(game, rows[r], cols[c], meta.estimation, episodes, seed, r, c)

    if n_jobs and n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            values = list(pool.map(work, todo))
    else:
        values = [work(rc) for rc in todo]
    for (r, c), v in zip(todo, values):
        M[r, c] = v
    it = len(rows) - 1 if iteration is None else iteration
    return MetaGame(
        payoff_matrix=M,
        row_responses=rows,
        col_responses=cols,
        estimation=meta.estimation,
        episodes=episodes,
        row_iterations=list(meta.row_iterations) + [it] * len(rows_new),
        col_iterations=list(meta.col_iterations) + [it] * len(cols_new),
    )


def matrix_exploitability(A, x, y):
    """``max_r (A y)_r - min_c (x^T A)_c`` for a zero-sum matrix game."""
    A = np.asarray(A, dtype=float)
    return float((A @ y).max() - (x @ A).min())


def solve_zero_sum(A, steps=10_000, tol=None):
    """Approximate equilibrium of the zero-sum game ``A`` (row player maximises).

    Regret-matching self-play with positive-part regrets, alternating
    updates and linearly weighted averages.  Stops early once the
    exploitability of the averages drops below ``tol``.
    """
    A = np.asarray(A, dtype=float)
    n, m = A.shape
    Rx, Ry = np.zeros(n), np.zeros(m)
    Sx, Sy = np.zeros(n), np.zeros(m)
    y = np.full(m, 1.0 / m)
    for t in range(1, int(steps) + 1):
        x = regret_matching(Rx)
        ux = A @ y
        Rx = np.maximum(Rx + ux - x @ ux, 0.0)
        x = regret_matching(Rx)
        uy = -(x @ A)
        Ry = np.maximum(Ry + uy - y @ uy, 0.0)
        y = regret_matching(Ry)
        Sx += t * x
        Sy += t * y
        if tol is not None and t % 100 == 0:
            if matrix_exploitability(A, Sx / Sx.sum(), Sy / Sy.sum()) <= tol:
                break
    return Sx / Sx.sum(), Sy / Sy.sum()


def solve_zero_sum_batch(As, steps=10_000):
    """Vectorised :func:`solve_zero_sum` over a stack of equally sized games."""
    As = np.asarray(As, dtype=float)
    B, n, m = As.shape
    Rx, Ry = np.zeros((B, n)), np.zeros((B, m))
    Sx, Sy = np.zeros((B, n)), np.zeros((B, m))
    y = np.full((B, m), 1.0 / m)
    for t in range(1, int(steps) + 1):
        x = regret_matching(Rx)
        ux = np.einsum("bnm,bm->bn", As, y)
        Rx = np.maximum(Rx + ux - (x * ux).sum(1, keepdims=True), 0.0)
        x = regret_matching(Rx)
        uy = -np.einsum("bn,bnm->bm", x, As)
        Ry = np.maximum(Ry + uy - (y * uy).sum(1, keepdims=True), 0.0)
        y = regret_matching(Ry)
        Sx += t * x
        Sy += t * y
    return Sx / Sx.sum(1, keepdims=True), Sy / Sy.sum(1, keepdims=True)


def scheme_weights(scheme, k):
    """Explicit weights over ``k`` items for the uniform / linear / last schemes."""
    if k < 1:
        raise ContractError("weights need at least one item")
    if scheme == "uniform":
        return np.full(k, 1.0 / k)
    if scheme == "linear":
        w = np.arange(1, k + 1, dtype=float)
        return w / w.sum()
    if scheme == "last":
        w = np.zeros(k)
        w[-1] = 1.0
        return w
    raise ConfigurationError(f"unknown weighting scheme {scheme!r}")


def meta_solve(meta, solver="nash", steps=10_000):
    """Meta-strategy ``(row_weights, col_weights)`` for a meta-game.

    ``meta`` may be a :class:`MetaGame` or a bare payoff matrix.
    """
    A = meta.payoff_matrix if isinstance(meta, MetaGame) else np.asarray(meta, dtype=float)
    if A.size == 0:
        raise ContractError("meta-game is empty")
    if solver == "nash":
        delta = float(A.max() - A.min())
        return solve_zero_sum(A, steps=steps, tol=1e-4 * delta if delta > 0 else None)
    if solver in ("uniform", "linear", "last"):
        return scheme_weights(solver, A.shape[0]), scheme_weights(solver, A.shape[1])
    raise ConfigurationError(f"unknown meta-solver {solver!r}")


def fictitious_play_step(game, meta, seed=None):
    """Add each player's exact best response to the opponent's uniform mixture."""
    if len(meta.row_responses) == 0 or len(meta.col_responses) == 0:
        raise ContractError("fictitious play needs a nonempty meta-game")
    avg = average_population(game, meta, "uniform")
    br0, _ = best_response(game, avg, 0)
    br1, _ = best_response(game, avg, 1)
    return augment_meta_game(game, meta, ([br0], [br1]), seed=seed)


def average_population(game, meta, solver="uniform"):
    """Joint profile mixing each population by its meta-strategy."""
    wr, wc = meta_solve(meta, solver)
    rows = mixture_policy(game, meta.row_responses, np.stack([wr, wr]))
    cols = mixture_policy(game, meta.col_responses, np.stack([wc, wc]))
    return PolicyTable.combine(game, [rows, cols])


class FictitiousPlay(BaseEstimator):
    """Tabular fictitious play: exact best responses to uniform population mixtures.

    Starts from a population holding ``initial_policy`` (uniform by
    default).  ``policies_[t]`` is the averaged profile after ``t`` steps.
    """

    def __init__(self, iterations=100, estimation="exact", episodes=1000, initial_policy=None, random_state=None):
        self.iterations = iterations
        self.estimation = estimation
        self.episodes = episodes
        self.initial_policy = initial_policy
        self.random_state = random_state

    def fit(self, game, y=None):
        init = PolicyTable.uniform(game) if self.initial_policy is None else self.initial_policy
        meta = augment_meta_game(
            game,
            MetaGame(estimation=self.estimation, episodes=self.episodes),
            ([init], [init]),
            seed=self.random_state,
        )
        policies = [average_population(game, meta)]
        for _ in range(int(self.iterations)):
            meta = fictitious_play_step(game, meta, seed=self.random_state)
            policies.append(average_population(game, meta))
        self.meta_game_ = meta
        self.policies_ = policies
        self.game_ = game
        return self

    @property
    def average_policy_(self):
        check_is_fitted(self, "policies_")
        return self.policies_[-1]


def sampled_entry_stats(game, row, col, episodes, seed):
    """Mean and standard error of a sampled meta-game entry (antithetic pairs)."""
    rng = check_random_state(seed)
    x = sample_payoffs(game, PolicyTable.combine(game, [row, col]), episodes, rng, antithetic=True)
    half = len(x) // 2
    pairs = 0.5 * (x[:half] + x[half : 2 * half])
    return float(x.mean()), float(pairs.std(ddof=1) / np.sqrt(len(pairs)))
