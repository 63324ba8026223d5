"""Full-disclosure inversion: recover an embedding from protected template(s).

The adversary knows every secret, so each protected element is a known
polynomial in the unknown embedding.  Stacking the equations of one or more
templates (record multiplicity) gives a least-squares problem that is solved
from an initial guess built from development data.
"""

from __future__ import annotations

import os
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .matching import compute_tmr_at_fmr, cosine_similarity, score_verification
from .params import ParamPolicy, generate_naive
from .solver import SolveResult, SolverConfig, levenberg_marquardt
from .transform import PolyParams, polynomial_windows, window_indices


class PolySystem:
    """Stacked residual ``R(x) = protect(x) - p`` over several templates, with its Jacobian."""

    def __init__(self, targets, params_list, n: int):
        params_list = list(params_list)
        targets = [np.asarray(t, dtype=np.float64) for t in targets]
        if len(targets) != len(params_list):
            raise ValueError(f"{len(targets)} templates but {len(params_list)} parameter sets")
        if not targets:
            raise ValueError("need at least one protected template")
        self.n = int(n)
        self.params_list = params_list
        self.targets = targets
        self._blocks = []
        offset = 0
        for t, p in zip(targets, params_list):
            if self.n < p.m:
                raise ValueError(f"source dimension {self.n} is smaller than m={p.m}")
            idx = window_indices(self.n, p.m, p.o)
            if t.shape != (idx.shape[0],):
                raise ValueError(
                    f"template has {t.shape[0]} values but n={self.n}, m={p.m}, o={p.o} gives k={idx.shape[0]}"
                )
            self._blocks.append((offset, idx, p))
            offset += idx.shape[0]
        self.size = offset
        # flat (row, column, c*e, e-1) entries of the Jacobian, fixed by the secrets
        rows, cols, scale, power = [], [], [], []
        for offset, idx, p in self._blocks:
            r = offset + np.repeat(np.arange(idx.shape[0]), p.m)
            c = idx.ravel()
            ce = np.tile([float(ci * ei) for ci, ei in zip(p.coefficients, p.exponents)], idx.shape[0])
            pw = np.tile([ei - 1 for ei in p.exponents], idx.shape[0])
            keep = c < self.n
            rows.append(r[keep]); cols.append(c[keep]); scale.append(ce[keep]); power.append(pw[keep])
        self._rows = np.concatenate(rows)
        self._cols = np.concatenate(cols)
        self._scale = np.concatenate(scale)
        self._power = np.concatenate(power)

    @classmethod
    def from_templates(cls, templates, params_list) -> "PolySystem":
        templates = list(templates)
        if not templates:
            raise ValueError("need at least one protected template")
        dims = {t.source_dim for t in templates}
        if len(dims) != 1:
            raise ValueError(f"templates disagree on source_dim: {sorted(dims)}")
        params_list = list(params_list)
        for t, p in zip(templates, params_list):
            if t.params_id != p.params_id:
                raise ValueError(f"template params {t.params_id} does not match parameters {p.params_id}")
        return cls([t.values for t in templates], params_list, dims.pop())

    def residual(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.n,):
            raise ValueError(f"expected a vector of length {self.n}, got shape {x.shape}")
        parts = [
            polynomial_windows(x, p.coefficients, p.exponents, p.o) - t
            for t, p in zip(self.targets, self.params_list)
        ]
        return np.concatenate(parts)

    __call__ = residual

    def jacobian(self, x) -> np.ndarray:
        """d p_j / d x_l = c_i * e_i * x_l**(e_i - 1) where x_l is the i-th window slot."""
        x = np.asarray(x, dtype=np.float64)
        J = np.zeros((self.size, self.n))
        # a position occurs at most once per window, so plain assignment suffices
        J[self._rows, self._cols] = self._scale * np.power(x[self._cols], self._power)
        return J


def assemble_system(p_templates, params_list) -> PolySystem:
    return PolySystem.from_templates(p_templates, params_list)


def solve_least_squares(system: PolySystem, x0, config: SolverConfig = SolverConfig()) -> SolveResult:
    x0 = np.asarray(x0, dtype=np.float64)
    if not np.all(np.isfinite(x0)):
        raise ValueError("initial guess must be finite")
    return levenberg_marquardt(system.residual, system.jacobian, x0, config)


# -- attacks ------------------------------------------------------------------------


@dataclass
class AttackConfig:
    initial_guess: np.ndarray
    match_thresholds: list = field(default_factory=list)
    solver: SolverConfig = SolverConfig()
    arm_p: int = 1
    guess_source: str = "mean"

    def __post_init__(self):
        self.initial_guess = np.asarray(self.initial_guess, dtype=np.float64)
        if self.arm_p < 1:
            raise ValueError("arm_p must be >= 1")
        if not np.all(np.isfinite(self.initial_guess)):
            raise ValueError("initial guess must be finite")
        self.match_thresholds = [(str(label), float(thr)) for label, thr in self.match_thresholds]

    @classmethod
    def from_dev(cls, dev, match_thresholds, guess="mean", seed=0, **kwargs) -> "AttackConfig":
        """Build the initial guess from development embeddings.

        ``guess`` is ``mean`` or ``median`` (per dimension), or ``sample`` for a
        per-dimension normal draw matching the dev mean and spread.
        """
        X = dev.matrix()
        if X.shape[0] == 0:
            raise ValueError("development set is empty")
        if guess == "mean":
            x0 = X.mean(axis=0)
        elif guess == "median":
            x0 = np.median(X, axis=0)
        elif guess == "sample":
            rng = np.random.default_rng(seed)
            x0 = X.mean(axis=0) + X.std(axis=0) * rng.standard_normal(X.shape[1])
        else:
            raise ValueError(f"unknown guess source {guess!r}")
        return cls(initial_guess=x0, match_thresholds=match_thresholds, guess_source=guess, **kwargs)


def fmr_label(level: float) -> str:
    return f"fmr{level:g}"


def baseline_thresholds(dev, fmr_levels=(0.01, 0.1)) -> list[tuple[str, float]]:
    """Unprotected-system thresholds at each FMR level (percent), strictest first."""
    scores = score_verification(dev, None, "baseline")
    points = compute_tmr_at_fmr(scores, sorted(fmr_levels))
    return [(fmr_label(level), points[level].threshold) for level in sorted(fmr_levels)]


@dataclass
class AttackOutcome:
    subject: str
    converged: bool
    residual_norm: float
    iterations: int
    similarity: float | None = None
    reconstructed: np.ndarray | None = None
    match_flags: dict = field(default_factory=dict)
    wall_time_ms: float = 0.0

    def __post_init__(self):
        if self.match_flags and not self.converged:
            raise ValueError("match flags are only defined for converged reconstructions")


def _thread_count() -> int:
    raw = os.environ.get("POLYSHIELD_THREADS", "")
    try:
        return max(1, int(raw)) if raw else 1
    except ValueError:
        return 1


def _attack_one(subject, values, params_list, config: AttackConfig) -> AttackOutcome:
    start = time.perf_counter()
    targets = [polynomial_windows(values, p.coefficients, p.exponents, p.o) for p in params_list]
    system = PolySystem(targets, params_list, values.shape[0])
    result = solve_least_squares(system, config.initial_guess, config.solver)
    outcome = AttackOutcome(subject, result.converged, result.residual_norm, result.iterations)
    if result.converged:
        outcome.reconstructed = result.x
        outcome.similarity = cosine_similarity(result.x, values) if np.any(result.x) else -1.0
        outcome.match_flags = {label: outcome.similarity >= thr for label, thr in config.match_thresholds}
    outcome.wall_time_ms = 1000.0 * (time.perf_counter() - start)
    return outcome


def isr_from_outcomes(outcomes, thresholds) -> dict[str, float]:
    """ISR (percent) per label: converged and matched over all targets."""
    outcomes = list(outcomes)
    if not outcomes:
        raise ValueError("no attack outcomes")
    isr = {
        label: 100.0 * sum(o.converged and o.match_flags[label] for o in outcomes) / len(outcomes)
        for label, _ in thresholds
    }
    # stricter (higher) threshold can never succeed more often
    ordered = sorted(thresholds, key=lambda lt: lt[1])
    for (loose, _), (strict, _) in zip(ordered, ordered[1:]):
        if isr[strict] > isr[loose]:
            raise AssertionError(f"ISR at {strict} exceeds ISR at {loose}")
    if any(not 0.0 <= v <= 100.0 for v in isr.values()):
        raise AssertionError("ISR outside [0, 100]")
    return isr


def solution_rate(outcomes) -> float:
    outcomes = list(outcomes)
    return 100.0 * sum(o.converged for o in outcomes) / len(outcomes)


def _run(jobs, config):
    workers = min(_thread_count(), max(1, len(jobs)))
    if workers == 1:
        return [_attack_one(*job, config) for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda job: _attack_one(*job, config), jobs))


def _targets(eval_set):
    if len(eval_set) == 0:
        raise ValueError("empty evaluation set")
    return eval_set.references()


def run_inversion_attack(eval_set, params: dict[str, PolyParams], config: AttackConfig, baseline_thresholds=None):
    """Attack each eval subject's protected reference; returns (ISR per label, outcomes)."""
    if baseline_thresholds is not None:
        config = AttackConfig(config.initial_guess, baseline_thresholds, config.solver, config.arm_p, config.guess_source)
    ids, refs = _targets(eval_set)
    jobs = [(s, v, [params[s]]) for s, v in zip(ids, refs)]
    outcomes = _run(jobs, config)
    return isr_from_outcomes(outcomes, config.match_thresholds), outcomes


class ArmParamsFactory:
    """Deterministic per-subject parameter sets for record-multiplicity attacks.

    The sets for ``p`` are the first ``p`` of a fixed per-subject sequence, so
    a larger ``p`` always adds templates to those of a smaller one.
    """

    def __init__(self, policy: ParamPolicy, max_p: int = 5):
        self.policy = policy
        self.max_p = max_p
        self._cache = {}

    def __call__(self, subject: str, p: int) -> list[PolyParams]:
        if not 1 <= p <= self.max_p:
            raise ValueError(f"p must lie in [1, {self.max_p}]")
        if subject not in self._cache:
            rng = np.random.default_rng([self.policy.seed, zlib.crc32(subject.encode())])
            self._cache[subject] = [generate_naive(self.policy, rng) for _ in range(self.max_p)]
        return self._cache[subject][:p]


def run_arm_attack(eval_set, params_factory, config: AttackConfig, ps=None):
    """ISR curve over the number of combined templates.

    ``params_factory(subject, p)`` returns ``p`` parameter sets for that
    subject.  Returns ``{p: (isr, outcomes)}`` for ``p`` in ``ps`` (default
    ``1..config.arm_p``).
    """
    ids, refs = _targets(eval_set)
    ps = range(1, config.arm_p + 1) if ps is None else ps
    out = {}
    for p in ps:
        if p < 1:
            raise ValueError("p must be >= 1")
        jobs = [(s, v, list(params_factory(s, p))) for s, v in zip(ids, refs)]
        outcomes = _run(jobs, config)
        out[p] = (isr_from_outcomes(outcomes, config.match_thresholds), outcomes)
    return out
