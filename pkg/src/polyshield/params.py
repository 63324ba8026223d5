"""Secret parameter generation: naive random draws and strict unlinkable selection.

All randomness comes from an explicit ``numpy.random.Generator``; nothing here
touches a global RNG.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .transform import PolyParams, protect_values


class ParamCapacityError(ValueError):
    pass


class StrictSelectionError(RuntimeError):
    def __init__(self, retries, last_score):
        super().__init__(
            f"no parameter set satisfied the strict score range after {retries} retries "
            f"(last failing score {last_score:.6f})"
        )
        self.retries = retries
        self.last_score = last_score


@dataclass(frozen=True)
class ParamPolicy:
    m: int = 7
    o: int = 0
    coeff_range: tuple[int, int] = (-100, 100)
    selection: str = "naive"
    strict_score_range: tuple[float, float] = (-math.inf, math.inf)
    max_retries: int = 1000
    seed: int = 0
    unique_exponents: bool = True

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if not 0 <= self.o <= self.m - 1:
            raise ValueError(f"overlap must satisfy 0 <= o <= m-1 = {self.m - 1}")
        lo, hi = self.coeff_range
        if lo > hi:
            raise ValueError("coeff_range lower bound exceeds upper bound")
        if len(self.coefficient_pool()) < 2 * self.m:
            raise ValueError(
                f"coeff_range {self.coeff_range} holds fewer than 2m = {2 * self.m} non-zero integers"
            )
        if self.selection not in ("naive", "strict"):
            raise ValueError(f"selection must be 'naive' or 'strict', got {self.selection!r}")
        s_lo, s_hi = self.strict_score_range
        if not s_lo < s_hi or s_hi < -1 or s_lo > 1:
            raise ValueError(
                f"strict_score_range {self.strict_score_range} does not intersect the score range [-1, 1]"
            )
        if self.max_retries < 1:
            raise ValueError("max_retries must be >= 1")

    def coefficient_pool(self) -> np.ndarray:
        lo, hi = self.coeff_range
        pool = np.arange(lo, hi + 1)
        return pool[pool != 0]

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


def generate_naive(policy: ParamPolicy, rng: np.random.Generator) -> PolyParams:
    coeffs = rng.choice(policy.coefficient_pool(), size=policy.m, replace=False)
    exps = rng.permutation(policy.m) + 1
    return PolyParams(tuple(coeffs.tolist()), tuple(exps.tolist()), policy.o)


def _cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a * b).sum(axis=-1) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))


def generate_strict(policy: ParamPolicy, values, existing, rng: np.random.Generator) -> PolyParams:
    """Redraw naive parameters until every cross-template score lands in range.

    The score is the cosine similarity between the template of ``values``
    under the candidate and under each parameter set in ``existing``.
    """
    lo, hi = policy.strict_score_range
    existing = list(existing)
    if not existing:
        return generate_naive(policy, rng)
    values = np.asarray(values, dtype=np.float64)
    others = np.stack([protect_values(values, q.with_overlap(policy.o)) for q in existing])
    last = math.nan
    for _ in range(policy.max_retries):
        candidate = generate_naive(policy, rng)
        template = protect_values(values, candidate)
        scores = _cosine_rows(others, template[None, :])
        bad = (scores < lo) | (scores > hi)
        if not bad.any():
            return candidate
        last = float(scores[bad][0])
    raise StrictSelectionError(policy.max_retries, last)


def permutation_from_index(index: int, m: int) -> tuple[int, ...]:
    """Lexicographic unranking of a permutation of 1..m."""
    items = list(range(1, m + 1))
    out = []
    for pos in range(m, 0, -1):
        block = math.factorial(pos - 1)
        q, index = divmod(index, block)
        out.append(items.pop(q))
    return tuple(out)


def assign_params(subjects, policy: ParamPolicy, rng=None) -> dict[str, PolyParams]:
    """One secret per subject, drawn in sorted subject order.

    ``subjects`` is a Dataset or an iterable of subject ids.  With
    ``policy.unique_exponents`` the exponent permutations are sampled without
    replacement, which caps the number of subjects at ``m!``.
    """
    subject_ids = subjects.subjects() if hasattr(subjects, "subjects") else subjects
    subjects = sorted(subject_ids)
    rng = policy.rng() if rng is None else rng
    capacity = math.factorial(policy.m)
    if policy.unique_exponents and len(subjects) > capacity:
        raise ParamCapacityError(
            f"{len(subjects)} subjects exceed the {capacity} distinct exponent permutations for m={policy.m}"
        )
    out = {}
    if policy.unique_exponents:
        perm_ids = rng.choice(capacity, size=len(subjects), replace=False)
    for i, s in enumerate(subjects):
        params = generate_naive(policy, rng)
        if policy.unique_exponents:
            params = PolyParams(params.coefficients, permutation_from_index(int(perm_ids[i]), policy.m), policy.o)
        out[s] = params
    return out


def template_sets(subject_values: dict, policy: ParamPolicy, count: int, rng=None) -> dict[str, list[PolyParams]]:
    """``count`` parameter sets per subject, all applied to that subject's embedding.

    Used for unlinkability and record-multiplicity experiments.  Under the
    strict policy each new set is checked against every set already issued
    to the same subject.
    """
    rng = policy.rng() if rng is None else rng
    out = {}
    for s in sorted(subject_values):
        issued = []
        for _ in range(count):
            if policy.selection == "strict":
                issued.append(generate_strict(policy, subject_values[s], issued, rng))
            else:
                issued.append(generate_naive(policy, rng))
        out[s] = issued
    return out


# -- params store -----------------------------------------------------------------


def format_params_store(params: dict[str, PolyParams]) -> str:
    lines = []
    for s in sorted(params):
        p = params[s]
        lines.append(
            f"{s}\t{p.m}\t{p.o}\tC={','.join(map(str, p.coefficients))}\tE={','.join(map(str, p.exponents))}"
        )
    return "\n".join(lines) + "\n"


def parse_params_store(text: str) -> dict[str, PolyParams]:
    out = {}
    for row, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5 or not parts[3].startswith("C=") or not parts[4].startswith("E="):
            raise ValueError(f"params store row {row}: malformed record")
        subject, m, o, c, e = parts
        try:
            coeffs = tuple(int(x) for x in c[2:].split(","))
            exps = tuple(int(x) for x in e[2:].split(","))
            params = PolyParams(coeffs, exps, int(o))
        except ValueError as exc:
            raise ValueError(f"params store row {row}: {exc}") from None
        if params.m != int(m):
            raise ValueError(f"params store row {row}: m={m} but {params.m} coefficients")
        if subject in out:
            raise ValueError(f"params store row {row}: duplicate subject {subject!r}")
        out[subject] = params
    return out


def save_params_store(params: dict[str, PolyParams], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_params_store(params))


def load_params_store(path) -> dict[str, PolyParams]:
    with open(path, encoding="utf-8") as fh:
        return parse_params_store(fh.read())
