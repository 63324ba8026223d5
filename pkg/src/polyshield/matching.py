"""Comparison, verification/identification protocols and accuracy metrics.

Scores are cosine *similarities* throughout (higher = more alike); a cosine
distance ``d`` corresponds to the similarity ``1 - d``.  Rates are percents.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .transform import PolyParams, PowerTable, ProtectedTemplate, protect_values

SCENARIOS = ("baseline", "N", "SCE")


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cosine similarity is undefined for a zero vector")
    return x / norms


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All-pairs cosine similarity between the rows of ``a`` and ``b``."""
    return np.clip(_unit_rows(a) @ _unit_rows(b).T, -1.0, 1.0)


def cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarity of two equally shaped stacks."""
    return np.clip((_unit_rows(a) * _unit_rows(b)).sum(axis=-1), -1.0, 1.0)


@dataclass
class ScoreSet:
    mated: np.ndarray
    non_mated: np.ndarray
    scenario: str = "baseline"

    def __post_init__(self):
        self.mated = np.asarray(self.mated, dtype=np.float64).ravel()
        self.non_mated = np.asarray(self.non_mated, dtype=np.float64).ravel()
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if not (np.all(np.isfinite(self.mated)) and np.all(np.isfinite(self.non_mated))):
            raise ValueError("scores must be finite")

    def check_nonempty(self):
        if self.mated.size == 0 or self.non_mated.size == 0:
            raise ValueError("both mated and non-mated scores are required")


# -- verification --------------------------------------------------------------------


def _stack_protect(rows: np.ndarray, params: list[PolyParams]) -> np.ndarray:
    return np.stack([protect_values(r, p) for r, p in zip(rows, params)])


def _sce_scores(queries: np.ndarray, ref_t: np.ndarray, plist, block: int = 128) -> np.ndarray:
    """scores[t, i]: target t's protected reference vs query i under t's secret."""
    ref_unit = _unit_rows(ref_t)
    scores = np.empty((len(plist), queries.shape[0]))
    # query blocks keep the per-target work in cache
    for b in range(0, queries.shape[0], block):
        table = PowerTable(queries[b:b + block], plist[0].m)
        for t, p in enumerate(plist):
            probe = table.protect(p)
            norms = np.sqrt(np.einsum("ij,ij->i", probe, probe))
            if np.any(norms == 0):
                raise ValueError("cosine similarity is undefined for a zero vector")
            scores[t, b:b + block] = (probe @ ref_unit[t]) / norms
    return np.clip(scores, -1.0, 1.0)


def score_verification(dataset, params: dict[str, PolyParams] | None, scenario: str, overlap: int | None = None) -> ScoreSet:
    """Mated and non-mated scores for one-reference/one-query subjects.

    Every ordered pair (claimed target t, query subject i) is scored against
    t's reference.  ``N``: the query is protected with the querying subject's
    own secret.  ``SCE``: impostor queries are protected with the target's
    stolen secret.  ``overlap`` overrides the overlap stored in ``params``.
    """
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}")
    ids, refs, queries = dataset.reference_query()
    if len(ids) < 2:
        raise ValueError("verification needs at least 2 subjects")
    if scenario == "baseline":
        scores = cosine_matrix(refs, queries)
    else:
        if params is None:
            raise ValueError(f"scenario {scenario} needs subject parameters")
        missing = [s for s in ids if s not in params]
        if missing:
            raise KeyError(f"no parameters for subjects {missing[:5]}")
        plist = [params[s] if overlap is None else params[s].with_overlap(overlap) for s in ids]
        ref_t = _stack_protect(refs, plist)
        if scenario == "N":
            scores = cosine_matrix(ref_t, _stack_protect(queries, plist))
        else:
            scores = _sce_scores(queries, ref_t, plist)
    mask = ~np.eye(len(ids), dtype=bool)
    return ScoreSet(np.diag(scores).copy(), scores[mask], scenario)


# -- metrics ----------------------------------------------------------------------------


def _rates(scores: ScoreSet, thresholds: np.ndarray):
    """(FMR, FNMR) in [0, 1] when accepting scores >= threshold."""
    mated = np.sort(scores.mated)
    non = np.sort(scores.non_mated)
    fnmr = np.searchsorted(mated, thresholds, side="left") / mated.size
    fmr = 1.0 - np.searchsorted(non, thresholds, side="left") / non.size
    return fmr, fnmr


def compute_eer(scores: ScoreSet) -> tuple[float, float]:
    """Equal error rate (percent) and its threshold from a sweep over observed scores."""
    scores.check_nonempty()
    thresholds = np.unique(np.concatenate([scores.mated, scores.non_mated]))
    fmr, fnmr = _rates(scores, thresholds)
    i = int(np.argmin(np.abs(fmr - fnmr)))
    return float(100.0 * (fmr[i] + fnmr[i]) / 2.0), float(thresholds[i])


class OperatingPoint(NamedTuple):
    tmr: float
    threshold: float
    reliable: bool


def compute_tmr_at_fmr(scores: ScoreSet, fmr_levels) -> dict[float, OperatingPoint]:
    """TMR (percent) at each FMR level (percent).

    The threshold is the smallest observed score whose empirical FMR does not
    exceed the level.  A level is flagged unreliable when there are fewer than
    ``100 / level`` non-mated scores.
    """
    scores.check_nonempty()
    pooled = np.unique(np.concatenate([scores.mated, scores.non_mated]))
    candidates = np.append(pooled, np.inf)
    fmr, _ = _rates(scores, candidates)
    out = {}
    for level in fmr_levels:
        ok = np.nonzero(fmr * 100.0 <= level + 1e-12)[0]
        thr = float(candidates[ok[0]])
        tmr = 100.0 * float(np.mean(scores.mated >= thr))
        reliable = scores.non_mated.size * level / 100.0 >= 1.0 - 1e-9
        out[level] = OperatingPoint(tmr, thr, bool(reliable))
    return out


# -- identification ----------------------------------------------------------------------


def identify(query, gallery, params_store: dict[str, PolyParams]) -> list[tuple[str, float]]:
    """Rank enrolled subjects for one query.

    The query is protected once per enrolled secret and compared with that
    subject's protected reference.  Ties rank by ascending subject id.
    """
    gallery = list(gallery)
    if not gallery:
        raise ValueError("empty gallery")
    query = np.asarray(query, dtype=np.float64)
    ranked = []
    for subject, template in gallery:
        if subject not in params_store:
            raise KeyError(f"no parameters for enrolled subject {subject!r}")
        values = template.values if isinstance(template, ProtectedTemplate) else np.asarray(template)
        probe = protect_values(query, params_store[subject])
        ranked.append((subject, cosine_similarity(probe, values)))
    ranked.sort(key=lambda item: (-item[1], item[0]))
    return ranked


def identification_scores(dataset, params: dict[str, PolyParams] | None, overlap: int | None = None):
    """(subject_ids, scores[query, enrolled]) for the whole closed-set search.

    ``params=None`` runs the unprotected baseline.  References are enrolled,
    the second sample of each subject is the query.
    """
    ids, refs, queries = dataset.reference_query()
    if params is None:
        return ids, cosine_matrix(queries, refs)
    plist = [params[s] if overlap is None else params[s].with_overlap(overlap) for s in ids]
    # every query under every enrolled secret is the stolen-secret score matrix, transposed
    return ids, _sce_scores(queries, _stack_protect(refs, plist), plist).T


def rank_gallery(ids, scores: np.ndarray) -> list[list[tuple[str, float]]]:
    order = sorted(range(len(ids)), key=lambda j: ids[j])
    out = []
    for row in scores:
        # stable sort on -score after sorting by id breaks ties by id
        idx = sorted(order, key=lambda j: -row[j])
        out.append([(ids[j], float(row[j])) for j in idx])
    return out


def compute_tpir(rankings, truths, ranks) -> dict[int, float]:
    """TPIR-n (percent): share of queries whose true subject is within the top n."""
    rankings = list(rankings)
    truths = list(truths)
    if len(rankings) != len(truths) or not rankings:
        raise ValueError("need one ground-truth subject per ranking")
    positions = []
    for ranking, truth in zip(rankings, truths):
        subjects = [s for s, _ in ranking]
        if truth not in subjects:
            raise ValueError(f"true subject {truth!r} not enrolled (closed-set protocol)")
        positions.append(subjects.index(truth) + 1)
    gallery = min(len(r) for r in rankings)
    out = {}
    for n in ranks:
        if n > gallery:
            raise ValueError(f"rank {n} exceeds gallery size {gallery}")
        out[n] = 100.0 * float(np.mean(np.asarray(positions) <= n))
    return out


# -- reports ---------------------------------------------------------------------------------


@dataclass
class EvaluationReport:
    scenario: str
    overlap: int | None
    tmr_at_fmr: dict = field(default_factory=dict)
    eer: float | None = None
    eer_threshold: float | None = None
    tpir: dict = field(default_factory=dict)

    def rows(self):
        """Long-format rows (scenario, o, metric, level, value)."""
        o = "" if self.overlap is None else self.overlap
        out = []
        for level, point in self.tmr_at_fmr.items():
            out.append((self.scenario, o, "TMR@FMR", level, point.tmr))
            out.append((self.scenario, o, "threshold@FMR", level, point.threshold))
        if self.eer is not None:
            out.append((self.scenario, o, "EER", "", self.eer))
            out.append((self.scenario, o, "EER_threshold", "", self.eer_threshold))
        for n, v in self.tpir.items():
            out.append((self.scenario, o, "TPIR", n, v))
        return out

    def to_dict(self):
        return {
            "scenario": self.scenario,
            "o": self.overlap,
            "tmr_at_fmr": {
                str(k): {"tmr": p.tmr, "threshold": p.threshold, "reliable": p.reliable}
                for k, p in self.tmr_at_fmr.items()
            },
            "eer": self.eer,
            "eer_threshold": self.eer_threshold,
            "tpir": {str(k): v for k, v in self.tpir.items()},
        }


def evaluate_verification(dataset, params, scenario, overlap=None, fmr_levels=(0.01, 0.1)) -> EvaluationReport:
    scores = score_verification(dataset, params, scenario, overlap)
    eer, thr = compute_eer(scores)
    report = EvaluationReport(
        scenario, None if scenario == "baseline" else overlap,
        tmr_at_fmr=compute_tmr_at_fmr(scores, fmr_levels), eer=eer, eer_threshold=thr,
    )
    _check_report(report)
    return report


def evaluate_identification(dataset, params, overlap=None, ranks=(1, 3, 10)) -> EvaluationReport:
    ids, scores = identification_scores(dataset, params, overlap)
    ranks = [n for n in ranks if n <= len(ids)]
    tpir = compute_tpir(rank_gallery(ids, scores), ids, ranks)
    report = EvaluationReport("baseline" if params is None else "N", None if params is None else overlap, tpir=tpir)
    _check_report(report)
    return report


def _check_report(report: EvaluationReport):
    values = [p.tmr for p in report.tmr_at_fmr.values()] + list(report.tpir.values())
    if report.eer is not None:
        values.append(report.eer)
    if any(not 0.0 <= v <= 100.0 for v in values):
        raise AssertionError(f"rate outside [0, 100] in {report}")
    tpir = [report.tpir[n] for n in sorted(report.tpir)]
    if any(b < a for a, b in zip(tpir, tpir[1:])):
        raise AssertionError("TPIR must be non-decreasing in n")
    tmr = [report.tmr_at_fmr[f].tmr for f in sorted(report.tmr_at_fmr)]
    if any(b < a for a, b in zip(tmr, tmr[1:])):
        raise AssertionError("TMR must be non-decreasing in FMR")
