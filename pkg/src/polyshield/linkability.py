"""Global linkability D_sys from mated/non-mated cross-template score distributions.

Mated scores compare two protected templates of the same embedding made with
different secrets; non-mated scores compare templates of different subjects.
The local measure ``D(s)`` turns the likelihood ratio of the two score
densities into a value in [0, 1]; ``D_sys`` is its expectation over mated
scores.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import trapezoid
from scipy.stats import gaussian_kde

from .matching import _unit_rows
from .params import ParamPolicy, template_sets
from .transform import protect_values


@dataclass
class LinkabilityInput:
    mated_scores: np.ndarray
    non_mated_scores: np.ndarray
    templates_per_subject: int = 10

    def __post_init__(self):
        self.mated_scores = np.asarray(self.mated_scores, dtype=np.float64).ravel()
        self.non_mated_scores = np.asarray(self.non_mated_scores, dtype=np.float64).ravel()
        if self.templates_per_subject < 2:
            raise ValueError("templates_per_subject must be >= 2")
        if self.mated_scores.size == 0 or self.non_mated_scores.size == 0:
            raise ValueError("both mated and non-mated scores are required")
        if not (np.all(np.isfinite(self.mated_scores)) and np.all(np.isfinite(self.non_mated_scores))):
            raise ValueError("scores must be finite")


@dataclass
class LinkabilityResult:
    d_sys: float
    grid: np.ndarray
    local_curve: np.ndarray
    omega: float = 1.0
    method: str = "kde"
    counts: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.d_sys <= 1.0:
            raise AssertionError(f"D_sys {self.d_sys} outside [0, 1]")
        if np.any(self.local_curve < 0) or np.any(self.local_curve > 1):
            raise AssertionError("D(s) outside [0, 1]")

    def to_dict(self):
        return {
            "d_sys": self.d_sys,
            "omega": self.omega,
            "method": self.method,
            "counts": self.counts,
            "grid": [float(v) for v in self.grid],
            "D": [float(v) for v in self.local_curve],
        }


# -- score collection ------------------------------------------------------------------


def _pair_scores(templates: np.ndarray):
    """(mated, non-mated) cosine scores from a (S, t, k) template stack."""
    S, t, _ = templates.shape
    unit = _unit_rows(templates)
    iu = np.triu_indices(t, k=1)
    mated = np.concatenate([(unit[s] @ unit[s].T)[iu] for s in range(S)])
    flat = unit.reshape(S * t, -1)
    non = []
    for a in range(S - 1):
        block = unit[a] @ flat[(a + 1) * t:].T
        non.append(block.ravel())
    return np.clip(mated, -1, 1), np.clip(np.concatenate(non), -1, 1)


def collect_link_scores(dataset, params_policy: ParamPolicy, templates_per_subject: int = 10,
                        protector=protect_values, rng=None) -> LinkabilityInput:
    """Protect one embedding per subject ``templates_per_subject`` times and score all pairs.

    Yields ``C(t, 2)`` mated scores per subject and ``C(S, 2) * t**2``
    non-mated scores.
    """
    ids, refs = dataset.references()
    if len(ids) < 2:
        raise ValueError("linkability needs at least 2 subjects")
    sets = template_sets(dict(zip(ids, refs)), params_policy, templates_per_subject, rng)
    templates = np.stack([
        np.stack([protector(v, p) for p in sets[s]]) for s, v in zip(ids, refs)
    ])
    mated, non = _pair_scores(templates)
    return LinkabilityInput(mated, non, templates_per_subject)


def raw_link_scores(dataset) -> LinkabilityInput:
    """Unprotected reference point: raw samples of one subject are mated, of different subjects non-mated."""
    groups = dataset.by_subject()
    ids = sorted(groups)
    if len(ids) < 2:
        raise ValueError("linkability needs at least 2 subjects")
    counts = {len(groups[s]) for s in ids}
    if len(counts) != 1 or counts.pop() < 2:
        raise ValueError("every subject needs the same number (>= 2) of samples")
    templates = np.stack([np.stack([e.values for e in groups[s]]) for s in ids])
    mated, non = _pair_scores(templates)
    return LinkabilityInput(mated, non, templates.shape[1])


# -- D_sys -------------------------------------------------------------------------------


def _local_measure(pm, pn, omega):
    with np.errstate(all="ignore"):
        lr = np.where(pn > 0, pm / np.where(pn > 0, pn, 1.0), np.where(pm > 0, np.inf, 0.0))
        d = np.where(np.isinf(lr), 1.0, 2.0 * omega * lr / (1.0 + omega * lr) - 1.0)
    d = np.where(lr > 1.0, d, 0.0)
    return np.clip(d, 0.0, 1.0)


def _histogram_densities(mated, non, grid_size):
    lo = min(mated.min(), non.min())
    hi = max(mated.max(), non.max())
    if not _spread(np.array([lo, hi])):
        lo, hi = lo - 0.5, hi + 0.5
    bins = min(grid_size, max(10, int(np.sqrt(mated.size + non.size))))
    edges = np.linspace(lo, hi, bins + 1)
    pm, _ = np.histogram(mated, edges, density=True)
    pn, _ = np.histogram(non, edges, density=True)
    return (edges[:-1] + edges[1:]) / 2.0, pm, pn, edges[1] - edges[0]


def compute_d_sys(data: LinkabilityInput, bandwidth="silverman", omega: float = 1.0,
                  grid_size: int = 1000) -> LinkabilityResult:
    """D_sys with Gaussian kernel densities on a common grid.

    The grid spans the pooled score range widened by three bandwidths on both
    sides.  A side with fewer than two distinct scores has no usable kernel
    density; both densities are then taken from a shared histogram.
    """
    if omega <= 0:
        raise ValueError("omega must be > 0")
    mated, non = data.mated_scores, data.non_mated_scores
    counts = {"mated": int(mated.size), "non_mated": int(non.size)}
    if mated.size < 2 or non.size < 2 or not _spread(mated) or not _spread(non):
        return _histogram_result(mated, non, omega, grid_size, counts)
    kde_m = gaussian_kde(mated, bw_method=bandwidth)
    kde_n = gaussian_kde(non, bw_method=bandwidth)
    bw = max(np.sqrt(kde_m.covariance[0, 0]), np.sqrt(kde_n.covariance[0, 0]))
    lo = min(mated.min(), non.min()) - 3.0 * bw
    hi = max(mated.max(), non.max()) + 3.0 * bw
    grid = np.linspace(lo, hi, grid_size)
    pm = kde_m(grid)
    pn = kde_n(grid)
    mass = trapezoid(pm, grid)
    if not np.isfinite(mass) or mass <= 0:
        # a kernel narrower than the grid spacing
        return _histogram_result(mated, non, omega, grid_size, counts)
    d = _local_measure(pm, pn, omega)
    # normalise against the mass the grid captures
    d_sys = float(trapezoid(d * pm, grid) / mass)
    return LinkabilityResult(float(np.clip(d_sys, 0.0, 1.0)), grid, d, omega, "kde", counts)


def _spread(x) -> bool:
    """False for score lists that are constant up to round-off."""
    return bool(np.ptp(x) > 1e-9 * max(1.0, float(np.max(np.abs(x)))))


def _histogram_result(mated, non, omega, grid_size, counts):
    grid, pm, pn, width = _histogram_densities(mated, non, grid_size)
    d = _local_measure(pm, pn, omega)
    d_sys = float(np.clip(np.sum(d * pm) * width, 0.0, 1.0))
    return LinkabilityResult(d_sys, grid, d, omega, "histogram", counts)


# -- policy comparison --------------------------------------------------------------------


def calibrate_strict_range(dev, naive_policy: ParamPolicy, templates_per_subject: int = 10,
                           quantile: float = 95.0) -> tuple[float, float]:
    """Strict score range ``(-inf, q]`` with ``q`` a percentile of naive non-mated dev scores."""
    scores = collect_link_scores(dev, naive_policy, templates_per_subject)
    return (-np.inf, float(np.percentile(scores.non_mated_scores, quantile)))


def compare_policies(dataset, naive_policy: ParamPolicy, strict_policy: ParamPolicy,
                     templates_per_subject: int = 10, omega: float = 1.0) -> dict[str, LinkabilityResult]:
    """D_sys of the unprotected samples and of both parameter-selection policies."""
    if naive_policy.selection != "naive" or strict_policy.selection != "strict":
        raise ValueError("expected a naive and a strict policy")
    return {
        "baseline": compute_d_sys(raw_link_scores(dataset), omega=omega),
        "naive": compute_d_sys(collect_link_scores(dataset, naive_policy, templates_per_subject), omega=omega),
        "strict": compute_d_sys(collect_link_scores(dataset, strict_policy, templates_per_subject), omega=omega),
    }
