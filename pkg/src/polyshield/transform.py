"""PolyProtect: map an embedding to a protected template with secret polynomials.

Consecutive windows of ``m`` embedding elements are folded into one protected
element each::

    p_j = c_1 * w_1**e_1 + c_2 * w_2**e_2 + ... + c_m * w_m**e_m

where ``w`` is the j-th window.  Successive windows start ``m - o`` elements
apart (``o`` is the overlap) and the embedding is zero-padded on the right so
that the last window is complete.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np


@dataclass(frozen=True)
class PolyParams:
    """Subject-specific secret of the transform.

    ``coefficients`` are unique non-zero integers; ``exponents`` is a
    permutation of ``1..m``.  ``params_id`` defaults to a digest of the
    secret so two identical secrets always share an identifier.
    """

    coefficients: tuple[int, ...]
    exponents: tuple[int, ...]
    overlap: int = 0
    params_id: str = field(default="", compare=False)

    def __post_init__(self):
        coeffs = tuple(int(c) for c in self.coefficients)
        exps = tuple(int(e) for e in self.exponents)
        object.__setattr__(self, "coefficients", coeffs)
        object.__setattr__(self, "exponents", exps)
        m = len(coeffs)
        if m < 1:
            raise ValueError("PolyParams needs at least one coefficient")
        if len(exps) != m:
            raise ValueError(f"got {m} coefficients but {len(exps)} exponents")
        if any(c == 0 for c in coeffs):
            raise ValueError("coefficients must be non-zero")
        if len(set(coeffs)) != m:
            raise ValueError("coefficients must be pairwise unique")
        if sorted(exps) != list(range(1, m + 1)):
            raise ValueError(f"exponents must be a permutation of 1..{m}, got {exps}")
        if not 0 <= self.overlap <= m - 1:
            raise ValueError(f"overlap must satisfy 0 <= o <= m-1 = {m - 1}, got {self.overlap}")
        if not self.params_id:
            object.__setattr__(self, "params_id", _digest(coeffs, exps))

    @property
    def m(self) -> int:
        return len(self.coefficients)

    @property
    def o(self) -> int:
        return self.overlap

    def with_overlap(self, overlap: int) -> "PolyParams":
        """Same secret, different window overlap."""
        return replace(self, overlap=overlap)


@dataclass(frozen=True, eq=False)
class ProtectedTemplate:
    values: np.ndarray
    params_id: str
    source_dim: int

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError(
                f"protected template for params {self.params_id} has non-finite values"
            )

    @property
    def k(self) -> int:
        return int(self.values.shape[-1])


def _digest(coeffs, exps) -> str:
    text = ",".join(map(str, coeffs)) + "|" + ",".join(map(str, exps))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def protected_dim(n: int, m: int, o: int) -> int:
    """Number of windows needed to consume ``n`` elements: ceil((n-m)/(m-o)) + 1."""
    if m < 1 or n < m:
        raise ValueError(f"need n >= m >= 1, got n={n}, m={m}")
    if not 0 <= o <= m - 1:
        raise ValueError(f"need 0 <= o <= m-1, got o={o}, m={m}")
    stride = m - o
    return (n - m + stride - 1) // stride + 1


def integer_power(base, exp: int):
    """``base ** exp`` by binary exponentiation (scalars or arrays).

    Only multiplications are used, so negative bases keep an exact sign and
    the result does not depend on the platform ``pow``.
    """
    exp = int(exp)
    if exp < 1:
        raise ValueError(f"exponent must be >= 1, got {exp}")
    result = None
    square = base
    while True:
        if exp & 1:
            result = square if result is None else result * square
        exp >>= 1
        if not exp:
            return result
        square = square * square


def window_starts(n: int, m: int, o: int) -> np.ndarray:
    k = protected_dim(n, m, o)
    return np.arange(k) * (m - o)


def window_indices(n: int, m: int, o: int) -> np.ndarray:
    """(k, m) positions of every window; positions >= n fall in the zero padding."""
    return window_starts(n, m, o)[:, None] + np.arange(m)[None, :]


def _slot(idx: np.ndarray, i: int) -> slice:
    """Slot ``i`` of every window as a strided slice (same elements as ``idx[:, i]``)."""
    stride = int(idx[1, 0] - idx[0, 0]) if idx.shape[0] > 1 else 1
    start = int(idx[0, i])
    return slice(start, start + stride * (idx.shape[0] - 1) + 1, stride)


def _pad_windows(values: np.ndarray, idx: np.ndarray) -> np.ndarray:
    pad = int(idx[-1, -1]) + 1 - values.shape[-1]
    if pad <= 0:
        return values
    widths = [(0, 0)] * (values.ndim - 1) + [(0, pad)]
    return np.pad(values, widths)


def polynomial_windows(values: np.ndarray, coefficients, exponents, overlap: int) -> np.ndarray:
    """Apply the window polynomial along the last axis of ``values``.

    Unlike :func:`protect` this does not validate the exponents, so callers
    may evaluate degenerate polynomials (e.g. all exponents equal to one).
    """
    values = np.asarray(values, dtype=np.float64)
    idx = window_indices(values.shape[-1], len(coefficients), overlap)
    values = _pad_windows(values, idx)
    # fixed left-to-right accumulation keeps results bit-reproducible
    acc = np.zeros(values.shape[:-1] + (idx.shape[0],))
    for i, (c, e) in enumerate(zip(coefficients, exponents)):
        acc = acc + float(c) * integer_power(values[..., _slot(idx, i)], int(e))
    return acc


class PowerTable:
    """Element powers ``1..m`` of a stack of embeddings, shared by many secrets.

    ``table.protect(params)`` equals ``protect_values(values, params)`` bit for
    bit: every element power is computed by the same routine either way.
    """

    def __init__(self, values, m: int):
        values = np.asarray(values, dtype=np.float64)
        if values.shape[-1] < m:
            raise ValueError(f"embedding dimension {values.shape[-1]} is smaller than m={m}")
        if not np.all(np.isfinite(values)):
            raise ValueError("embedding contains non-finite values")
        self.n = values.shape[-1]
        self.m = m
        # stride <= m, so m - 1 zeros cover the padding of every overlap
        widths = [(0, 0)] * (values.ndim - 1) + [(0, m - 1)]
        padded = np.pad(values, widths)
        self.powers = {e: integer_power(padded, e) for e in range(1, m + 1)}

    def protect(self, params: "PolyParams") -> np.ndarray:
        if params.m != self.m:
            raise ValueError(f"table built for m={self.m}, params have m={params.m}")
        idx = window_indices(self.n, params.m, params.o)
        acc = np.zeros(self.powers[1].shape[:-1] + (idx.shape[0],))
        term = np.empty_like(acc)
        for i, (c, e) in enumerate(zip(params.coefficients, params.exponents)):
            np.multiply(self.powers[e][..., _slot(idx, i)], float(c), out=term)
            np.add(acc, term, out=acc)
        return acc


def protect_values(values: np.ndarray, params: PolyParams) -> np.ndarray:
    """Vectorised transform of one embedding or a stack of embeddings (rows)."""
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[-1]
    if n < params.m:
        raise ValueError(f"embedding dimension {n} is smaller than m={params.m}")
    if not np.all(np.isfinite(values)):
        raise ValueError("embedding contains non-finite values")
    return polynomial_windows(values, params.coefficients, params.exponents, params.overlap)


def protect(values, params: PolyParams) -> ProtectedTemplate:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1:
        raise ValueError("protect expects a single embedding; use protect_values for batches")
    out = protect_values(values, params)
    return ProtectedTemplate(values=out, params_id=params.params_id, source_dim=values.shape[0])


def format_template(template: ProtectedTemplate) -> str:
    header = f"k={template.k} params={template.params_id} source_dim={template.source_dim}"
    return header + "\n" + " ".join(repr(float(v)) for v in template.values) + "\n"


def parse_template(text: str) -> ProtectedTemplate:
    lines = text.splitlines()
    if len(lines) < 2:
        raise ValueError("protected template needs a header line and a values line")
    fields = {}
    for token in lines[0].split():
        key, sep, value = token.partition("=")
        if not sep:
            raise ValueError(f"malformed header token {token!r}")
        fields[key] = value
    try:
        k = int(fields["k"])
        source_dim = int(fields["source_dim"])
        params_id = fields["params"]
    except KeyError as exc:
        raise ValueError(f"header missing field {exc.args[0]!r}") from None
    values = np.array([float(v) for v in lines[1].split()])
    if values.shape[0] != k:
        raise ValueError(f"header says k={k} but found {values.shape[0]} values")
    return ProtectedTemplate(values=values, params_id=params_id, source_dim=source_dim)
