"""Embedding datasets: text/binary ingestion, synthetic generation, subject splits."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class EmbeddingFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Embedding:
    subject_id: str
    sample_id: str
    values: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, Embedding):
            return NotImplemented
        return (
            self.subject_id == other.subject_id
            and self.sample_id == other.sample_id
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None


class Dataset:
    """An ordered collection of equal-length embeddings.

    Embeddings are kept as given (no re-normalisation): the transform is
    norm-sensitive and must see the data of the feature extractor.
    """

    def __init__(self, embeddings, dim=None, split_tag="all"):
        embeddings = list(embeddings)
        if split_tag not in ("dev", "eval", "all"):
            raise ValueError(f"unknown split tag {split_tag!r}")
        if dim is None:
            if not embeddings:
                raise ValueError("cannot infer dim of an empty dataset")
            dim = embeddings[0].values.shape[0]
        if dim < 1:
            raise ValueError("dim must be >= 1")
        seen = set()
        for e in embeddings:
            if e.values.shape != (dim,):
                raise ValueError(
                    f"embedding {e.subject_id}/{e.sample_id} has shape {e.values.shape}, expected ({dim},)"
                )
            if not np.all(np.isfinite(e.values)):
                raise ValueError(f"embedding {e.subject_id}/{e.sample_id} has non-finite values")
            key = (e.subject_id, e.sample_id)
            if key in seen:
                raise ValueError(f"duplicate subject/sample pair {key}")
            seen.add(key)
        self.embeddings = embeddings
        self.dim = int(dim)
        self.split_tag = split_tag

    def __len__(self):
        return len(self.embeddings)

    def __iter__(self):
        return iter(self.embeddings)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.dim == other.dim
            and self.split_tag == other.split_tag
            and self.embeddings == other.embeddings
        )

    def __repr__(self):
        return (
            f"Dataset({len(self.embeddings)} embeddings, {len(self.subjects())} subjects, "
            f"dim={self.dim}, split={self.split_tag})"
        )

    def matrix(self) -> np.ndarray:
        return np.stack([e.values for e in self.embeddings]) if self.embeddings else np.zeros((0, self.dim))

    def subjects(self) -> list[str]:
        """Subject ids in order of first appearance."""
        return list(dict.fromkeys(e.subject_id for e in self.embeddings))

    def by_subject(self) -> dict[str, list[Embedding]]:
        groups = defaultdict(list)
        for e in self.embeddings:
            groups[e.subject_id].append(e)
        return {s: sorted(g, key=lambda e: e.sample_id) for s, g in groups.items()}

    def subset(self, subjects, split_tag=None) -> "Dataset":
        keep = set(subjects)
        return Dataset(
            [e for e in self.embeddings if e.subject_id in keep],
            dim=self.dim,
            split_tag=split_tag or self.split_tag,
        )

    def reference_query(self):
        """Per-subject (reference, query) arrays for two-sample protocols.

        Returns ``(subject_ids, references, queries)`` with subjects sorted by
        id; the sample with the smaller sample_id is the reference.
        """
        groups = self.by_subject()
        ids = sorted(groups)
        refs, queries = [], []
        for s in ids:
            samples = groups[s]
            if len(samples) != 2:
                raise ValueError(
                    f"subject {s!r} has {len(samples)} samples; exactly one reference and one query are required"
                )
            refs.append(samples[0].values)
            queries.append(samples[1].values)
        if not ids:
            return ids, np.zeros((0, self.dim)), np.zeros((0, self.dim))
        return ids, np.stack(refs), np.stack(queries)

    def references(self):
        """(subject_ids, first sample of each subject), subjects sorted by id."""
        groups = self.by_subject()
        ids = sorted(groups)
        return ids, np.stack([groups[s][0].values for s in ids])


# -- files ---------------------------------------------------------------------


def _parse_header(line: str) -> int:
    key, sep, value = line.strip().partition("=")
    if key != "dim" or not sep:
        raise EmbeddingFormatError(f"header: malformed {line.strip()!r}, expected 'dim=<n>'")
    try:
        dim = int(value)
    except ValueError:
        raise EmbeddingFormatError(f"header: dim is not an integer: {value!r}") from None
    if dim < 1:
        raise EmbeddingFormatError(f"header: dim must be >= 1, got {dim}")
    return dim


def load_embeddings(path, format="text") -> Dataset:
    """Read an embedding file.

    Text format: a ``dim=<n>`` header followed by one
    ``subject<TAB>sample<TAB>v1 v2 ... vn`` line per embedding.  Errors carry
    the 1-based number of the offending data row (the header is not counted).
    """
    path = Path(path)
    if format == "binary":
        return _load_binary(path)
    if format != "text":
        raise ValueError(f"unknown embedding format {format!r}")
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if not lines or not lines[0].strip():
        raise EmbeddingFormatError("header: missing dim=<n> line")
    dim = _parse_header(lines[0])
    embeddings = []
    row = 0
    for line in lines[1:]:
        if not line.strip():
            continue
        row += 1
        parts = line.split("\t")
        if len(parts) != 3:
            raise EmbeddingFormatError(f"row {row}: expected 3 tab-separated fields, got {len(parts)}")
        subject, sample, raw = parts
        tokens = raw.split()
        if len(tokens) != dim:
            raise EmbeddingFormatError(f"row {row}: expected {dim} values, got {len(tokens)}")
        try:
            values = np.array([float(t) for t in tokens])
        except ValueError as exc:
            raise EmbeddingFormatError(f"row {row}: {exc}") from None
        if not np.all(np.isfinite(values)):
            raise EmbeddingFormatError(f"row {row}: non-finite value")
        embeddings.append(Embedding(subject, sample, values))
    try:
        return Dataset(embeddings, dim=dim)
    except ValueError as exc:
        raise EmbeddingFormatError(str(exc)) from None


def save_embeddings(dataset: Dataset, path, format="text") -> None:
    path = Path(path)
    if format == "binary":
        _save_binary(dataset, path)
        return
    if format != "text":
        raise ValueError(f"unknown embedding format {format!r}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_embeddings(dataset))


def format_embeddings(dataset: Dataset) -> str:
    # repr() is the shortest string that round-trips the double exactly
    lines = [f"dim={dataset.dim}"]
    for e in dataset:
        if "\t" in e.subject_id or "\t" in e.sample_id:
            raise ValueError("ids must not contain tab characters")
        lines.append(f"{e.subject_id}\t{e.sample_id}\t" + " ".join(repr(float(v)) for v in e.values))
    return "\n".join(lines) + "\n"


def _save_binary(dataset: Dataset, path: Path) -> None:
    with open(path, "wb") as fh:
        np.savez(
            fh,
            subject_ids=np.array([e.subject_id for e in dataset], dtype=str),
            sample_ids=np.array([e.sample_id for e in dataset], dtype=str),
            values=dataset.matrix(),
        )


def _load_binary(path: Path) -> Dataset:
    with np.load(path, allow_pickle=False) as data:
        values = data["values"]
        if values.ndim != 2:
            raise EmbeddingFormatError("binary file: values must be a 2-d array")
        bad = np.where(~np.all(np.isfinite(values), axis=1))[0]
        if bad.size:
            raise EmbeddingFormatError(f"row {int(bad[0]) + 1}: non-finite value")
        embeddings = [
            Embedding(str(s), str(t), values[i].astype(np.float64))
            for i, (s, t) in enumerate(zip(data["subject_ids"], data["sample_ids"]))
        ]
    return Dataset(embeddings, dim=values.shape[1])


# -- synthetic data -------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic embedding generator.

    ``identity_rank`` confines identity centres to a random subspace of that
    rank before normalisation (``None`` = isotropic in the full space).  Real
    face embeddings are far from isotropic; a low rank reproduces the
    correlated impostor scores they exhibit.
    """

    n_subjects: int
    dim: int
    intra_class_noise: float = 0.0
    seed: int = 0
    samples_per_subject: int = 2
    identity_rank: int | None = None
    mean_offset: float = 0.0
    scale: float = 1.0


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Unit-norm identity centres plus Gaussian per-sample noise, renormalised."""
    if spec.dim < 1:
        raise ValueError("dim must be >= 1")
    if spec.n_subjects < 2:
        raise ValueError("need at least 2 subjects")
    if spec.intra_class_noise < 0:
        raise ValueError("intra_class_noise must be >= 0")
    if spec.samples_per_subject < 1:
        raise ValueError("samples_per_subject must be >= 1")
    rng = np.random.default_rng(spec.seed)
    if spec.identity_rank is None:
        centers = rng.standard_normal((spec.n_subjects, spec.dim))
    else:
        if not 1 <= spec.identity_rank <= spec.dim:
            raise ValueError("identity_rank must lie in [1, dim]")
        basis = rng.standard_normal((spec.identity_rank, spec.dim))
        centers = rng.standard_normal((spec.n_subjects, spec.identity_rank)) @ basis
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    if spec.mean_offset:
        # separate stream so the offset leaves the other draws untouched
        direction = np.random.default_rng([spec.seed, 1]).standard_normal(spec.dim)
        centers += spec.mean_offset * direction / np.linalg.norm(direction)
        centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    width = len(str(spec.n_subjects - 1))
    embeddings = []
    for i, center in enumerate(centers):
        for j in range(spec.samples_per_subject):
            sample = center + spec.intra_class_noise * rng.standard_normal(spec.dim)
            sample = spec.scale * sample / np.linalg.norm(sample)
            embeddings.append(Embedding(f"s{i:0{width}d}", f"{j}", sample))
    return Dataset(embeddings, dim=spec.dim)


def split(dataset: Dataset, fraction: float = 0.5, seed: int = 0):
    """Split by subject into (dev, eval); ``fraction`` goes to dev."""
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    subjects = sorted(dataset.subjects())
    if len(subjects) < 2:
        raise ValueError("need at least 2 subjects to split")
    n_dev = int(round(fraction * len(subjects)))
    if n_dev == 0 or n_dev == len(subjects):
        raise ValueError(
            f"fraction {fraction} leaves one side empty for {len(subjects)} subjects"
        )
    order = np.random.default_rng(seed).permutation(len(subjects))
    dev_subjects = [subjects[i] for i in order[:n_dev]]
    eval_subjects = [subjects[i] for i in order[n_dev:]]
    return dataset.subset(dev_subjects, "dev"), dataset.subset(eval_subjects, "eval")
