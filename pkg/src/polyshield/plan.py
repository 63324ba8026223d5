"""Experiment plans: validation, seeded stage execution and report bundles.

Every random draw of a plan derives from the single plan ``seed``: stage
``name`` gets ``SeedSequence(seed, spawn_key=(STAGE_KEYS[name],))``, whose
first 32-bit state word seeds that stage.  The manifest records the scheme,
the derived seeds and the SHA-256 of every report, so a plan can be rerun from
its manifest and the reports compared byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .attack import ArmParamsFactory, AttackConfig, baseline_thresholds, run_arm_attack, run_inversion_attack, solution_rate
from .embeddings import SyntheticSpec, generate_synthetic, load_embeddings, split
from .linkability import calibrate_strict_range, compare_policies
from .matching import SCENARIOS, evaluate_identification, evaluate_verification
from .params import ParamPolicy, assign_params

STAGES = ("verify", "identify", "attack", "unlink")
STAGE_KEYS = {"synthetic": 0, "split": 1, "params": 2, "attack": 3, "unlink": 4}
SEED_SCHEME = "stage seed = SeedSequence(plan seed, spawn_key=(stage key,)).generate_state(1)[0]"
REPORT_FILES = {"verify": "verify.csv", "identify": "identify.csv", "attack": "attack.csv", "unlink": "unlink.json"}


class PlanValidationError(ValueError):
    def __init__(self, diagnostics):
        super().__init__("; ".join(diagnostics))
        self.diagnostics = list(diagnostics)


class StageError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class ExperimentPlan:
    out: str | None = None
    embeddings: str | None = None
    embeddings_format: str = "text"
    subjects: int | None = None
    dim: int | None = None
    noise: float = 0.0
    mean_offset: float = 0.0
    scale: float = 1.0
    identity_rank: int | None = None
    split_fraction: float = 0.5
    seed: int = 0
    m: int = 7
    coeff_range: list = field(default_factory=lambda: [-100, 100])
    overlaps: list = field(default_factory=lambda: list(range(7)))
    scenarios: list = field(default_factory=lambda: list(SCENARIOS))
    fmr: list = field(default_factory=lambda: [0.01, 0.1])
    ranks: list = field(default_factory=lambda: [1, 3, 10])
    stages: list = field(default_factory=lambda: list(STAGES))
    attack_mode: str = "single"
    attack_overlaps: list | None = None
    arm_p: int = 5
    attack_targets: int = 0
    attack_guess: str = "mean"
    templates_per_subject: int = 10
    omega: float = 1.0
    strict_quantile: float = 95.0
    max_retries: int = 1000

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_mapping(cls, mapping) -> "ExperimentPlan":
        """Build from parsed key/value pairs (strings or typed values)."""
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, value in mapping.items():
            name = key.replace("-", "_")
            if name not in known:
                raise PlanValidationError([f"{key}: unknown plan key"])
            kwargs[name] = _coerce(name, value)
        return cls(**kwargs)

    def synthetic_spec(self) -> SyntheticSpec | None:
        if self.subjects is None or self.dim is None:
            return None
        return SyntheticSpec(
            n_subjects=self.subjects, dim=self.dim, intra_class_noise=self.noise,
            seed=stage_seed(self.seed, "synthetic"), identity_rank=self.identity_rank,
            mean_offset=self.mean_offset, scale=self.scale,
        )

    def policy(self, o=0, **overrides) -> ParamPolicy:
        return ParamPolicy(m=self.m, o=o, coeff_range=tuple(self.coeff_range),
                           seed=stage_seed(self.seed, "params"), max_retries=self.max_retries, **overrides)


_INT_LISTS = {"coeff_range", "overlaps", "ranks", "attack_overlaps"}
_FLOAT_LISTS = {"fmr"}
_STR_LISTS = {"scenarios", "stages"}
_INTS = {"subjects", "dim", "identity_rank", "seed", "m", "arm_p", "attack_targets", "templates_per_subject", "max_retries"}
_FLOATS = {"noise", "mean_offset", "scale", "split_fraction", "omega", "strict_quantile"}


def parse_list(text) -> list[str]:
    text = str(text).strip()
    if text.startswith("[") and text.endswith("]"):
        text = text[1:-1]
    return [t.strip() for t in text.split(",") if t.strip()]


def _coerce(name, value):
    if value is None:
        return None
    try:
        if name in _INT_LISTS:
            return [int(v) for v in (value if isinstance(value, list) else parse_list(value))]
        if name in _FLOAT_LISTS:
            return [float(v) for v in (value if isinstance(value, list) else parse_list(value))]
        if name in _STR_LISTS:
            return [str(v) for v in (value if isinstance(value, list) else parse_list(value))]
        if name in _INTS:
            return int(value)
        if name in _FLOATS:
            return float(value)
    except ValueError:
        raise PlanValidationError([f"{name}: cannot parse {value!r}"]) from None
    return str(value) if not isinstance(value, str) else value


def parse_config(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment; lists are comma separated."""
    out = {}
    for row, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise PlanValidationError([f"config line {row}: expected 'key = value'"])
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def load_config(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def stage_seed(seed: int, stage: str) -> int:
    ss = np.random.SeedSequence(int(seed), spawn_key=(STAGE_KEYS[stage],))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


# -- validation ----------------------------------------------------------------------------


def _count_subjects(plan: ExperimentPlan):
    if plan.subjects is not None:
        return plan.subjects
    if plan.embeddings and Path(plan.embeddings).is_file():
        try:
            return len(load_embeddings(plan.embeddings, plan.embeddings_format).subjects())
        except (ValueError, OSError):
            return None
    return None


def validate_plan(plan: ExperimentPlan) -> list[str]:
    """Every violation found in ``plan``; empty means runnable."""
    diags = []
    if not plan.out:
        diags.append("out: output directory is required")
    else:
        parent = Path(plan.out)
        while not parent.exists() and parent != parent.parent:
            parent = parent.parent
        if not os.access(parent, os.W_OK):
            diags.append(f"out: {plan.out} is not writable")
    synthetic = plan.subjects is not None or plan.dim is not None
    if plan.embeddings and synthetic:
        diags.append("dataset: give either an embeddings file or a synthetic spec, not both")
    elif not plan.embeddings and not synthetic:
        diags.append("dataset: an embeddings file or a synthetic spec (subjects, dim) is required")
    elif synthetic:
        if plan.subjects is None or plan.subjects < 4:
            diags.append("subjects: synthetic spec needs subjects >= 4")
        if plan.dim is None or plan.dim < plan.m:
            diags.append(f"dim: synthetic spec needs dim >= m = {plan.m}")
        if plan.noise < 0:
            diags.append("noise: must be >= 0")
    elif not Path(plan.embeddings).is_file():
        diags.append(f"embeddings: file {plan.embeddings} does not exist")
    if plan.embeddings_format not in ("text", "binary"):
        diags.append(f"embeddings_format: unknown format {plan.embeddings_format!r}")
    if not 0 < plan.split_fraction < 1:
        diags.append(f"split_fraction: {plan.split_fraction} must lie in (0, 1)")
    if plan.m < 5:
        diags.append("m: must be >= 5 (smaller windows have closed-form roots)")
    if len(plan.coeff_range) != 2 or plan.coeff_range[0] > plan.coeff_range[1]:
        diags.append("coeff_range: expected 'lo,hi' with lo <= hi")
    else:
        lo, hi = plan.coeff_range
        nonzero = hi - lo + 1 - (1 if lo <= 0 <= hi else 0)
        if nonzero < 2 * plan.m:
            diags.append(f"coeff_range: fewer than 2m = {2 * plan.m} non-zero integers")
    for key in ("overlaps", "scenarios", "fmr", "ranks", "stages"):
        if not getattr(plan, key):
            diags.append(f"{key}: at least one value is required")
    for o in list(plan.overlaps) + list(plan.attack_overlaps or []):
        if not 0 <= o <= plan.m - 1:
            diags.append(f"overlaps: o={o} violates 0 <= o <= m-1 = {plan.m - 1}")
    for s in plan.scenarios:
        if s not in SCENARIOS:
            diags.append(f"scenarios: unknown scenario {s!r}")
    for f in plan.fmr:
        if not 0 < f <= 100:
            diags.append(f"fmr: level {f} must lie in (0, 100] percent")
    for n in plan.ranks:
        if n < 1:
            diags.append(f"ranks: rank {n} must be >= 1")
    for s in plan.stages:
        if s not in STAGES:
            diags.append(f"stages: unknown stage {s!r}")
    if plan.attack_mode not in ("single", "arm"):
        diags.append(f"attack_mode: expected single or arm, got {plan.attack_mode!r}")
    if plan.arm_p < 1:
        diags.append("arm_p: must be >= 1")
    if plan.attack_targets < 0:
        diags.append("attack_targets: must be >= 0 (0 = every eval subject)")
    if plan.attack_guess not in ("mean", "median", "sample"):
        diags.append(f"attack_guess: unknown guess source {plan.attack_guess!r}")
    if plan.templates_per_subject < 2:
        diags.append("templates_per_subject: must be >= 2")
    if plan.omega <= 0:
        diags.append("omega: must be > 0")
    if not 0 < plan.strict_quantile <= 100:
        diags.append("strict_quantile: must lie in (0, 100]")
    n_subjects = _count_subjects(plan)
    capacity = math.factorial(plan.m) if 1 <= plan.m <= 20 else None
    if n_subjects is not None and capacity is not None and n_subjects > capacity:
        diags.append(
            f"capacity: {n_subjects} subjects exceed the m! = {capacity} distinct exponent permutations for m={plan.m}"
        )
    return diags


# -- reports ----------------------------------------------------------------------------------


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return "" if value is None else str(value)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _json_safe(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.generic):
        return _json_safe(obj.item())
    return obj


def json_text(obj) -> str:
    return json.dumps(_json_safe(obj), indent=2, sort_keys=True) + "\n"


REPORT_HEADER = ("scenario", "o", "metric", "level", "value")
ATTACK_HEADER = ("mode", "o", "p", "metric", "level", "value")


def verify_rows(dataset, params, plan: ExperimentPlan):
    rows = []
    for scenario in plan.scenarios:
        overlaps = [None] if scenario == "baseline" else plan.overlaps
        for o in overlaps:
            report = evaluate_verification(dataset, params, scenario, o, plan.fmr)
            rows.extend(report.rows())
    return rows


def identify_rows(dataset, params, plan: ExperimentPlan):
    rows = []
    if "baseline" in plan.scenarios:
        rows.extend(evaluate_identification(dataset, None, None, plan.ranks).rows())
    for o in plan.overlaps:
        rows.extend(evaluate_identification(dataset, params, o, plan.ranks).rows())
    return rows


def attack_rows(dev, ev, params, plan: ExperimentPlan):
    ids = sorted(ev.subjects())
    if plan.attack_targets:
        ids = ids[: plan.attack_targets]
    targets = ev.subset(ids)
    thresholds = baseline_thresholds(dev, plan.fmr)
    config = AttackConfig.from_dev(dev, thresholds, guess=plan.attack_guess,
                                   seed=stage_seed(plan.seed, "attack"), arm_p=plan.arm_p)
    rows = []
    for o in plan.attack_overlaps if plan.attack_overlaps is not None else plan.overlaps:
        if plan.attack_mode == "single":
            curve = {1: run_inversion_attack(targets, {s: params[s].with_overlap(o) for s in ids}, config)}
        else:
            factory = ArmParamsFactory(replace(plan.policy(o), seed=stage_seed(plan.seed, "attack")), plan.arm_p)
            curve = run_arm_attack(targets, factory, config)
        for p, (isr, outcomes) in curve.items():
            rows.append((plan.attack_mode, o, p, "solution_rate", "", solution_rate(outcomes)))
            for label, _ in config.match_thresholds:
                rows.append((plan.attack_mode, o, p, "ISR", label, isr[label]))
    for label, thr in config.match_thresholds:
        rows.append(("baseline", "", "", "threshold", label, thr))
    return rows


def unlink_report(dev, ev, plan: ExperimentPlan):
    naive = replace(plan.policy(), seed=stage_seed(plan.seed, "unlink"))
    score_range = calibrate_strict_range(dev, naive, plan.templates_per_subject, plan.strict_quantile)
    strict = replace(naive, selection="strict", strict_score_range=score_range)
    results = compare_policies(ev, naive, strict, plan.templates_per_subject, plan.omega)
    report = {name: r.to_dict() for name, r in results.items()}
    report["strict_score_range"] = list(score_range)
    report["templates_per_subject"] = plan.templates_per_subject
    return report


# -- running ------------------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def build_manifest(plan: ExperimentPlan, reports: dict, status: str, failed=None) -> dict:
    return {
        "library": {"polyshield": __version__, "numpy": np.__version__, "scipy": scipy.__version__},
        "plan": plan.to_dict(),
        "seed_scheme": SEED_SCHEME,
        "seeds": {name: stage_seed(plan.seed, name) for name in STAGE_KEYS},
        "policies": {
            "params": {"m": plan.m, "coeff_range": list(plan.coeff_range), "selection": "naive",
                       "unique_exponents": True},
            "unlink": {"selection": ["naive", "strict"], "strict_quantile": plan.strict_quantile,
                       "max_retries": plan.max_retries},
        },
        "reports": reports,
        "status": status,
        "failed_stage": failed,
    }


def load_dataset(plan: ExperimentPlan):
    spec = plan.synthetic_spec()
    if spec is not None:
        return generate_synthetic(spec)
    return load_embeddings(plan.embeddings, plan.embeddings_format)


def run_plan(plan: ExperimentPlan, log=None) -> dict:
    """Run every requested stage and write the report bundle plus ``manifest.json``.

    Raises :class:`PlanValidationError` before touching the output directory
    when the plan is invalid, and :class:`StageError` after recording the
    partial bundle in the manifest when a stage fails.
    """
    diags = validate_plan(plan)
    if diags:
        raise PlanValidationError(diags)
    out = Path(plan.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = {}
    stage = "data"

    def write(name, text):
        path = out / name
        path.write_text(text, encoding="utf-8", newline="\n")
        reports[name] = _sha256(path)

    try:
        dataset = load_dataset(plan)
        dev, ev = split(dataset, plan.split_fraction, stage_seed(plan.seed, "split"))
        params = assign_params(ev, plan.policy())
        for stage in plan.stages:
            if log:
                log(f"stage {stage}")
            if stage == "verify":
                write(REPORT_FILES[stage], _csv_text(REPORT_HEADER, verify_rows(ev, params, plan)))
            elif stage == "identify":
                write(REPORT_FILES[stage], _csv_text(REPORT_HEADER, identify_rows(ev, params, plan)))
            elif stage == "attack":
                write(REPORT_FILES[stage], _csv_text(ATTACK_HEADER, attack_rows(dev, ev, params, plan)))
            elif stage == "unlink":
                write(REPORT_FILES[stage], json_text(unlink_report(dev, ev, plan)))
    except Exception as exc:
        manifest = build_manifest(plan, reports, "incomplete", stage)
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        (out / "manifest.json").write_text(json_text(manifest), encoding="utf-8", newline="\n")
        raise StageError(stage, f"{type(exc).__name__}: {exc}") from exc
    manifest = build_manifest(plan, reports, "complete")
    (out / "manifest.json").write_text(json_text(manifest), encoding="utf-8", newline="\n")
    return manifest


def plan_from_manifest(path, out=None) -> ExperimentPlan:
    with open(path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    plan = ExperimentPlan.from_mapping(manifest["plan"])
    return replace(plan, out=out) if out is not None else plan
