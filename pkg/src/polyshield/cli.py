"""Command line entry point.

Exit codes: 0 success, 2 invalid input or plan, 3 failure inside a stage.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .attack import (
    ArmParamsFactory, AttackConfig, baseline_thresholds, fmr_label, run_arm_attack,
    run_inversion_attack, solution_rate,
)
from .embeddings import EmbeddingFormatError, SyntheticSpec, generate_synthetic, load_embeddings, save_embeddings, split
from .linkability import calibrate_strict_range, collect_link_scores, compute_d_sys, raw_link_scores
from .matching import SCENARIOS, evaluate_identification, evaluate_verification
from .params import ParamCapacityError, ParamPolicy, StrictSelectionError, assign_params, load_params_store, save_params_store
from .plan import (
    REPORT_HEADER, ExperimentPlan, PlanValidationError, StageError, _csv_text, json_text, load_config,
    parse_list, plan_from_manifest, run_plan, validate_plan,
)
from .transform import format_template, protect

log = logging.getLogger("polyshield")

EXIT_OK, EXIT_INVALID, EXIT_STAGE = 0, 2, 3
SECRET_WARNING = "warning: %s holds secret parameters; anyone who reads it can invert or link the templates"


class UsageError(Exception):
    pass


def _floats(text):
    try:
        return [float(v) for v in parse_list(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text):
    try:
        return [int(v) for v in parse_list(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _load(args):
    return load_embeddings(args.embeddings, args.format)


def _params_for(args, dataset):
    if args.params:
        return load_params_store(args.params)
    policy = ParamPolicy(m=args.m, seed=args.seed)
    return assign_params(dataset, policy)


def _write_text(path, text):
    Path(path).write_text(text, encoding="utf-8", newline="\n")


def _emit_report(reports, out):
    rows = [row for r in reports for row in r.rows()]
    text = _csv_text(REPORT_HEADER, rows)
    if out:
        _write_text(out, text)
        _write_text(Path(out).with_suffix(".json"), json_text([r.to_dict() for r in reports]))
    else:
        sys.stdout.write(text)


# -- subcommands ------------------------------------------------------------------------


def cmd_gen_synthetic(args):
    spec = SyntheticSpec(
        n_subjects=args.subjects, dim=args.dim, intra_class_noise=args.noise, seed=args.seed,
        samples_per_subject=args.samples, identity_rank=args.identity_rank,
        mean_offset=args.mean_offset, scale=args.scale,
    )
    save_embeddings(generate_synthetic(spec), args.out, args.format)
    log.info("wrote %d subjects to %s", args.subjects, args.out)
    return EXIT_OK


def cmd_gen_params(args):
    dataset = _load(args)
    policy = ParamPolicy(m=args.m, o=args.overlap, coeff_range=tuple(args.coeff_range), seed=args.seed)
    save_params_store(assign_params(dataset, policy), args.out)
    print(SECRET_WARNING % args.out, file=sys.stderr)
    return EXIT_OK


def cmd_protect(args):
    dataset = _load(args)
    params = load_params_store(args.params)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for e in dataset:
        if e.subject_id not in params:
            raise UsageError(f"no parameters for subject {e.subject_id!r}")
        p = params[e.subject_id]
        if args.overlap is not None:
            p = p.with_overlap(args.overlap)
        _write_text(out / f"{e.subject_id}_{e.sample_id}.tpl", format_template(protect(e.values, p)))
    log.info("wrote %d templates to %s", len(dataset), out)
    return EXIT_OK


def cmd_eval_verify(args):
    dataset = _load(args)
    params = None if args.scenario == "baseline" else _params_for(args, dataset)
    overlaps = [None] if args.scenario == "baseline" else (args.overlap or [None])
    reports = [evaluate_verification(dataset, params, args.scenario, o, args.fmr) for o in overlaps]
    _emit_report(reports, args.out)
    return EXIT_OK


def cmd_eval_identify(args):
    dataset = _load(args)
    if args.baseline:
        reports = [evaluate_identification(dataset, None, None, args.ranks)]
    else:
        params = _params_for(args, dataset)
        reports = [evaluate_identification(dataset, params, o, args.ranks) for o in (args.overlap or [None])]
    _emit_report(reports, args.out)
    return EXIT_OK


def _threshold_levels(labels):
    levels = []
    for label in labels:
        if not label.startswith("fmr"):
            raise UsageError(f"threshold label {label!r} must look like fmr<percent>, e.g. fmr0.1")
        try:
            levels.append(float(label[3:]))
        except ValueError:
            raise UsageError(f"threshold label {label!r} must look like fmr<percent>") from None
    return levels


def cmd_attack(args):
    dataset = _load(args)
    dev, ev = split(dataset, args.split_fraction, args.split_seed)
    ids = sorted(ev.subjects())[: args.targets or None]
    targets = ev.subset(ids)
    thresholds = baseline_thresholds(dev, _threshold_levels(parse_list(args.thresholds)))
    config = AttackConfig.from_dev(dev, thresholds, guess=args.guess, seed=args.seed, arm_p=args.arm_p)
    if args.mode == "single":
        params = load_params_store(args.params) if args.params else assign_params(ev, ParamPolicy(seed=args.seed))
        params = {s: params[s].with_overlap(args.overlap) for s in ids}
        curve = {1: run_inversion_attack(targets, params, config)}
    else:
        factory = ArmParamsFactory(ParamPolicy(o=args.overlap, seed=args.seed), args.arm_p)
        curve = run_arm_attack(targets, factory, config)
    labels = [label for label, _ in thresholds]
    header = ["p", "subject", "converged", "residual"] + [f"match@{label}" for label in labels] + ["wall_time_ms"]
    rows = []
    for p, (isr, outcomes) in curve.items():
        for o in outcomes:
            flags = [int(o.match_flags[label]) if o.converged else "" for label in labels]
            rows.append([p, o.subject, int(o.converged), o.residual_norm] + flags + [round(o.wall_time_ms, 3)])
        summary = ", ".join(f"ISR@{label}={isr[label]:.2f}%" for label in labels)
        print(f"o={args.overlap} p={p}: solution rate {solution_rate(outcomes):.2f}%, {summary}")
    text = _csv_text(header, rows)
    if args.out:
        _write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_unlink(args):
    dataset = _load(args)
    naive = ParamPolicy(m=args.m, seed=args.seed, max_retries=args.max_retries)
    policy = naive
    if args.policy == "strict":
        if args.strict_range:
            lo, hi = _floats(args.strict_range)
        else:
            dev, dataset = split(dataset, args.split_fraction, args.split_seed)
            lo, hi = calibrate_strict_range(dev, naive, args.templates_per_subject, args.strict_quantile)
        policy = replace(naive, selection="strict", strict_score_range=(lo, hi))
    result = compute_d_sys(collect_link_scores(dataset, policy, args.templates_per_subject), omega=args.omega)
    report = {"policy": args.policy, "templates_per_subject": args.templates_per_subject, **result.to_dict()}
    if args.policy == "strict":
        report["strict_score_range"] = list(policy.strict_score_range)
    if args.with_baseline:
        report["baseline"] = compute_d_sys(raw_link_scores(dataset), omega=args.omega).to_dict()
    print(f"D_sys ({args.policy}) = {result.d_sys:.4f}")
    if args.out:
        _write_text(args.out, json_text(report))
    return EXIT_OK


def _plan_from_args(args) -> ExperimentPlan:
    if getattr(args, "manifest", None):
        plan = plan_from_manifest(args.manifest)
    elif args.config:
        plan = ExperimentPlan.from_mapping(load_config(args.config))
    else:
        plan = ExperimentPlan()
    overrides = {}
    for f in fields(ExperimentPlan):
        value = getattr(args, f"plan_{f.name}", None)
        if value is not None:
            overrides[f.name] = value
    return ExperimentPlan.from_mapping({**plan.to_dict(), **overrides})


def cmd_validate(args):
    diags = validate_plan(_plan_from_args(args))
    for d in diags:
        print(d)
    if diags:
        return EXIT_INVALID
    print("plan is valid")
    return EXIT_OK


def cmd_run_plan(args):
    plan = _plan_from_args(args)
    manifest = run_plan(plan, log=log.info)
    for name, digest in sorted(manifest["reports"].items()):
        print(f"{digest}  {Path(plan.out) / name}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------------------


def _add_embeddings(p, required=True):
    p.add_argument("--embeddings", required=required, help="embedding file")
    p.add_argument("--format", choices=("text", "binary"), default="text")


def _add_plan_flags(p):
    p.add_argument("--config", help="flat key = value plan file; flags override it")
    text = {"out", "embeddings", "embeddings_format", "attack_mode", "attack_guess"}
    for f in fields(ExperimentPlan):
        flag = "--" + f.name.replace("_", "-")
        if f.name in text:
            p.add_argument(flag, dest=f"plan_{f.name}")
        else:
            # parsed later by the plan so file and flag share one syntax
            p.add_argument(flag, dest=f"plan_{f.name}", metavar="VALUE")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="polyshield", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="write a synthetic embedding file")
    p.add_argument("--subjects", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=2, help="samples per subject")
    p.add_argument("--identity-rank", type=int)
    p.add_argument("--mean-offset", type=float, default=0.0)
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--format", choices=("text", "binary"), default="text")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("gen-params", help="assign secret parameters to every subject")
    _add_embeddings(p)
    p.add_argument("--m", type=int, default=7)
    p.add_argument("--overlap", type=int, default=0)
    p.add_argument("--coeff-range", type=_ints, default=[-100, 100])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_params)

    p = sub.add_parser("protect", help="write one protected template per embedding")
    _add_embeddings(p)
    p.add_argument("--params", required=True)
    p.add_argument("--overlap", type=int, help="override the stored overlap")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_protect)

    p = sub.add_parser("eval-verify", help="verification accuracy (CSV + JSON)")
    _add_embeddings(p)
    p.add_argument("--params", help="params store; generated from --seed when absent")
    p.add_argument("--scenario", choices=SCENARIOS, default="N")
    p.add_argument("--overlap", type=_ints, help="one or more overlaps, e.g. 0,3,6")
    p.add_argument("--fmr", type=_floats, default=[0.01, 0.1], help="FMR levels in percent")
    p.add_argument("--m", type=int, default=7)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_verify)

    p = sub.add_parser("eval-identify", help="closed-set identification TPIR-n")
    _add_embeddings(p)
    p.add_argument("--params")
    p.add_argument("--baseline", action="store_true", help="search unprotected embeddings")
    p.add_argument("--overlap", type=_ints)
    p.add_argument("--ranks", type=_ints, default=[1, 3, 10])
    p.add_argument("--m", type=int, default=7)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_identify)

    p = sub.add_parser("attack", help="inversion attack with full knowledge of the secrets")
    _add_embeddings(p)
    p.add_argument("--params", help="params store for single mode")
    p.add_argument("--mode", choices=("single", "arm"), default="single")
    p.add_argument("--overlap", type=int, default=0)
    p.add_argument("--arm-p", type=int, default=1)
    p.add_argument("--thresholds", default="fmr0.01,fmr0.1")
    p.add_argument("--guess", choices=("mean", "median", "sample"), default="mean")
    p.add_argument("--targets", type=int, default=0, help="attack only the first N eval subjects (0 = all)")
    p.add_argument("--split-fraction", type=float, default=0.5)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("unlink", help="global linkability D_sys")
    _add_embeddings(p)
    p.add_argument("--templates-per-subject", type=int, default=10)
    p.add_argument("--policy", choices=("naive", "strict"), default="naive")
    p.add_argument("--strict-range", help="lo,hi score range; calibrated on a dev split when absent")
    p.add_argument("--strict-quantile", type=float, default=95.0)
    p.add_argument("--max-retries", type=int, default=1000)
    p.add_argument("--omega", type=float, default=1.0)
    p.add_argument("--m", type=int, default=7)
    p.add_argument("--with-baseline", action="store_true")
    p.add_argument("--split-fraction", type=float, default=0.5)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_unlink)

    p = sub.add_parser("run-plan", help="run a full experiment plan")
    p.add_argument("--manifest", help="rerun the plan recorded in a manifest")
    _add_plan_flags(p)
    p.set_defaults(func=cmd_run_plan)

    p = sub.add_parser("validate", help="check a plan and list every problem")
    _add_plan_flags(p)
    p.set_defaults(func=cmd_validate)
    return parser


MIN_CLI_M = 5


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    # below five slots the window polynomials have closed-form roots
    if getattr(args, "m", None) is not None and args.m < MIN_CLI_M:
        print(f"error: --m must be >= {MIN_CLI_M}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except PlanValidationError as exc:
        for d in exc.diagnostics:
            print(d, file=sys.stderr)
        return EXIT_INVALID
    except StageError as exc:
        print(f"stage failure {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (UsageError, EmbeddingFormatError, ParamCapacityError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (StrictSelectionError, ValueError, np.linalg.LinAlgError, AssertionError) as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
