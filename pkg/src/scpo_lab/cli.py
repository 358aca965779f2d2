"""Command-line front end.

Every command writes under ``--run-dir`` and records each artifact with its
SHA-256 in ``manifest.json``. Options may come from a JSON ``--config``
file (top-level keys, or a section named after the command); command-line
flags win over the file.

Randomness derives from ``--seed`` through independent child streams:
0 = data generation, 1 = base-policy logits, 2 = training shuffles and
stage subsampling.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import data as data_mod
from .data import GenConfig, STREAM_TRAINING, read_bundle, write_bundle
from .difficulty import (
    DEFAULT_PROPORTIONS,
    CurriculumPlan,
    DifficultyWeights,
    OTParams,
    difficulty_scores,
    partition,
    report_csv,
    subsample_stage,
)
from .eval import curriculum_report, evaluate, trajectory_csv, TrajectoryRow
from .model import PolicyTable
from .objectives import Hyperparams
from .trainer import run_curriculum, trace_lines

log = logging.getLogger("scpo_lab")

MANIFEST = "manifest.json"


class CLIError(Exception):
    pass


# -- helpers -----------------------------------------------------------------


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _write(run_dir: Path, rel: str, content: str) -> Path:
    path = run_dir / rel
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(content)
    return path


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _update_manifest(run_dir: Path, paths: list[Path]) -> None:
    mpath = run_dir / MANIFEST
    manifest = json.loads(mpath.read_text()) if mpath.exists() else {"artifacts": {}}
    for p in paths:
        manifest["artifacts"][p.relative_to(run_dir).as_posix()] = _sha256(p)
    manifest["artifacts"] = dict(sorted(manifest["artifacts"].items()))
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _resolve(run_dir: Path, value: str | None, default: str) -> Path:
    return Path(value) if value else run_dir / default


def _load_policy(path: str | None, bundle) -> PolicyTable:
    if not path:
        return bundle.uniform_policy()
    p = Path(path)
    if not p.exists():
        raise CLIError(f"policy file not found: {p}")
    return PolicyTable.load(p)


def _dataset(args, run_dir: Path):
    path = _resolve(run_dir, args.dataset, "dataset.jsonl")
    if not path.exists():
        raise CLIError(f"dataset file not found: {path}")
    try:
        return read_bundle(path)
    except ValueError as exc:
        raise CLIError(f"{path}: {exc}") from None


def _hyperparams(args, lam: float | None = None) -> Hyperparams:
    try:
        return Hyperparams(
            beta=args.beta, beta1=args.beta1, beta2=args.beta2,
            lam=args.lam if lam is None else lam,
            learning_rate=args.lr, batch_size=args.batch_size or None,
            epochs_per_stage=args.epochs, seed=args.seed,
        )
    except ValueError as exc:
        raise CLIError(f"hyperparameters: {exc}") from None


def _metrics(path: str | None) -> tuple[float, float] | None:
    if not path:
        return None
    try:
        rec = json.loads(Path(path).read_text())
        return float(rec["chair"]), float(rec["cover"])
    except (OSError, KeyError, ValueError) as exc:
        raise CLIError(f"metrics file {path}: {exc!r}") from None


# -- commands ------------------------------------------------------------------


def cmd_gen_data(args) -> list[Path]:
    run_dir = Path(args.run_dir)
    try:
        cfg = GenConfig(
            n_pairs=args.n_pairs, embedding_dim=args.embedding_dim, patch_count=args.patch_count,
            patch_dim=args.patch_dim, delta_min=args.delta_min, delta_max=args.delta_max,
            response_vocab_size=args.vocab_size, seed=args.seed,
        )
    except ValueError as exc:
        raise CLIError(f"generation config: {exc}") from None
    bundle = data_mod.generate(cfg)
    out = [_write(run_dir, "dataset.jsonl", data_mod.dumps_bundle(bundle))]
    policy = data_mod.base_policy(bundle, args.base_scale, args.seed)
    out.append(_write(run_dir, "base_policy.json", policy.to_json()))
    print(f"wrote {len(bundle.pairs)} pairs, {len(bundle.images)} images, "
          f"{len(bundle.contexts())} contexts to {run_dir}")
    return out


def cmd_score(args) -> list[Path]:
    run_dir = Path(args.run_dir)
    bundle = _dataset(args, run_dir)
    policy = _load_policy(args.policy, bundle)
    proportions = tuple(args.proportions)
    if len(proportions) != 3:
        raise CLIError(f"--proportions needs three values, got {args.proportions}")
    try:
        records = difficulty_scores(
            policy, bundle.pairs, bundle.image_map,
            DifficultyWeights(args.w_h, args.w_s, args.w_d),
            OTParams(gamma=args.gamma, epsilon_rel=args.epsilon_rel),
        )
        plan = partition(records, proportions)
    except ValueError as exc:
        raise CLIError(str(exc)) from None
    out = [
        _write(run_dir, "difficulty.csv", report_csv(records, plan)),
        _write(run_dir, "plan.json", json.dumps(plan.to_dict(), indent=1) + "\n"),
    ]
    print("stage sizes: " + ", ".join(f"{n}={len(ids)}" for n, ids in plan.stages))
    return out


def _train_one(args, run_dir: Path, sub: str, bundle, policy0, plan, hp) -> list[Path]:
    final, traces = run_curriculum(policy0, plan, bundle.pair_map(), hp)
    out = [_write(run_dir, f"{sub}/trace.jsonl", trace_lines(traces))]
    stages = []
    for t in traces:
        name = f"policy_{t.stage_index}_{t.stage_name}.json"
        out.append(_write(run_dir, f"{sub}/{name}", t.policy_snapshot.to_json()))
        stages.append({
            "stage_index": t.stage_index, "stage": t.stage_name, "policy": name,
            "kl_to_ref_at_start": t.kl_to_ref_at_start, "kl_to_ref_at_end": t.kl_to_ref_at_end,
            "stage_start_loss": t.start_loss, "stage_end_loss": t.end_loss, "n_pairs": t.n_pairs,
        })
    out.append(_write(run_dir, f"{sub}/policy_final.json", final.to_json()))
    meta = {"order_mode": plan.order_mode, "hyperparams": asdict(hp), "plan_meta": plan.meta, "stages": stages}
    out.append(_write(run_dir, f"{sub}/stages.json", json.dumps(meta, indent=1) + "\n"))
    print(f"{sub}: " + " -> ".join(f"{t.stage_name}({t.end_loss:.4f})" for t in traces))
    return out


def cmd_train(args) -> list[Path]:
    run_dir = Path(args.run_dir)
    bundle = _dataset(args, run_dir)
    plan_path = _resolve(run_dir, args.plan, "plan.json")
    if not plan_path.exists():
        raise CLIError(f"plan file not found: {plan_path}")
    plan = CurriculumPlan.from_dict(json.loads(plan_path.read_text())).with_order(args.order)
    policy0 = _load_policy(args.policy, bundle)
    lambdas = args.lambda_sweep or [None]
    fractions = args.medium_sweep or [None]
    out = []
    for lam in lambdas:
        for frac in fractions:
            sub = args.out
            p = plan
            if lam is not None:
                sub += f"/lambda_{lam!r}"
            if frac is not None:
                sub += f"/medium_{frac!r}"
                try:
                    p = subsample_stage(plan, "medium", frac, args.seed + STREAM_TRAINING)
                except ValueError as exc:
                    raise CLIError(f"--medium-sweep: {exc}") from None
            out += _train_one(args, run_dir, sub, bundle, policy0, p, _hyperparams(args, lam))
    return out


def cmd_eval(args) -> list[Path]:
    run_dir = Path(args.run_dir)
    bundle = _dataset(args, run_dir)
    chair_cover = _metrics(args.metrics)
    rows = []
    for i, path in enumerate(args.policy or [None]):
        policy = _load_policy(path, bundle)
        rep = evaluate(policy, bundle.pairs, chair_cover)
        label = Path(path).stem if path else "uniform"
        rows.append(TrajectoryRow(label, "", i, "", rep, 0.0, 0.0))
        print(f"{label}: acc={rep.preference_accuracy:.4f} grounding={rep.visual_grounding_accuracy:.4f} "
              f"halrate={rep.halrate:.4f}" + (f" f1_gen={rep.f1_gen:.2f}" if rep.f1_gen is not None else ""))
    return [_write(run_dir, args.out, trajectory_csv(rows))]


def cmd_report(args) -> list[Path]:
    run_dir = Path(args.run_dir)
    bundle = _dataset(args, run_dir)
    chair_cover = _metrics(args.metrics)
    rows = []
    for train_dir in args.train_dir or [str(run_dir / "train")]:
        tdir = Path(train_dir)
        meta_path = tdir / "stages.json"
        if not meta_path.exists():
            raise CLIError(f"missing stage metadata: {meta_path}")
        meta = json.loads(meta_path.read_text())
        traces, evals = [], []
        for s in meta["stages"]:
            snap = tdir / s["policy"]
            if not snap.exists():
                raise CLIError(f"missing policy snapshot: {snap}")
            evals.append(evaluate(PolicyTable.load(snap), bundle.pairs, chair_cover))
            traces.append(argparse.Namespace(
                stage_name=s["stage"], stage_index=s["stage_index"], order_mode=meta["order_mode"],
                kl_to_ref_at_end=s["kl_to_ref_at_end"], end_loss=s["stage_end_loss"],
            ))
        label = tdir.relative_to(run_dir).as_posix() if tdir.is_relative_to(run_dir) else tdir.as_posix()
        _, trajectory = curriculum_report(traces, evals, run=label)
        rows += trajectory
        for r in trajectory:
            print(f"{label} [{r.stage_index}:{r.stage}] halrate={r.report.halrate:.4f} "
                  f"acc={r.report.preference_accuracy:.4f}")
    return [_write(run_dir, args.out, trajectory_csv(rows))]


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scpo-lab",
        description="Curriculum preference-optimization laboratory on tabular policies.",
    )
    parser.add_argument("--config", help="JSON file of option defaults (flags override)")
    parser.add_argument("-v", "--verbose", action="store_true")
    subs = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--run-dir", default="run", help="output directory (default: run)")
        p.add_argument("--seed", type=int, default=0, help="top-level seed (default: 0)")

    p = subs.add_parser("gen-data", help="generate a synthetic dataset and a base policy")
    common(p)
    p.add_argument("--n-pairs", type=int, default=600)
    p.add_argument("--vocab-size", type=int, default=8)
    p.add_argument("--embedding-dim", type=int, default=16)
    p.add_argument("--patch-count", type=int, default=9)
    p.add_argument("--patch-dim", type=int, default=8)
    p.add_argument("--delta-min", type=float, default=0.1)
    p.add_argument("--delta-max", type=float, default=1.0)
    p.add_argument("--base-scale", type=float, default=1.0,
                   help="std of base-policy logits; 0 writes a uniform policy (default: 1.0)")
    p.set_defaults(func=cmd_gen_data)

    for name in ("score", "partition"):
        p = subs.add_parser(name, help="score pair difficulty and write the curriculum plan")
        common(p)
        p.add_argument("--dataset", help="dataset file (default: RUN_DIR/dataset.jsonl)")
        p.add_argument("--policy", help="policy used for uncertainty scoring (default: uniform)")
        p.add_argument("--proportions", type=_floats, default=list(DEFAULT_PROPORTIONS),
                       help="easy,medium,hard fractions (default: 0.25,0.40,0.35)")
        p.add_argument("--w-h", type=float, default=1.0)
        p.add_argument("--w-s", type=float, default=1.0)
        p.add_argument("--w-d", type=float, default=1.0)
        p.add_argument("--gamma", type=float, default=1.0, help="spatial weight in the patch cost")
        p.add_argument("--epsilon-rel", type=float, default=1e-3,
                       help="entropic regularizer relative to mean cost; 0 = exact LP")
        p.set_defaults(func=cmd_score)

    p = subs.add_parser(
        "train", help="run the staged curriculum",
        description="Defaults follow the reference setup (beta=beta1=beta2=0.1, lambda=0.2, "
                    "batch 32, one epoch per stage) except the learning rate: 1e-2 instead of "
                    "5e-7, since the policy here is a logit table rather than a 7B network.",
    )
    common(p)
    p.add_argument("--dataset")
    p.add_argument("--plan", help="plan file (default: RUN_DIR/plan.json)")
    p.add_argument("--policy", help="initial policy (default: uniform)")
    p.add_argument("--order", choices=["forward", "reversed"], default="forward")
    p.add_argument("--beta", type=float, default=0.1)
    p.add_argument("--beta1", type=float, default=0.1)
    p.add_argument("--beta2", type=float, default=0.1)
    p.add_argument("--lambda", dest="lam", type=float, default=0.2)
    p.add_argument("--lr", type=float, default=1e-2,
                   help="learning rate (default 1e-2; the 5e-7 used for full networks barely moves "
                        "tabular logits, so the default is larger)")
    p.add_argument("--batch-size", type=int, default=32, help="0 = full batch")
    p.add_argument("--epochs", type=int, default=1, help="epochs per stage")
    p.add_argument("--lambda-sweep", type=_floats, help="train once per lambda value, e.g. 0.1,0.2,0.3")
    p.add_argument("--medium-sweep", type=_floats,
                   help="train once per retained fraction of the medium stage, e.g. 0.25,0.5,1")
    p.add_argument("--out", default="train", help="subdirectory of RUN_DIR (default: train)")
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("eval", help="evaluate policies on the dataset pairs")
    common(p)
    p.add_argument("--dataset")
    p.add_argument("--policy", action="append", help="policy file; repeatable (default: uniform)")
    p.add_argument("--metrics", help='JSON {"chair": pct, "cover": pct} for the F1-Gen column')
    p.add_argument("--out", default="eval.csv")
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("report", help="stage-by-stage trajectories of trained runs")
    common(p)
    p.add_argument("--dataset")
    p.add_argument("--train-dir", action="append", help="training output dir; repeatable")
    p.add_argument("--metrics", help='JSON {"chair": pct, "cover": pct} for the F1-Gen column')
    p.add_argument("--out", default="trajectory.csv")
    p.set_defaults(func=cmd_report)
    return parser


def _config_defaults(path: str, command: str, known: set[str]) -> dict:
    """Option defaults for ``command``: top-level keys it accepts, then its own section.

    Top-level keys meant for other commands are skipped; unknown keys inside
    the command's section are errors.
    """
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise CLIError(f"config {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise CLIError(f"config {path}: top level must be an object")

    def norm(d):
        out = {k.replace("-", "_"): v for k, v in d.items() if not isinstance(v, dict)}
        if "lambda" in out:
            out["lam"] = out.pop("lambda")
        return out

    flat = {k: v for k, v in norm(cfg).items() if k in known}
    section = cfg.get(command, {})
    if not isinstance(section, dict):
        raise CLIError(f"config {path}: section {command!r} must be an object")
    section = norm(section)
    unknown = sorted(set(section) - known)
    if unknown:
        raise CLIError(f"config {path}: unknown options for {command}: {unknown}")
    flat.update(section)
    return flat


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.config:
            subparser = parser._subparsers._group_actions[0].choices[args.command]
            known = {a.dest for a in subparser._actions} - {"help"}
            subparser.set_defaults(**_config_defaults(args.config, args.command, known))
            args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
        run_dir = Path(args.run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        written = args.func(args)
        _update_manifest(run_dir, written)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
