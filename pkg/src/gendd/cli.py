"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error,
3 acceptance threshold not met (verify-theorem).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from .errors import ConfigError, GenDDError, ValidationError

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_ACCEPTANCE = 0, 1, 2, 3
OUT_ROOT_ENV = "GENDD_OUT_ROOT"
VERBS = ("train", "eval", "train-kl", "ablate", "verify-theorem", "export-stats")

log = logging.getLogger("gendd")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gendd", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", default="smoke", help="YAML path or preset name (default: smoke)")
            sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                            help="dotted-key override, repeatable")
            sp.add_argument("--no-standardize", action="store_true",
                            help="diffuse raw teacher features (same as --set gendd.standardize=false)")
        sp.add_argument("--out", default=None, help=f"output directory (default: ${OUT_ROOT_ENV}/<verb>/<name>)")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--deterministic", action="store_true")

    common(sub.add_parser("train", help="train student + diffusion head"))
    common(sub.add_parser("train-kl", help="train the CE + KL logit baseline"))

    ev = sub.add_parser("eval", help="evaluate a checkpoint on the validation split")
    common(ev, config=False)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                    help="sampler/eval overrides (gendd.guidance_scale, eval.max_samples, ...)")

    ab = sub.add_parser("ablate", help="one-axis sweep at matched budget")
    common(ab)
    ab.add_argument("pairs", nargs="*", metavar="sweep=NAME values=A,B", help="positional form")
    ab.add_argument("--sweep", default=None)
    ab.add_argument("--values", default=None)

    th = sub.add_parser("verify-theorem", help="gradient checks and surrogate residual sweep")
    common(th, config=False)
    th.add_argument("--per-bucket", type=int, default=1000)
    th.add_argument("--trials", type=int, default=1000)
    th.add_argument("--lam", type=float, default=0.9)
    th.add_argument("--threshold", type=float, default=0.05)
    th.add_argument("--offset", type=float, default=0.0,
                    help="also sweep scenarios with this relative offset from the posterior fixed point")

    ex = sub.add_parser("export-stats", help="write teacher feature standardization stats")
    common(ex)
    ex.add_argument("--checkpoint", default=None, help="take stats from a checkpoint instead of refitting")
    return p


def _out_dir(args, verb: str, name: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ROOT_ENV, "runs")) / verb / name


def _load_run_config(args, verb: str):
    from .pipeline.config import apply_overrides, config_from_dict, load_config_dict

    overrides = list(args.overrides)
    if args.no_standardize:
        overrides.append("gendd.standardize=false")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.deterministic:
        overrides.append("deterministic=true")
    data = apply_overrides(load_config_dict(args.config), overrides)
    cfg = config_from_dict(data)
    out = _out_dir(args, verb, cfg.name)
    cfg.out_dir = str(out)
    return cfg, out, overrides


def _read_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint {path} not found")
    try:
        state = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # pickle/zip errors vary by torch version
        raise ValidationError(f"checkpoint {path} is unreadable: {exc}") from exc
    if not isinstance(state, dict) or "config" not in state:
        raise ValidationError(f"{path} is not a gendd checkpoint")
    return state


def _write_command(out: Path, argv, overrides) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "command.yaml").write_text(yaml.safe_dump({"argv": list(argv), "overrides": overrides}, sort_keys=False))


def cmd_train(args, argv, mode: str) -> int:
    from .pipeline.config import save_config
    from .pipeline.train import Trainer
    from .reports import plot_loss_curve

    cfg, out, overrides = _load_run_config(args, mode if mode == "train-kl" else "train")
    _write_command(out, argv, overrides)
    save_config(cfg, out / "config.yaml")
    trainer = Trainer(cfg, out, mode="kl" if mode == "train-kl" else "gendd")
    summary = trainer.fit()
    plot_loss_curve(out / "metrics.csv", out / "loss_curve.png")
    print(json.dumps(summary))
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    from .pipeline.config import apply_overrides, config_from_dict, save_config
    from .pipeline.train import Trainer

    state = _read_checkpoint(args.checkpoint)
    base = config_from_dict(state["config"])
    cfg = config_from_dict(apply_overrides(state["config"], args.overrides))
    if args.seed is not None:
        cfg.seed = args.seed
    out = _out_dir(args, "eval", cfg.name)
    _write_command(out, argv, args.overrides)
    save_config(cfg, out / "config.yaml")
    # rebuild with the training config so the checkpoint's RNG/teacher checks line up
    trainer = Trainer(base, out, mode=state["mode"])
    trainer.load_state_dict(state)
    trainer.cfg = cfg
    res = trainer.evaluate(trainer.val_set, out / "predictions.csv")
    (out / "eval_metrics.json").write_text(json.dumps(res, indent=2))
    print(json.dumps({"top1": res["top1"], "top5": res["top5"], "n": res["n"]}))
    return EXIT_OK


def _sweep_args(args) -> tuple[str, str]:
    sweep, values = args.sweep, args.values
    for pair in args.pairs:
        if "=" not in pair:
            raise UsageError(f"expected sweep=NAME or values=LIST, got {pair!r}")
        k, v = pair.split("=", 1)
        if k == "sweep":
            sweep = v
        elif k == "values":
            values = v
        else:
            raise UsageError(f"unknown positional key {k!r}")
    if not sweep or not values:
        raise UsageError("ablate needs both a sweep and values")
    return sweep, values


def cmd_ablate(args, argv) -> int:
    from .pipeline.ablate import run_sweep
    from .pipeline.config import save_config
    from .reports import plot_ablation

    sweep, values = _sweep_args(args)
    cfg, out, overrides = _load_run_config(args, "ablate")
    out = out / sweep if not args.out else out
    _write_command(out, argv, overrides)
    save_config(cfg, out / "base_config.yaml")
    rows = run_sweep(cfg, sweep, values, out)
    plot_ablation(out / f"ablation_{sweep}.csv", out / f"ablation_{sweep}.png")
    for r in rows:
        print(f"{r['sweep']}={r['value']}: top1={r['top1']:.4f} final_loss={r['final_loss']:.4f}")
    return EXIT_OK


def theorem_verdict(rows: list[dict], grads: dict, threshold: float, cos_min: float = 0.999,
                    grad_tol: float = 1e-6) -> dict:
    """Pass/fail for each check on the well-trained regime rows."""
    top = next(r for r in rows if r["confidence_bucket"] == 0.99)
    med = [r["median_residual"] for r in rows]
    return {
        "gradient_gendd": grads["max_rel_err_gendd"] <= grad_tol,
        "gradient_ce": grads["max_rel_err_ce"] <= grad_tol,
        "residual_high_conf": top["median_residual"] <= threshold,
        "cosine_high_conf": top["median_cosine"] >= cos_min,
        "residual_decreasing": all(a > b for a, b in zip(med, med[1:])),
    }


def cmd_verify_theorem(args, argv) -> int:
    from .reports import plot_theorem
    from .theorem import confidence_sweep, gradient_trials

    out = _out_dir(args, "verify-theorem", "default")
    _write_command(out, argv, [])
    seed = 0 if args.seed is None else args.seed
    grads = gradient_trials(args.trials, seed=seed)
    rows = confidence_sweep(args.per_bucket, seed=seed, lam=args.lam)
    all_rows = [{"regime": "fixed_point", **r} for r in rows]
    if args.offset > 0:
        off = confidence_sweep(args.per_bucket, seed=seed, lam=args.lam, offset=args.offset)
        all_rows += [{"regime": f"offset_{args.offset:g}", **r} for r in off]
    with open(out / "theorem_sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["regime", "confidence_bucket", "n", "median_residual", "median_cosine"])
        w.writeheader()
        w.writerows(all_rows)
    verdict = theorem_verdict(rows, grads, args.threshold)
    (out / "theorem_report.json").write_text(json.dumps({"gradients": grads, "checks": verdict}, indent=2))
    plot_theorem(out / "theorem_sweep.csv", out / "theorem_residual.png")
    for r in all_rows:
        print(f"{r['regime']:>14} p>={r['confidence_bucket']:<6} n={r['n']:<5} "
              f"residual={r['median_residual']:.3e} cosine={r['median_cosine']:.6f}")
    for k, ok in verdict.items():
        print(f"{'PASS' if ok else 'FAIL'} {k}")
    return EXIT_OK if all(verdict.values()) else EXIT_ACCEPTANCE


def cmd_export_stats(args, argv) -> int:
    from .tokenizer import FeatureStats

    if args.checkpoint:
        state = _read_checkpoint(args.checkpoint)
        if state.get("stats") is None:
            raise ValidationError("checkpoint carries no feature stats")
        stats = FeatureStats.from_state_dict(state["stats"])
        out = _out_dir(args, "export-stats", state["config"]["name"])
        _write_command(out, argv, [])
    else:
        from .pipeline.config import save_config
        from .pipeline.train import Trainer

        cfg, out, overrides = _load_run_config(args, "export-stats")
        _write_command(out, argv, overrides)
        save_config(cfg, out / "config.yaml")
        stats = Trainer(cfg, out).stats
    np.savez(out / "feature_stats.npz", **stats.state_dict())
    print(json.dumps({"dim": stats.dim, "sample_count": stats.sample_count,
                      "path": str(out / "feature_stats.npz")}))
    return EXIT_OK


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.verb in ("train", "train-kl"):
            return cmd_train(args, argv, args.verb)
        if args.verb == "eval":
            return cmd_eval(args, argv)
        if args.verb == "ablate":
            return cmd_ablate(args, argv)
        if args.verb == "verify-theorem":
            return cmd_verify_theorem(args, argv)
        return cmd_export_stats(args, argv)
    except (UsageError, ConfigError, ValidationError) as exc:
        print(f"gendd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GenDDError, RuntimeError, OSError, FloatingPointError) as exc:
        print(f"gendd: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
