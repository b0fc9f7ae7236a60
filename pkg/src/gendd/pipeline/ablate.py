"""One-axis sweeps over a base run at matched budget."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from .config import RunConfig, apply_overrides, config_from_dict
from .train import Trainer

SWEEPS = {
    "token_dim": "gendd.d_tok",
    "lambda": "gendd.lam",
    "optimizer": "optim.kind",
    "lr_schedule": "optim.schedule",
}
SUMMARY_FIELDS = ["sweep", "value", "top1", "top5", "final_loss", "steps"]


def parse_values(sweep: str, values) -> list:
    """Accept a list or a comma string; ``full`` means one whole-feature token."""
    if sweep not in SWEEPS:
        raise ConfigError(f"unknown sweep {sweep!r}; expected one of {sorted(SWEEPS)}")
    if isinstance(values, str):
        values = [v.strip() for v in values.split(",") if v.strip()]
    if not values:
        raise ConfigError("sweep needs at least one value")
    out = []
    for v in values:
        if sweep == "token_dim":
            out.append(None if str(v).lower() in ("full", "none", "null") else int(v))
        elif sweep == "lambda":
            out.append(float(v))
        else:
            out.append(str(v))
    return out


def value_label(v) -> str:
    return "full" if v is None else str(v)


def run_sweep(base: RunConfig, sweep: str, values, out_dir: str | Path, tail: int = 20) -> list[dict]:
    """Train one run per value with everything else fixed; returns summary rows.

    All runs share the base run's teacher and data, so differences come
    only from the swept axis. ``final_loss`` averages the last ``tail`` steps.
    """
    out_dir = Path(out_dir)
    values = parse_values(sweep, values)
    key = SWEEPS[sweep]
    rows, teacher, data = [], None, None
    for v in values:
        overrides = [f"{key}={'null' if v is None else v}"]
        cfg = config_from_dict(apply_overrides(base.to_dict(), overrides))
        trainer = Trainer(cfg, out_dir / f"{sweep}={value_label(v)}", datasets=data, teacher=teacher)
        teacher, data = trainer.teacher, (trainer.train_set, trainer.val_set)
        trainer.fit(evaluate_at_end=False)
        res = trainer.evaluate(trainer.val_set)
        losses = [r["loss"] for r in trainer.history[-tail:]]
        rows.append({"sweep": sweep, "value": value_label(v), "top1": res["top1"], "top5": res["top5"],
                     "final_loss": float(np.mean(losses)) if losses else float("nan"),
                     "steps": trainer.step})
    write_summary(rows, out_dir / f"ablation_{sweep}.csv")
    return rows


def write_summary(rows: list[dict], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.6g}" if isinstance(r[k], float) else r[k]) for k in SUMMARY_FIELDS})


def read_summary(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{**r, "top1": float(r["top1"]), "top5": float(r["top5"]),
                 "final_loss": float(r["final_loss"]), "steps": int(r["steps"])} for r in csv.DictReader(fh)]
