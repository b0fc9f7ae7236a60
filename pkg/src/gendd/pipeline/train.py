"""Training, evaluation and checkpointing for GenDD and the logit-KL baseline."""
from __future__ import annotations

import csv
import json
import logging
import math
import random
import time
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from ..contraction import ContractionSpec, centers_from_classifier, empirical_centers
from ..errors import ConfigError, GenDDError, NonFiniteError, ValidationError
from ..head import init_head
from ..losses import contracted_tokens, kl_baseline_loss, sample_plan, training_loss
from ..sampler import SamplerConfig, classify, generate_feature
from ..schedule import build_schedule, respace
from ..tokenizer import FeatureStats, apply_stats, fit_stats, num_tokens, split
from .config import RunConfig, save_config
from .data import (ArrayDataset, Prefetcher, augment_crop_flip, batches_per_epoch, epoch_batches,
                   load_datasets)
from .models import KLStudent, Teacher, build_backbone, parameter_checksum

log = logging.getLogger("gendd")

CHECKPOINT_VERSION = 1
METRIC_FIELDS = ["step", "epoch", "loss", "grad_norm", "lr"]
EVAL_FIELDS = ["epoch", "step", "top1", "top5"]
MODES = ("gendd", "kl")


def set_determinism(seed: int, deterministic: bool) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(deterministic, warn_only=True)


def lr_lambda(cfg, steps_per_epoch: int, total_steps: int):
    """Multiplier on the base lr as a function of the completed step count."""
    o = cfg.optim
    warmup = min(int(round(o.warmup_epochs * steps_per_epoch)), total_steps)
    if o.milestone_unit == "fraction":
        milestones = [int(round(f * total_steps)) for f in o.milestones]
    else:
        milestones = [int(e * steps_per_epoch) for e in o.milestones]

    def fn(step: int) -> float:
        if step < warmup:
            return (step + 1) / warmup
        if o.schedule == "cosine":
            span = max(total_steps - warmup, 1)
            return 0.5 * (1.0 + math.cos(math.pi * min(step - warmup, span) / span))
        if o.schedule == "step":
            return o.gamma ** sum(step >= m for m in milestones)
        return 1.0

    return fn


def build_optimizer(params, o):
    if o.kind == "adamw":
        return torch.optim.AdamW(params, lr=o.lr, weight_decay=o.weight_decay)
    return torch.optim.SGD(params, lr=o.lr, momentum=o.momentum, weight_decay=o.weight_decay)


def grad_norm(params) -> float:
    sq = [p.grad.detach().pow(2).sum() for p in params if p.grad is not None]
    return float(torch.sqrt(torch.stack(sq).sum())) if sq else 0.0


def topk_correct(probs: torch.Tensor, labels: torch.Tensor, k: int) -> torch.Tensor:
    k = min(k, probs.shape[1])
    return (probs.topk(k, dim=1).indices == labels[:, None]).any(dim=1)


def shot_group(count: int) -> str:
    # ImageNet-LT convention
    if count > 100:
        return "many"
    return "medium" if count >= 20 else "few"


def summarize_predictions(labels, preds, top5_hits, num_classes: int, class_counts=None) -> dict:
    labels = np.asarray(labels)
    correct = np.asarray(preds) == labels
    per_class = {}
    for c in range(num_classes):
        mask = labels == c
        if mask.any():
            per_class[c] = float(correct[mask].mean())
    out = {
        "top1": float(correct.mean()),
        "top5": float(np.asarray(top5_hits).mean()),
        "per_class": per_class,
        "n": int(labels.size),
    }
    if class_counts is not None:
        groups: dict[str, list[float]] = {"many": [], "medium": [], "few": []}
        for c, acc in per_class.items():
            groups[shot_group(int(class_counts[c]))].append(acc)
        out["shot_groups"] = {g: (float(np.mean(v)) if v else None) for g, v in groups.items()}
    return out


def pretrain_teacher(cfg: RunConfig, train: ArrayDataset) -> Teacher:
    """Supervised CE training of the teacher, seeded from the dataset seed so
    that runs differing only in the run seed share a teacher."""
    t = cfg.teacher
    seed = cfg.dataset.seed + 17
    torch.manual_seed(seed)
    teacher = Teacher(build_backbone(t.arch, train.input_shape, t.feature_dim, t.hidden_dim),
                      t.feature_dim, train.num_classes)
    opt = torch.optim.AdamW(teacher.parameters(), lr=t.pretrain_lr, weight_decay=1e-4)
    gen = torch.Generator().manual_seed(seed)
    teacher.train()
    for epoch in range(t.pretrain_epochs):
        for _, x, y in epoch_batches(train, t.pretrain_batch_size, seed, epoch):
            if cfg.dataset.augment == "crop_flip":
                x = augment_crop_flip(x, gen)
            loss = nn.functional.cross_entropy(teacher(x), y)
            opt.zero_grad()
            loss.backward()
            opt.step()
    return teacher.eval()


def load_teacher(cfg: RunConfig, train: ArrayDataset) -> Teacher:
    t = cfg.teacher
    teacher = Teacher(build_backbone(t.arch, train.input_shape, t.feature_dim, t.hidden_dim),
                      t.feature_dim, train.num_classes)
    path = Path(t.checkpoint)
    if not path.exists():
        raise ConfigError(f"teacher checkpoint {path} not found")
    state = torch.load(path, map_location="cpu", weights_only=False)
    teacher.load_state_dict(state["teacher"] if "teacher" in state else state)
    return teacher.eval()


def save_teacher(teacher: Teacher, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"teacher": teacher.state_dict()}, path)


class Trainer:
    """Owns data, frozen teacher, student, head (GenDD) and the optimization state.

    ``mode="gendd"`` trains student + diffusion head on the contracted noise
    prediction objective; ``mode="kl"`` trains a student with its own
    classifier on CE + temperature KL.
    """

    def __init__(self, cfg: RunConfig, out_dir: str | Path | None = None, mode: str = "gendd",
                 datasets: tuple[ArrayDataset, ArrayDataset] | None = None, teacher: Teacher | None = None):
        if mode not in MODES:
            raise ConfigError(f"unknown training mode {mode!r}")
        self.cfg = cfg.validate()
        self.mode = mode
        self.out = Path(out_dir or cfg.out_dir)
        set_determinism(cfg.seed, cfg.deterministic)
        self.train_set, self.val_set = datasets if datasets is not None else load_datasets(cfg.dataset)
        self.num_classes = self.train_set.num_classes

        if teacher is not None:
            self.teacher = teacher.eval()
        elif cfg.teacher.checkpoint:
            self.teacher = load_teacher(cfg, self.train_set)
        else:
            self.teacher = pretrain_teacher(cfg, self.train_set)
        for p in self.teacher.parameters():
            p.requires_grad_(False)
        self.teacher_checksum = parameter_checksum(self.teacher)

        torch.manual_seed(cfg.seed)
        s = cfg.student
        backbone = build_backbone(s.arch, self.train_set.input_shape, s.feature_dim, s.hidden_dim)
        if mode == "kl":
            self.student = KLStudent(backbone, s.feature_dim, self.num_classes)
            self.head = None
            self.stats = None
            trainable = list(self.student.parameters())
        else:
            self.student = backbone
            self._setup_gendd()
            trainable = list(self.student.parameters()) + list(self.head.parameters())
        self.params = trainable
        self.optimizer = build_optimizer(trainable, cfg.optim)
        self.steps_per_epoch = batches_per_epoch(len(self.train_set), cfg.optim.batch_size)
        self.total_steps = cfg.optim.max_steps or cfg.optim.epochs * self.steps_per_epoch
        self.scheduler = torch.optim.lr_scheduler.LambdaLR(
            self.optimizer, lr_lambda(cfg, self.steps_per_epoch, self.total_steps))
        self.generator = torch.Generator().manual_seed(cfg.seed + 1)
        self.step = 0
        self.best_top1 = -1.0
        self.history: list[dict] = []

    # ------------------------------------------------------------------ setup
    def teacher_features(self, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.teacher.features(x)

    def _setup_gendd(self):
        g = self.cfg.gendd
        d_t = self.cfg.teacher.feature_dim
        if g.standardize:
            feats = (self.teacher_features(x) for _, x, _ in
                     epoch_batches(self.train_set, 512, 0, 0, shuffle=False, drop_last=False))
            self.stats = fit_stats(feats)
        else:
            self.stats = FeatureStats.identity(d_t)
        self.d_tok = d_t if g.d_tok is None else g.d_tok
        self.n_tokens = num_tokens(d_t, self.d_tok)
        self.schedule = build_schedule(g.schedule, g.M)
        self.view = respace(self.schedule, g.sampling_steps)
        centers = None
        if g.supervised and g.lam < 1:
            if g.center_source == "classifier_weights":
                centers = centers_from_classifier(self.teacher.classifier.weight, self.stats)
            else:
                feats, labels = [], []
                for _, x, y in epoch_batches(self.train_set, 512, 0, 0, shuffle=False, drop_last=False):
                    feats.append(apply_stats(self.teacher_features(x), self.stats))
                    labels.append(y)
                centers = empirical_centers(torch.cat(feats), torch.cat(labels), self.num_classes)
        self.spec = ContractionSpec(g.lam if g.supervised else 1.0, centers, g.center_source)
        self.head = init_head(self.d_tok, self.cfg.student.feature_dim, self.n_tokens,
                              hidden_width=g.head_width, seed=self.cfg.seed, depth=g.head_depth,
                              arch=g.head_arch)

    def sampler_config(self) -> SamplerConfig:
        g = self.cfg.gendd
        return SamplerConfig(steps=g.sampling_steps, guidance_scale=g.guidance_scale,
                             variance=g.variance, seed=self.cfg.seed)

    # ------------------------------------------------------------------ steps
    def _prepare(self, x):
        if self.cfg.dataset.augment == "crop_flip" and x.dim() == 4:
            x = augment_crop_flip(x, self.generator)
        return x

    def compute_loss(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        if self.mode == "kl":
            with torch.no_grad():
                t_logits = self.teacher(x)
            kl = self.cfg.kl
            return kl_baseline_loss(t_logits, self.student(x), y if kl.supervised else None,
                                    T=kl.T, w_kl=kl.w_kl, w_ce=kl.w_ce if kl.supervised else 0.0)
        g = self.cfg.gendd
        labels = y if self.spec.lam < 1 else None
        feats = apply_stats(self.teacher_features(x), self.stats)
        if g.mixup:
            w = float(np.random.default_rng(int(torch.randint(0, 2**31, (1,), generator=self.generator)))
                      .beta(g.mixup_alpha, g.mixup_alpha))
            perm = torch.randperm(x.shape[0], generator=self.generator)
            target_batch = split(feats, self.d_tok, None, labels)
            target = contracted_tokens(target_batch, self.spec)
            target = w * target + (1 - w) * target[perm]
            x = w * x + (1 - w) * x[perm]
        else:
            target = None
        batch = split(feats, self.d_tok, self.student(x), labels)
        plan = sample_plan(x.shape[0], self.n_tokens, self.d_tok, self.schedule.M, g.cfg_drop,
                           generator=self.generator)
        return training_loss(self.head, self.schedule, batch, self.spec, plan, target)

    def train_step(self, x, y) -> dict:
        self.student.train()
        if self.head is not None:
            self.head.train()
        x = self._prepare(x)
        loss = self.compute_loss(x, y)
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        gn = grad_norm(self.params)
        if not math.isfinite(gn):
            raise NonFiniteError("non-finite gradient norm", {"step": self.step, "loss": float(loss.detach())})
        if self.cfg.optim.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.params, self.cfg.optim.grad_clip)
        lr = self.optimizer.param_groups[0]["lr"]
        self.optimizer.step()
        self.scheduler.step()
        self.step += 1
        return {"step": self.step, "epoch": (self.step - 1) // self.steps_per_epoch,
                "loss": float(loss.detach()), "grad_norm": gn, "lr": lr}

    # ------------------------------------------------------------------ loop
    def _batches(self):
        """Remaining (x, y) batches from the current position, across epochs."""
        epoch, start = divmod(self.step, self.steps_per_epoch)
        while True:
            for _, x, y in epoch_batches(self.train_set, self.cfg.optim.batch_size, self.cfg.seed,
                                         epoch, start=start):
                yield x, y
            epoch, start = epoch + 1, 0

    def fit(self, max_steps: int | None = None, evaluate_at_end: bool = True) -> dict:
        """Train up to the step budget; writes metrics.csv, eval.csv and checkpoints."""
        self.out.mkdir(parents=True, exist_ok=True)
        save_config(self.cfg, self.out / "config.yaml")
        budget = min(self.total_steps, max_steps) if max_steps else self.total_steps
        metrics_path = self.out / "metrics.csv"
        fresh = self.step == 0
        t0 = time.time()
        every = self.cfg.eval.every_epochs * self.steps_per_epoch
        with open(metrics_path, "w" if fresh else "a", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
            if fresh:
                writer.writeheader()
            batches = Prefetcher(self._batches(), maxsize=4)
            try:
                for x, y in batches:
                    if self.step >= budget:
                        break
                    try:
                        row = self.train_step(x, y)
                    except NonFiniteError:
                        # parameters were not updated on the failing step
                        self.save_checkpoint(self.out / "last_good.pt")
                        raise
                    writer.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in row.items()})
                    self.history.append(row)
                    if every and self.step % every == 0 and self.step < budget:
                        self._eval_and_keep()
            finally:
                batches.close()
        if evaluate_at_end:
            self._eval_and_keep()
        self.save_checkpoint(self.out / "last.pt")
        if parameter_checksum(self.teacher) != self.teacher_checksum:
            raise GenDDError("teacher parameters changed during training")
        summary = {"steps": self.step, "best_top1": self.best_top1, "mode": self.mode,
                   "config_hash": self.cfg.config_hash(), "wall_seconds": round(time.time() - t0, 2)}
        (self.out / "summary.json").write_text(json.dumps(summary, indent=2))
        return summary

    def _eval_and_keep(self):
        res = self.evaluate(self.val_set)
        write_header = not (self.out / "eval.csv").exists()
        with open(self.out / "eval.csv", "a", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=EVAL_FIELDS)
            if write_header:
                w.writeheader()
            w.writerow({"epoch": (self.step - 1) // self.steps_per_epoch if self.step else 0,
                        "step": self.step, "top1": f"{res['top1']:.6f}", "top5": f"{res['top5']:.6f}"})
        if res["top1"] > self.best_top1:
            self.best_top1 = res["top1"]
            self.save_checkpoint(self.out / "best.pt")
        return res

    # ------------------------------------------------------------------ eval
    @torch.no_grad()
    def predict(self, x: torch.Tensor, sample_indices) -> torch.Tensor:
        """Class probabilities for a batch of inputs."""
        self.student.eval()
        if self.mode == "kl":
            return torch.softmax(self.student(x), dim=-1)
        self.head.eval()
        feats = generate_feature(self.head, self.view, self.student(x), self.sampler_config(),
                                 self.stats, self.cfg.teacher.feature_dim, sample_indices)
        return classify(self.teacher.classifier, feats)[1]

    @torch.no_grad()
    def evaluate(self, ds: ArrayDataset, predictions_csv: Path | None = None) -> dict:
        limit = self.cfg.eval.max_samples
        ds = ds.subset(limit)
        labels, preds, hits5 = [], [], []
        bs = self.cfg.eval.batch_size
        for start in range(0, len(ds), bs):
            x, y = ds.x[start:start + bs], ds.y[start:start + bs]
            probs = self.predict(x, range(start, start + x.shape[0]))
            labels.append(y)
            preds.append(probs.argmax(1))
            hits5.append(topk_correct(probs, y, 5))
        labels, preds, hits5 = torch.cat(labels), torch.cat(preds), torch.cat(hits5)
        res = summarize_predictions(labels.numpy(), preds.numpy(), hits5.numpy(), ds.num_classes,
                                    ds.class_counts)
        if predictions_csv is not None:
            predictions_csv.parent.mkdir(parents=True, exist_ok=True)
            with open(predictions_csv, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["index", "label", "pred", "correct"])
                for i, (a, b) in enumerate(zip(labels.tolist(), preds.tolist())):
                    w.writerow([i, a, b, int(a == b)])
        return res

    # ------------------------------------------------------------------ state
    def state_dict(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "mode": self.mode,
            "config": self.cfg.to_dict(),
            "config_hash": self.cfg.config_hash(),
            "student": self.student.state_dict(),
            "head": None if self.head is None else self.head.state_dict(),
            "head_config": None if self.head is None else self.head.config,
            "stats": None if self.stats is None else self.stats.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "scheduler": self.scheduler.state_dict(),
            "step": self.step,
            "epoch": self.step // self.steps_per_epoch,
            "best_top1": self.best_top1,
            "teacher_checksum": self.teacher_checksum,
            "rng": {"generator": self.generator.get_state(), "torch": torch.get_rng_state(),
                    "numpy": np.random.get_state(), "python": random.getstate()},
        }

    def load_state_dict(self, state: dict, strict_config: bool = True) -> None:
        if state.get("version") != CHECKPOINT_VERSION:
            raise ValidationError(f"unsupported checkpoint version {state.get('version')}")
        if state["mode"] != self.mode:
            raise ValidationError(f"checkpoint mode {state['mode']!r} != trainer mode {self.mode!r}")
        if strict_config and state["config_hash"] != self.cfg.config_hash():
            raise ValidationError("checkpoint was produced by a different configuration")
        if state["teacher_checksum"] != self.teacher_checksum:
            raise ValidationError("checkpoint was trained against a different teacher")
        self.student.load_state_dict(state["student"])
        if self.head is not None:
            if state["head_config"] != self.head.config:
                raise ValidationError("head configuration mismatch")
            self.head.load_state_dict(state["head"])
            self.stats = FeatureStats.from_state_dict(state["stats"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.scheduler.load_state_dict(state["scheduler"])
        self.step = state["step"]
        self.best_top1 = state["best_top1"]
        rng = state["rng"]
        self.generator.set_state(rng["generator"])
        torch.set_rng_state(rng["torch"])
        np.random.set_state(rng["numpy"])
        random.setstate(rng["python"])

    def save_checkpoint(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(self.state_dict(), tmp)
        tmp.replace(path)

    def load_checkpoint(self, path: Path, strict_config: bool = True) -> None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"checkpoint {path} not found")
        self.load_state_dict(torch.load(path, map_location="cpu", weights_only=False), strict_config)


def train(cfg: RunConfig, out_dir=None, **kw) -> tuple[Trainer, dict]:
    trainer = Trainer(cfg, out_dir, mode="gendd", **kw)
    return trainer, trainer.fit()


def train_kl_baseline(cfg: RunConfig, out_dir=None, **kw) -> tuple[Trainer, dict]:
    trainer = Trainer(cfg, out_dir, mode="kl", **kw)
    return trainer, trainer.fit()
