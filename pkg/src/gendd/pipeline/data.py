"""In-memory datasets, deterministic batching and a bounded prefetch queue."""
from __future__ import annotations

import queue
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import ConfigError
from .config import DatasetConfig

CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)


class DatasetMissingError(ConfigError):
    pass


@dataclass
class ArrayDataset:
    x: torch.Tensor
    y: torch.Tensor
    num_classes: int
    # training-set class frequencies, when the protocol reports shot groups
    class_counts: np.ndarray | None = None

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.x.shape[1:])

    def subset(self, n: int | None) -> "ArrayDataset":
        if n is None or n >= len(self):
            return self
        return ArrayDataset(self.x[:n], self.y[:n], self.num_classes, self.class_counts)


def _class_sizes(total: int, C: int, ratio: float) -> np.ndarray:
    if ratio == 1.0:
        sizes = np.full(C, total // C)
        sizes[: total - sizes.sum()] += 1
        return sizes
    w = ratio ** (-np.arange(C) / max(C - 1, 1))
    return np.maximum(1, np.round(total * w / w.sum())).astype(int)


def _gaussian_split(cfg: DatasetConfig, means: np.ndarray, sizes: np.ndarray, seed: int):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(len(sizes)), sizes)
    x = means[labels] + cfg.noise * rng.standard_normal((labels.size, means.shape[1]))
    perm = rng.permutation(labels.size)
    return torch.tensor(x[perm], dtype=torch.float32), torch.tensor(labels[perm], dtype=torch.long)


def synthetic_gaussian(cfg: DatasetConfig) -> tuple[ArrayDataset, ArrayDataset]:
    """Isotropic Gaussian classes around random means of norm ``separation``."""
    rng = np.random.default_rng(cfg.seed)
    u = rng.standard_normal((cfg.num_classes, cfg.input_dim))
    means = cfg.separation * u / np.linalg.norm(u, axis=1, keepdims=True)
    train_sizes = _class_sizes(cfg.train_size, cfg.num_classes, cfg.imbalance_ratio)
    val_sizes = _class_sizes(cfg.val_size, cfg.num_classes, 1.0)
    xt, yt = _gaussian_split(cfg, means, train_sizes, cfg.seed + 1)
    xv, yv = _gaussian_split(cfg, means, val_sizes, cfg.seed + 2)
    counts = train_sizes if cfg.imbalance_ratio != 1.0 else None
    return (ArrayDataset(xt, yt, cfg.num_classes, counts), ArrayDataset(xv, yv, cfg.num_classes, counts))


def synthetic_images(cfg: DatasetConfig) -> tuple[ArrayDataset, ArrayDataset]:
    """Small RGB images: a class-specific colour/frequency pattern plus noise."""
    rng = np.random.default_rng(cfg.seed)
    s = cfg.image_size
    yy, xx = np.meshgrid(np.linspace(0, 1, s), np.linspace(0, 1, s), indexing="ij")
    protos = []
    for _ in range(cfg.num_classes):
        fx, fy = rng.uniform(1, 4, 2)
        phase = rng.uniform(0, 2 * np.pi, 3)
        protos.append(np.stack([np.sin(2 * np.pi * (fx * xx + fy * yy) + p) for p in phase]))
    protos = cfg.separation * np.stack(protos) / 3.0

    def make(sizes, seed):
        r = np.random.default_rng(seed)
        labels = r.permutation(np.repeat(np.arange(cfg.num_classes), sizes))
        x = protos[labels] + cfg.noise * r.standard_normal((labels.size, 3, s, s))
        return torch.tensor(x, dtype=torch.float32), torch.tensor(labels, dtype=torch.long)

    xt, yt = make(_class_sizes(cfg.train_size, cfg.num_classes, cfg.imbalance_ratio), cfg.seed + 1)
    xv, yv = make(_class_sizes(cfg.val_size, cfg.num_classes, 1.0), cfg.seed + 2)
    return ArrayDataset(xt, yt, cfg.num_classes), ArrayDataset(xv, yv, cfg.num_classes)


def _read_cifar_bin(files: list[Path], label_bytes: int, label_offset: int):
    xs, ys = [], []
    rec = label_bytes + 3072
    for f in files:
        raw = np.fromfile(f, dtype=np.uint8)
        if raw.size % rec:
            raise DatasetMissingError(f"{f} is not a CIFAR binary batch")
        raw = raw.reshape(-1, rec)
        ys.append(raw[:, label_offset].astype(np.int64))
        xs.append(raw[:, label_bytes:].reshape(-1, 3, 32, 32))
    return np.concatenate(xs), np.concatenate(ys)


def _normalize_images(x: np.ndarray) -> torch.Tensor:
    t = torch.tensor(x, dtype=torch.float32) / 255.0
    mean = torch.tensor(CIFAR_MEAN).view(1, 3, 1, 1)
    std = torch.tensor(CIFAR_STD).view(1, 3, 1, 1)
    return (t - mean) / std


def _find(root: Path, names: list[str]) -> list[Path]:
    for base in (root, *sorted(p for p in root.glob("*") if p.is_dir())):
        found = [base / n for n in names]
        if all(p.exists() for p in found):
            return found
    raise DatasetMissingError(f"CIFAR binaries {names} not found under {root}")


def cifar(cfg: DatasetConfig) -> tuple[ArrayDataset, ArrayDataset]:
    """CIFAR-10/100 from the official binary distribution."""
    if cfg.root is None or not Path(cfg.root).exists():
        raise DatasetMissingError(f"dataset root {cfg.root!r} does not exist")
    root = Path(cfg.root)
    if cfg.name == "cifar10":
        train_files = _find(root, [f"data_batch_{i}.bin" for i in range(1, 6)])
        test_files = _find(root, ["test_batch.bin"])
        lb, off, C = 1, 0, 10
    else:
        train_files = _find(root, ["train.bin"])
        test_files = _find(root, ["test.bin"])
        lb, off, C = 2, 1, 100
    xt, yt = _read_cifar_bin(train_files, lb, off)
    xv, yv = _read_cifar_bin(test_files, lb, off)
    train = ArrayDataset(_normalize_images(xt), torch.tensor(yt), C)
    val = ArrayDataset(_normalize_images(xv), torch.tensor(yv), C)
    return train.subset(cfg.subset_train), val.subset(cfg.subset_val)


def image_folder(cfg: DatasetConfig) -> tuple[ArrayDataset, ArrayDataset]:
    """``root/{train,val}/<class>/*.jpg`` loaded into memory at ``image_size``."""
    from torchvision import datasets, transforms

    root = Path(cfg.root or "")
    if not (root / "train").is_dir() or not (root / "val").is_dir():
        raise DatasetMissingError(f"expected {root}/train and {root}/val image folders")
    tf = transforms.Compose([
        transforms.Resize(cfg.image_size),
        transforms.CenterCrop(cfg.image_size),
        transforms.ToTensor(),
        transforms.Normalize(CIFAR_MEAN, CIFAR_STD),
    ])
    out = []
    for split, limit in (("train", cfg.subset_train), ("val", cfg.subset_val)):
        ds = datasets.ImageFolder(root / split, transform=tf)
        n = len(ds) if limit is None else min(limit, len(ds))
        xs, ys = zip(*(ds[i] for i in range(n)))
        out.append(ArrayDataset(torch.stack(xs), torch.tensor(ys), len(ds.classes)))
    counts = np.bincount(out[0].y.numpy(), minlength=out[0].num_classes)
    out[0].class_counts = out[1].class_counts = counts
    return out[0], out[1]


LOADERS = {
    "synthetic_gaussian": synthetic_gaussian,
    "synthetic_images": synthetic_images,
    "cifar10": cifar,
    "cifar100": cifar,
    "imagefolder": image_folder,
}


def load_datasets(cfg: DatasetConfig) -> tuple[ArrayDataset, ArrayDataset]:
    if cfg.name not in LOADERS:
        raise ConfigError(f"unknown dataset {cfg.name!r}; expected one of {sorted(LOADERS)}")
    return LOADERS[cfg.name](cfg)


def epoch_order(n: int, seed: int, epoch: int, shuffle: bool = True) -> torch.Tensor:
    """Sample order for an epoch, a pure function of (seed, epoch)."""
    if not shuffle:
        return torch.arange(n)
    g = torch.Generator().manual_seed(int(seed) * 7919 + int(epoch))
    return torch.randperm(n, generator=g)


def batches_per_epoch(n: int, batch_size: int) -> int:
    return n // batch_size if n >= batch_size else 1


def epoch_batches(ds: ArrayDataset, batch_size: int, seed: int, epoch: int, shuffle=True,
                  drop_last=True, start: int = 0):
    """Yield ``(indices, x, y)``; ``start`` skips the first batches (resume)."""
    order = epoch_order(len(ds), seed, epoch, shuffle)
    nb = batches_per_epoch(len(ds), batch_size) if drop_last else -(-len(ds) // batch_size)
    for b in range(start, nb):
        idx = order[b * batch_size:(b + 1) * batch_size]
        yield idx, ds.x[idx], ds.y[idx]


def augment_crop_flip(x: torch.Tensor, generator: torch.Generator, pad: int = 4) -> torch.Tensor:
    """Random ``pad``-pixel crop and horizontal flip, per image."""
    B, _, H, W = x.shape
    padded = F.pad(x, (pad, pad, pad, pad), mode="reflect")
    offs = torch.randint(0, 2 * pad + 1, (B, 2), generator=generator)
    flips = torch.rand(B, generator=generator) < 0.5
    out = torch.empty_like(x)
    for i in range(B):
        dy, dx = int(offs[i, 0]), int(offs[i, 1])
        img = padded[i, :, dy:dy + H, dx:dx + W]
        out[i] = img.flip(-1) if flips[i] else img
    return out


class Prefetcher:
    """Run an iterator in a background thread behind a bounded queue.

    Order is preserved, so prefetching never changes results.
    """

    _DONE = object()

    def __init__(self, iterable, maxsize: int = 4):
        self._q: queue.Queue = queue.Queue(maxsize=maxsize)
        self._err = None
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, args=(iterable,), daemon=True)
        self._thread.start()

    def _put(self, item) -> bool:
        while not self._stop.is_set():
            try:
                self._q.put(item, timeout=0.05)
                return True
            except queue.Full:
                continue
        return False

    def _run(self, iterable):
        try:
            for item in iterable:
                if not self._put(item):
                    return
        except BaseException as exc:  # re-raised in the consumer
            self._err = exc
        finally:
            self._put(self._DONE)

    def close(self) -> None:
        """Stop the producer; safe to call more than once."""
        self._stop.set()
        self._thread.join(timeout=5)

    def __iter__(self):
        while True:
            item = self._q.get()
            if item is self._DONE:
                if self._err is not None:
                    raise self._err
                return
            yield item
