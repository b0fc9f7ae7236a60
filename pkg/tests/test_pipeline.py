import csv
import json

import numpy as np
import pytest
import torch

from gendd.errors import ConfigError, GenDDError, NonFiniteError
from gendd.pipeline.ablate import parse_values, read_summary, run_sweep
from gendd.pipeline.config import (apply_overrides, config_from_dict, load_config, parse_override,
                                   preset_names)
from gendd.pipeline.data import (ArrayDataset, DatasetMissingError, Prefetcher, augment_crop_flip, cifar,
                                 epoch_batches, load_datasets, synthetic_gaussian, synthetic_images)
from gendd.pipeline.models import build_backbone, parameter_checksum
from gendd.pipeline.train import Trainer, lr_lambda, shot_group, summarize_predictions
from gendd.tokenizer import apply_stats

TINY = [
    "dataset.train_size=400", "dataset.val_size=200", "teacher.pretrain_epochs=5",
    "gendd.head_width=32", "gendd.sampling_steps=8", "optim.max_steps=12", "optim.batch_size=32",
]


def tiny(*extra):
    return load_config("smoke", TINY + list(extra))


@pytest.fixture(scope="module")
def tiny_data():
    cfg = tiny()
    return load_datasets(cfg.dataset)


# ---------------------------------------------------------------- config

def test_presets_load():
    for name in preset_names():
        assert load_config(name).name
    assert {"smoke", "mismatch", "cifar10_reduced", "cifar100_r32x4_r8x4"} <= set(preset_names())


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError):
        config_from_dict({"gendd": {"dtok": 4}})
    with pytest.raises(ConfigError):
        load_config("smoke", ["nonsense.key=1"])
    with pytest.raises(ConfigError):
        load_config("no_such_preset")


def test_overrides_and_parse():
    assert parse_override("gendd.lam=0.5") == (["gendd", "lam"], 0.5)
    assert parse_override("gendd.d_tok=null") == (["gendd", "d_tok"], None)
    for bad in ("novalue", "=3", "a..b=1"):
        with pytest.raises(ConfigError):
            parse_override(bad)
    cfg = load_config("smoke", ["gendd.lam=0.5", "optim.kind=sgd"])
    assert cfg.gendd.lam == 0.5 and cfg.optim.kind == "sgd"
    base = {"gendd": {"lam": 0.9}}
    apply_overrides(base, ["gendd.lam=0.1"])
    assert base["gendd"]["lam"] == 0.9


def test_unsupervised_requires_lambda_one():
    with pytest.raises(ConfigError):
        load_config("smoke", ["gendd.supervised=false"])
    assert load_config("smoke", ["gendd.supervised=false", "gendd.lam=1.0"]).gendd.lam == 1.0


def test_lr_schedule_shapes():
    cfg = tiny("optim.schedule=step", "optim.milestone_unit=fraction", "optim.milestones=[0.5,0.75]",
               "optim.warmup_epochs=0")
    fn = lr_lambda(cfg, 10, 100)
    assert [fn(s) for s in (0, 49, 50, 74, 75, 99)] == pytest.approx([1, 1, 0.1, 0.1, 0.01, 0.01])
    fn = lr_lambda(tiny("optim.warmup_epochs=1"), 10, 100)
    assert fn(0) == pytest.approx(0.1) and fn(9) == pytest.approx(1.0)
    assert fn(99) < 0.01


# ---------------------------------------------------------------- data

def test_synthetic_determinism_and_balance():
    cfg = tiny().dataset
    a, b = synthetic_gaussian(cfg), synthetic_gaussian(cfg)
    assert torch.equal(a[0].x, b[0].x) and torch.equal(a[1].y, b[1].y)
    assert np.bincount(a[0].y.numpy()).tolist() == [200, 200]
    assert a[0].class_counts is None


def test_imbalanced_class_counts():
    cfg = load_config("smoke", ["dataset.num_classes=5", "dataset.train_size=1000",
                                "dataset.imbalance_ratio=50"]).dataset
    train, val = synthetic_gaussian(cfg)
    assert np.bincount(train.y.numpy()).tolist() == list(train.class_counts)
    assert [shot_group(c) for c in train.class_counts] == ["many", "many", "medium", "medium", "few"]


def test_synthetic_images_shape():
    cfg = load_config("smoke", ["dataset.name=synthetic_images", "dataset.image_size=8",
                                "dataset.train_size=20", "dataset.val_size=10"]).dataset
    train, val = synthetic_images(cfg)
    assert train.input_shape == (3, 8, 8) and len(val) == 10


def test_missing_dataset_is_setup_error(tmp_path):
    cfg = load_config("cifar10_reduced", [f"dataset.root={tmp_path / 'nope'}"]).dataset
    with pytest.raises(DatasetMissingError):
        load_datasets(cfg)
    assert issubclass(DatasetMissingError, ConfigError)


def test_cifar_binary_reader(tmp_path):
    rng = np.random.default_rng(0)

    def write(name, n, label_bytes):
        rec = np.zeros((n, label_bytes + 3072), np.uint8)
        rec[:, :label_bytes] = rng.integers(0, 10, (n, label_bytes))
        rec[:, label_bytes:] = rng.integers(0, 256, (n, 3072))
        rec.tofile(tmp_path / name)
        return rec

    recs = [write(f"data_batch_{i}.bin", 3, 1) for i in range(1, 6)]
    write("test_batch.bin", 4, 1)
    cfg = load_config("cifar10_reduced", [f"dataset.root={tmp_path}", "dataset.subset_train=null",
                                          "dataset.subset_val=null"]).dataset
    train, val = cifar(cfg)
    assert len(train) == 15 and len(val) == 4 and train.input_shape == (3, 32, 32)
    assert train.y.tolist()[:3] == recs[0][:, 0].tolist()
    pix = recs[0][0, 1:].reshape(3, 32, 32)[1, 2, 3] / 255.0
    assert float(train.x[0, 1, 2, 3]) == pytest.approx((pix - 0.4822) / 0.2435, abs=1e-5)


def test_cifar100_fine_label(tmp_path):
    rec = np.zeros((2, 2 + 3072), np.uint8)
    rec[:, 0], rec[:, 1] = [3, 4], [77, 12]
    rec.tofile(tmp_path / "train.bin")
    rec.tofile(tmp_path / "test.bin")
    cfg = load_config("cifar100_r32x4_r8x4", [f"dataset.root={tmp_path}"]).dataset
    train, _ = cifar(cfg)
    assert train.y.tolist() == [77, 12] and train.num_classes == 100


def test_epoch_batches_resume_and_order():
    ds = ArrayDataset(torch.arange(10.0)[:, None], torch.zeros(10, dtype=torch.long), 1)
    full = [i.tolist() for i, _, _ in epoch_batches(ds, 3, 5, 2)]
    assert len(full) == 3 and len({j for b in full for j in b}) == 9
    assert [i.tolist() for i, _, _ in epoch_batches(ds, 3, 5, 2, start=1)] == full[1:]
    assert full != [i.tolist() for i, _, _ in epoch_batches(ds, 3, 5, 3)]


def test_prefetcher_order_and_errors():
    assert list(Prefetcher(iter(range(100)), maxsize=2)) == list(range(100))

    def boom():
        yield 1
        raise ValueError("producer failed")

    with pytest.raises(ValueError):
        list(Prefetcher(boom()))
    p = Prefetcher(iter(range(10**6)), maxsize=2)
    next(iter(p))
    p.close()
    assert not p._thread.is_alive()


def test_crop_flip_preserves_shape_and_content():
    x = torch.randn(6, 3, 8, 8)
    g = torch.Generator().manual_seed(0)
    out = augment_crop_flip(x, g, pad=0)
    for i in range(6):
        assert torch.equal(out[i], x[i]) or torch.equal(out[i], x[i].flip(-1))
    assert augment_crop_flip(x, torch.Generator().manual_seed(1)).shape == x.shape


# ---------------------------------------------------------------- models

@pytest.mark.parametrize("arch,shape,dim", [("linear", (16,), 8), ("mlp", (16,), 32), ("cnn2", (3, 16, 16), 64),
                                            ("resnet8x4", (3, 16, 16), 256)])
def test_backbone_shapes(arch, shape, dim):
    net = build_backbone(arch, shape, dim, 16)
    assert net(torch.randn(2, *shape)).shape == (2, dim)


def test_resnet_feature_dim_mismatch():
    with pytest.raises(ConfigError):
        build_backbone("resnet8x4", (3, 32, 32), 64, 16)
    with pytest.raises(ConfigError):
        build_backbone("vit", (3, 32, 32), 64, 16)


# ---------------------------------------------------------------- trainer

def test_teacher_immutable_and_outputs(tmp_path, tiny_data):
    t = Trainer(tiny(), tmp_path, datasets=tiny_data)
    before = parameter_checksum(t.teacher)
    summary = t.fit()
    assert parameter_checksum(t.teacher) == before == t.teacher_checksum
    assert summary["steps"] == 12
    for f in ("metrics.csv", "eval.csv", "last.pt", "best.pt", "summary.json", "config.yaml"):
        assert (tmp_path / f).exists()


def test_teacher_tamper_detected(tmp_path, tiny_data):
    t = Trainer(tiny(), tmp_path, datasets=tiny_data)
    with torch.no_grad():
        t.teacher.classifier.bias.add_(1.0)
    with pytest.raises(GenDDError):
        t.fit(evaluate_at_end=False)


def test_determinism_identical_metrics(tmp_path, tiny_data):
    for d in ("a", "b"):
        Trainer(tiny(), tmp_path / d, datasets=tiny_data).fit(evaluate_at_end=False)
    assert (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()


@pytest.mark.parametrize("mode", ["gendd", "kl"])
def test_checkpoint_resume_matches_uninterrupted(tmp_path, tiny_data, mode):
    ref = Trainer(tiny(), tmp_path / "ref", mode=mode, datasets=tiny_data)
    ref.fit(evaluate_at_end=False)
    part = Trainer(tiny(), tmp_path / "part", mode=mode, datasets=tiny_data)
    part.fit(max_steps=5, evaluate_at_end=False)
    resumed = Trainer(tiny(), tmp_path / "part", mode=mode, datasets=tiny_data)
    resumed.load_checkpoint(tmp_path / "part/last.pt")
    assert resumed.step == 5
    resumed.fit(evaluate_at_end=False)
    a = [r["loss"] for r in ref.history[5:]]
    b = [r["loss"] for r in resumed.history]
    np.testing.assert_allclose(b, a, rtol=1e-5)
    with open(tmp_path / "part/metrics.csv") as fh:
        assert [int(r["step"]) for r in csv.DictReader(fh)] == list(range(1, 13))


def test_checkpoint_config_mismatch(tmp_path, tiny_data):
    t = Trainer(tiny(), tmp_path, datasets=tiny_data)
    t.save_checkpoint(tmp_path / "c.pt")
    other = Trainer(tiny("gendd.lam=0.5"), tmp_path, datasets=tiny_data, teacher=t.teacher)
    with pytest.raises(Exception, match="different configuration"):
        other.load_checkpoint(tmp_path / "c.pt")


def test_nan_aborts_with_last_good(tmp_path, tiny_data):
    t = Trainer(tiny(), tmp_path, datasets=tiny_data)
    orig, calls = t.compute_loss, {"n": 0}

    def poisoned(x, y):
        calls["n"] += 1
        loss = orig(x, y)
        return loss * float("nan") if calls["n"] == 3 else loss

    t.compute_loss = poisoned
    with pytest.raises(NonFiniteError):
        t.fit()
    state = torch.load(tmp_path / "last_good.pt", weights_only=False)
    assert state["step"] == 2
    assert all(torch.isfinite(v).all() for v in state["head"].values())


class _StandardizedTeacher(torch.nn.Module):
    def __init__(self, teacher, stats):
        super().__init__()
        self.teacher, self.stats = teacher, stats

    def forward(self, x):
        return apply_stats(self.teacher.features(x), self.stats)


class _OracleHead(torch.nn.Module):
    """Exact noise predictor given the (standardized) teacher feature as condition."""

    def __init__(self, schedule, n, d_tok):
        super().__init__()
        self.n_positions, self.token_dim = n, d_tok
        self.abar = torch.tensor(schedule.alpha_bar, dtype=torch.float32)
        self.null_condition = torch.nn.Parameter(torch.zeros(1))

    def forward(self, x, m, ids, cond=None, drop_mask=None):
        x0 = cond.view(cond.shape[0], self.n_positions, self.token_dim)[:, ids]
        ab = self.abar[int(m)]
        return (x - ab.sqrt() * x0) / (1 - ab).sqrt()


def test_upper_consistency_oracle_head(tmp_path, tiny_data):
    t = Trainer(tiny("gendd.guidance_scale=1.0", "gendd.variance=zero", "gendd.sampling_steps=64"),
                tmp_path, datasets=tiny_data)
    t.student = _StandardizedTeacher(t.teacher, t.stats)
    t.head = _OracleHead(t.schedule, t.n_tokens, t.d_tok)
    res = t.evaluate(t.val_set)
    with torch.no_grad():
        teacher_top1 = float((t.teacher(t.val_set.x).argmax(1) == t.val_set.y).float().mean())
    assert res["top1"] == pytest.approx(teacher_top1)


def test_random_head_near_chance(tmp_path):
    cfg = tiny("dataset.num_classes=4", "dataset.val_size=400")
    t = Trainer(cfg, tmp_path)
    res = t.evaluate(t.val_set)
    assert abs(res["top1"] - 0.25) <= 0.1
    assert set(res["per_class"]) == {0, 1, 2, 3}


def test_summarize_shot_groups():
    labels = np.array([0, 0, 1, 1, 2, 2])
    preds = np.array([0, 0, 1, 0, 0, 0])
    res = summarize_predictions(labels, preds, np.ones(6), 3, np.array([500, 50, 5]))
    assert res["top1"] == pytest.approx(0.5)
    assert res["per_class"] == {0: 1.0, 1: 0.5, 2: 0.0}
    assert res["shot_groups"] == {"many": 1.0, "medium": 0.5, "few": 0.0}


def test_shot_groups_reported_on_imbalanced_run(tmp_path):
    cfg = tiny("dataset.num_classes=5", "dataset.train_size=1000", "dataset.imbalance_ratio=50")
    t = Trainer(cfg, tmp_path)
    assert set(t.evaluate(t.val_set)["shot_groups"]) == {"many", "medium", "few"}


def test_kl_starts_at_zero_when_student_is_teacher(tmp_path, tiny_data):
    cfg = tiny("student.feature_dim=256", "kl.supervised=false")
    t = Trainer(cfg, tmp_path, mode="kl", datasets=tiny_data)
    t.student.load_state_dict(t.teacher.state_dict())
    x, y = tiny_data[0].x[:64], tiny_data[0].y[:64]
    assert float(t.compute_loss(x, y).detach()) == pytest.approx(0.0, abs=1e-6)


def test_unsupervised_gendd_ignores_labels(tmp_path, tiny_data):
    cfg = tiny("gendd.supervised=false", "gendd.lam=1.0")
    t = Trainer(cfg, tmp_path, datasets=tiny_data)
    x, y = tiny_data[0].x[:32], tiny_data[0].y[:32]
    g = t.generator.get_state()
    a = t.compute_loss(x, y)
    t.generator.set_state(g)
    b = t.compute_loss(x, torch.randint(0, 2, (32,)))
    assert torch.equal(a, b)


# ---------------------------------------------------------------- ablations

def test_parse_values():
    assert parse_values("token_dim", "16,64,full") == [16, 64, None]
    assert parse_values("lambda", ["0", "0.9"]) == [0.0, 0.9]
    with pytest.raises(ConfigError):
        parse_values("depth", "1")


ABLATE_BASE = ["optim.max_steps=400", "optim.milestone_unit=fraction", "optim.milestones=[0.5,0.75]"]


@pytest.fixture(scope="module")
def ablations(tmp_path_factory):
    base = load_config("smoke", ABLATE_BASE)
    out = tmp_path_factory.mktemp("ablate")
    return {s: {r["value"]: r for r in run_sweep(base, s, v, out)}
            for s, v in (("optimizer", "adamw,sgd"), ("lr_schedule", "cosine,step"), ("lambda", "0,0.9"))}


@pytest.mark.slow
def test_ablation_adamw_beats_sgd(ablations):
    r = ablations["optimizer"]
    assert r["adamw"]["final_loss"] < r["sgd"]["final_loss"]


@pytest.mark.slow
def test_ablation_cosine_at_least_step(ablations):
    r = ablations["lr_schedule"]
    assert r["cosine"]["top1"] >= r["step"]["top1"]


@pytest.mark.slow
def test_ablation_lambda_zero_worse(ablations):
    r = ablations["lambda"]
    assert r["0.0"]["top1"] < r["0.9"]["top1"]


def test_ablation_summary_csv(tmp_path):
    base = tiny()
    rows = run_sweep(base, "token_dim", "16,64", tmp_path)
    back = read_summary(tmp_path / "ablation_token_dim.csv")
    assert [r["value"] for r in back] == ["16", "64"] and all(r["steps"] == 12 for r in back)
    assert back[0]["top1"] == pytest.approx(rows[0]["top1"], rel=1e-5)
    assert json.loads((tmp_path / "token_dim=16/summary.json").read_text())["steps"] == 12


def test_config_types_checked_and_coerced():
    cfg = load_config("smoke", ["optim.lr=1e-3", "gendd.lam=1"])
    assert cfg.optim.lr == 1e-3 and isinstance(cfg.gendd.lam, float)
    for bad in ("optim.lr=fast", "optim.batch_size=3.5", "gendd.standardize=maybe", "optim.epochs=null"):
        with pytest.raises(ConfigError):
            load_config("smoke", [bad])


@pytest.mark.slow
def test_smoke_loss_halves_in_200_steps(tmp_path):
    t = Trainer(load_config("smoke", ["optim.max_steps=200"]), tmp_path)
    t.fit(evaluate_at_end=False)
    losses = [r["loss"] for r in t.history]
    early, late = np.mean(losses[:10]), np.mean(losses[-10:])
    assert late <= 0.5 * early
