"""Training harness: run configuration, Adam, checkpoints, the fold loop, evaluation
and the architecture x loss ablation grid.

All randomness is derived from ``(seed, purpose, epoch, index)`` so an epoch
can be replayed from a checkpoint without any saved generator state.
"""
from __future__ import annotations

import contextlib
import copy
import dataclasses
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import RecordStore, make_split, network_input, rotate_augment
from .errors import ConfigError, FormatError, LeakageError
from .network import EARConfig, Network, build_network
from .objectives import (LOSSES, aggregate, binarize, compute_metrics, mean_sd,
                         segmentation_loss)
from .tensor import Tensor, backward, no_grad, scale

log = logging.getLogger(__name__)

ARMS = {
    "UNet3D": {"use_attention": False, "use_lstm": False},
    "UNet3D-Attention": {"use_attention": True, "use_lstm": False},
    "3D-EAR": {"use_attention": True, "use_lstm": True},
}

# stream tags for np.random.default_rng([seed, tag, ...])
_INIT, _SHUFFLE, _AUGMENT, _SPLIT = 0, 1, 2, 3


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class OptimizerConfig:
    name: str = "adam"
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class SplitConfig:
    test_fraction: float = 0.2
    k_folds: int = 5


@dataclass
class RunConfig:
    model: EARConfig = field(default_factory=EARConfig)
    loss: str = "dice_iou"
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    epochs: int = 50
    batch_size: int = 1
    seed: int = 0
    data: str = ""
    split: SplitConfig = field(default_factory=SplitConfig)
    output_dir: str = "runs"
    augment: bool = True
    val_every: int = 1
    deterministic: bool = False
    dtype: str = "float32"
    ablation_seeds: list = field(default_factory=lambda: [0])

    def validate(self) -> "RunConfig":
        self.model.validate()
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.optimizer.name != "adam":
            raise ConfigError(f"only the adam optimizer is available, got {self.optimizer.name!r}")
        if not self.optimizer.lr > 0:
            raise ConfigError("learning rate must be positive")
        if self.epochs < 0 or self.batch_size < 1 or self.val_every < 1:
            raise ConfigError("epochs must be >= 0, batch_size and val_every >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if not self.ablation_seeds:
            raise ConfigError("ablation_seeds must not be empty")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        try:
            if "model" in kw:
                kw["model"] = EARConfig.from_dict(kw["model"])
            for key, sub in (("optimizer", OptimizerConfig), ("split", SplitConfig)):
                if key in kw:
                    _reject_unknown(sub, kw[key], key)
                    kw[key] = sub(**kw[key])
            return cls(**kw).validate()
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at offset {exc.pos}: {exc.msg}") from None

    def np_dtype(self):
        return np.dtype(self.dtype)


def _reject_unknown(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")


@contextlib.contextmanager
def deterministic_mode(enabled: bool = True):
    """Pin BLAS pools to one thread so reductions keep a fixed order."""
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=1):
        yield


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, named_params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(named_params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]

    @classmethod
    def from_config(cls, net: Network, cfg: OptimizerConfig) -> "Adam":
        return cls(net.named_parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for (_, p), m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.dtype, copy=False)

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state(self, t, m, v):
        self.t = int(t)
        for dst, src in zip(self.m, m):
            dst[...] = src
        for dst, src in zip(self.v, v):
            dst[...] = src


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"EAR3DCK\x01"


def save_checkpoint(path, net: Network, opt: Adam | None, meta: dict) -> Path:
    """Magic, u64 header length, UTF-8 JSON header, then raw little-endian buffers.

    The header lists name, shape, dtype, offset and byte count of every array,
    so the file is a pure function of its contents (no timestamps, no zip
    metadata).
    """
    arrays = [(f"param/{n}", p.data) for n, p in net.named_parameters()]
    if opt is not None:
        names = [n for n, _ in opt.params]
        arrays += [(f"adam_m/{n}", a) for n, a in zip(names, opt.m)]
        arrays += [(f"adam_v/{n}", a) for n, a in zip(names, opt.v)]
    entries, blobs, offset = [], [], 0
    for name, arr in arrays:
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        buf = le.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name,
                        "offset": offset, "nbytes": len(buf)})
        blobs.append(buf)
        offset += len(buf)
    header = {"format_version": 1, "model": net.config.to_dict(), "adam_t": opt.t if opt else None,
              "meta": meta, "arrays": entries}
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)
    return path


def read_checkpoint(path) -> tuple:
    """(header, {name: array}) of a checkpoint file."""
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise FormatError(f"{path} is not a checkpoint", offset=0)
    if len(data) < 16:
        raise FormatError(f"{path} is truncated", offset=len(data))
    (hlen,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError(f"{path} has a corrupt header", offset=16) from None
    base = 16 + hlen
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(data):
            raise FormatError(f"{path}: array {e['name']} runs past the end of file", offset=len(data))
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        arr = np.frombuffer(data, dtype=dt, count=e["nbytes"] // dt.itemsize, offset=start)
        arrays[e["name"]] = arr.astype(np.dtype(e["dtype"])).reshape(e["shape"])
    return header, arrays


def load_checkpoint(path, opt_cfg: OptimizerConfig | None = None) -> tuple:
    """Rebuild ``(network, optimizer or None, meta)`` from a checkpoint."""
    header, arrays = read_checkpoint(path)
    cfg = EARConfig.from_dict(header["model"])
    first = next(iter(arrays.values()))
    net = build_network(cfg, seed=0, dtype=first.dtype)
    for name, p in net.named_parameters():
        key = f"param/{name}"
        if key not in arrays or arrays[key].shape != p.shape:
            raise FormatError(f"{path}: parameter {name} missing or misshapen")
        p.data = arrays[key].copy()
    opt = None
    if opt_cfg is not None and header["adam_t"] is not None:
        opt = Adam.from_config(net, opt_cfg)
        names = [n for n, _ in opt.params]
        opt.load_state(header["adam_t"], [arrays[f"adam_m/{n}"] for n in names],
                       [arrays[f"adam_v/{n}"] for n in names])
    return net, opt, header["meta"]


# ---------------------------------------------------------------------------
# epochs
# ---------------------------------------------------------------------------

def _rng(seed, *tags):
    return np.random.default_rng([int(seed), *tags])


def _sample(store: RecordStore, idx: int, cfg: RunConfig, epoch: int | None):
    rec = store.get(idx)
    if cfg.augment and epoch is not None:
        angle = int(_rng(cfg.seed, _AUGMENT, epoch, idx).choice((0, 90, 180, 270)))
        if angle:
            rec = rotate_augment(rec, angle)
    return rec


def train_epoch(net, opt, store, indices, cfg: RunConfig, epoch: int) -> dict:
    order = [indices[i] for i in _rng(cfg.seed, _SHUFFLE, epoch).permutation(len(indices))]
    dtype = net.dtype
    total, dices = 0.0, []
    for start in range(0, len(order), cfg.batch_size):
        batch = order[start:start + cfg.batch_size]
        opt.zero_grad()
        for idx in batch:
            rec = _sample(store, idx, cfg, epoch)
            probs = net(Tensor(network_input(rec, dtype)))
            loss = segmentation_loss(cfg.loss, probs, rec.mask[None])
            total += loss.item()
            backward(scale(loss, 1.0 / len(batch)))
            dices.append(compute_metrics(binarize(probs)[0], rec.mask).dice)
        opt.step()
    return {"train_loss": total / max(len(order), 1), "train_dice": _mean_defined(dices)}


def _mean_defined(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def predict_probs(net: Network, rec) -> np.ndarray:
    with no_grad():
        return net(Tensor(network_input(rec, net.dtype))).data


def evaluate(net, store, indices, loss_name=None) -> dict:
    """Per-record metrics (and loss if ``loss_name``) without augmentation."""
    out = []
    with no_grad():
        for idx in indices:
            rec = store.get(idx)
            probs = net(Tensor(network_input(rec, net.dtype)))
            report = compute_metrics(binarize(probs)[0], rec.mask)
            row = {"index": idx, "subject_id": rec.subject_id, "slice_id": rec.slice_id,
                   "metrics": report}
            if loss_name is not None:
                row["loss"] = segmentation_loss(loss_name, probs, rec.mask[None]).item()
            out.append(row)
    return {"records": out}


class JsonLog:
    def __init__(self, path, append=False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not append:
            self.path.write_text("", encoding="utf-8")

    def write(self, row: dict):
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _truncate_log(path: Path, last_epoch: int):
    """Drop log lines past ``last_epoch`` so a resumed run appends cleanly."""
    if not path.exists():
        return
    keep = [line for line in path.read_text(encoding="utf-8").splitlines()
            if line and json.loads(line).get("epoch", -1) <= last_epoch]
    path.write_text("".join(line + "\n" for line in keep), encoding="utf-8")


def train_fold(cfg: RunConfig, store: RecordStore, train_idx, val_idx, out_dir, fold=0,
               resume=None) -> dict:
    """Train one model; writes ``log.jsonl``, ``best.ckpt`` and ``last.ckpt`` under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "log.jsonl"
    start, best = 0, -1.0
    if resume is not None:
        net, opt, meta = load_checkpoint(resume, cfg.optimizer)
        if net.config != cfg.model:
            raise ConfigError("checkpoint model config differs from the run config")
        if opt is None:
            raise ConfigError(f"{resume} holds no optimizer state")
        start, best = meta["epoch"] + 1, meta["best_val_dice"]
        _truncate_log(log_path, meta["epoch"])
        logger = JsonLog(log_path, append=True)
    else:
        net = build_network(cfg.model, seed=int(_rng(cfg.seed, _INIT).integers(2 ** 63)),
                            dtype=cfg.np_dtype())
        opt = Adam.from_config(net, cfg.optimizer)
        logger = JsonLog(log_path)
    for epoch in range(start, cfg.epochs):
        row = {"fold": fold, "epoch": epoch}
        row.update(train_epoch(net, opt, store, train_idx, cfg, epoch))
        validate = (epoch + 1) % cfg.val_every == 0 or epoch == cfg.epochs - 1
        row["val_loss"] = row["val_dice"] = None
        if validate:
            ev = evaluate(net, store, val_idx, cfg.loss)["records"]
            row["val_loss"] = float(np.mean([r["loss"] for r in ev])) if ev else None
            row["val_dice"] = _mean_defined([r["metrics"].dice for r in ev])
        logger.write(row)
        log.info("fold %d epoch %d loss %.5f val dice %s", fold, epoch, row["train_loss"],
                 row["val_dice"])
        val = row["val_dice"] if row["val_dice"] is not None else 0.0
        meta = {"fold": fold, "epoch": epoch, "seed": cfg.seed, "loss": cfg.loss}
        if validate and val > best:
            best = val
            save_checkpoint(out_dir / "best.ckpt", net, None, dict(meta, best_val_dice=best))
        save_checkpoint(out_dir / "last.ckpt", net, opt, dict(meta, best_val_dice=best))
    return {"fold": fold, "best_val_dice": best, "net": net, "dir": str(out_dir)}


def cmd_train(cfg: RunConfig, store: RecordStore | None = None, resume=None) -> dict:
    """Subject-level split, then the fold loop (or a single run when ``k_folds <= 1``).

    Test subjects are forbidden in ``store`` for the whole of training.
    """
    cfg.validate()
    store = store or RecordStore.open(cfg.data)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    split = make_split(store.manifest.subjects, cfg.split.test_fraction, cfg.split.k_folds,
                       seed=int(_rng(cfg.seed, _SPLIT).integers(2 ** 63)))
    (out / "split.json").write_text(json.dumps(split.to_dict(), indent=2, sort_keys=True) + "\n",
                                    encoding="utf-8")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n",
                                     encoding="utf-8")
    results = []
    with deterministic_mode(cfg.deterministic):
        first_access = len(store.access_log)
        store.forbid(split.test_subjects)
        try:
            if split.folds:
                for j in range(len(split.folds)):
                    tr, val = split.fold(j)
                    results.append(train_fold(cfg, store, store.indices_for(tr), store.indices_for(val),
                                              out / f"fold_{j}", fold=j, resume=_fold_resume(resume, j)))
            else:
                idx = store.indices_for(split.train_subjects)
                results.append(train_fold(cfg, store, idx, idx, out / "fold_0", fold=0,
                                          resume=_fold_resume(resume, 0)))
        finally:
            store.allow_all()
        leaked = {s for _, s in store.access_log[first_access:]} & set(split.test_subjects)
        if leaked:
            raise LeakageError(f"test subjects touched during training: {sorted(leaked)}")
        chosen = max(results, key=lambda r: r["best_val_dice"])
        summary = {"split": split.to_dict(),
                   "folds": [{"fold": r["fold"], "best_val_dice": r["best_val_dice"],
                              "dir": Path(r["dir"]).name} for r in results],
                   "selected_fold": chosen["fold"]}
        if split.test_subjects:
            net, _, _ = load_checkpoint(Path(chosen["dir"]) / "best.ckpt")
            test = evaluate(net, store, store.indices_for(split.test_subjects))["records"]
            summary["test"] = metrics_summary(test)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                                      encoding="utf-8")
    summary["results"] = results
    return summary


def _fold_resume(resume, fold):
    if resume is None:
        return None
    resume = Path(resume)
    if resume.is_dir():
        path = resume / f"fold_{fold}" / "last.ckpt"
        return path if path.exists() else None
    return resume if fold == 0 else None


def metrics_summary(rows) -> dict:
    """Per-record reports plus the subject-level aggregate."""
    reports = [r["metrics"] for r in rows]
    return {"records": [{"subject_id": r["subject_id"], "slice_id": r["slice_id"],
                         **r["metrics"].to_dict()} for r in rows],
            "aggregate": aggregate(reports, [r["subject_id"] for r in rows])}


# ---------------------------------------------------------------------------
# ablation grid
# ---------------------------------------------------------------------------

def arm_config(base: EARConfig, arm: str) -> EARConfig:
    return dataclasses.replace(base, **ARMS[arm])


def cmd_ablation(cfg: RunConfig, store: RecordStore | None = None) -> dict:
    """Train every architecture x loss cell for each seed in ``cfg.ablation_seeds``.

    A cell's score is the subject-level mean of its test metrics, and the
    reported sd is taken over test subjects pooled across seeds.
    """
    cfg.validate()
    store = store or RecordStore.open(cfg.data)
    out = Path(cfg.output_dir)
    cells = {}
    for arm in ARMS:
        for loss in LOSSES:
            per_seed, per_subject = [], {"dice": [], "sensitivity": [], "ppv": []}
            for seed in cfg.ablation_seeds:
                run = copy.deepcopy(cfg)
                run.model = arm_config(cfg.model, arm)
                run.loss, run.seed = loss, int(seed)
                run.output_dir = str(out / arm / loss / f"seed_{seed}")
                summary = cmd_train(run, store)
                test = summary.get("test")
                if test is None:
                    raise ConfigError("ablation needs a nonempty test split")
                agg = test["aggregate"]
                per_seed.append({m: agg[m]["mean"] for m in per_subject})
                for m in per_subject:
                    per_subject[m].extend(_subject_means(test["records"], m))
            cell = {"seeds": [int(s) for s in cfg.ablation_seeds], "per_seed": per_seed}
            for m, vals in per_subject.items():
                mean, sd = mean_sd(vals)
                cell[m] = {"mean": mean, "sd": sd,
                           "median_over_seeds": _median([p[m] for p in per_seed])}
            cells[f"{arm}|{loss}"] = cell
    grid = {"arms": list(ARMS), "losses": list(LOSSES), "cells": cells,
            "sd_over": "test subjects pooled across seeds"}
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(grid, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "ablation.md").write_text(ablation_markdown(grid), encoding="utf-8")
    return grid


def _subject_means(records, metric):
    per = {}
    for r in records:
        if r[metric] is not None:
            per.setdefault(r["subject_id"], []).append(r[metric])
    return [float(np.mean(v)) for _, v in sorted(per.items())]


def _median(values):
    vals = [v for v in values if v is not None]
    return float(np.median(vals)) if vals else None


def _fmt(cell_metric) -> str:
    if cell_metric["mean"] is None:
        return "n/a"
    return f"{cell_metric['mean']:.2f}±{cell_metric['sd']:.2f}"


def ablation_markdown(grid: dict) -> str:
    """Dice table (arms x losses) and a sensitivity/PPV table in the same layout."""
    losses = grid["losses"]
    names = {"cross_entropy": "Cross-Entropy", "dice": "Dice", "dice_iou": "Dice-IoU"}
    lines = ["## Test Dice (mean±sd over test subjects)", "",
             "| Model | " + " | ".join(names[l] for l in losses) + " |",
             "|---|" + "---|" * len(losses)]
    for arm in grid["arms"]:
        row = [_fmt(grid["cells"][f"{arm}|{l}"]["dice"]) for l in losses]
        lines.append(f"| {arm} | " + " | ".join(row) + " |")
    lines += ["", "## Test sensitivity / PPV", "",
              "| Model | " + " | ".join(f"{names[l]} Sens. | {names[l]} PPV" for l in losses) + " |",
              "|---|" + "---|" * (2 * len(losses))]
    for arm in grid["arms"]:
        row = []
        for l in losses:
            c = grid["cells"][f"{arm}|{l}"]
            row += [_fmt(c["sensitivity"]), _fmt(c["ppv"])]
        lines.append(f"| {arm} | " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"
