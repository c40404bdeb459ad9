"""SGD with momentum, polynomial LR decay, training loop, checkpoints.

The learning rate at iteration t is base_lr * (1 - t/max_iter)^power
with power 0.5 by default; max_iter derives from the epoch count and
dataset size.  Biases update at twice the weight learning rate through
per-parameter multipliers.  Checkpoints are a small binary format with
a CRC32 trailer plus a JSON sidecar holding the architecture.
"""

from __future__ import annotations

import json
import math
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import data as data_mod
from . import evaluation, nn
from .errors import (ConfigError, DataError, DivergenceError, FormatError,
                     RangeError, ShapeError)
from .ioutil import atomic_write_bytes, atomic_write_text


@dataclass(frozen=True)
class LrSchedule:
    """Polynomial decay: lr(t) = base_lr * (1 - t/max_iter)^power."""

    base_lr: float = 0.01
    max_iter: int = 1
    power: float = 0.5
    policy: str = "poly"  # poly | fixed | step | exp
    gamma: float = 0.1    # step/exp decay factor
    step_size: int = 0    # iterations per step-policy drop (0 = max_iter // 3)

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be > 0, got {self.base_lr}")
        if not 0.0 <= self.power <= 1.0:
            raise ConfigError(f"power must lie in [0, 1], got {self.power}")
        if self.max_iter < 1:
            raise ConfigError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.policy not in ("poly", "fixed", "step", "exp"):
            raise ConfigError(f"unknown LR policy {self.policy!r}")


def poly_lr(sched: LrSchedule, iteration: int) -> float:
    """Learning rate at ``iteration`` under the polynomial policy."""
    if iteration < 0 or iteration > sched.max_iter:
        raise RangeError(
            f"iteration {iteration} outside [0, {sched.max_iter}]")
    return sched.base_lr * (1.0 - iteration / sched.max_iter) ** sched.power


def schedule_lr(sched: LrSchedule, iteration: int) -> float:
    """Learning rate under whichever policy the schedule selects."""
    if sched.policy == "poly":
        return poly_lr(sched, iteration)
    if iteration < 0 or iteration > sched.max_iter:
        raise RangeError(f"iteration {iteration} outside [0, {sched.max_iter}]")
    if sched.policy == "fixed":
        return sched.base_lr
    if sched.policy == "step":
        size = sched.step_size or max(1, sched.max_iter // 3)
        return sched.base_lr * sched.gamma ** (iteration // size)
    return sched.base_lr * sched.gamma ** (iteration / sched.max_iter)  # exp


@dataclass(frozen=True)
class TrainConfig:
    """Knobs of one training run."""

    batch_size: int = 250
    epochs: int = 200
    bias_lr_multiplier: float = 2.0
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    dtype: str = "float32"  # precision mode; float64 for diagnostics
    augment: bool = True    # one random crop/flip view per sample per epoch

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.bias_lr_multiplier <= 0:
            raise ConfigError("bias_lr_multiplier must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")


class TrainHistory:
    """Per-iteration losses and per-epoch validation accuracy."""

    def __init__(self):
        self.iterations: list[int] = []
        self.losses: list[float] = []
        self.epoch_of_iteration: list[int] = []
        self.val_epochs: list[int] = []
        self.val_iterations: list[int] = []
        self.val_top1: list[float] = []
        self.val_top2: list[float] = []

    def record_iteration(self, iteration, loss, epoch):
        self.iterations.append(int(iteration))
        self.losses.append(float(loss))
        self.epoch_of_iteration.append(int(epoch))

    def record_validation(self, epoch, iteration, top1, top2):
        self.val_epochs.append(int(epoch))
        self.val_iterations.append(int(iteration))
        self.val_top1.append(float(top1))
        self.val_top2.append(float(top2))

    def __eq__(self, other):
        if not isinstance(other, TrainHistory):
            return NotImplemented
        return (self.iterations == other.iterations
                and self.losses == other.losses
                and self.epoch_of_iteration == other.epoch_of_iteration
                and self.val_epochs == other.val_epochs
                and self.val_iterations == other.val_iterations
                and self.val_top1 == other.val_top1
                and self.val_top2 == other.val_top2)

    def to_csv(self) -> str:
        """CSV with header iter,loss,epoch,val_top1,val_top2.

        Validation columns are filled on the last iteration row of each
        epoch and left empty elsewhere.
        """
        val_at = {it: (t1, t2) for it, t1, t2 in
                  zip(self.val_iterations, self.val_top1, self.val_top2)}
        lines = ["iter,loss,epoch,val_top1,val_top2"]
        for it, loss, epoch in zip(self.iterations, self.losses,
                                   self.epoch_of_iteration):
            if it in val_at:
                t1, t2 = val_at[it]
                lines.append(f"{it},{loss!r},{epoch},{t1!r},{t2!r}")
            else:
                lines.append(f"{it},{loss!r},{epoch},,")
        return "\n".join(lines) + "\n"

    def write_csv(self, path):
        atomic_write_text(path, self.to_csv())

    @classmethod
    def from_csv(cls, path) -> "TrainHistory":
        history = cls()
        with open(path, encoding="utf-8") as handle:
            header = handle.readline().strip()
            if header != "iter,loss,epoch,val_top1,val_top2":
                raise FormatError(f"unexpected history header {header!r}")
            for line in handle:
                line = line.strip()
                if not line:
                    continue
                it, loss, epoch, t1, t2 = line.split(",")
                history.record_iteration(int(it), float(loss), int(epoch))
                if t1:
                    history.record_validation(int(epoch), int(it),
                                              float(t1), float(t2))
        return history


def sgd_step(net: nn.Network, grads, lr, cfg: TrainConfig, velocity):
    """One momentum-SGD update, in place.

    v <- momentum*v - lr*mult*(g + weight_decay*w); w <- w + v, where
    mult is the parameter's learning-rate multiplier on the network.
    Returns (net, velocity) for chaining.
    """
    for name, param in net.params.items():
        if name not in grads:
            raise ShapeError(f"missing gradient for parameter {name!r}")
        g = grads[name]
        if g.shape != param.shape:
            raise ShapeError(
                f"gradient shape {g.shape} != parameter shape {param.shape} ({name})")
        if cfg.weight_decay:
            g = g + cfg.weight_decay * param
        mult = net.lr_mult.get(name, 1.0)
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(param)
        v = cfg.momentum * v - (lr * mult) * g
        velocity[name] = v
        param += v
    return net, velocity


def train(net: nn.Network, train_set, val_set, cfg: TrainConfig,
          sched: LrSchedule | None = None, on_iteration=None, on_epoch=None):
    """Train ``net`` on ``train_set``; returns (net, TrainHistory).

    Each epoch shuffles the sample order with the run's seeded generator
    and, when augmentation is on, draws one of the 11 views (original or
    a crop/flip) per sample.  Validation top-1/top-2 on the un-augmented
    images is recorded at the end of every epoch.  A non-finite loss
    aborts with the failing iteration.  Deterministic for a fixed seed
    at parallelism 1.
    """
    n = len(train_set)
    if n == 0:
        raise DataError("training set is empty")
    if np.dtype(cfg.dtype) != net.dtype:
        net = net.astype(cfg.dtype)
    for name in net.lr_mult:
        if name.endswith(".bias"):
            net.lr_mult[name] = cfg.bias_lr_multiplier

    iters_per_epoch = math.ceil(n / cfg.batch_size)
    max_iter = cfg.epochs * iters_per_epoch
    if sched is None:
        sched = LrSchedule(max_iter=max_iter)
    rng = np.random.default_rng(cfg.seed)
    velocity: dict[str, np.ndarray] = {}
    history = TrainHistory()
    iteration = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        if cfg.augment:
            views = rng.integers(0, 11, size=n)
        else:
            views = np.zeros(n, dtype=np.int64)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = train_set.images[idx]
            if cfg.augment:
                batch = data_mod.apply_views(batch, views[idx])
            labels = train_set.labels[idx]
            lr = schedule_lr(sched, min(iteration, sched.max_iter))
            _, cache = net.forward(batch, train_mode=True)
            loss, grads = net.backward(cache, labels)
            if not np.isfinite(loss):
                raise DivergenceError("training loss became non-finite",
                                      iteration=iteration)
            sgd_step(net, grads, lr, cfg, velocity)
            history.record_iteration(iteration, loss, epoch)
            if on_iteration is not None:
                on_iteration(iteration, loss, epoch, lr)
            iteration += 1
        if val_set is not None and len(val_set):
            metrics = evaluation.evaluate(net, val_set, views=1,
                                          batch_size=cfg.batch_size)
            history.record_validation(epoch, iteration - 1,
                                      metrics.top1, metrics.top2)
            if on_epoch is not None:
                on_epoch(epoch, metrics.top1, metrics.top2)
        elif on_epoch is not None:
            on_epoch(epoch, None, None)
    return net, history


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"FERN"
CHECKPOINT_VERSION = 1


def _config_to_dict(config: nn.NetworkConfig) -> dict:
    layers = []
    for spec in config.layers:
        entry = {"kind": spec.kind, "name": spec.name}
        if spec.patch is not None:
            entry["patch"] = list(spec.patch)
        if spec.stride is not None:
            entry["stride"] = spec.stride
        if spec.pad is not None:
            entry["pad"] = spec.pad
        if spec.out_channels is not None:
            entry["out_channels"] = spec.out_channels
        if spec.inception is not None:
            entry["inception"] = {k: getattr(spec.inception, k)
                                  for k in ("n1x1", "n3x3reduce", "n3x3",
                                            "n5x5reduce", "n5x5", "npoolproj")}
        layers.append(entry)
    return {
        "in_channels": config.in_channels,
        "input_size": list(config.input_size),
        "num_classes": config.num_classes,
        "layers": layers,
    }


def _config_from_dict(payload: dict) -> nn.NetworkConfig:
    layers = []
    for entry in payload["layers"]:
        inception = None
        if "inception" in entry:
            inception = nn.InceptionSpec(**entry["inception"])
        layers.append(nn.LayerSpec(
            kind=entry["kind"], name=entry["name"],
            patch=tuple(entry["patch"]) if "patch" in entry else None,
            stride=entry.get("stride"), pad=entry.get("pad"),
            out_channels=entry.get("out_channels"), inception=inception,
        ))
    return nn.NetworkConfig(layers=tuple(layers),
                            in_channels=payload["in_channels"],
                            input_size=tuple(payload["input_size"]),
                            num_classes=payload["num_classes"])


def _sidecar_path(path) -> str:
    return os.fspath(path) + ".json"


def save_checkpoint(net: nn.Network, path) -> None:
    """Write parameters in the binary checkpoint format, atomically.

    Layout: magic "FERN", version byte, u32 parameter count; then per
    parameter a u16 name length, the UTF-8 name, a rank byte, u32
    extents, and float32 little-endian values; finally a CRC32 of all
    preceding bytes.  The architecture and LR multipliers go to a JSON
    sidecar at ``path + ".json"``.
    """
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf.append(CHECKPOINT_VERSION)
    buf += struct.pack("<I", len(net.params))
    for name, arr in net.params.items():
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise FormatError(f"parameter name too long: {name[:40]}...")
        buf += struct.pack("<H", len(encoded))
        buf += encoded
        if arr.ndim > 0xFF:
            raise FormatError(f"parameter rank too large: {arr.ndim}")
        buf.append(arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    atomic_write_bytes(path, bytes(buf))

    sidecar = {
        "config": _config_to_dict(net.config),
        "lr_mult": dict(net.lr_mult),
        "dtype": str(net.dtype),
    }
    atomic_write_text(_sidecar_path(path), json.dumps(sidecar, indent=2) + "\n")


def load_checkpoint(path) -> nn.Network:
    """Read a checkpoint written by :func:`save_checkpoint`.

    Bad magic, wrong version, checksum mismatch, truncation, or missing
    sidecar raise FormatError naming the byte offset where applicable.
    """
    with open(path, "rb") as handle:
        raw = handle.read()
    if len(raw) < 13:  # magic + version + count + crc
        raise FormatError("file too short to be a checkpoint", offset=len(raw))
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}", offset=0)
    if raw[4] != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported version {raw[4]}", offset=4)
    stored_crc = struct.unpack("<I", raw[-4:])[0]
    actual_crc = zlib.crc32(raw[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise FormatError(
            f"checksum mismatch (stored {stored_crc:#010x}, "
            f"computed {actual_crc:#010x})", offset=len(raw) - 4)

    body = raw[:-4]
    offset = 5
    (count,) = struct.unpack_from("<I", body, offset)
    offset += 4

    def need(nbytes, what):
        nonlocal offset
        if offset + nbytes > len(body):
            raise FormatError(f"truncated while reading {what}", offset=offset)
        chunk = body[offset:offset + nbytes]
        offset += nbytes
        return chunk

    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", need(2, "name length"))
        name = need(name_len, "name").decode("utf-8")
        rank = need(1, "rank")[0]
        shape = struct.unpack(f"<{rank}I", need(4 * rank, "extents"))
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        values = np.frombuffer(need(4 * size, f"values of {name!r}"),
                               dtype="<f4").reshape(shape)
        params[name] = values.astype(np.float32)
    if offset != len(body):
        raise FormatError("trailing bytes after last parameter", offset=offset)

    sidecar_path = _sidecar_path(path)
    if not os.path.exists(sidecar_path):
        raise FormatError(f"missing config sidecar {sidecar_path!r}")
    with open(sidecar_path, encoding="utf-8") as handle:
        sidecar = json.load(handle)
    config = _config_from_dict(sidecar["config"])
    lr_mult = {k: float(v) for k, v in sidecar.get("lr_mult", {}).items()}
    for name in params:
        lr_mult.setdefault(name, 2.0 if name.endswith(".bias") else 1.0)
    return nn.Network(config, params, lr_mult, np.float32)
