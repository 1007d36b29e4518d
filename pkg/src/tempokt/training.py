"""Objective, optimizer, data split, and the epoch loop.

The reference execution mode is single-threaded and bit-deterministic: the
same seed, config and data reproduce the identical loss trajectory. All
shuffling and dropout randomness derives from the run seed.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from . import evaluation
from .featurize import EncodedDataset, WindowBatch
from .ingest import UserHistory
from .model import (Model, ModelConfig, Params, bce_loss, init_params,
                    load_checkpoint, loss_and_grads, save_checkpoint,
                    zeros_like_params)

__all__ = [
    "AdamWConfig", "OptimizerState", "TrainConfig", "TrainRun", "EpochRecord",
    "backward", "bce_loss", "adamw_step", "split_train_val", "split_user_ids",
    "train", "load_train_config",
]


@dataclass(frozen=True)
class AdamWConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "AdamWConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown optimizer config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class OptimizerState:
    """AdamW accumulators, shape-mirroring the parameter registry."""

    m: Params
    v: Params
    t: int = 0

    @classmethod
    def fresh(cls, params: Params) -> "OptimizerState":
        return cls(m=zeros_like_params(params), v=zeros_like_params(params), t=0)


def backward(model: Model, batch: WindowBatch,
             rng: np.random.Generator | None = None, train: bool = True) -> Params:
    """Exact reverse-mode gradients of the mean batch loss for every tensor."""
    _, _, grads = loss_and_grads(model, batch, rng=rng, train=train)
    return grads


def adamw_step(params: Params, grads: Params, state: OptimizerState,
               opt: AdamWConfig, clip_norm: float | None = None) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Decay is applied to the parameter directly, separate from the moment
    update; moments are bias-corrected with the post-increment step count.
    """
    if set(params) != set(grads):
        raise ValueError("parameter and gradient registries do not match")
    if clip_norm is not None:
        total = np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
        if total > clip_norm:
            scale = clip_norm / total
            grads = {name: g * g.dtype.type(scale) for name, g in grads.items()}
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter '{name}' shape {p.shape}"
            )
        dt = p.dtype.type
        if opt.weight_decay:
            p *= dt(1.0 - opt.lr * opt.weight_decay)
        m = state.m[name]
        v = state.v[name]
        m *= dt(opt.beta1)
        m += dt(1.0 - opt.beta1) * g
        v *= dt(opt.beta2)
        v += dt(1.0 - opt.beta2) * (g * g)
        m_hat = m / dt(1.0 - opt.beta1 ** t)
        v_hat = v / dt(1.0 - opt.beta2 ** t)
        p -= dt(opt.lr) * m_hat / (np.sqrt(v_hat) + dt(opt.eps))
        if not np.isfinite(p).all():
            raise FloatingPointError(f"non-finite parameter '{name}' after update")


def split_user_ids(user_ids: Sequence[int], ratio: float, seed: int) -> tuple[list[int], list[int]]:
    """Shuffle user ids by seed and cut at ceil(ratio * n)."""
    if len(user_ids) < 2:
        raise ValueError(f"need at least 2 users to split, got {len(user_ids)}")
    ids = list(user_ids)
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(np.ceil(ratio * len(ids)))
    shuffled = [ids[i] for i in order]
    return shuffled[:n_train], shuffled[n_train:]


def split_train_val(users: Sequence[UserHistory], ratio: float = 0.975,
                    seed: int = 0) -> tuple[list[UserHistory], list[UserHistory]]:
    """Split at user granularity: no user contributes to both sides."""
    by_id = {u.user_id: u for u in users}
    train_ids, val_ids = split_user_ids([u.user_id for u in users], ratio, seed)
    return [by_id[i] for i in train_ids], [by_id[i] for i in val_ids]


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig
    optimizer: AdamWConfig = AdamWConfig()
    batch_size: int = 256
    epochs: int = 10
    train_fraction: float = 0.975
    split_mode: str = "users"  # "rows" splits windows directly (fidelity escape hatch)
    clip_norm: float | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(f"train_fraction must be in (0, 1), got {self.train_fraction}")
        if self.split_mode not in ("users", "rows"):
            raise ValueError(f"split_mode must be 'users' or 'rows', got {self.split_mode!r}")

    def to_dict(self) -> dict[str, Any]:
        out = {f.name: getattr(self, f.name) for f in fields(self)
               if f.name not in ("model", "optimizer")}
        out["model"] = self.model.to_dict()
        out["optimizer"] = {f.name: getattr(self.optimizer, f.name) for f in fields(AdamWConfig)}
        return out


def load_train_config(data: Mapping[str, Any],
                      vocab_fallback=None) -> TrainConfig:
    """Build a TrainConfig from parsed JSON; unknown keys are rejected by name.

    The model section may omit "vocab" (or set it null); the dataset's
    vocabulary is used instead.
    """
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown training config keys: {sorted(unknown)}")
    kwargs = dict(data)
    model_section = dict(kwargs.pop("model", {}))
    if model_section.get("vocab") is None:
        model_section.pop("vocab", None)
        if vocab_fallback is None:
            raise ValueError("model config requires a 'vocab' section")
        model_section["vocab"] = vocab_fallback
    opt_section = kwargs.pop("optimizer", {})
    return TrainConfig(
        model=ModelConfig.from_dict(model_section),
        optimizer=AdamWConfig.from_dict(opt_section),
        **kwargs,
    )


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_auc: float
    seconds: float

    def as_dict(self) -> dict[str, Any]:
        return {"epoch": self.epoch, "train_loss": self.train_loss,
                "val_loss": self.val_loss, "val_auc": self.val_auc,
                "seconds": self.seconds}


@dataclass
class TrainRun:
    config: TrainConfig
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_auc: float = float("-inf")


def _partition(dataset: EncodedDataset, config: TrainConfig) -> tuple[WindowBatch, WindowBatch]:
    windows = dataset.windows
    if config.split_mode == "users":
        users = sorted(set(windows.user_id.tolist()))
        train_ids, val_ids = split_user_ids(users, config.train_fraction, config.seed)
        train_mask = np.isin(windows.user_id, np.array(train_ids, dtype=np.int64))
        val_mask = np.isin(windows.user_id, np.array(val_ids, dtype=np.int64))
        train_idx = np.nonzero(train_mask)[0]
        val_idx = np.nonzero(val_mask)[0]
    else:
        order = np.random.default_rng(config.seed).permutation(len(windows))
        n_train = int(np.ceil(config.train_fraction * len(windows)))
        train_idx, val_idx = order[:n_train], order[n_train:]
    if len(train_idx) == 0 or len(val_idx) == 0:
        raise ValueError(
            f"split produced an empty side: {len(train_idx)} train / {len(val_idx)} val windows"
        )
    return windows.select(train_idx), windows.select(val_idx)


def _write_history(path: Path, records: list[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "val_auc", "seconds"])
        for r in records:
            writer.writerow([r.epoch, f"{r.train_loss:.8f}", f"{r.val_loss:.8f}",
                             f"{r.val_auc:.8f}", f"{r.seconds:.3f}"])


def _optimizer_tensors(state: OptimizerState) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for name, arr in state.m.items():
        out[f"opt/m/{name}"] = arr
    for name, arr in state.v.items():
        out[f"opt/v/{name}"] = arr
    return out


def train(config: TrainConfig, dataset: EncodedDataset, run_dir: str | Path,
          resume: str | Path | None = None, wall_clock: bool = True,
          batch_hook=None) -> tuple[TrainRun, Model]:
    """Run the full loop and write run artifacts.

    run_dir receives config.json, epoch_<k>.ckpt, best.ckpt and history.csv.
    wall_clock=False writes 0.0 in the seconds column so two identical runs
    produce byte-identical history files.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if config.model.max_seq != dataset.max_seq:
        raise ValueError(
            f"config max_seq {config.model.max_seq} does not match dataset "
            f"max_seq {dataset.max_seq}"
        )
    if config.model.vocab.sizes() != dataset.vocab.sizes():
        raise ValueError("config vocabulary does not match dataset vocabulary")

    train_windows, val_windows = _partition(dataset, config)
    model = Model(config.model, init_params(config.model))
    state = OptimizerState.fresh(model.params)
    run = TrainRun(config=config)
    start_epoch = 1
    if resume is not None:
        model, step, history, opt_tensors = load_checkpoint(resume)
        state = OptimizerState.fresh(model.params)
        state.t = step
        for name in model.params:
            if f"opt/m/{name}" in opt_tensors:
                state.m[name] = opt_tensors[f"opt/m/{name}"]
                state.v[name] = opt_tensors[f"opt/v/{name}"]
        run.records = [EpochRecord(**r) for r in history]
        for rec in run.records:
            if rec.val_auc > run.best_val_auc:
                run.best_val_auc, run.best_epoch = rec.val_auc, rec.epoch
        start_epoch = len(run.records) + 1

    with open(run_dir / "config.json", "w") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")

    n_train = len(train_windows)
    for epoch in range(start_epoch, config.epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng(
            np.random.SeedSequence([config.seed, epoch])).permutation(n_train)
        epoch_loss = 0.0
        epoch_batches = 0
        for batch_start in range(0, n_train, config.batch_size):
            batch = train_windows.select(order[batch_start:batch_start + config.batch_size])
            drop_rng = np.random.default_rng(
                np.random.SeedSequence([config.seed, epoch, batch_start]))
            try:
                loss, _, grads = loss_and_grads(model, batch, rng=drop_rng, train=True)
                adamw_step(model.params, grads, state, config.optimizer,
                           clip_norm=config.clip_norm)
            except FloatingPointError as exc:
                raise FloatingPointError(
                    f"epoch {epoch}, batch at offset {batch_start}: {exc}"
                ) from exc
            epoch_loss += loss
            epoch_batches += 1
            if batch_hook is not None:
                batch_hook(epoch, batch_start, loss)

        report = evaluation.evaluate(model, val_windows)
        seconds = (time.perf_counter() - t0) if wall_clock else 0.0
        record = EpochRecord(
            epoch=epoch,
            train_loss=epoch_loss / max(epoch_batches, 1),
            val_loss=report.mean_bce,
            val_auc=report.auc,
            seconds=seconds,
        )
        run.records.append(record)
        history_dicts = [r.as_dict() for r in run.records]
        save_checkpoint(run_dir / f"epoch_{epoch}.ckpt", model, step=state.t,
                        history=history_dicts, optimizer_tensors=_optimizer_tensors(state))
        if record.val_auc > run.best_val_auc:
            run.best_val_auc, run.best_epoch = record.val_auc, epoch
            save_checkpoint(run_dir / "best.ckpt", model, step=state.t,
                            history=history_dicts)
        _write_history(run_dir / "history.csv", run.records)
    return run, model
