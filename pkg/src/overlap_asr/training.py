"""Shared optimisation loop, divergence handling and checkpoint files."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingDivergence(RuntimeError):
    """Loss became NaN or infinite."""


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-4
    grad_clip: float = 5.0
    seed: int = 0


def length_batches(lengths, batch_size: int) -> list:
    """Group item indices of similar length; returns a deterministic list of batches."""
    order = np.argsort(np.asarray(lengths), kind="stable")
    return [order[i:i + batch_size].tolist() for i in range(0, len(order), batch_size)]


def fit(model: torch.nn.Module, batches: list, loss_fn, cfg: TrainConfig, state: dict | None = None,
        on_epoch=None) -> dict:
    """Adam over precomputed batches, shuffled per epoch with a (seed, epoch) stream.

    Args:
        batches: list of opaque batch objects passed to ``loss_fn``.
        loss_fn: ``loss_fn(model, batch, rng) -> scalar tensor``.
        state: training state from a previous ``fit`` call to resume from.
        on_epoch: optional ``on_epoch(epoch, state, model)`` hook, e.g. to checkpoint.

    Returns:
        state dict with ``history`` (one row per step), ``epoch`` and the
        optimizer state.
    """
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    if state is None:
        state = {"epoch": 0, "step": 0, "history": []}
    else:
        opt.load_state_dict(state["optimizer"])
        torch.set_rng_state(state["torch_rng"])
    model.train()
    for epoch in range(state["epoch"], cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        total = 0.0
        for bi in rng.permutation(len(batches)):
            opt.zero_grad()
            loss = loss_fn(model, batches[bi], rng)
            value = float(loss.detach())
            if not np.isfinite(value):
                raise TrainingDivergence(f"loss became {value} at epoch {epoch}, step {state['step']}")
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            state["history"].append({"epoch": epoch, "step": state["step"], "loss": value})
            state["step"] += 1
            total += value
        state["epoch"] = epoch + 1
        state["optimizer"] = opt.state_dict()
        state["torch_rng"] = torch.get_rng_state()
        logger.info("epoch %d mean loss %.4f", epoch, total / max(len(batches), 1))
        if on_epoch is not None:
            on_epoch(epoch, state, model)
    state["optimizer"] = opt.state_dict()
    state["torch_rng"] = torch.get_rng_state()
    return state


def epoch_means(history) -> list:
    sums = {}
    for row in history:
        s = sums.setdefault(row["epoch"], [0.0, 0])
        s[0] += row["loss"]
        s[1] += 1
    return [sums[e][0] / sums[e][1] for e in sorted(sums)]


def write_loss_csv(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "step", "loss"])
        for row in history:
            w.writerow([row["epoch"], row["step"], repr(row["loss"])])


def read_loss_csv(path) -> list:
    with open(path) as fh:
        return [{"epoch": int(r["epoch"]), "step": int(r["step"]), "loss": float(r["loss"])}
                for r in csv.DictReader(fh)]


def save_checkpoint(path, kind: str, model: torch.nn.Module, config, train_state: dict | None = None,
                    extra: dict | None = None) -> None:
    """Versioned archive of named parameter tensors plus a JSON-able config."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": asdict(config) if hasattr(config, "__dataclass_fields__") else config,
        "params": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "train_state": train_state,
        "extra": extra or {},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    return payload
