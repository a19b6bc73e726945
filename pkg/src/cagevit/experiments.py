"""Toy-scale training and ablation sweeps over rho and K."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import SyntheticTask, gen_dataset, stack_images
from .model import TINY, AdamW, VariantConfig, build, count_params, partition_for, predict, train_step


@dataclass
class TrainResult:
    config: VariantConfig
    losses: list = field(default_factory=list)
    accuracy: float = 0.0
    holdout_accuracy: float | None = None
    steps_to_target: int | None = None
    params: object = None


def task_for(config: VariantConfig, **overrides) -> SyntheticTask:
    """Synthetic task matching a config's grid, patch geometry and class count."""
    opts = dict(n_classes=config.n_classes, grid=(config.rows, config.cols), patch=(config.ph, config.pw, config.C))
    opts.update(overrides)
    return SyntheticTask(**opts)


def train_toy(config: VariantConfig = TINY, steps: int = 2000, seed: int = 0, n_samples: int = 512,
              batch_size: int = 32, lr: float = 1e-3, task: SyntheticTask | None = None,
              eval_every: int = 100, target: float | None = None, n_holdout: int = 0, log=None) -> TrainResult:
    """Train on a synthetic dataset; ``accuracy`` is measured on the training set.

    ``n_holdout`` extra samples from the same task are kept out of training
    and scored at the end. With ``target`` set, training stops at the first
    evaluation whose training accuracy reaches it.
    """
    task = task or task_for(config, seed=seed)
    data = gen_dataset(task, n_samples + n_holdout)
    samples, held = data[:n_samples], data[n_samples:]
    images = stack_images(samples)
    labels = np.array([s.label for s in samples])
    parts = [partition_for(config, s.bundle) for s in samples]
    params = build(config, seed)
    opt = AdamW(params)
    rng = np.random.default_rng(seed + 1)
    result = TrainResult(config, params=params)
    order, cursor = rng.permutation(n_samples), 0
    for step in range(1, steps + 1):
        if cursor + batch_size > n_samples:
            order, cursor = rng.permutation(n_samples), 0
        idx = order[cursor : cursor + batch_size]
        cursor += batch_size
        loss = train_step(params, (images[idx], [parts[i] for i in idx]), labels[idx], lr, opt)
        result.losses.append(loss)
        if step % eval_every == 0 or step == steps:
            acc = float((predict(params, images, parts) == labels).mean())
            result.accuracy = acc
            if log:
                log(f"step {step:5d}  loss {np.mean(result.losses[-eval_every:]):.4f}  train_acc {acc:.3f}")
            if target is not None and acc >= target:
                result.steps_to_target = step
                break
    if held:
        h_parts = [partition_for(config, s.bundle) for s in held]
        h_labels = np.array([s.label for s in held])
        result.holdout_accuracy = float((predict(params, stack_images(held), h_parts) == h_labels).mean())
    return result


def sweep(param: str, values, steps: int = 2000, seed: int = 0, config: VariantConfig = TINY,
          task_overrides: dict | None = None, n_holdout: int = 512, log=None, **train_kw) -> list:
    """Train one model per value of ``rho`` or ``K`` with everything else fixed.

    Returns rows of ``{"value", "params", "accuracy", "holdout_accuracy",
    "final_loss"}``; held-out accuracy is on ``n_holdout`` unseen samples.
    For ``K`` sweeps the default task carries max(values) maps per bundle
    and a 50% chance that a distractor map has the top confidence.
    """
    if param not in ("rho", "K"):
        raise ValueError(f"sweep parameter must be 'rho' or 'K', got {param!r}")
    overrides = dict(task_overrides or {})
    if param == "K":
        overrides.setdefault("n_maps", int(max(values)))
        overrides.setdefault("cam_error", 0.5)
    rows = []
    for v in values:
        cfg = config.replace(**{param: float(v) if param == "rho" else int(v)})
        res = train_toy(cfg, steps, seed, task=task_for(cfg, seed=seed, **overrides), n_holdout=n_holdout, **train_kw)
        row = {"value": v, "params": count_params(cfg), "accuracy": res.accuracy,
               "holdout_accuracy": res.holdout_accuracy, "final_loss": float(np.mean(res.losses[-50:]))}
        rows.append(row)
        if log:
            log(f"{param}={v}: params={row['params']} accuracy={row['accuracy']:.3f} "
                f"holdout={row['holdout_accuracy']:.3f} loss={row['final_loss']:.4f}")
    return rows
