"""Self-supervised pretraining loop with warm-up + cosine schedule and checkpoints."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Union

import numpy as np
import torch

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ModelConfig, TrainConfig, fingerprint, from_dict, to_dict
from .datakit import augment_batch
from .errors import DataError, NumericError
from .model import SDMAE
from .objectives import metric_columns
from .patching import patchify, random_mask

log = logging.getLogger(__name__)

NO_DECAY = ("cls_token", "mask_token", "pos_embed", "decoder_pos_embed")


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warm-up from 0 to ``base_lr``, then half-cosine down to 0 at ``total_steps``."""
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps <= warmup_steps:
        return base_lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


def build_optimizer(model: torch.nn.Module, lr: float, weight_decay: float, betas=(0.9, 0.95)) -> torch.optim.AdamW:
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        if p.ndim < 2 or name.split(".")[-1] in NO_DECAY:
            no_decay.append(p)
        else:
            decay.append(p)
    groups = [{"params": decay, "weight_decay": weight_decay}, {"params": no_decay, "weight_decay": 0.0}]
    return torch.optim.AdamW(groups, lr=lr, betas=tuple(betas))


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for g in optimizer.param_groups:
        g["lr"] = lr


def optimizer_arrays(model: torch.nn.Module, optimizer: torch.optim.Optimizer) -> Dict[str, np.ndarray]:
    out = {}
    for name, p in model.named_parameters():
        state = optimizer.state.get(p)
        if not state:
            continue
        for key, val in state.items():
            out[f"{name}/{key}"] = torch.as_tensor(val).detach().cpu().numpy()
    return out


def load_optimizer_arrays(model: torch.nn.Module, optimizer: torch.optim.Optimizer, arrays: Dict[str, np.ndarray]):
    params = dict(model.named_parameters())
    for key, arr in arrays.items():
        name, slot = key.rsplit("/", 1)
        p = params[name]
        optimizer.state[p][slot] = torch.from_numpy(arr.copy()).to(p.device)


def model_arrays(model: torch.nn.Module) -> Dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}


def load_model_arrays(model: torch.nn.Module, arrays: Dict[str, np.ndarray]) -> None:
    state = {k: torch.from_numpy(v.copy()) for k, v in arrays.items()}
    model.load_state_dict(state, strict=True)


def model_from_checkpoint(ckpt: Union[Checkpoint, str, Path]) -> SDMAE:
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    model = SDMAE(from_dict(ModelConfig, ckpt.model_config))
    dtype = next(iter(ckpt.params.values())).dtype
    if dtype == np.float64:
        model.double()
    load_model_arrays(model, ckpt.params)
    return model


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass
class PretrainResult:
    model: SDMAE
    checkpoint: Checkpoint
    history: List[Dict[str, float]] = field(default_factory=list)  # per-epoch mean losses
    steps: List[Dict[str, float]] = field(default_factory=list)  # per-step log rows
    run_dir: Optional[Path] = None


def _as_images(data) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(data))
    if x.dtype == torch.uint8:
        x = x.float() / 255.0
    return x.float()


def pretrain(
    data,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    run_dir: Optional[Union[str, Path]] = None,
    resume: Optional[Union[str, Path]] = None,
    steps_per_epoch: Optional[int] = None,
    dtype: torch.dtype = torch.float32,
    on_step: Optional[Callable[[SDMAE, Dict[str, float]], None]] = None,
) -> PretrainResult:
    """Pretrain an SD-MAE/MAE model on ``data`` (N, H, W, C) images in [0, 1] (or uint8).

    Every step: sample batch -> (augment) -> patchify -> random mask -> forward
    -> loss -> backward -> AdamW step.  The batch order, augmentation and masks
    are all derived from ``(train_cfg.seed, epoch/step)``, so a resumed run
    replays exactly what an uninterrupted run would have done.

    ``steps_per_epoch`` overrides ``len(data) // batch_size`` (e.g. to run
    many steps over one small batch).
    """
    model_cfg.validate()
    train_cfg.validate()
    images = _as_images(data).to(dtype)
    if len(images) == 0:
        raise DataError("pretraining dataset is empty")
    if images.shape[1] != model_cfg.img_size:
        raise DataError(f"images are {images.shape[1]}px, model expects {model_cfg.img_size}px")
    n = len(images)
    bs = min(train_cfg.batch_size, n)
    spe = steps_per_epoch or max(1, n // bs)
    total_steps = spe * train_cfg.epochs
    warmup_steps = spe * train_cfg.warmup_epochs
    peak_lr = train_cfg.effective_lr()
    weights = train_cfg.loss
    fp = fingerprint(model_cfg, train_cfg)

    torch.manual_seed(train_cfg.seed)
    model = SDMAE(model_cfg).to(dtype)
    optimizer = build_optimizer(model, peak_lr, train_cfg.weight_decay, train_cfg.betas)
    start_epoch, step = 0, 0
    if resume is not None:
        ckpt = load_checkpoint(resume, expected_fingerprint=fp)
        load_model_arrays(model, ckpt.params)
        load_optimizer_arrays(model, optimizer, ckpt.optimizer)
        start_epoch, step = ckpt.epoch, ckpt.step
        log.info("resumed from %s at epoch %d step %d", resume, start_epoch, step)

    columns = ["step", "epoch", "lr"] + metric_columns(weights.mode)
    writer = csv_file = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        metrics_path = run_dir / "metrics.csv"
        new_file = not metrics_path.exists() or resume is None
        csv_file = open(metrics_path, "w" if resume is None else "a", newline="")
        writer = csv.DictWriter(csv_file, fieldnames=columns)
        if new_file:
            writer.writeheader()

    def snapshot(epoch: int) -> Checkpoint:
        params = model_arrays(model)
        bad = [k for k, v in params.items() if v.dtype.kind == "f" and not np.isfinite(v).all()]
        if bad:
            raise NumericError(f"non-finite parameters after epoch {epoch}: {', '.join(bad[:5])}")
        return Checkpoint(
            params=params,
            optimizer=optimizer_arrays(model, optimizer),
            step=step,
            epoch=epoch,
            fingerprint=fp,
            model_config=to_dict(model_cfg),
            train_config=to_dict(train_cfg),
        )

    history: List[Dict[str, float]] = []
    step_rows: List[Dict[str, float]] = []
    model.train()
    try:
        for epoch in range(start_epoch, train_cfg.epochs):
            t0 = time.time()
            order = np.random.default_rng([train_cfg.seed, epoch]).permutation(n)
            sums: Dict[str, float] = {}
            for i in range(spe):
                idx = order[(i * bs) % n : (i * bs) % n + bs]
                if len(idx) < bs:
                    idx = np.concatenate([idx, order[: bs - len(idx)]])
                x = images[torch.from_numpy(idx)]
                if train_cfg.augment:
                    x = augment_batch(x, torch.Generator().manual_seed(_derived_seed(train_cfg.seed, step, 1)))
                seq = patchify(x, model_cfg.patch_size)
                if train_cfg.freeze_masks:
                    mask_seed = [_derived_seed(train_cfg.seed, j, 2) for j in idx]
                else:
                    mask_seed = _derived_seed(train_cfg.seed, step, 2)
                plan = random_mask(seq, train_cfg.mask_ratio, mask_seed)

                lr = lr_at(step, total_steps, warmup_steps, peak_lr)
                set_lr(optimizer, lr)
                report, _ = model.loss(seq, plan, weights)
                if not torch.isfinite(report.total):
                    raise NumericError(f"non-finite loss at epoch {epoch} step {step}")
                optimizer.zero_grad(set_to_none=True)
                report.total.backward()
                optimizer.step()

                row = {"step": step, "epoch": epoch, "lr": lr, **report.components()}
                step_rows.append(row)
                if writer is not None:
                    writer.writerow(row)
                for k in metric_columns(weights.mode):
                    sums[k] = sums.get(k, 0.0) + row[k]
                if on_step is not None:
                    on_step(model, row)
                step += 1

            means = {k: v / spe for k, v in sums.items()}
            history.append({"epoch": epoch, **means})
            log.info(
                "epoch %d/%d %s (%.1fs)",
                epoch + 1,
                train_cfg.epochs,
                " ".join(f"{k}={v:.4f}" for k, v in means.items()),
                time.time() - t0,
            )
            if run_dir is not None:
                csv_file.flush()
                last = epoch + 1 == train_cfg.epochs
                if last or (train_cfg.checkpoint_every and (epoch + 1) % train_cfg.checkpoint_every == 0):
                    ckpt = snapshot(epoch + 1)
                    save_checkpoint(ckpt, run_dir / "checkpoints" / f"epoch_{epoch + 1:04d}.ckpt")
                    save_checkpoint(ckpt, run_dir / "checkpoints" / "last.ckpt")
    finally:
        if csv_file is not None:
            csv_file.close()

    if run_dir is not None:
        with open(run_dir / "epochs.csv", "a" if resume else "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["epoch"] + metric_columns(weights.mode))
            if resume is None:
                w.writeheader()
            w.writerows(history)
    return PretrainResult(model, snapshot(train_cfg.epochs), history, step_rows, run_dir)
