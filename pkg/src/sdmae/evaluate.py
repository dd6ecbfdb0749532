"""Downstream evaluation: linear probe, fine-tuning, kNN mismatch rate, attention export."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
from PIL import Image

from .checkpoint import Checkpoint, load_arrays, save_arrays
from .config import TrainConfig
from .datakit import augment_batch
from .errors import ConfigError, CorruptCheckpointError, DataError, DimensionError, ParameterError
from .model import SDMAE
from .pretrain import lr_at, model_from_checkpoint, set_lr

log = logging.getLogger(__name__)


# -- metrics -----------------------------------------------------------------
def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def accuracy_from_cm(cm: np.ndarray) -> float:
    return float(np.trace(cm) / max(cm.sum(), 1))


def macro_f1_from_cm(cm: np.ndarray) -> float:
    """Unweighted mean of per-class F1; classes absent from both truth and prediction count as 0."""
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(axis=0) + cm.sum(axis=1)
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    return float(f1.mean())


def binary_auc(scores, labels) -> float:
    """ROC AUC via the Mann-Whitney statistic; ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) > 2 or not set(classes.tolist()) <= {0, 1}:
        raise ParameterError("AUC is only defined here for binary 0/1 labels")
    pos, neg = scores[labels == 1], scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise ParameterError("AUC needs at least one positive and one negative example")
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


@dataclass
class EvalReport:
    accuracy: float
    accuracy_std: float
    macro_f1: float
    macro_f1_std: float
    auc: Optional[float]
    auc_std: Optional[float]
    per_class_counts: List[int]
    runs: List[Dict[str, float]] = field(default_factory=list)
    task: str = ""
    source: str = ""

    @classmethod
    def from_runs(cls, runs: List[Dict[str, float]], counts: Sequence[int], task: str = "", source: str = ""):
        def stat(key):
            vals = [r[key] for r in runs if r.get(key) is not None]
            if not vals:
                return None, None
            return float(np.mean(vals)), float(np.std(vals))

        acc, acc_s = stat("accuracy")
        f1, f1_s = stat("macro_f1")
        auc, auc_s = stat("auc")
        return cls(acc, acc_s, f1, f1_s, auc, auc_s, [int(c) for c in counts], runs, task, source)

    def write(self, out_dir: Union[str, Path], stem: str) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{stem}.json").write_text(json.dumps(asdict(self), indent=1, sort_keys=True))
        keys = ["seed", "accuracy", "macro_f1", "auc"]
        lines = [",".join(keys)]
        for r in self.runs:
            lines.append(",".join("" if r.get(k) is None else f"{r[k]}" for k in keys))
        lines.append(",".join(["mean", f"{self.accuracy}", f"{self.macro_f1}", "" if self.auc is None else f"{self.auc}"]))
        lines.append(
            ",".join(["std", f"{self.accuracy_std}", f"{self.macro_f1_std}", "" if self.auc_std is None else f"{self.auc_std}"])
        )
        (out_dir / f"{stem}.csv").write_text("\n".join(lines) + "\n")


def score_predictions(probs: np.ndarray, labels: np.ndarray, num_classes: int, want_auc: Optional[bool] = None):
    pred = probs.argmax(axis=1)
    cm = confusion_matrix(labels, pred, num_classes)
    out = {"accuracy": accuracy_from_cm(cm), "macro_f1": macro_f1_from_cm(cm), "auc": None}
    if want_auc is None:
        want_auc = num_classes == 2
    if want_auc:
        if num_classes != 2:
            raise ParameterError(f"AUC requested for a {num_classes}-class task; AUC is binary-only")
        out["auc"] = binary_auc(probs[:, 1], labels)
    return out


# -- embeddings ----------------------------------------------------------------
@dataclass
class EmbeddingTable:
    vectors: np.ndarray  # (n, d)
    labels: np.ndarray  # (n,)
    source: str = ""

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.vectors.ndim != 2 or len(self.vectors) != len(self.labels):
            raise DimensionError(f"vectors {self.vectors.shape} and labels {self.labels.shape} do not align")
        if len(self.labels) < 2:
            raise ParameterError("an embedding table needs at least two rows")
        if not np.isfinite(self.vectors).all():
            raise ParameterError("embedding table contains non-finite values")
        if self.labels.min() < 0:
            raise ParameterError("labels must be non-negative class ids")

    def save(self, path) -> Path:
        return save_arrays(path, {"vectors": self.vectors, "labels": self.labels}, {"kind": "embedding_table", "source": self.source})

    @classmethod
    def load(cls, path) -> "EmbeddingTable":
        arrays, meta = load_arrays(path)
        if meta.get("kind") != "embedding_table":
            raise CorruptCheckpointError(f"{path}: archive holds {meta.get('kind')!r}, not an embedding table")
        return cls(arrays["vectors"], arrays["labels"], meta.get("source", ""))


@torch.no_grad()
def extract_features(model: SDMAE, images, pool: str = "cls", batch_size: int = 256) -> np.ndarray:
    """Encoder features for full (unmasked) images."""
    model.eval()
    x = torch.as_tensor(np.asarray(images))
    if x.dtype == torch.uint8:
        x = x.float() / 255.0
    dtype = model.backbone.patch_embed.weight.dtype
    feats = [model.backbone.features(x[i : i + batch_size].to(dtype), pool) for i in range(0, len(x), batch_size)]
    return torch.cat(feats).double().numpy()


def embedding_table(model: SDMAE, images, labels, source: str = "", pool: str = "cls") -> EmbeddingTable:
    return EmbeddingTable(extract_features(model, images, pool), labels, source)


def balanced_subsample(table: EmbeddingTable, per_class: int = 32, seed: int = 0) -> EmbeddingTable:
    rng = np.random.default_rng(seed)
    keep = []
    for c in np.unique(table.labels):
        idx = np.flatnonzero(table.labels == c)
        keep.append(np.sort(rng.choice(idx, size=min(per_class, len(idx)), replace=False)))
    keep = np.concatenate(keep)
    return EmbeddingTable(table.vectors[keep], table.labels[keep], table.source)


def knn_mismatch_rate(table: EmbeddingTable, k: int) -> np.ndarray:
    """Average fraction of label-mismatched neighbours among the top-j, for j = 1..k.

    Neighbours are ranked by cosine distance on L2-normalized vectors, the
    item itself excluded; equal distances are broken by lower row index.
    Returns an array of length ``k`` whose entry ``j-1`` is the top-j rate.
    """
    n = len(table.labels)
    if not 1 <= k < n:
        raise ParameterError(f"k must satisfy 1 <= k < n (= {n}), got {k}")
    v = table.vectors
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    v = v / np.maximum(norms, 1e-12)
    dist = 1.0 - v @ v.T
    np.fill_diagonal(dist, np.inf)
    order = np.argsort(dist, axis=1, kind="stable")[:, :k]
    mismatch = table.labels[order] != table.labels[:, None]
    per_item = np.cumsum(mismatch, axis=1) / np.arange(1, k + 1)
    return per_item.mean(axis=0)


# -- linear probe ----------------------------------------------------------------
def _train_linear(feats, labels, num_classes, epochs, lr, seed, weight_decay=0.0):
    torch.manual_seed(seed)
    x = torch.as_tensor(feats, dtype=torch.float64)
    y = torch.as_tensor(labels, dtype=torch.long)
    head = nn.Linear(x.shape[1], num_classes).double()
    prior = np.bincount(labels, minlength=num_classes) / len(labels)
    with torch.no_grad():
        head.weight.zero_()
        head.bias.copy_(torch.log(torch.as_tensor(np.maximum(prior, 1e-12))))
    opt = torch.optim.Adam(head.parameters(), lr=lr, weight_decay=weight_decay)
    loss_fn = nn.CrossEntropyLoss()
    for _ in range(epochs):
        opt.zero_grad()
        loss_fn(head(x), y).backward()
        opt.step()
    return head


def linear_probe(
    model: Union[SDMAE, Checkpoint, str, Path],
    train_x,
    train_y,
    val_x,
    val_y,
    epochs: int = 100,
    lr: float = 0.05,
    seeds: Sequence[int] = (0, 1, 2),
    pool: str = "cls",
    num_classes: Optional[int] = None,
    want_auc: Optional[bool] = None,
) -> EvalReport:
    """Train a softmax classifier on frozen features (standardized with train statistics).

    The head starts at zero weights with log-prior biases, so a zero-epoch
    probe predicts the majority training class.
    """
    if not isinstance(model, SDMAE):
        model = model_from_checkpoint(model)
    train_y = np.asarray(train_y)
    val_y = np.asarray(val_y)
    C = num_classes or int(max(train_y.max(), val_y.max()) + 1)
    ftr = extract_features(model, train_x, pool)
    fva = extract_features(model, val_x, pool)
    mu, sd = ftr.mean(axis=0), ftr.std(axis=0) + 1e-6
    ftr, fva = (ftr - mu) / sd, (fva - mu) / sd
    runs = []
    for seed in seeds:
        head = _train_linear(ftr, train_y, C, epochs, lr, seed)
        with torch.no_grad():
            probs = torch.softmax(head(torch.as_tensor(fva)), dim=1).numpy()
        runs.append({"seed": seed, **score_predictions(probs, val_y, C, want_auc)})
    return EvalReport.from_runs(runs, np.bincount(val_y, minlength=C), task="linear_probe")


# -- fine-tuning -----------------------------------------------------------------
class Classifier(nn.Module):
    def __init__(self, model: SDMAE, num_classes: int, pool: str = "cls"):
        super().__init__()
        self.backbone = model.backbone
        self.pool = pool
        width = model.cfg.enc_width * (2 if pool == "cls+mean" else 1)
        self.fc_norm = nn.LayerNorm(width, eps=1e-6)
        self.head = nn.Linear(width, num_classes)
        nn.init.trunc_normal_(self.head.weight, std=2e-5)
        nn.init.zeros_(self.head.bias)

    def forward(self, x):
        return self.head(self.fc_norm(self.backbone.features(x, self.pool)))


def finetune(
    model: Union[SDMAE, Checkpoint, str, Path],
    train_x,
    train_y,
    val_x,
    val_y,
    train_cfg: TrainConfig,
    seeds: Sequence[int] = (0, 1, 2),
    pool: str = "cls",
    num_classes: Optional[int] = None,
    want_auc: Optional[bool] = None,
) -> EvalReport:
    """End-to-end fine-tuning of the encoder plus a linear head; one run per seed.

    Uses ``train_cfg.ft_lr`` (batch-scaled like pretraining), ``weight_decay``,
    ``ft_epochs`` with ``ft_warmup_epochs`` of linear warm-up then cosine decay,
    and horizontal-flip augmentation when ``train_cfg.augment`` is set.
    """
    base = model if isinstance(model, SDMAE) else model_from_checkpoint(model)
    tx = _as_float(train_x)
    vx = _as_float(val_x)
    train_y = np.asarray(train_y)
    val_y = np.asarray(val_y)
    if tx.shape[1] != base.cfg.img_size or vx.shape[1] != base.cfg.img_size:
        raise ConfigError(f"images are {tx.shape[1]}px but the encoder expects {base.cfg.img_size}px")
    C = num_classes or int(max(train_y.max(), val_y.max()) + 1)
    if train_y.max() >= C or val_y.max() >= C:
        raise ConfigError(f"labels exceed the declared {C} classes")
    if len(tx) == 0:
        raise DataError("no training images for fine-tuning")

    runs = []
    for seed in seeds:
        torch.manual_seed(seed)
        clf = Classifier(copy.deepcopy(base), C, pool)
        dtype = base.backbone.patch_embed.weight.dtype
        clf.to(dtype)
        params = [p for n, p in clf.named_parameters()]
        decay = [p for p in params if p.ndim >= 2]
        no_decay = [p for p in params if p.ndim < 2]
        opt = torch.optim.AdamW(
            [{"params": decay, "weight_decay": train_cfg.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
            lr=0.0,
            betas=(0.9, 0.999),
        )
        bs = min(train_cfg.batch_size, len(tx))
        spe = max(1, len(tx) // bs)
        total = spe * train_cfg.ft_epochs
        warm = spe * train_cfg.ft_warmup_epochs
        peak = train_cfg.effective_lr(train_cfg.ft_lr)
        loss_fn = nn.CrossEntropyLoss()
        ytr = torch.as_tensor(train_y)
        step = 0
        clf.train()
        for epoch in range(train_cfg.ft_epochs):
            order = np.random.default_rng([seed, epoch, 7]).permutation(len(tx))
            for i in range(spe):
                idx = torch.as_tensor(order[i * bs : (i + 1) * bs])
                xb = tx[idx]
                if train_cfg.augment:
                    xb = augment_batch(xb, torch.Generator().manual_seed(seed * 100003 + step), crop_scale=None)
                set_lr(opt, lr_at(step, total, warm, peak))
                loss = loss_fn(clf(xb.to(dtype)), ytr[idx])
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                step += 1
        clf.eval()
        with torch.no_grad():
            probs = torch.cat(
                [torch.softmax(clf(vx[i : i + 256].to(dtype)), dim=1) for i in range(0, len(vx), 256)]
            ).double().numpy()
        runs.append({"seed": seed, **score_predictions(probs, val_y, C, want_auc)})
        log.info("fine-tune seed %d: %s", seed, runs[-1])
    return EvalReport.from_runs(runs, np.bincount(val_y, minlength=C), task="finetune")


def _as_float(x) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x))
    return t.float() / 255.0 if t.dtype == torch.uint8 else t.float()


# -- attention maps ----------------------------------------------------------------
def _to_uint8(m: np.ndarray) -> np.ndarray:
    lo, hi = float(m.min()), float(m.max())
    scaled = (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)
    return np.round(scaled * 255).astype(np.uint8)


@torch.no_grad()
def export_attention(model: Union[SDMAE, Checkpoint, str, Path], images, out_dir, upscale: bool = True) -> List[Path]:
    """Write per-head and head-averaged last-layer attention maps as 8-bit grayscale PNGs.

    Each map is min-max scaled to [0, 255] independently.  Files are named
    ``img{i:04d}_head{h}.png`` and ``img{i:04d}_mean.png``.
    """
    if not isinstance(model, SDMAE):
        model = model_from_checkpoint(model)
    model.eval()
    x = _as_float(images).to(model.backbone.patch_embed.weight.dtype)
    maps = model.backbone.attention_maps(x).double().numpy()
    out_dir = Path(out_dir)
    size = model.cfg.img_size
    written = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for i, per_head in enumerate(maps):
            named = [(f"head{h}", m) for h, m in enumerate(per_head)] + [("mean", per_head.mean(axis=0))]
            for tag, m in named:
                im = Image.fromarray(_to_uint8(m), mode="L")
                if upscale:
                    im = im.resize((size, size), Image.NEAREST)
                path = out_dir / f"img{i:04d}_{tag}.png"
                im.save(path)
                written.append(path)
    except OSError as exc:
        raise DataError(f"could not write attention maps to {out_dir}: {exc}") from exc
    return written
