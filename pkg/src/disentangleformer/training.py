"""Loss, Adam with decoupled weight decay, the deterministic training loop,
OA/AA/kappa evaluation, and DFCK checkpointing.

Labels follow the cube convention everywhere: classes are 1..K (0 means
unlabeled and never reaches the loss).

Checkpoint format DFCK (little-endian):
  magic "DFCK" | u32 format version | u32 config length | canonical JSON
  model config | parameter tensors as f64 bytes in declaration order.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DivergenceError, FileFormatError
from .data import PatchDataset
from .model import DisentangleFormer, ModelConfig, build_model, config_from_dict, config_to_dict
from .tensor import Tape, Tensor, backward, no_grad

_CKPT_MAGIC = b"DFCK"
_CKPT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    log_every: int = 1
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        b1, b2 = self.betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ConfigError(f"betas must lie in [0, 1), got {self.betas}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean -log softmax(logits)[label] with 1-based labels, stable via
    log-sum-exp. Accepts (K,) + int or (B, K) + (B,) arrays."""
    arr = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    squeeze = logits.ndim == 1
    x = T.reshape(logits, (1,) + logits.shape) if squeeze else logits
    k = x.shape[-1]
    if arr.min() < 1 or arr.max() > k:
        raise ContractError(f"labels must be in [1, {k}], got range "
                            f"[{arr.min()}, {arr.max()}]")
    lse = T.logsumexp_lastdim(x)
    picked = T.gather_lastdim(x, arr - 1)
    return T.tmean(T.sub(lse, picked))


# -- optimizer ----------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def init(cls, params: list[Tensor]) -> "AdamState":
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params], t=0)


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState,
              cfg: TrainConfig) -> None:
    """One Adam update with bias correction and decoupled weight decay,
    in place on the parameter tensors."""
    b1, b2 = cfg.betas
    state.t += 1
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        if cfg.weight_decay:
            update = update + cfg.weight_decay * p.data
        p.data -= cfg.lr * update


# -- metrics ------------------------------------------------------------------

def confusion_matrix(true_labels, predicted, num_classes: int) -> np.ndarray:
    """K x K counts; rows = true class, cols = predicted (1-based labels)."""
    true_labels = np.asarray(true_labels, dtype=np.int64)
    predicted = np.asarray(predicted, dtype=np.int64)
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (true_labels - 1, predicted - 1), 1)
    return cm


def evaluate_metrics(cm: np.ndarray) -> dict:
    """OA, AA (mean per-class recall over classes with true samples, with the
    excluded-class count reported), and Cohen's kappa."""
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    if total <= 0:
        raise ContractError("confusion matrix is empty")
    oa = np.trace(cm) / total
    row_sums = cm.sum(axis=1)
    present = row_sums > 0
    recalls = np.diag(cm)[present] / row_sums[present]
    aa = float(recalls.mean())
    col_sums = cm.sum(axis=0)
    pe = float((row_sums * col_sums).sum()) / (total * total)
    kappa = 1.0 if pe == 1.0 else (oa - pe) / (1.0 - pe)
    return {
        "oa": float(oa),
        "aa": aa,
        "kappa": float(kappa),
        "excluded_classes": int((~present).sum()),
    }


def predict(model: DisentangleFormer, patches: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Argmax class labels (1-based) for (n, C, P, P) patches."""
    out = np.empty(len(patches), dtype=np.int64)
    with no_grad(), Tape():
        for lo in range(0, len(patches), batch_size):
            logits = model(Tensor(patches[lo : lo + batch_size]))
            out[lo : lo + batch_size] = logits.data.argmax(axis=1) + 1
    return out


def evaluate(model: DisentangleFormer, dataset: PatchDataset, batch_size: int = 64) -> dict:
    preds = predict(model, dataset.patches, batch_size)
    cm = confusion_matrix(dataset.labels, preds, dataset.num_classes)
    metrics = evaluate_metrics(cm)
    metrics["confusion_matrix"] = cm
    return metrics


# -- training loop ------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    loss: float
    train_oa: float


class Trainer:
    """Deterministic epoch loop over a fixed train split. Resumable: optimizer
    state and the shuffle stream persist across run() calls."""

    def __init__(self, model: DisentangleFormer, train_set: PatchDataset, cfg: TrainConfig,
                 progress=None):
        if len(train_set) == 0:
            raise ContractError("train split is empty")
        self.model = model
        self.train_set = train_set
        self.cfg = cfg
        self.progress = progress  # called with each cfg.log_every-th EpochRecord
        self.params = model.parameters()
        self.state = AdamState.init(self.params)
        self.rng = np.random.default_rng(cfg.seed)
        self.log: list[EpochRecord] = []

    def run(self, epochs: int | None = None) -> list[EpochRecord]:
        cfg = self.cfg
        n = len(self.train_set)
        for _ in range(cfg.epochs if epochs is None else epochs):
            order = self.rng.permutation(n)
            epoch_loss = 0.0
            correct = 0
            for lo in range(0, n, cfg.batch_size):
                idx = order[lo : lo + cfg.batch_size]
                xb = self.train_set.patches[idx]
                yb = self.train_set.labels[idx]
                self.model.zero_grad()
                with Tape():
                    logits = self.model(Tensor(xb))
                    loss = cross_entropy(logits, yb)
                    backward(loss)
                loss_val = loss.item()
                if not np.isfinite(loss_val):
                    raise DivergenceError(
                        f"loss became {loss_val} at epoch {len(self.log) + 1}"
                    )
                correct += int((logits.data.argmax(axis=1) + 1 == yb).sum())
                epoch_loss += loss_val * len(idx)
                adam_step(self.params, [p.grad for p in self.params], self.state, cfg)
            record = EpochRecord(epoch=len(self.log) + 1, loss=epoch_loss / n, train_oa=correct / n)
            self.log.append(record)
            if self.progress is not None and record.epoch % cfg.log_every == 0:
                self.progress(record)
        return self.log


def train(model: DisentangleFormer, train_set: PatchDataset, cfg: TrainConfig) -> list[EpochRecord]:
    """One-shot training; writes the checkpoint if cfg.checkpoint_path is set."""
    trainer = Trainer(model, train_set, cfg)
    log = trainer.run()
    if cfg.checkpoint_path:
        save_checkpoint(model, cfg.checkpoint_path)
    return log


def write_log_csv(log: list[EpochRecord], path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "loss", "train_oa"])
    for rec in log:
        writer.writerow([rec.epoch, f"{rec.loss:.12g}", f"{rec.train_oa:.12g}"])
    Path(path).write_text(buf.getvalue())


# -- checkpointing ------------------------------------------------------------

def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_checkpoint(model: DisentangleFormer, path) -> None:
    cfg_blob = canonical_json(config_to_dict(model.cfg)).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<II", _CKPT_VERSION, len(cfg_blob)))
        f.write(cfg_blob)
        for _, p in model.named_parameters():
            f.write(p.data.astype("<f8").tobytes())


def load_checkpoint(path) -> DisentangleFormer:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _CKPT_MAGIC:
            raise FileFormatError(f"bad checkpoint magic {magic!r}", 0)
        header = f.read(8)
        if len(header) != 8:
            raise FileFormatError("truncated checkpoint header", 4)
        version, cfg_len = struct.unpack("<II", header)
        if version != _CKPT_VERSION:
            raise FileFormatError(f"unsupported checkpoint version {version}", 4)
        cfg_blob = f.read(cfg_len)
        if len(cfg_blob) != cfg_len:
            raise FileFormatError("truncated checkpoint config", 12)
        cfg = config_from_dict(json.loads(cfg_blob.decode("utf-8")))
        model = build_model(cfg)
        offset = 12 + cfg_len
        for name, p in model.named_parameters():
            nbytes = p.size * 8
            blob = f.read(nbytes)
            if len(blob) != nbytes:
                raise FileFormatError(f"truncated parameter {name}", offset)
            p.data[...] = np.frombuffer(blob, dtype="<f8").reshape(p.shape)
            offset += nbytes
        if f.read(1):
            raise FileFormatError("trailing bytes after parameters", offset)
    return model
