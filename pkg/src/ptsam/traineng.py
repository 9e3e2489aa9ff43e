"""Losses, AdamW, cosine annealing and the fixed-budget training loop."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numcore as nc
from .datagen import DataError, DatasetSplit, augment
from .evalrep.metrics import evaluate
from .numcore import NumericalError, Tensor
from .peft import AdapterConfig, Mode, apply_adapter, save_adapter
from .samarch import SamModel, predict_masks

log = logging.getLogger(__name__)

DEFAULT_LR = {
    Mode.PT_MD: 0.05,
    Mode.PT_MD_IE: 0.01,
    Mode.LORA_MD: 0.005,
    Mode.LORA_MD_IE: 0.005,
    Mode.FULL_MD: 0.001,
    Mode.FULL_MD_LORA_IE: 0.001,
}


class TrainingError(RuntimeError):
    pass


class TrainingAbort(TrainingError):
    """Non-finite loss or activation during training."""

    def __init__(self, message: str, step: int, lr: float, history: list[float]):
        super().__init__(f"{message} (step {step}, lr {lr:.6g}, last losses {history[-5:]})")
        self.step = step
        self.lr = lr
        self.history = history


@dataclass
class TrainConfig:
    epochs: int = 1000
    steps_per_epoch: int = 20
    batch_size: int = 2
    lr0: float | None = None
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    loss_w_ce: float = 0.2
    loss_w_dice: float = 0.8
    seed: int = 0
    dice_smooth: float = 1.0
    augment: bool = True
    eval_every: int = 0

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    def lr_for(self, mode: Mode) -> float:
        return DEFAULT_LR[mode] if self.lr0 is None else float(self.lr0)

    def validate(self) -> "TrainConfig":
        if self.epochs < 1 or self.steps_per_epoch < 1 or self.batch_size < 1:
            raise nc.ConfigurationError("epochs, steps_per_epoch and batch_size must be >= 1")
        if abs(self.loss_w_ce + self.loss_w_dice - 1.0) > 1e-9:
            raise nc.ConfigurationError(f"loss weights must sum to 1, got {self.loss_w_ce} + {self.loss_w_dice}")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d


# ---------------------------------------------------------------- losses


def _check_target(target: np.ndarray, shape) -> np.ndarray:
    t = np.asarray(target)
    if t.shape != tuple(shape):
        raise DataError(f"target shape {t.shape} vs logits {tuple(shape)}")
    if not np.isin(t, (0, 1)).all():
        raise DataError("target mask must be binary {0, 1}")
    return t


def dice_loss(logits: Tensor, target, smooth: float = 1.0) -> Tensor:
    """1 - (2 sum(p t) + s) / (sum p + sum t + s) with p = sigmoid(logits)."""
    t = _check_target(target, logits.shape)
    p = nc.sigmoid(logits)
    tt = Tensor(t.astype(logits.dtype))
    inter = nc.sum_all(nc.mul(p, tt))
    num = nc.add_scalar(nc.scale(inter, 2.0), smooth)
    den = nc.add_scalar(nc.sum_all(p), float(t.sum()) + smooth)
    return nc.add_scalar(nc.scale(nc.div(num, den), -1.0), 1.0)


def bce_loss(logits: Tensor, target) -> Tensor:
    """Mean binary cross-entropy with logits: softplus(z) - z t."""
    t = _check_target(target, logits.shape)
    tt = Tensor(t.astype(logits.dtype))
    return nc.mean_all(nc.sub(nc.softplus(logits), nc.mul(logits, tt)))


def combined_loss(logits: Tensor, target, cfg: TrainConfig) -> Tensor:
    parts = []
    if cfg.loss_w_ce:
        parts.append(nc.scale(bce_loss(logits, target), cfg.loss_w_ce))
    if cfg.loss_w_dice:
        parts.append(nc.scale(dice_loss(logits, target, cfg.dice_smooth), cfg.loss_w_dice))
    out = parts[0]
    for p in parts[1:]:
        out = out + p
    return out


def cosine_lr(t: int, total: int, lr0: float) -> float:
    if not 0 <= t <= total:
        raise ValueError(f"step {t} outside [0, {total}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * t / total))


# ---------------------------------------------------------------- optimizer


class AdamW:
    """Adam with decoupled weight decay over named tensors."""

    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.999), eps=1e-8, weight_decay: dict[str, float] | float = 0.0):
        self.params = params
        self.b1, self.b2 = (np.float32(b) for b in betas)
        self.eps = np.float32(eps)
        if isinstance(weight_decay, (int, float)):
            weight_decay = {n: float(weight_decay) for n in params}
        self.weight_decay = weight_decay
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.t = 0

    def state_numel(self) -> int:
        return sum(a.size for a in self.m.values()) + sum(a.size for a in self.v.values())

    def step(self, lr: float) -> None:
        for n, p in self.params.items():
            if p.grad is None:
                raise TrainingError(f"trainable parameter {n!r} received no gradient")
        self.t += 1
        lr32 = np.float32(lr)
        c1 = np.float32(1.0 - float(self.b1) ** self.t)
        c2 = np.float32(1.0 - float(self.b2) ** self.t)
        for n, p in self.params.items():
            g = p.grad.astype(p.data.dtype, copy=False)
            wd = self.weight_decay.get(n, 0.0)
            if wd:
                p.data *= np.float32(1.0 - lr * wd)
            m, v = self.m[n], self.v[n]
            m *= self.b1
            m += (np.float32(1) - self.b1) * g
            v *= self.b2
            v += (np.float32(1) - self.b2) * g * g
            p.data -= lr32 * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adamw_step(opt: AdamW, lr: float) -> None:
    opt.step(lr)


# ---------------------------------------------------------------- training loop


@dataclass
class RunRecord:
    config: dict
    adapter: str
    seed: int
    epochs: list[dict] = field(default_factory=list)
    final_test_dice: float | None = None
    final_train_dice: float | None = None
    wall_clock: float = 0.0
    optimizer_state_numel: int = 0

    def lr_trace(self) -> dict[int, float]:
        """Logged learning rate per global step index."""
        out = {}
        for e in self.epochs:
            out[e["step_first"]] = e["lr_first"]
            out[e["step"]] = e["lr"]
        return out

    def summary(self) -> dict:
        return {
            "adapter": self.adapter,
            "seed": self.seed,
            "final_test_dice": self.final_test_dice,
            "final_train_dice": self.final_train_dice,
            "wall_clock": self.wall_clock,
            "config": self.config,
        }


def sub_seed(seed: int, epoch: int, step: int, slot: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, epoch, step, slot])


def _epoch_order(rng: np.random.Generator, n: int, needed: int) -> np.ndarray:
    reps = -(-needed // n)
    return np.concatenate([rng.permutation(n) for _ in range(reps)])[:needed]


def training_forward(model: SamModel, image) -> tuple[Tensor, Tensor]:
    """Mask-0 logits at image resolution plus a zero-weighted term over the
    unused outputs (masks 1.., IoU head) so their gradients exist as zeros."""
    masks, iou = predict_masks(model, image)
    size = model.cfg.image_size
    logits = nc.reshape(nc.bilinear_resize(masks[0:1], size, size), (size, size))
    unused = nc.sum_all(iou)
    if masks.shape[0] > 1:
        unused = unused + nc.sum_all(masks[1:])
    return logits, nc.scale(unused, 0.0)


def _weight_decay_map(names: Sequence[str], wd: float) -> dict[str, float]:
    return {n: (0.0 if n.startswith("adapter.p_") else wd) for n in names}


def train(
    model: SamModel,
    adapter: AdapterConfig,
    data: DatasetSplit,
    cfg: TrainConfig,
    metrics_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    eval_final: bool = True,
) -> RunRecord:
    """Fixed-budget training: epochs * steps_per_epoch AdamW steps at a
    cosine-annealed learning rate on 0.2 * BCE + 0.8 * Dice."""
    cfg.validate()
    if not data.train:
        raise DataError("training split is empty")
    if model.adapter is None:
        apply_adapter(model, adapter, seed=cfg.seed)
    elif model.adapter != adapter:
        raise nc.ConfigurationError(f"model carries {model.adapter}, asked to train {adapter}")
    record = RunRecord(config=cfg.to_dict(), adapter=adapter.to_text(), seed=cfg.seed)
    _fit(model, data, cfg, cfg.lr_for(adapter.mode), record, metrics_path)
    if eval_final:
        record.final_train_dice = evaluate(model, data.train).mean
        if data.test:
            record.final_test_dice = evaluate(model, data.test).mean
    if checkpoint_path is not None:
        save_adapter(model, checkpoint_path)
    log.info("trained %s for %d steps in %.1fs", adapter.mode.value, cfg.total_steps, record.wall_clock)
    return record


def pretrain(
    model: SamModel,
    data: DatasetSplit,
    cfg: TrainConfig,
    metrics_path: str | Path | None = None,
) -> RunRecord:
    """Train every base parameter (no adapter) with the no-prompt token stream.

    Stands in for the pretrained foundation weights the adapters start from;
    all parameters are frozen again afterwards.
    """
    cfg.validate()
    if model.adapter is not None:
        raise nc.ConfigurationError("pretraining expects a model without adapter")
    for name in model.reg.names():
        model.reg.set_trainable(name, True)
    record = RunRecord(config=cfg.to_dict(), adapter="pretrain", seed=cfg.seed)
    try:
        _fit(model, data, cfg, 1e-3 if cfg.lr0 is None else float(cfg.lr0), record, metrics_path)
    finally:
        model.reg.freeze_all()
    record.final_train_dice = evaluate(model, data.train).mean
    if data.test:
        record.final_test_dice = evaluate(model, data.test).mean
    return record


def _fit(model: SamModel, data: DatasetSplit, cfg: TrainConfig, lr0: float, record: RunRecord, metrics_path) -> None:
    params = {e.name: e.tensor for e in model.reg.trainable()}
    opt = AdamW(params, cfg.betas, cfg.eps, _weight_decay_map(list(params), cfg.weight_decay))
    total = cfg.total_steps
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5A3]))
    history: list[float] = []
    start = time.perf_counter()

    mfh = None
    if metrics_path is not None:
        Path(metrics_path).parent.mkdir(parents=True, exist_ok=True)
        mfh = open(metrics_path, "w")
    try:
        t = 0
        n = len(data.train)
        for epoch in range(cfg.epochs):
            order = _epoch_order(rng, n, cfg.batch_size * cfg.steps_per_epoch)
            losses = []
            step_first, lr_first = t, cosine_lr(t, total, lr0)
            for k in range(cfg.steps_per_epoch):
                lr = cosine_lr(t, total, lr0)
                batch = order[k * cfg.batch_size : (k + 1) * cfg.batch_size]
                try:
                    loss = None
                    for slot, idx in enumerate(batch):
                        s = data.train[int(idx)]
                        if cfg.augment:
                            s = augment(s, sub_seed(cfg.seed, epoch, k, slot))
                        logits, aux = training_forward(model, s.image)
                        li = combined_loss(logits, s.mask, cfg) + aux
                        loss = li if loss is None else loss + li
                    loss = nc.scale(loss, 1.0 / len(batch))
                    value = float(loss.data)
                    if not math.isfinite(value):
                        raise NumericalError(f"loss is {value}")
                    if params:
                        model.reg.zero_grad()
                        nc.backward(loss)
                        opt.step(lr)
                except NumericalError as exc:
                    raise TrainingAbort(str(exc), t, lr, history) from exc
                history.append(value)
                losses.append(value)
                t += 1
            row = {
                "epoch": epoch,
                "step_first": step_first,
                "lr_first": lr_first,
                "step": t,
                "lr": cosine_lr(t, total, lr0),
                "train_loss": float(np.mean(losses)),
            }
            if cfg.eval_every and (epoch + 1) % cfg.eval_every == 0 and data.test:
                row["eval_dice"] = evaluate(model, data.test).mean
            record.epochs.append(row)
            if mfh is not None:
                mfh.write(json.dumps(row, sort_keys=True) + "\n")
                mfh.flush()
    finally:
        if mfh is not None:
            mfh.close()
        model.reg.zero_grad()
    record.optimizer_state_numel = opt.state_numel()
    record.wall_clock = time.perf_counter() - start


# ---------------------------------------------------------------- base weights


@dataclass(frozen=True)
class BaseRecipe:
    """How the frozen base is produced: full training on a clean corpus."""

    corpus_count: int = 200
    corpus_seed: int = 100
    train_n: int = 160
    epochs: int = 150
    lr0: float = 1e-3
    model_seed: int = 0

    def key(self, model_cfg) -> str:
        text = json.dumps({"model": model_cfg.to_dict(), "recipe": dataclasses.asdict(self)}, sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def base_path(model_cfg, cache_dir: str | Path, recipe: BaseRecipe = BaseRecipe()) -> Path:
    return Path(cache_dir) / f"base-{recipe.key(model_cfg)}"


def ensure_base(model_cfg, cache_dir: str | Path, recipe: BaseRecipe = BaseRecipe()) -> Path:
    """Path of the cached base checkpoint, pretraining it first if absent."""
    path = base_path(model_cfg, cache_dir, recipe)
    if not path.with_name(path.name + ".manifest").exists():
        pretrain_base(model_cfg, recipe, cache_dir)
    return path


def pretrain_base(model_cfg, recipe: BaseRecipe = BaseRecipe(), cache_dir: str | Path | None = None) -> SamModel:
    """Build a model and give it pretrained base weights.

    With ``cache_dir`` the weights are written as ``base-<key>`` there and
    reloaded on later calls with the same model config and recipe.
    """
    from .datagen import GenSpec, generate, split
    from .samarch import build_model, checkpoint

    model = build_model(model_cfg, seed=recipe.model_seed)
    path = None
    if cache_dir is not None:
        path = base_path(model_cfg, cache_dir, recipe)
        if path.with_name(path.name + checkpoint.MANIFEST_SUFFIX).exists():
            checkpoint.load(model.reg, path)
            return model
    corpus = generate(GenSpec(count=recipe.corpus_count, size=model_cfg.image_size), seed=recipe.corpus_seed)
    data = split(corpus, recipe.train_n, seed=0)
    cfg = TrainConfig(epochs=recipe.epochs, lr0=recipe.lr0, augment=False, seed=recipe.model_seed)
    rec = pretrain(model, data, cfg)
    log.info("pretrained base: train dice %.4f, test dice %.4f", rec.final_train_dice, rec.final_test_dice or 0.0)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        checkpoint.save_full(model, path)
    return model
