"""Adapters over a frozen base: decoder/encoder prompt tuning, LoRA, and
full-decoder baselines, plus trainable-parameter accounting."""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import numcore as nc
from .numcore import ConfigurationError, Tensor
from .samarch import SamModel, attention_names, checkpoint


class Mode(str, enum.Enum):
    PT_MD = "PT_MD"
    PT_MD_IE = "PT_MD_IE"
    LORA_MD = "LORA_MD"
    LORA_MD_IE = "LORA_MD_IE"
    FULL_MD = "FULL_MD"
    FULL_MD_LORA_IE = "FULL_MD_LORA_IE"


# display names used in result tables
METHOD_LABELS = {
    Mode.PT_MD: "PTSAM",
    Mode.PT_MD_IE: "PTSAM+IE",
    Mode.LORA_MD: "CellSeg1",
    Mode.LORA_MD_IE: "CellSeg1+IE",
    Mode.FULL_MD: "AutoSAM",
    Mode.FULL_MD_LORA_IE: "SAMed",
}

# frozen-IE counterpart of each IE-tuning mode
IE_PAIRS = {Mode.PT_MD_IE: Mode.PT_MD, Mode.LORA_MD_IE: Mode.LORA_MD, Mode.FULL_MD_LORA_IE: Mode.FULL_MD}


def parse_mode(value) -> Mode:
    if isinstance(value, Mode):
        return value
    try:
        return Mode(str(value).strip().upper())
    except ValueError:
        raise ConfigurationError(f"unknown adapter mode {value!r}; choose from {[m.value for m in Mode]}") from None


@dataclass(frozen=True)
class AdapterConfig:
    mode: Mode = Mode.PT_MD
    n_md: int = 8
    n_ie: int = 8
    lora_rank: int = 4
    lora_alpha: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "mode", parse_mode(self.mode))

    @property
    def alpha(self) -> float:
        return float(self.lora_rank if self.lora_alpha is None else self.lora_alpha)

    @property
    def is_prompt(self) -> bool:
        return self.mode in (Mode.PT_MD, Mode.PT_MD_IE)

    @property
    def tunes_encoder(self) -> bool:
        return self.mode in (Mode.PT_MD_IE, Mode.LORA_MD_IE, Mode.FULL_MD_LORA_IE)

    def validate(self) -> "AdapterConfig":
        # n_md = 0 is allowed as the unadapted ablation floor
        if self.is_prompt and self.n_md < 0:
            raise ConfigurationError(f"n_md must be >= 0, got {self.n_md}")
        if self.mode == Mode.PT_MD_IE and self.n_ie < 1:
            raise ConfigurationError(f"PT_MD_IE needs n_ie >= 1, got {self.n_ie}")
        if self.mode not in (Mode.PT_MD, Mode.PT_MD_IE, Mode.FULL_MD) and self.lora_rank < 1:
            raise ConfigurationError(f"lora_rank must be >= 1, got {self.lora_rank}")
        return self

    def to_text(self) -> str:
        d = asdict(self)
        d["mode"] = self.mode.value
        return " ".join(f"{k}={'' if v is None else v}" for k, v in d.items())

    @classmethod
    def from_text(cls, text: str) -> "AdapterConfig":
        kv = dict(tok.split("=", 1) for tok in text.split())
        return cls(
            mode=kv["mode"],
            n_md=int(kv.get("n_md", 8)),
            n_ie=int(kv.get("n_ie", 8)),
            lora_rank=int(kv.get("lora_rank", 4)),
            lora_alpha=float(kv["lora_alpha"]) if kv.get("lora_alpha") else None,
        )


class LoraPair:
    """Low-rank update (alpha / r) * B @ A on top of a frozen projection."""

    def __init__(self, target: str, A: Tensor | None, B: Tensor | None, rank: int, alpha: float):
        self.target = target
        self.A = A
        self.B = B
        self.rank = rank
        self.alpha = alpha

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self, x: Tensor) -> Tensor:
        return nc.scale(nc.linear(nc.linear(x, self.A), self.B), self.scaling)


def lora_forward(x: Tensor, weight: Tensor, pair: LoraPair, bias: Tensor | None = None) -> Tensor:
    """x @ W^T (+ b) + (alpha/r) * (x @ A^T) @ B^T."""
    return nc.linear(x, weight, bias) + pair.delta(x)


def _prompt_init(d: int):
    bound = 0.5 / np.sqrt(d)

    def init(rng, shape):
        return rng.uniform(-bound, bound, size=shape).astype(np.float32)

    return init


def _lora_a_init(rng, shape):
    # kaiming-uniform style bound on the input fan
    bound = 1.0 / np.sqrt(shape[1])
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _zeros(rng, shape):
    return np.zeros(shape, dtype=np.float32)


def lora_targets(model: SamModel, encoder: bool, decoder: bool) -> list[tuple[str, int, int]]:
    """(projection name, d_in, d_out) for every q/v projection to adapt."""
    cfg = model.cfg
    out = []
    if decoder:
        for att in attention_names(cfg):
            for proj in ("q_proj", "v_proj"):
                d_out, d_in = model.reg.entry(f"{att}.{proj}.weight").shape
                out.append((f"{att}.{proj}", d_in, d_out))
    if encoder:
        d = cfg.enc_dim
        for i in range(cfg.enc_layers):
            for proj in ("q", "v"):
                out.append((f"enc.blocks.{i}.attn.{proj}", d, d))
    return out


def apply_adapter(model: SamModel, cfg: AdapterConfig, seed: int = 0) -> SamModel:
    """Attach adapter parameters and set trainability in place.

    Everything in the base model is frozen except the decoder group in the
    FULL_* modes.
    """
    cfg.validate()
    if model.adapter is not None:
        raise ConfigurationError(f"model already carries adapter {model.adapter.mode.value}")
    reg = model.reg
    reg.freeze_all()
    prev_rng = reg.rng
    reg.rng = np.random.default_rng(np.random.SeedSequence([seed, 0xADA]))
    mc = model.cfg
    try:
        if cfg.is_prompt and cfg.n_md > 0:
            reg.add("adapter.p_md", (cfg.n_md, mc.dec_dim), "adapter", _prompt_init(mc.dec_dim), trainable=True)
        if cfg.mode == Mode.PT_MD_IE:
            for i in range(mc.enc_layers):
                reg.add(f"adapter.p_ie.{i}", (cfg.n_ie, mc.enc_dim), "adapter", _prompt_init(mc.enc_dim), trainable=True)
        if cfg.mode in (Mode.LORA_MD, Mode.LORA_MD_IE, Mode.FULL_MD_LORA_IE):
            targets = lora_targets(model, encoder=cfg.mode != Mode.LORA_MD, decoder=cfg.mode != Mode.FULL_MD_LORA_IE)
            r = cfg.lora_rank
            for name, d_in, d_out in targets:
                a = reg.add(f"adapter.lora.{name}.A", (r, d_in), "adapter", _lora_a_init, trainable=True)
                b = reg.add(f"adapter.lora.{name}.B", (d_out, r), "adapter", _zeros, trainable=True)
                model.lora[name] = LoraPair(name, a, b, r, cfg.alpha)
        if cfg.mode in (Mode.FULL_MD, Mode.FULL_MD_LORA_IE):
            for name in reg.names("decoder"):
                reg.set_trainable(name, True)
    finally:
        reg.rng = prev_rng
    model.adapter = cfg
    return model


def count_trainable(model: SamModel) -> int:
    return model.reg.count(trainable_only=True)


def trainable_names(model: SamModel) -> list[str]:
    return [e.name for e in model.reg.trainable()]


def build_token_stream(model: SamModel) -> Tensor:
    """[p_md | no-prompt | IoU | mask tokens]; without prompts just the base block."""
    return model.token_stream()


def save_adapter(model: SamModel, path: str | Path):
    """Adapter-only checkpoint: trainable tensors plus the echoed AdapterConfig."""
    if model.adapter is None:
        raise ConfigurationError("no adapter applied")
    meta = {"kind": "adapter", "adapter": model.adapter.to_text()}
    return checkpoint.save(model.reg, path, names=trainable_names(model), meta=meta)


def load_adapter(model: SamModel, path: str | Path, seed: int = 0) -> SamModel:
    """Apply the checkpoint's AdapterConfig to ``model`` and load its tensors."""
    _, meta = checkpoint.read_manifest(path)
    if meta.get("kind") != "adapter":
        raise checkpoint.CheckpointError(f"{path} is not an adapter checkpoint")
    cfg = AdapterConfig.from_text(meta["adapter"])
    if model.adapter is None:
        apply_adapter(model, cfg, seed=seed)
    checkpoint.load(model.reg, path)
    return model


def reference_counts(lora_rank: int = 4) -> dict[str, int]:
    """Trainable-parameter counts for every mode under the vitb-shape preset."""
    from .samarch import build_model, preset

    out = {}
    for mode in Mode:
        m = build_model(preset("vitb-shape"), materialize=False)
        apply_adapter(m, AdapterConfig(mode=mode, lora_rank=lora_rank))
        out[mode.value] = count_trainable(m)
    return out
