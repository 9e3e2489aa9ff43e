from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .. import numcore as nc
from ..numcore import Tensor
from .config import ModelConfig
from .decoder import base_tokens, decode_masks, register_decoder
from .encoder import encode_image
from .registry import ParamRegistry


@dataclass
class SamModel:
    """Base architecture plus whatever adapter has been attached.

    ``lora`` maps a projection name (e.g. ``dec.transformer.layers.0.self_attn.q_proj``
    or ``enc.blocks.3.attn.q``) to an object with ``delta(x)``; ``adapter`` is
    the applied adapter configuration (set by :mod:`ptsam.peft`).
    """

    cfg: ModelConfig
    reg: ParamRegistry
    adapter: Any = None
    lora: dict = field(default_factory=dict)

    @property
    def n_md(self) -> int:
        p = self.reg.get("adapter.p_md")
        return 0 if p is None else p.shape[0]

    def decoder_prompts(self) -> Tensor | None:
        return self.reg.get("adapter.p_md")

    def encoder_prompts(self) -> list[Tensor] | None:
        if "adapter.p_ie.0" not in self.reg:
            return None
        return [self.reg[f"adapter.p_ie.{i}"] for i in range(self.cfg.enc_layers)]

    def token_stream(self) -> Tensor:
        base = base_tokens(self.cfg, self.reg)
        p = self.decoder_prompts()
        return base if p is None else nc.concat([p, base], axis=0)


def build_model(cfg: ModelConfig, seed: int = 0, materialize: bool = True) -> SamModel:
    cfg.validate()
    reg = ParamRegistry(np.random.default_rng(seed), materialize=materialize)
    from .encoder import register_encoder

    register_encoder(cfg, reg)
    register_decoder(cfg, reg)
    return SamModel(cfg, reg)


def predict_masks(model: SamModel, image) -> tuple[Tensor, Tensor]:
    emb = encode_image(model.cfg, model.reg, image, model.encoder_prompts(), model.lora)
    return decode_masks(model.cfg, model.reg, emb, model.token_stream(), model.n_md, model.lora)


def forward_segment(model: SamModel, image) -> Tensor:
    """Logits [image_size, image_size] of the first mask output."""
    masks, _ = predict_masks(model, image)
    s = model.cfg.image_size
    first = masks[0:1]
    return nc.reshape(nc.bilinear_resize(first, s, s), (s, s))


def infer_shapes(cfg: ModelConfig, n_md: int = 0, n_ie: int = 0) -> dict[str, tuple[int, ...]]:
    """Activation shapes along the forward path, computed without tensors."""
    g, d, w = cfg.grid, cfg.enc_dim, cfg.window_size
    gp = -(-g // w) * w
    nwin = (gp // w) ** 2
    shapes = {
        "image": (cfg.in_chans, cfg.image_size, cfg.image_size),
        "patch_embed": (g, g, d),
        "window_tokens": (nwin, w * w + n_ie, d),
        "global_tokens": (1, g * g + n_ie, d),
        "encoder_out": (cfg.neck_dim, g, g),
        "token_stream": (n_md + 2 + cfg.num_mask_tokens, cfg.dec_dim),
        "upscaled": (cfg.dec_dim // 8, 4 * g, 4 * g),
        "mask_logits": (cfg.num_mask_tokens, 4 * g, 4 * g),
        "iou_pred": (cfg.num_mask_tokens,),
        "segment": (cfg.image_size, cfg.image_size),
    }
    return shapes
