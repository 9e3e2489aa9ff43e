"""Two-way transformer mask decoder with output tokens and hypernetwork heads."""

from __future__ import annotations

import math
from functools import lru_cache
from typing import Mapping

import numpy as np

from .. import numcore as nc
from ..numcore import DimensionError, Tensor
from .config import ModelConfig
from .encoder import attention_core, layernorm2d
from .registry import ParamRegistry, ones, trunc_normal, zeros

# seed of the fixed random-Fourier image positional encoding
_PE_SEED = 20230405


def _reg_linear(reg: ParamRegistry, name: str, d_in: int, d_out: int) -> None:
    reg.add(f"{name}.weight", (d_out, d_in), "decoder", trunc_normal(0.02))
    reg.add(f"{name}.bias", (d_out,), "decoder", zeros)


def _reg_norm(reg: ParamRegistry, name: str, d: int) -> None:
    reg.add(f"{name}.weight", (d,), "decoder", ones)
    reg.add(f"{name}.bias", (d,), "decoder", zeros)


def _reg_attention(reg: ParamRegistry, name: str, d: int, internal: int) -> None:
    for proj in ("q_proj", "k_proj", "v_proj"):
        _reg_linear(reg, f"{name}.{proj}", d, internal)
    _reg_linear(reg, f"{name}.out_proj", internal, d)


def _reg_mlp(reg: ParamRegistry, name: str, dims: list[int]) -> None:
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        _reg_linear(reg, f"{name}.layers.{i}", a, b)


def attention_names(cfg: ModelConfig) -> list[str]:
    """Every attention module of the decoder, in execution order."""
    names = []
    for i in range(cfg.dec_layers):
        lyr = f"dec.transformer.layers.{i}"
        names += [f"{lyr}.self_attn", f"{lyr}.cross_attn_token_to_image", f"{lyr}.cross_attn_image_to_token"]
    names.append("dec.transformer.final_attn_token_to_image")
    return names


def register_decoder(cfg: ModelConfig, reg: ParamRegistry) -> None:
    d, di = cfg.dec_dim, cfg.dec_internal_dim
    tn = trunc_normal(0.02)
    reg.add("dec.no_prompt_embed", (1, d), "decoder", tn)
    reg.add("dec.iou_token", (1, d), "decoder", tn)
    reg.add("dec.mask_tokens", (cfg.num_mask_tokens, d), "decoder", tn)
    for i in range(cfg.dec_layers):
        lyr = f"dec.transformer.layers.{i}"
        _reg_attention(reg, f"{lyr}.self_attn", d, d)
        _reg_norm(reg, f"{lyr}.norm1", d)
        _reg_attention(reg, f"{lyr}.cross_attn_token_to_image", d, di)
        _reg_norm(reg, f"{lyr}.norm2", d)
        _reg_linear(reg, f"{lyr}.mlp.lin1", d, cfg.dec_mlp_dim)
        _reg_linear(reg, f"{lyr}.mlp.lin2", cfg.dec_mlp_dim, d)
        _reg_norm(reg, f"{lyr}.norm3", d)
        _reg_norm(reg, f"{lyr}.norm4", d)
        _reg_attention(reg, f"{lyr}.cross_attn_image_to_token", d, di)
    _reg_attention(reg, "dec.transformer.final_attn_token_to_image", d, di)
    _reg_norm(reg, "dec.transformer.norm_final_attn", d)
    reg.add("dec.upscale.conv1.weight", (d, d // 4, 2, 2), "decoder", tn)
    reg.add("dec.upscale.conv1.bias", (d // 4,), "decoder", zeros)
    _reg_norm(reg, "dec.upscale.ln", d // 4)
    reg.add("dec.upscale.conv2.weight", (d // 4, d // 8, 2, 2), "decoder", tn)
    reg.add("dec.upscale.conv2.bias", (d // 8,), "decoder", zeros)
    for i in range(cfg.num_mask_tokens):
        _reg_mlp(reg, f"dec.hyper_mlps.{i}", [d, d, d, d // 8])
    _reg_mlp(reg, "dec.iou_head", [d, cfg.iou_head_hidden, cfg.iou_head_hidden, cfg.num_mask_tokens])


@lru_cache(maxsize=8)
def _dense_pe_array(grid: int, dim: int) -> np.ndarray:
    gauss = np.random.default_rng(_PE_SEED).standard_normal((2, dim // 2))
    c = (np.arange(grid) + 0.5) / grid
    yy, xx = np.meshgrid(c, c, indexing="ij")
    coords = np.stack([xx, yy], axis=-1) * 2 - 1
    proj = 2 * math.pi * (coords @ gauss)
    pe = np.concatenate([np.sin(proj), np.cos(proj)], axis=-1)
    return pe.reshape(grid * grid, dim).astype(np.float32)


def dense_pe(grid: int, dim: int) -> Tensor:
    """Fixed random-Fourier positional encoding of the image grid, [g*g, d]."""
    return Tensor(_dense_pe_array(grid, dim))


def _lin(reg, name, x, lora: Mapping | None = None):
    out = nc.linear(x, reg[f"{name}.weight"], reg[f"{name}.bias"])
    if lora and name in lora:
        out = out + lora[name].delta(x)
    return out


def _attention(cfg: ModelConfig, reg, name, q, k, v, lora) -> Tensor:
    qp = _lin(reg, f"{name}.q_proj", q, lora)
    kp = _lin(reg, f"{name}.k_proj", k, lora)
    vp = _lin(reg, f"{name}.v_proj", v, lora)
    out = attention_core(qp, kp, vp, cfg.dec_heads)
    return _lin(reg, f"{name}.out_proj", out, lora)


def _norm(cfg, reg, name, x):
    return nc.layernorm(x, reg[f"{name}.weight"], reg[f"{name}.bias"], cfg.ln_eps)


def _mlp(reg, name, x, depth=3):
    for i in range(depth):
        x = _lin(reg, f"{name}.layers.{i}", x)
        if i < depth - 1:
            x = nc.relu(x)
    return x


def two_way_transformer(cfg: ModelConfig, reg: ParamRegistry, keys: Tensor, key_pe: Tensor, tokens: Tensor, lora) -> tuple[Tensor, Tensor]:
    queries = tokens
    for i in range(cfg.dec_layers):
        lyr = f"dec.transformer.layers.{i}"
        if i == 0:
            queries = _attention(cfg, reg, f"{lyr}.self_attn", queries, queries, queries, lora)
        else:
            q = queries + tokens
            queries = queries + _attention(cfg, reg, f"{lyr}.self_attn", q, q, queries, lora)
        queries = _norm(cfg, reg, f"{lyr}.norm1", queries)

        q, k = queries + tokens, keys + key_pe
        queries = queries + _attention(cfg, reg, f"{lyr}.cross_attn_token_to_image", q, k, keys, lora)
        queries = _norm(cfg, reg, f"{lyr}.norm2", queries)

        m = nc.relu(_lin(reg, f"{lyr}.mlp.lin1", queries))
        queries = queries + _lin(reg, f"{lyr}.mlp.lin2", m)
        queries = _norm(cfg, reg, f"{lyr}.norm3", queries)

        q, k = queries + tokens, keys + key_pe
        keys = keys + _attention(cfg, reg, f"{lyr}.cross_attn_image_to_token", k, q, queries, lora)
        keys = _norm(cfg, reg, f"{lyr}.norm4", keys)

    name = "dec.transformer.final_attn_token_to_image"
    q, k = queries + tokens, keys + key_pe
    queries = queries + _attention(cfg, reg, name, q, k, keys, lora)
    queries = _norm(cfg, reg, "dec.transformer.norm_final_attn", queries)
    return queries, keys


def base_tokens(cfg: ModelConfig, reg: ParamRegistry) -> Tensor:
    """[no-prompt | IoU | mask tokens] block of the token stream."""
    return nc.concat([reg["dec.no_prompt_embed"], reg["dec.iou_token"], reg["dec.mask_tokens"]], axis=0)


def decode_masks(
    cfg: ModelConfig,
    reg: ParamRegistry,
    image_emb: Tensor,
    stream: Tensor,
    n_prompts: int = 0,
    lora: Mapping | None = None,
) -> tuple[Tensor, Tensor]:
    """Mask logits [num_mask_tokens, 4g, 4g] and IoU predictions.

    ``stream`` is ordered [prompts (n_prompts) | no-prompt | IoU | masks];
    output tokens are read at fixed offsets after the prompt block.
    """
    d, g = cfg.dec_dim, cfg.grid
    nm = cfg.num_mask_tokens
    if image_emb.shape != (d, g, g):
        raise DimensionError(f"decode_masks: image embedding {image_emb.shape}, expected {(d, g, g)}")
    if stream.ndim != 2 or stream.shape != (n_prompts + 2 + nm, d):
        raise DimensionError(f"decode_masks: token stream {stream.shape} inconsistent with {n_prompts} prompts")
    keys = nc.reshape(nc.transpose(image_emb, (1, 2, 0)), (g * g, d))
    hs, keys = two_way_transformer(cfg, reg, keys, dense_pe(g, d), stream, lora)
    iou_out = hs[n_prompts + 1]
    mask_out = hs[n_prompts + 2 : n_prompts + 2 + nm]

    src = nc.reshape(nc.transpose(keys, (1, 0)), (d, g, g))
    up = nc.conv_transpose2d(src, reg["dec.upscale.conv1.weight"], reg["dec.upscale.conv1.bias"], stride=2)
    up = nc.gelu(layernorm2d(up, reg["dec.upscale.ln.weight"], reg["dec.upscale.ln.bias"], cfg.ln_eps))
    up = nc.gelu(nc.conv_transpose2d(up, reg["dec.upscale.conv2.weight"], reg["dec.upscale.conv2.bias"], stride=2))
    c8, hu, wu = up.shape

    hyper = nc.stack([_mlp(reg, f"dec.hyper_mlps.{i}", mask_out[i]) for i in range(nm)], axis=0)
    masks = nc.matmul(hyper, nc.reshape(up, (c8, hu * wu)))
    masks = nc.reshape(masks, (nm, hu, wu))
    iou = _mlp(reg, "dec.iou_head", iou_out)
    return masks, iou
