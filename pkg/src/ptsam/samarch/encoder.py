"""Windowed-attention ViT image encoder and convolutional neck."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .. import numcore as nc
from ..numcore import ConfigurationError, DimensionError, Tensor
from .config import ModelConfig
from .registry import ParamRegistry, ones, trunc_normal, zeros


def register_encoder(cfg: ModelConfig, reg: ParamRegistry) -> None:
    d, g, p = cfg.enc_dim, cfg.grid, cfg.patch_size
    hidden = int(d * cfg.enc_mlp_ratio)
    tn = trunc_normal(0.02)
    reg.add("enc.patch_embed.weight", (d, cfg.in_chans, p, p), "encoder", tn)
    reg.add("enc.patch_embed.bias", (d,), "encoder", zeros)
    reg.add("enc.pos_embed", (g, g, d), "encoder", tn)
    for i in range(cfg.enc_layers):
        b = f"enc.blocks.{i}"
        reg.add(f"{b}.norm1.weight", (d,), "encoder", ones)
        reg.add(f"{b}.norm1.bias", (d,), "encoder", zeros)
        reg.add(f"{b}.attn.qkv.weight", (3 * d, d), "encoder", tn)
        reg.add(f"{b}.attn.qkv.bias", (3 * d,), "encoder", zeros)
        reg.add(f"{b}.attn.proj.weight", (d, d), "encoder", tn)
        reg.add(f"{b}.attn.proj.bias", (d,), "encoder", zeros)
        reg.add(f"{b}.norm2.weight", (d,), "encoder", ones)
        reg.add(f"{b}.norm2.bias", (d,), "encoder", zeros)
        reg.add(f"{b}.mlp.lin1.weight", (hidden, d), "encoder", tn)
        reg.add(f"{b}.mlp.lin1.bias", (hidden,), "encoder", zeros)
        reg.add(f"{b}.mlp.lin2.weight", (d, hidden), "encoder", tn)
        reg.add(f"{b}.mlp.lin2.bias", (d,), "encoder", zeros)
    n = cfg.neck_dim
    reg.add("neck.conv1.weight", (n, d, 1, 1), "neck", tn)
    reg.add("neck.ln1.weight", (n,), "neck", ones)
    reg.add("neck.ln1.bias", (n,), "neck", zeros)
    reg.add("neck.conv2.weight", (n, n, 3, 3), "neck", tn)
    reg.add("neck.ln2.weight", (n,), "neck", ones)
    reg.add("neck.ln2.bias", (n,), "neck", zeros)


def window_partition(x: Tensor, win: int) -> Tensor:
    """[g, g, d] -> [(g/win)^2, win^2, d], windows in row-major order."""
    g, g2, d = x.shape
    if g != g2 or win <= 0 or g % win:
        raise DimensionError(f"window_partition: grid {x.shape[:2]} not divisible by window {win}")
    n = g // win
    t = nc.reshape(x, (n, win, n, win, d))
    t = nc.transpose(t, (0, 2, 1, 3, 4))
    return nc.reshape(t, (n * n, win * win, d))


def window_merge(w: Tensor, g: int) -> Tensor:
    """Inverse of :func:`window_partition`."""
    nw, tok, d = w.shape
    win = int(round(tok**0.5))
    n = g // win
    if win * win != tok or n * win != g or n * n != nw:
        raise DimensionError(f"window_merge: {w.shape} does not tile a {g}x{g} grid")
    t = nc.reshape(w, (n, n, win, win, d))
    t = nc.transpose(t, (0, 2, 1, 3, 4))
    return nc.reshape(t, (g, g, d))


def layernorm2d(x: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> Tensor:
    """Channel-first [c, h, w] layer norm over c."""
    t = nc.transpose(x, (1, 2, 0))
    t = nc.layernorm(t, gamma, beta, eps)
    return nc.transpose(t, (2, 0, 1))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, t, d = x.shape
    x = nc.reshape(x, (*lead, t, heads, d // heads))
    n = len(lead)
    return nc.transpose(x, (*range(n), n + 1, n, n + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, t, dh = x.shape
    n = len(lead)
    x = nc.transpose(x, (*range(n), n + 1, n, n + 2))
    return nc.reshape(x, (*lead, t, h * dh))


def attention_core(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Scaled dot-product multi-head attention on [..., T, d] projections."""
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    dh = qh.shape[-1]
    scores = nc.scale(nc.matmul(qh, nc.swap_last(kh)), 1.0 / np.sqrt(dh))
    return _merge_heads(nc.matmul(nc.softmax(scores), vh))


def _encoder_attention(cfg: ModelConfig, reg: ParamRegistry, prefix: str, x: Tensor, lora: Mapping) -> Tensor:
    d = cfg.enc_dim
    qkv = nc.linear(x, reg[f"{prefix}.qkv.weight"], reg[f"{prefix}.qkv.bias"])
    q, k, v = qkv[..., :d], qkv[..., d : 2 * d], qkv[..., 2 * d :]
    if f"{prefix}.q" in lora:
        q = q + lora[f"{prefix}.q"].delta(x)
    if f"{prefix}.v" in lora:
        v = v + lora[f"{prefix}.v"].delta(x)
    out = attention_core(q, k, v, cfg.enc_heads)
    return nc.linear(out, reg[f"{prefix}.proj.weight"], reg[f"{prefix}.proj.bias"])


def encoder_block(
    cfg: ModelConfig,
    reg: ParamRegistry,
    index: int,
    x: Tensor,
    prompts: Tensor | None = None,
    lora: Mapping | None = None,
    force_global: bool | None = None,
) -> Tensor:
    """One transformer block on the [g, g, d] token grid.

    Windowed blocks partition the grid; global blocks attend over all g*g
    tokens. Layer prompts are appended to every window (once in global
    blocks), take part in attention and are dropped before the MLP, which is
    per-token and so cannot affect grid tokens.
    """
    lora = lora or {}
    b = f"enc.blocks.{index}"
    g, _, d = x.shape
    is_global = index in cfg.global_block_indices if force_global is None else force_global
    if is_global:
        seqs = nc.reshape(x, (1, g * g, d))
        gp = g
    else:
        win = cfg.window_size
        gp = -(-g // win) * win
        seqs = window_partition(nc.pad2d(x, gp - g, gp - g), win)
    nwin, ntok, _ = seqs.shape

    h = seqs
    if prompts is not None:
        n = prompts.shape[0]
        rep = nc.broadcast_to(nc.reshape(prompts, (1, n, d)), (nwin, n, d))
        h = nc.concat([seqs, rep], axis=1)
    a = nc.layernorm(h, reg[f"{b}.norm1.weight"], reg[f"{b}.norm1.bias"], cfg.ln_eps)
    a = _encoder_attention(cfg, reg, f"{b}.attn", a, lora)
    if prompts is not None:
        a = a[:, :ntok, :]
    h = seqs + a
    m = nc.layernorm(h, reg[f"{b}.norm2.weight"], reg[f"{b}.norm2.bias"], cfg.ln_eps)
    m = nc.linear(m, reg[f"{b}.mlp.lin1.weight"], reg[f"{b}.mlp.lin1.bias"])
    m = nc.linear(nc.gelu(m), reg[f"{b}.mlp.lin2.weight"], reg[f"{b}.mlp.lin2.bias"])
    h = h + m

    if is_global:
        return nc.reshape(h, (g, g, d))
    out = window_merge(h, gp)
    return out[:g, :g, :] if gp != g else out


def _as_image(cfg: ModelConfig, image) -> Tensor:
    img = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=np.float32))
    if img.ndim == 2:
        img = nc.reshape(img, (1,) + img.shape)
    expect = (cfg.in_chans, cfg.image_size, cfg.image_size)
    if img.shape != expect:
        raise DimensionError(f"encode_image: image shape {img.shape}, config expects {expect}")
    return img


def encode_image(
    cfg: ModelConfig,
    reg: ParamRegistry,
    image,
    enc_prompts: Sequence[Tensor] | None = None,
    lora: Mapping | None = None,
) -> Tensor:
    """Image [c, h, w] -> embedding [neck_dim, g, g]."""
    img = _as_image(cfg, image)
    if enc_prompts is not None:
        if len(enc_prompts) != cfg.enc_layers:
            raise ConfigurationError(f"expected {cfg.enc_layers} per-layer prompt tensors, got {len(enc_prompts)}")
        n0 = enc_prompts[0].shape[0] if enc_prompts else 0
        for p in enc_prompts:
            if p.ndim != 2 or p.shape[1] != cfg.enc_dim or p.shape[0] != n0:
                raise ConfigurationError(f"encoder prompt shape {p.shape} does not match (n_ie={n0}, d_ie={cfg.enc_dim})")
    x = nc.conv2d(img, reg["enc.patch_embed.weight"], reg["enc.patch_embed.bias"], stride=cfg.patch_size)
    x = nc.transpose(x, (1, 2, 0))
    x = x + reg["enc.pos_embed"]
    for i in range(cfg.enc_layers):
        p = enc_prompts[i] if enc_prompts is not None else None
        x = encoder_block(cfg, reg, i, x, p, lora)
    x = nc.transpose(x, (2, 0, 1))
    x = nc.conv2d(x, reg["neck.conv1.weight"])
    x = layernorm2d(x, reg["neck.ln1.weight"], reg["neck.ln1.bias"], cfg.ln_eps)
    x = nc.conv2d(x, reg["neck.conv2.weight"], pad=1)
    return layernorm2d(x, reg["neck.ln2.weight"], reg["neck.ln2.bias"], cfg.ln_eps)
