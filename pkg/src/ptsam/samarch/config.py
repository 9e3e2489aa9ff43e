from __future__ import annotations

from dataclasses import asdict, dataclass, replace

from ..numcore import ConfigurationError


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters of the encoder, neck and mask decoder.

    ``dec_internal_dim`` is the projection width inside the cross-attention
    layers; ``dec_mlp_dim`` the hidden width of the two-way block MLP.
    Grids that are not a multiple of ``window_size`` are zero-padded for
    windowed blocks (the 1024 px / 16 px / 14-cell case).
    """

    image_size: int = 64
    patch_size: int = 8
    in_chans: int = 1
    enc_dim: int = 64
    enc_layers: int = 4
    enc_heads: int = 4
    window_size: int = 4
    global_block_indices: tuple[int, ...] = (1, 3)
    enc_mlp_ratio: float = 4.0
    dec_dim: int = 64
    dec_layers: int = 2
    dec_heads: int = 4
    dec_internal_dim: int = 32
    dec_mlp_dim: int = 512
    num_mask_tokens: int = 3
    iou_head_hidden: int = 64
    ln_eps: float = 1e-6

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def neck_dim(self) -> int:
        return self.dec_dim

    @property
    def mask_size(self) -> int:
        return 4 * self.grid

    def validate(self) -> "ModelConfig":
        if self.image_size <= 0 or self.patch_size <= 0 or self.image_size % self.patch_size:
            raise ConfigurationError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if not 1 <= self.window_size:
            raise ConfigurationError(f"window_size must be positive, got {self.window_size}")
        if any(not 0 <= i < self.enc_layers for i in self.global_block_indices):
            raise ConfigurationError(f"global_block_indices {self.global_block_indices} outside [0, {self.enc_layers})")
        if self.enc_dim % self.enc_heads:
            raise ConfigurationError(f"enc_dim {self.enc_dim} not divisible by enc_heads {self.enc_heads}")
        if self.dec_dim % self.dec_heads or self.dec_internal_dim % self.dec_heads:
            raise ConfigurationError("decoder widths must be divisible by dec_heads")
        if self.dec_dim % 8:
            raise ConfigurationError(f"dec_dim {self.dec_dim} must be divisible by 8 for the upscaling path")
        if self.num_mask_tokens < 1:
            raise ConfigurationError("num_mask_tokens must be >= 1")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["global_block_indices"] = list(self.global_block_indices)
        return d


def _equally_spaced_globals(layers: int, count: int = 4) -> tuple[int, ...]:
    step = layers // count
    return tuple(step * (i + 1) - 1 for i in range(count))


PRESETS: dict[str, ModelConfig] = {
    "desk": ModelConfig(),
    "vitb-shape": ModelConfig(
        image_size=1024,
        patch_size=16,
        in_chans=3,
        enc_dim=768,
        enc_layers=12,
        enc_heads=12,
        window_size=14,
        global_block_indices=_equally_spaced_globals(12),
        dec_dim=256,
        dec_heads=8,
        dec_internal_dim=128,
        dec_mlp_dim=2048,
        iou_head_hidden=256,
    ),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigurationError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}") from None
    if "global_block_indices" in overrides:
        overrides["global_block_indices"] = tuple(overrides["global_block_indices"])
    return replace(base, **overrides).validate()
