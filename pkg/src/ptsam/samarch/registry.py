from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from ..numcore import Tensor

GROUPS = ("encoder", "neck", "decoder", "adapter")

Init = Callable[[np.random.Generator, tuple[int, ...]], np.ndarray]


def trunc_normal(std: float = 0.02) -> Init:
    def init(rng, shape):
        return (np.clip(rng.standard_normal(shape), -2.0, 2.0) * std).astype(np.float32)

    return init


def zeros(rng, shape):
    return np.zeros(shape, dtype=np.float32)


def ones(rng, shape):
    return np.ones(shape, dtype=np.float32)


@dataclass
class ParamEntry:
    name: str
    shape: tuple[int, ...]
    group: str
    trainable: bool
    tensor: Tensor | None

    @property
    def numel(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


class ParamRegistry:
    """Ordered name -> parameter store; the single source of truth for
    trainability and parameter counts.

    With ``materialize=False`` only shapes are recorded, which is enough for
    counting at full scale without allocating buffers.
    """

    def __init__(self, rng: np.random.Generator | None = None, materialize: bool = True):
        self._entries: dict[str, ParamEntry] = {}
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.materialize = materialize

    def add(self, name: str, shape, group: str, init: Init, trainable: bool = False) -> Tensor | None:
        if name in self._entries:
            raise KeyError(f"parameter {name!r} registered twice")
        if group not in GROUPS:
            raise ValueError(f"unknown parameter group {group!r}")
        shape = tuple(int(s) for s in shape)
        tensor = None
        if self.materialize:
            tensor = Tensor(init(self.rng, shape), requires_grad=trainable, name=name)
        self._entries[name] = ParamEntry(name, shape, group, trainable, tensor)
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        t = self._entries[name].tensor
        if t is None:
            raise RuntimeError(f"registry is metadata-only; {name!r} has no buffer")
        return t

    def get(self, name: str) -> Tensor | None:
        e = self._entries.get(name)
        return e.tensor if e is not None else None

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[ParamEntry]:
        return iter(self._entries.values())

    def __len__(self) -> int:
        return len(self._entries)

    def entry(self, name: str) -> ParamEntry:
        return self._entries[name]

    def names(self, group: str | None = None) -> list[str]:
        return [e.name for e in self if group is None or e.group == group]

    def set_trainable(self, name: str, flag: bool) -> None:
        e = self._entries[name]
        e.trainable = bool(flag)
        if e.tensor is not None:
            e.tensor.requires_grad = bool(flag)
            if not flag:
                e.tensor.grad = None

    def freeze_all(self) -> None:
        for name in list(self._entries):
            self.set_trainable(name, False)

    def trainable(self) -> list[ParamEntry]:
        return [e for e in self if e.trainable]

    def count(self, trainable_only: bool = True) -> int:
        return sum(e.numel for e in self if e.trainable or not trainable_only)

    def count_by_group(self, trainable_only: bool = False) -> dict[str, int]:
        out = {g: 0 for g in GROUPS}
        for e in self:
            if e.trainable or not trainable_only:
                out[e.group] += e.numel
        return out

    def zero_grad(self) -> None:
        for e in self:
            if e.tensor is not None:
                e.tensor.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {e.name: e.tensor.data.copy() for e in self if e.tensor is not None}
