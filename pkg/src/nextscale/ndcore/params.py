"""Named parameter store for learnable tensors."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor


class ParamStore:
    """Ordered map from path strings (e.g. ``blk0.attn.qkv.w``) to
    trainable tensors, plus the global optimizer step counter.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name!r}")
        t = Tensor(np.asarray(value), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def n_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise ValueError(f"parameter name mismatch: missing={sorted(missing)}, extra={sorted(extra)}")
        for k, t in self._params.items():
            a = np.asarray(arrays[k])
            if a.shape != t.data.shape:
                raise ValueError(f"parameter {k!r}: shape {a.shape} != expected {t.data.shape}")
            t.data = a.astype(t.data.dtype, copy=True)
