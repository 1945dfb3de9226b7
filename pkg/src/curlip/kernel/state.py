"""Named parameters and the ModelState checkpoint unit."""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .tensor import Tensor


class Param(Tensor):
    """A leaf tensor with a unique name inside a :class:`ModelState`."""

    def __init__(self, name: str, value: np.ndarray, trainable: bool = True):
        super().__init__(value, requires_grad=trainable)
        self.name = name
        self.trainable = trainable
        self.grad = np.zeros_like(self.data) if trainable else None

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.shape}, trainable={self.trainable})"


@dataclass
class ModelState:
    params: dict[str, Param] = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    opt_moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    step_count: int = 0
    dtype: type = np.float32

    def param(self, name: str, init: Callable[[], np.ndarray], trainable: bool = True) -> Param:
        """Return the existing parameter ``name`` or create it from ``init()``."""
        if name in self.params:
            return self.params[name]
        p = Param(name, np.asarray(init(), dtype=self.dtype), trainable=trainable)
        self.params[name] = p
        return p

    def trainable(self) -> Iterator[Param]:
        return (p for p in self.params.values() if p.trainable)

    def zero_grad(self) -> None:
        for p in self.trainable():
            p.grad = np.zeros_like(p.data)

    def freeze(self) -> None:
        for p in self.params.values():
            p.trainable = False
            p.requires_grad = False
            p.grad = None

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def copy(self) -> "ModelState":
        return self.astype(self.dtype)

    def astype(self, dtype) -> "ModelState":
        """Deep copy with every parameter (and moment) cast to ``dtype``."""
        out = ModelState(config=copy.deepcopy(self.config), step_count=self.step_count, dtype=dtype)
        for name, p in self.params.items():
            out.params[name] = Param(name, p.data.astype(dtype, copy=True), trainable=p.trainable)
        for name, (m, v) in self.opt_moments.items():
            out.opt_moments[name] = (m.astype(dtype, copy=True), v.astype(dtype, copy=True))
        return out

    def load_values(self, other: "ModelState", prefix: str = "") -> None:
        """Copy values of matching parameters from ``other`` in place."""
        for name, p in other.params.items():
            if name.startswith(prefix) and name in self.params:
                self.params[name].data[...] = p.data

    def checksum(self, prefix: str = "") -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            if name.startswith(prefix):
                h.update(name.encode())
                h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()
