"""
Dense float64 tensors with a reverse-mode tape.

Ops record onto the active ``Tape`` only; without one they run in inference
mode and return plain values. The active tape is held in a context variable
so threads evaluating in parallel never share one.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Iterable, Iterator, Sequence
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Any

import numpy as np
from numpy.typing import ArrayLike, NDArray

from dlgmoe.core.exceptions import ContractError

logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]
BackwardFn = Callable[[FloatArray], Sequence[FloatArray | None]]

_active_tape: ContextVar[Tape | None] = ContextVar("dlgmoe_active_tape", default=None)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "_index")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        *,
        name: str | None = None,
    ) -> None:
        self.data: FloatArray = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: FloatArray | None = None
        self.name = name
        self._tape: Tape | None = None
        self._index = -1

    @classmethod
    def zeros(cls, *shape: int, requires_grad: bool = False) -> Tensor:
        return cls(np.zeros(shape), requires_grad=requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(int(s) for s in self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> FloatArray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __len__(self) -> int:
        return self.shape[0] if self.shape else 1

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


@dataclass
class TapeEntry:
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: BackwardFn
    op: str


class Tape:
    """Ordered record of differentiable ops; inputs always precede outputs."""

    def __init__(self) -> None:
        self.entries: list[TapeEntry] = []
        self._token: Any = None

    def __enter__(self) -> Tape:
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *_exc: object) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.entries)

    def record(
        self, op: str, output: Tensor, inputs: Sequence[Tensor], backward: BackwardFn
    ) -> None:
        output._tape = self
        output._index = len(self.entries)
        self.entries.append(TapeEntry(output, tuple(inputs), backward, op))

    def backward(self, loss: Tensor, leaves: Iterable[Tensor] = ()) -> None:
        """Accumulate dLoss/dLeaf into ``leaf.grad`` for every participating leaf."""
        if loss.data.size != 1 or loss.ndim > 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        for leaf in leaves:
            if leaf.requires_grad and leaf.grad is None:
                leaf.zero_grad()
        if not loss.requires_grad:
            return
        if loss._tape is not self:
            raise ContractError("loss was not recorded on this tape")

        grads: dict[int, FloatArray] = {id(loss): np.ones_like(loss.data)}
        for entry in reversed(self.entries[: loss._index + 1]):
            upstream = grads.pop(id(entry.output), None)
            if upstream is None:
                continue
            local = entry.backward(upstream)
            for tensor, grad in zip(entry.inputs, local, strict=True):
                if grad is None or not tensor.requires_grad:
                    continue
                if tensor.is_leaf:
                    tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
                else:
                    key = id(tensor)
                    grads[key] = grads[key] + grad if key in grads else grad


def current_tape() -> Tape | None:
    return _active_tape.get()


@contextmanager
def no_grad() -> Iterator[None]:
    token = _active_tape.set(None)
    try:
        yield
    finally:
        _active_tape.reset(token)


def backward(loss: Tensor, leaves: Iterable[Tensor] = ()) -> None:
    if loss._tape is None:
        if loss.data.size != 1 or loss.ndim > 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        for leaf in leaves:
            if leaf.requires_grad and leaf.grad is None:
                leaf.zero_grad()
        return
    loss._tape.backward(loss, leaves)


def zero_grad(params: Iterable[Tensor]) -> None:
    for param in params:
        param.zero_grad()
