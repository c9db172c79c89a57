from __future__ import annotations

from collections.abc import Iterable
from dataclasses import dataclass

from dlgmoe.core.exceptions import ContractError

BLANK = 0


@dataclass(frozen=True)
class CtcLabelSeq:
    """Target labels for CTC; index 0 is reserved for the blank."""

    labels: tuple[int, ...] = ()

    @classmethod
    def of(cls, labels: Iterable[int]) -> CtcLabelSeq:
        return cls(tuple(int(label) for label in labels))

    def __post_init__(self) -> None:
        if any(label == BLANK for label in self.labels):
            raise ContractError("CTC labels must not contain the blank index")
        if any(label < 0 for label in self.labels):
            raise ContractError("CTC labels must be non-negative")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_repeats(self) -> int:
        return sum(1 for a, b in zip(self.labels, self.labels[1:], strict=False) if a == b)

    @property
    def min_frames(self) -> int:
        """Frames needed by the shortest valid alignment (repeats need a blank between)."""
        return len(self.labels) + self.n_repeats

    def check_vocab(self, n_classes: int) -> None:
        bad = [label for label in self.labels if label >= n_classes]
        if bad:
            raise ContractError(f"CTC labels {bad} outside vocabulary of size {n_classes}")
