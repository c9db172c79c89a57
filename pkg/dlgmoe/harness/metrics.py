from collections.abc import Sequence

from pydantic import BaseModel
from rapidfuzz.distance import Levenshtein


class EditResult(BaseModel):
    substitutions: int
    insertions: int
    deletions: int
    ref_length: int
    rate: float
    empty_ref: bool = False  # rate used a denominator of 1

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions


def edit_distance(hyp: Sequence[int], ref: Sequence[int]) -> EditResult:
    """Unit-cost Levenshtein alignment of ``hyp`` against ``ref``.

    rate = (S + I + D) / max(1, len(ref)); an empty reference is flagged.
    """
    ops = Levenshtein.editops(list(ref), list(hyp))
    counts = {"replace": 0, "insert": 0, "delete": 0}
    for op in ops:
        counts[op.tag] += 1
    errors = sum(counts.values())
    return EditResult(
        substitutions=counts["replace"],
        insertions=counts["insert"],
        deletions=counts["delete"],
        ref_length=len(ref),
        rate=errors / max(1, len(ref)),
        empty_ref=len(ref) == 0,
    )
