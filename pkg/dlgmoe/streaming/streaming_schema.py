from pydantic import BaseModel


class StreamRecord(BaseModel):
    """One JSON line per processed chunk; ``lang_ids`` come from the first MoE layer."""

    chunk_idx: int
    frames: int
    partial_hyp: list[int]
    lang_ids: list[int]
    attention_scores: int
