from pydantic import BaseModel, Field, ValidationError, model_validator
from typing_extensions import Self

from dlgmoe.core.exceptions import ConfigError


class SynthSpec(BaseModel):
    """Recipe for a synthetic corpus.

    Token ids are laid out per language in consecutive, disjoint ranges after
    the CTC blank: language 0 owns 1..vocab_sizes[0], language 1 the next
    vocab_sizes[1] ids, and so on.
    """

    n_utts: int = Field(default=200, ge=1)
    t_min: int = Field(default=24, ge=1)
    t_max: int = Field(default=48, ge=1)
    d_in: int = Field(default=16, ge=1)
    language_names: list[str] = Field(default_factory=lambda: ["zh", "en"])
    vocab_sizes: list[int] = Field(default_factory=lambda: [6, 6])
    cs_ratio: float = Field(default=0.5, ge=0.0, le=1.0)
    seg_min: int = Field(default=8, ge=1)
    seg_max: int = Field(default=24, ge=1)
    token_min_frames: int = Field(default=2, ge=2)
    token_max_frames: int = Field(default=5, ge=2)
    noise_std: float = Field(default=0.05, ge=0.0)
    language_separation: float = Field(default=1.5, ge=0.0)
    seed: int = 0

    @model_validator(mode="after")
    def _validate_recipe(self) -> Self:
        if len(self.vocab_sizes) != len(self.language_names):
            raise ValueError("vocab_sizes needs one entry per language")
        if any(size < 2 for size in self.vocab_sizes):
            raise ValueError("Each language needs at least two tokens")
        if self.t_min > self.t_max:
            raise ValueError("t_min must not exceed t_max")
        if self.seg_min > self.t_max:
            raise ValueError("seg_min exceeds t_max; no segment fits an utterance")
        if self.seg_max < 2 * self.seg_min:
            raise ValueError("seg_max must be at least twice seg_min")
        if self.token_max_frames < 2 * self.token_min_frames:
            raise ValueError("token_max_frames must be at least twice token_min_frames")
        if self.token_min_frames > min(self.seg_min, self.t_min):
            raise ValueError("A token must fit in the shortest segment and utterance")
        if self.cs_ratio > 0 and 2 * self.seg_min > self.t_max:
            raise ValueError("Code-switched utterances need t_max >= 2 * seg_min")
        if self.cs_ratio > 0 and len(self.language_names) < 2:
            raise ValueError("Code-switching needs at least two languages")
        return self

    @property
    def n_languages(self) -> int:
        return len(self.language_names)

    @property
    def vocab_size(self) -> int:
        """Model vocabulary size: blank plus every language's tokens."""
        return 1 + sum(self.vocab_sizes)

    def vocab_ranges(self) -> list[tuple[int, int]]:
        """Inclusive token id range per language."""
        ranges = []
        start = 1
        for size in self.vocab_sizes:
            ranges.append((start, start + size - 1))
            start += size
        return ranges

    @classmethod
    def parse(cls, payload: object) -> "SynthSpec":
        try:
            return cls.model_validate(payload)
        except ValidationError as e:
            raise ConfigError(str(e))


class UtteranceRecord(BaseModel):
    """One manifest line; features live in ``feats/<utt_id>.bin``."""

    utt_id: str
    length: int
    language_class: str
    y_asr: list[int]
    y_lid: list[int]
    true_frame_lang: list[int]
