from pydantic import BaseModel, Field, ValidationError

from dlgmoe.core.exceptions import ConfigError
from dlgmoe.group.group_schema import ExpertStats, KPolicy
from dlgmoe.model.model_schema import DlgMoeConfig


class TrainConfig(BaseModel):
    """Optimisation settings. ``k_policy`` and the lambdas override the model's when set."""

    lr: float = Field(default=1e-3, ge=0.0)
    warmup_steps: int = Field(default=500, ge=0)
    max_steps: int = Field(default=2000, ge=1)
    batch_size: int = Field(default=8, ge=1)
    seed: int = 0
    k_policy: KPolicy | None = None
    lambda_ctc: float | None = Field(default=None, ge=0.0, le=1.0)
    lambda_inter: float | None = Field(default=None, ge=0.0)
    checkpoint_every: int = Field(default=0, ge=0)  # 0 keeps only the final checkpoint
    grad_clip_norm: float | None = Field(default=None, gt=0.0)
    adam_betas: tuple[float, float] = (0.9, 0.98)
    adam_eps: float = Field(default=1e-9, gt=0.0)


class TrainJobConfig(BaseModel):
    model: DlgMoeConfig = Field(default_factory=DlgMoeConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)

    @classmethod
    def parse(cls, payload: str) -> "TrainJobConfig":
        try:
            return cls.model_validate_json(payload)
        except ValidationError as e:
            raise ConfigError(str(e))

    def resolved_model(self) -> DlgMoeConfig:
        """The model config with the training overrides applied and re-validated."""
        updates: dict[str, object] = {}
        if self.train.k_policy is not None:
            updates["k_policy"] = self.train.k_policy.model_dump()
        if self.train.lambda_ctc is not None:
            updates["lambda_ctc"] = self.train.lambda_ctc
        if self.train.lambda_inter is not None:
            updates["lambda_inter"] = self.train.lambda_inter
        return DlgMoeConfig.parse({**self.model.model_dump(), **updates})


class TrainLogRecord(BaseModel):
    step: int
    k: int
    lr: float
    loss: float
    ctc: float
    att: float
    inter: float
    grad_norm: float
    skipped: int = 0


class ErrorCounts(BaseModel):
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    ref_tokens: int = 0
    utterances: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def rate(self) -> float:
        return self.errors / max(1, self.ref_tokens)


class EvalReport(BaseModel):
    k: int
    override: str | None = None
    n_utts: int
    token_error_rate: dict[str, float]  # per language class and "all"
    error_counts: dict[str, ErrorCounts]
    routing_accuracy: float | None = None  # over every MoE layer's frames
    routing_accuracy_by_class: dict[str, float] = Field(default_factory=dict)
    routing_accuracy_by_layer: list[float] = Field(default_factory=list)
    expert_utilization: list[ExpertStats] = Field(default_factory=list)
    loss: dict[str, float] = Field(default_factory=dict)
    empty_references: int = 0
    param_checksum: str


class ReportRow(BaseModel):
    k: int
    activated_params: int
    flops: int


class AccountingReport(BaseModel):
    moe_type: str
    t_frames: int
    encoder_frames: int
    chunk_size: int | None = None
    total_params: int
    per_expert_params: int
    rows: list[ReportRow]
