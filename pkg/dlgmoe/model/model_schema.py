from typing import Literal

from pydantic import BaseModel, Field, ValidationError, model_validator
from typing_extensions import Self

from dlgmoe.core.exceptions import ConfigError
from dlgmoe.group.group_schema import KPolicy

MoeType = Literal["dlg", "dlg_uniform", "sparse", "dense"]


class DlgMoeConfig(BaseModel):
    """Model hyperparameters. Defaults are a desk-scale model; see ``full_scale_config``."""

    d_in: int = Field(default=16, ge=1)
    d_model: int = Field(default=16, ge=2)
    n_heads: int = Field(default=2, ge=1)
    d_ffn: int = Field(default=32, ge=1)
    n_vanilla_layers: int = Field(default=1, ge=0)
    n_moe_layers: int = Field(default=1, ge=0)
    n_languages: int = Field(default=2, ge=1)
    language_names: list[str] = Field(default_factory=lambda: ["zh", "en"])
    experts_per_group: int = Field(default=2, ge=1)
    moe_type: MoeType = "dlg"
    k_policy: KPolicy = Field(default_factory=lambda: KPolicy.dynamic(1, 2))
    route_from: Literal["layer_input", "h_inter"] = "layer_input"
    vocab_size: int = Field(default=13, ge=2)  # includes the CTC blank at index 0
    lambda_ctc: float = Field(default=0.3, ge=0.0, le=1.0)
    lambda_inter: float = Field(default=0.1, ge=0.0)
    causal: bool = True
    conv_kernel: int = Field(default=3, ge=0)  # 0 disables the convolution module
    decoder_layers: int = Field(default=1, ge=0)
    activation: Literal["swish", "relu"] = "swish"
    subsampling: Literal["none", "conv2d4"] = "none"
    init_seed: int = 0

    @model_validator(mode="after")
    def _validate_structure(self) -> Self:
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if len(self.language_names) != self.n_languages:
            raise ValueError("language_names must name every language")
        if self.vocab_size <= self.n_languages:
            raise ValueError("vocab_size must exceed n_languages")
        if not self.causal and self.conv_kernel and self.conv_kernel % 2 == 0:
            raise ValueError("A non-causal convolution needs an odd kernel")
        self.k_policy.check_against(self.experts_in_routed_group)
        if self.moe_type == "dense" and self.k_policy.bounds != (
            self.experts_in_routed_group,
            self.experts_in_routed_group,
        ):
            raise ValueError("A dense MoE activates every expert; use a fixed k equal to all experts")
        return self

    @property
    def n_groups(self) -> int:
        """Expert groups per MoE layer (one shared group without language routing)."""
        return self.n_languages if self.language_routed else 1

    @property
    def language_routed(self) -> bool:
        return self.moe_type in ("dlg", "dlg_uniform")

    @property
    def experts_in_routed_group(self) -> int:
        """Experts a frame can choose from once its group is fixed."""
        if self.language_routed:
            return self.experts_per_group
        return self.experts_per_group * self.n_languages

    @property
    def trainable(self) -> bool:
        return self.subsampling == "none"

    def default_k(self) -> int:
        if self.moe_type == "dense":
            return self.experts_in_routed_group
        return self.k_policy.bounds[1]

    @classmethod
    def parse(cls, payload: object) -> "DlgMoeConfig":
        try:
            return cls.model_validate(payload)
        except ValidationError as e:
            raise ConfigError(str(e))


def full_scale_config() -> DlgMoeConfig:
    """12-layer model (6 vanilla + 6 DLG-MoE, 2 groups x 2 experts) used for accounting."""
    return DlgMoeConfig(
        d_in=80,
        d_model=256,
        n_heads=4,
        d_ffn=2048,
        n_vanilla_layers=6,
        n_moe_layers=6,
        n_languages=2,
        experts_per_group=2,
        k_policy=KPolicy.fixed(2),
        vocab_size=5000,
        conv_kernel=15,
        decoder_layers=6,
        subsampling="conv2d4",
    )


def tiny_config(**overrides: object) -> DlgMoeConfig:
    """Smallest useful model; gradient checks and unit tests build on it."""
    payload: dict[str, object] = {
        "d_in": 4,
        "d_model": 8,
        "n_heads": 2,
        "d_ffn": 8,
        "n_vanilla_layers": 1,
        "n_moe_layers": 1,
        "experts_per_group": 2,
        "k_policy": KPolicy.fixed(1),
        "vocab_size": 7,
        "conv_kernel": 2,
        "decoder_layers": 1,
    }
    payload.update(overrides)
    return DlgMoeConfig.model_validate(payload)
