from typing import Literal

from pydantic import HttpUrl, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict
from typing_extensions import Self


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        # Use top level .env file
        env_file=".env",
        env_ignore_empty=True,
        extra="ignore",
    )
    PROJECT_NAME: str = "dlg-moe"
    ENVIRONMENT: Literal["local", "staging", "production"] = "local"
    LOG_LEVEL: Literal["DEBUG", "INFO", "WARNING", "ERROR"] = "INFO"
    SENTRY_DSN: HttpUrl | None = None

    # Raise NumericalError as soon as an op produces NaN/Inf
    CHECK_FINITE: bool = True
    # Stand-in for log(0) in CTC recursions; keeps every tape value finite
    CTC_NEG_INF: float = -1e30

    GRAD_CLIP_NORM: float = 5.0
    EVAL_MAX_WORKERS: int = 1

    @model_validator(mode="after")
    def _validate_numeric_settings(self) -> Self:
        if self.CTC_NEG_INF > -1e10:
            raise ValueError("CTC_NEG_INF must be a large negative number")
        if self.GRAD_CLIP_NORM <= 0:
            raise ValueError("GRAD_CLIP_NORM must be positive")
        if self.EVAL_MAX_WORKERS < 1:
            raise ValueError("EVAL_MAX_WORKERS must be at least 1")
        return self

    @property
    def sentry_enabled(self) -> bool:
        return bool(self.SENTRY_DSN) and self.ENVIRONMENT != "local"


settings = Settings()
