"""
Training loop: sample k, forward every utterance of the batch on one tape,
average the joint losses, backpropagate, clip, and take an Adam step on the
warmup schedule.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dlgmoe.core.config import settings
from dlgmoe.core.exceptions import (
    AlignmentInfeasibleError,
    ContractError,
    DivergenceError,
    NumericalError,
)
from dlgmoe.data.data_model import Batch, Utterance
from dlgmoe.data.data_service import make_batches
from dlgmoe.group.group_schema import KPolicy
from dlgmoe.group.group_service import make_k_rng, sample_k
from dlgmoe.harness.harness_schema import TrainConfig, TrainLogRecord
from dlgmoe.harness.optimizer import Adam, clip_grads, warmup_lr
from dlgmoe.model.checkpoint_service import save_checkpoint
from dlgmoe.model.encoder_service import encoder_forward
from dlgmoe.model.loss_service import LossBreakdown, total_loss
from dlgmoe.model.model_params import ModelParams
from dlgmoe.tensor.tensor_model import Tape, Tensor, zero_grad
from dlgmoe.tensor.tensor_ops import add_n, scale

logger = logging.getLogger(__name__)


@dataclass
class TrainResult:
    params: ModelParams
    log: list[TrainLogRecord] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


class Trainer:
    LOG_FILE = "train_log.jsonl"
    FINAL_CHECKPOINT = "final.json"

    def __init__(
        self,
        params: ModelParams,
        cfg: TrainConfig,
        out_dir: Path | None = None,
    ) -> None:
        self.params = params
        self.cfg = cfg
        self.out_dir = out_dir
        config = params.config
        self.k_policy: KPolicy = cfg.k_policy or config.k_policy
        self.k_policy.check_against(config.experts_in_routed_group)
        if config.moe_type == "dense" and self.k_policy.bounds != (
            config.experts_in_routed_group,
            config.experts_in_routed_group,
        ):
            raise ContractError("A dense MoE trains with every expert active")
        self.lambda_ctc = config.lambda_ctc if cfg.lambda_ctc is None else cfg.lambda_ctc
        self.lambda_inter = config.lambda_inter if cfg.lambda_inter is None else cfg.lambda_inter
        self.clip_norm = cfg.grad_clip_norm or settings.GRAD_CLIP_NORM
        self.optimizer = Adam(params.parameters(), cfg.adam_betas, cfg.adam_eps)
        self.k_rng = make_k_rng(self.k_policy)
        self.batch_rng = np.random.default_rng(cfg.seed)

    def _batches(self, utterances: Sequence[Utterance]) -> Iterator[Batch]:
        while True:
            yield from make_batches(utterances, self.cfg.batch_size, self.batch_rng)

    def _batch_loss(self, batch: Batch, k: int) -> tuple[Tensor, dict[str, float], int]:
        losses: list[LossBreakdown] = []
        skipped = 0
        for i, utt_id in enumerate(batch.utt_ids):
            try:
                enc = encoder_forward(Tensor(batch.frames(i)), self.params, k=k)
                losses.append(
                    total_loss(
                        enc,
                        batch.y_asr[i],
                        batch.y_lid[i],
                        self.params,
                        self.lambda_ctc,
                        self.lambda_inter,
                    )
                )
            except AlignmentInfeasibleError as e:
                logger.warning(f"Skipping {utt_id}: {e}")
                skipped += 1
        if not losses:
            raise ContractError("No utterance in the batch can be aligned")
        mean = scale(add_n([lb.total for lb in losses]), 1.0 / len(losses))
        components = {
            name: float(np.mean([lb.values()[name] for lb in losses]))
            for name in ("ctc", "att", "inter")
        }
        return mean, components, skipped

    def step(self, step: int, batch: Batch) -> TrainLogRecord:
        k = sample_k(self.k_policy, self.k_rng)
        params = self.params.parameters()
        zero_grad(params)
        try:
            with Tape() as tape:
                loss, components, skipped = self._batch_loss(batch, k)
                if not math.isfinite(loss.item()):
                    raise DivergenceError(step, {"loss": loss.item(), **components})
                tape.backward(loss, params)
        except NumericalError as e:
            raise DivergenceError(step, {"loss": math.nan}) from e

        grad_norm = clip_grads(params, self.clip_norm)
        if not math.isfinite(grad_norm):
            raise DivergenceError(step, {"loss": loss.item(), "grad_norm": grad_norm, **components})
        lr = warmup_lr(step, self.cfg.lr, self.cfg.warmup_steps)
        self.optimizer.step(lr)
        return TrainLogRecord(
            step=step,
            k=k,
            lr=lr,
            loss=loss.item(),
            grad_norm=grad_norm,
            skipped=skipped,
            **components,
        )

    def _checkpoint(self, name: str, step: int) -> Path | None:
        if self.out_dir is None:
            return None
        return save_checkpoint(self.params, self.out_dir / name, step)

    def train(self, utterances: Sequence[Utterance]) -> TrainResult:
        if not utterances:
            raise ContractError("Cannot train on an empty dataset")
        result = TrainResult(self.params)
        log_file = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            log_file = (self.out_dir / self.LOG_FILE).open("w")
        batches = self._batches(utterances)
        try:
            for step in range(1, self.cfg.max_steps + 1):
                record = self.step(step, next(batches))
                result.log.append(record)
                if log_file is not None:
                    log_file.write(record.model_dump_json() + "\n")
                    log_file.flush()
                if step == 1 or step % 50 == 0:
                    logger.info(
                        f"step {step}: k={record.k} loss={record.loss:.4f} "
                        f"ctc={record.ctc:.4f} att={record.att:.4f} inter={record.inter:.4f}"
                    )
                if self.cfg.checkpoint_every and step % self.cfg.checkpoint_every == 0:
                    path = self._checkpoint(f"step{step:06d}.json", step)
                    if path is not None:
                        result.checkpoints.append(path)
        finally:
            if log_file is not None:
                log_file.close()
        final = self._checkpoint(self.FINAL_CHECKPOINT, self.cfg.max_steps)
        if final is not None:
            result.checkpoints.append(final)
        logger.info(f"Training finished after {self.cfg.max_steps} steps")
        return result


def train(
    params: ModelParams,
    utterances: Sequence[Utterance],
    cfg: TrainConfig,
    out_dir: Path | None = None,
) -> TrainResult:
    return Trainer(params, cfg, out_dir).train(utterances)
