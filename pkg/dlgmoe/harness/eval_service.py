"""
Evaluation: greedy CTC decoding, token error rates by utterance language
class, and frame-level routing accuracy. Parameters are only read, so
utterances may be decoded on a thread pool.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dlgmoe.core.config import settings
from dlgmoe.core.exceptions import ConfigError
from dlgmoe.ctc.ctc_service import ctc_feasible, ctc_greedy_decode
from dlgmoe.data.data_model import Utterance
from dlgmoe.group.group_schema import ExpertStats
from dlgmoe.harness.harness_schema import ErrorCounts, EvalReport
from dlgmoe.harness.metrics import EditResult, edit_distance
from dlgmoe.model.encoder_service import EncoderOutput, encoder_forward
from dlgmoe.model.loss_service import ctc_log_probs, total_loss
from dlgmoe.model.model_params import ModelParams
from dlgmoe.router.router_model import RoutingTable
from dlgmoe.router.router_schema import RoutingRecord
from dlgmoe.tensor.tensor_model import Tensor, no_grad

logger = logging.getLogger(__name__)

ALL = "all"


@dataclass
class UtteranceResult:
    utt: Utterance
    hyp: list[int]
    edit: EditResult
    routing: list[RoutingTable]
    routing_hits: list[tuple[int, int]]  # per MoE layer: (correct frames, frames)
    stats: list[ExpertStats]
    loss: dict[str, float] | None


class Evaluator:
    def __init__(
        self,
        params: ModelParams,
        k: int | None = None,
        override: int | None = None,
        max_workers: int | None = None,
    ) -> None:
        config = params.config
        self.params = params
        self.k = config.default_k() if k is None else k
        if not 1 <= self.k <= config.experts_in_routed_group:
            raise ConfigError(f"k={self.k} outside [1, {config.experts_in_routed_group}]")
        low, high = config.k_policy.bounds
        if not low <= self.k <= high:
            logger.warning(f"Evaluating at k={self.k}, outside the trained range [{low}, {high}]")
        if override is not None and not 0 <= override < config.n_languages:
            raise ConfigError(f"Override language {override} outside [0, {config.n_languages})")
        self.override = override
        self.max_workers = max_workers or settings.EVAL_MAX_WORKERS

    def _loss(self, enc: EncoderOutput, utt: Utterance) -> dict[str, float] | None:
        n_frames = enc.h_final.shape[0]
        if not (ctc_feasible(n_frames, utt.y_asr) and ctc_feasible(n_frames, utt.y_lid)):
            return None
        if len(utt.y_asr) == 0:
            return None
        return total_loss(enc, utt.y_asr, utt.y_lid, self.params).values()

    def evaluate_one(self, utt: Utterance) -> UtteranceResult:
        with no_grad():
            enc = encoder_forward(Tensor(utt.feats), self.params, k=self.k, override=self.override)
            hyp = ctc_greedy_decode(ctc_log_probs(enc.h_final, self.params))
            loss = self._loss(enc, utt)
        hits = [
            (int(np.sum(table.lang_ids == utt.true_frame_lang)), len(table))
            for table in enc.routing_tables
        ]
        return UtteranceResult(
            utt=utt,
            hyp=hyp,
            edit=edit_distance(hyp, list(utt.y_asr.labels)),
            routing=enc.routing_tables,
            routing_hits=hits,
            stats=enc.expert_stats,
            loss=loss,
        )

    def evaluate(
        self, utterances: Sequence[Utterance], routing_out: Path | None = None
    ) -> EvalReport:
        """Aggregate report; ``routing_out`` also receives every routing table as JSON lines."""
        checksum = self.params.store.checksum()
        if self.max_workers > 1:
            with ThreadPoolExecutor(max_workers=self.max_workers) as pool:
                results = list(pool.map(self.evaluate_one, utterances))
        else:
            results = [self.evaluate_one(u) for u in utterances]
        report = self._aggregate(results, checksum)
        if routing_out is not None:
            write_routing_records(results, routing_out, self.params.config.n_vanilla_layers)
        logger.info(
            f"Evaluated {report.n_utts} utterances at k={self.k}: "
            f"TER={report.token_error_rate.get(ALL, 0.0):.4f}, routing={report.routing_accuracy}"
        )
        return report

    def _aggregate(self, results: list[UtteranceResult], checksum: str) -> EvalReport:
        config = self.params.config
        counts: dict[str, ErrorCounts] = defaultdict(ErrorCounts)
        for r in results:
            for key in (r.utt.language_class, ALL):
                c = counts[key]
                c.substitutions += r.edit.substitutions
                c.insertions += r.edit.insertions
                c.deletions += r.edit.deletions
                c.ref_tokens += r.edit.ref_length
                c.utterances += 1

        n_layers = config.n_moe_layers
        layer_hits = np.zeros((n_layers, 2), dtype=np.int64)
        class_hits: dict[str, np.ndarray] = defaultdict(lambda: np.zeros(2, dtype=np.int64))
        for r in results:
            for layer, (correct, frames) in enumerate(r.routing_hits):
                layer_hits[layer] += (correct, frames)
                class_hits[r.utt.language_class] += (correct, frames)

        utilization: dict[tuple[int, int | None], ExpertStats] = {}
        for r in results:
            for s in r.stats:
                key = (s.layer, s.language)
                if key not in utilization:
                    zeros = [0] * len(s.expert_counts)
                    utilization[key] = s.model_copy(update={"expert_counts": zeros})
                agg = utilization[key]
                agg.expert_counts = [
                    a + b for a, b in zip(agg.expert_counts, s.expert_counts, strict=True)
                ]

        losses = [r.loss for r in results if r.loss is not None]
        mean_loss: dict[str, float] = {}
        if losses:
            mean_loss = {name: float(np.mean([lv[name] for lv in losses])) for name in losses[0]}
        total_frames = int(layer_hits[:, 1].sum())
        return EvalReport(
            k=self.k,
            override=config.language_names[self.override] if self.override is not None else None,
            n_utts=len(results),
            token_error_rate={key: c.rate for key, c in sorted(counts.items())},
            error_counts=dict(sorted(counts.items())),
            routing_accuracy=float(layer_hits[:, 0].sum() / total_frames) if total_frames else None,
            routing_accuracy_by_class={
                key: float(h[0] / h[1]) for key, h in sorted(class_hits.items()) if h[1]
            },
            routing_accuracy_by_layer=[float(h[0] / h[1]) for h in layer_hits if h[1]],
            expert_utilization=[utilization[key] for key in sorted(utilization, key=_stats_order)],
            loss=mean_loss,
            empty_references=sum(r.edit.empty_ref for r in results),
            param_checksum=checksum,
        )


def write_routing_records(
    results: Sequence[UtteranceResult], path: Path, first_moe_layer: int = 0
) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as out:
        for r in results:
            for i, table in enumerate(r.routing):
                record = RoutingRecord.from_table(r.utt.utt_id, table, first_moe_layer + i)
                out.write(record.model_dump_json() + "\n")
    return path


def _stats_order(key: tuple[int, int | None]) -> tuple[int, int]:
    layer, language = key
    return layer, -1 if language is None else language


def evaluate(
    params: ModelParams,
    utterances: Sequence[Utterance],
    k: int | None = None,
    override: int | None = None,
    max_workers: int | None = None,
    routing_out: Path | None = None,
) -> EvalReport:
    return Evaluator(params, k, override, max_workers).evaluate(utterances, routing_out)
