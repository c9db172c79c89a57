import json
from pathlib import Path

import numpy as np
import pytest

from dlgmoe.core.exceptions import ConfigError
from dlgmoe.data.data_model import Dataset
from dlgmoe.harness.eval_service import ALL, Evaluator, evaluate
from dlgmoe.model.model_params import ModelParams


class TestEvaluator:
    def test_report_totals(self, dynamic_params: ModelParams, tiny_dataset: Dataset) -> None:
        report = evaluate(dynamic_params, tiny_dataset.utterances, k=1)
        assert report.k == 1
        assert report.n_utts == len(tiny_dataset)
        assert report.error_counts[ALL].ref_tokens == sum(len(u.y_asr) for u in tiny_dataset.utterances)
        classes = {u.language_class for u in tiny_dataset.utterances}
        assert set(report.token_error_rate) == classes | {ALL}
        assert len(report.routing_accuracy_by_layer) == 2
        assert set(report.loss) == {"loss", "ctc", "att", "inter"}

    def test_parameters_are_only_read(self, dynamic_params: ModelParams, tiny_dataset: Dataset) -> None:
        before = dynamic_params.store.checksum()
        report = evaluate(dynamic_params, tiny_dataset.utterances, k=2)
        assert report.param_checksum == before
        assert dynamic_params.store.checksum() == before
        assert all(t.grad is None for t in dynamic_params.parameters())

    def test_override_routing_accuracy(self, dynamic_params: ModelParams, tiny_dataset: Dataset) -> None:
        report = evaluate(dynamic_params, tiny_dataset.utterances, override=0)
        frames = np.concatenate([u.true_frame_lang for u in tiny_dataset.utterances])
        assert report.override == "zh"
        assert report.routing_accuracy == pytest.approx(float(np.mean(frames == 0)))
        for language_class, accuracy in report.routing_accuracy_by_class.items():
            if language_class == "mono-zh":
                assert accuracy == 1.0
            elif language_class == "mono-en":
                assert accuracy == 0.0

    def test_expert_utilization_counts_every_frame(
        self, dynamic_params: ModelParams, tiny_dataset: Dataset
    ) -> None:
        report = evaluate(dynamic_params, tiny_dataset.utterances, k=2)
        total_frames = sum(u.n_frames for u in tiny_dataset.utterances)
        for layer in (1, 2):
            used = sum(sum(s.expert_counts) for s in report.expert_utilization if s.layer == layer)
            assert used == 2 * total_frames

    def test_thread_pool_gives_same_report(
        self, dynamic_params: ModelParams, tiny_dataset: Dataset
    ) -> None:
        serial = evaluate(dynamic_params, tiny_dataset.utterances, k=1, max_workers=1)
        pooled = evaluate(dynamic_params, tiny_dataset.utterances, k=1, max_workers=2)
        assert serial.model_dump() == pooled.model_dump()

    def test_routing_records(
        self, tmp_path: Path, dynamic_params: ModelParams, tiny_dataset: Dataset
    ) -> None:
        path = tmp_path / "routing" / "tables.jsonl"
        evaluate(dynamic_params, tiny_dataset.utterances, routing_out=path)
        records = [json.loads(line) for line in path.read_text().splitlines()]
        assert len(records) == 2 * len(tiny_dataset)
        assert {r["layer"] for r in records} == {1, 2}
        first = tiny_dataset.utterances[0]
        assert len(records[0]["lang_ids"]) == first.n_frames
        assert records[0]["utt_id"] == first.utt_id

    def test_invalid_k(self, dynamic_params: ModelParams) -> None:
        with pytest.raises(ConfigError):
            Evaluator(dynamic_params, k=3)

    def test_invalid_override(self, dynamic_params: ModelParams) -> None:
        with pytest.raises(ConfigError):
            Evaluator(dynamic_params, override=2)
