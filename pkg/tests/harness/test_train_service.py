from pathlib import Path
from unittest.mock import patch

import numpy as np
import pytest

from dlgmoe.core.exceptions import ConfigError, ContractError, DivergenceError, NumericalError
from dlgmoe.ctc.ctc_model import CtcLabelSeq
from dlgmoe.data.data_model import Dataset, Utterance
from dlgmoe.data.data_service import make_batches
from dlgmoe.group.group_schema import KPolicy
from dlgmoe.group.group_service import make_k_rng, sample_k
from dlgmoe.harness import train_service
from dlgmoe.harness.harness_schema import TrainConfig, TrainJobConfig
from dlgmoe.harness.train_service import Trainer, train
from dlgmoe.model.checkpoint_service import load_checkpoint
from dlgmoe.model.model_params import init_params
from dlgmoe.model.model_schema import tiny_config


def _cfg(**overrides: object) -> TrainConfig:
    payload: dict[str, object] = {"lr": 1e-2, "warmup_steps": 0, "max_steps": 2, "batch_size": 2}
    payload.update(overrides)
    return TrainConfig.model_validate(payload)


def _too_short_utterance() -> Utterance:
    return Utterance(
        utt_id="short",
        feats=np.zeros((2, 4)),
        y_asr=CtcLabelSeq.of([1, 1]),
        y_lid=CtcLabelSeq.of([1, 1]),
        true_frame_lang=np.zeros(2, dtype=np.int64),
        language_class="mono-zh",
    )


class TestTrainer:
    def test_log_records(self, tiny_dataset: Dataset) -> None:
        result = train(init_params(tiny_config()), tiny_dataset.utterances, _cfg(max_steps=3))
        assert [r.step for r in result.log] == [1, 2, 3]
        for record in result.log:
            assert record.k == 1
            assert np.isfinite(record.loss)
            assert record.loss == pytest.approx(
                0.3 * record.ctc + 0.7 * record.att + 0.1 * record.inter, rel=1e-9
            )

    def test_zero_lr_changes_nothing(self, tiny_dataset: Dataset) -> None:
        params = init_params(tiny_config())
        before = params.store.checksum()
        train(params, tiny_dataset.utterances, _cfg(lr=0.0))
        assert params.store.checksum() == before

    def test_training_moves_parameters(self, tiny_dataset: Dataset) -> None:
        params = init_params(tiny_config())
        before = params.store.checksum()
        train(params, tiny_dataset.utterances, _cfg())
        assert params.store.checksum() != before

    def test_runs_are_reproducible(self, tmp_path: Path, tiny_dataset: Dataset) -> None:
        cfg = _cfg(max_steps=3, k_policy=KPolicy.dynamic(1, 2, rng_seed=5))
        train(init_params(tiny_config()), tiny_dataset.utterances, cfg, tmp_path / "a")
        train(init_params(tiny_config()), tiny_dataset.utterances, cfg, tmp_path / "b")
        log_a = (tmp_path / "a" / Trainer.LOG_FILE).read_bytes()
        log_b = (tmp_path / "b" / Trainer.LOG_FILE).read_bytes()
        assert log_a == log_b
        assert (tmp_path / "a" / "final.json").read_bytes() == (tmp_path / "b" / "final.json").read_bytes()

    def test_dynamic_k_is_drawn_per_step(self, tiny_dataset: Dataset) -> None:
        policy = KPolicy.dynamic(1, 2, rng_seed=0)
        result = train(init_params(tiny_config()), tiny_dataset.utterances, _cfg(max_steps=8, k_policy=policy))
        rng = make_k_rng(policy)
        assert [r.k for r in result.log] == [sample_k(policy, rng) for _ in range(8)]

    def test_checkpoints(self, tmp_path: Path, tiny_dataset: Dataset) -> None:
        cfg = _cfg(max_steps=4, checkpoint_every=2)
        result = train(init_params(tiny_config()), tiny_dataset.utterances, cfg, tmp_path)
        assert [p.name for p in result.checkpoints] == ["step000002.json", "step000004.json", "final.json"]
        params, step = load_checkpoint(tmp_path / "final.json")
        assert step == 4
        assert params.store.checksum() == result.params.store.checksum()

    def test_infeasible_utterance_is_skipped(self, tiny_dataset: Dataset) -> None:
        trainer = Trainer(init_params(tiny_config()), _cfg())
        batch = make_batches([_too_short_utterance(), tiny_dataset.utterances[0]], 2)[0]
        record = trainer.step(1, batch)
        assert record.skipped == 1
        assert np.isfinite(record.loss)

    def test_batch_without_alignable_utterance(self) -> None:
        trainer = Trainer(init_params(tiny_config()), _cfg())
        batch = make_batches([_too_short_utterance()], 1)[0]
        with pytest.raises(ContractError):
            trainer.step(1, batch)

    def test_non_finite_loss_raises_divergence(self, tiny_dataset: Dataset) -> None:
        with (
            patch.object(train_service, "total_loss", side_effect=NumericalError("log_softmax")),
            pytest.raises(DivergenceError) as exc_info,
        ):
            train(init_params(tiny_config()), tiny_dataset.utterances, _cfg())
        assert exc_info.value.step == 1

    def test_dense_model_needs_every_expert(self) -> None:
        params = init_params(tiny_config(moe_type="dense", k_policy=KPolicy.fixed(4)))
        with pytest.raises(ContractError):
            Trainer(params, _cfg(k_policy=KPolicy.fixed(2)))

    def test_empty_dataset(self) -> None:
        with pytest.raises(ContractError):
            train(init_params(tiny_config()), [], _cfg())


class TestTrainJobConfig:
    def test_training_overrides_model(self) -> None:
        job = TrainJobConfig(
            model=tiny_config(),
            train=_cfg(k_policy=KPolicy.dynamic(1, 2), lambda_ctc=0.5),
        )
        resolved = job.resolved_model()
        assert resolved.k_policy.bounds == (1, 2)
        assert resolved.lambda_ctc == 0.5

    def test_invalid_override(self) -> None:
        job = TrainJobConfig(model=tiny_config(), train=_cfg(k_policy=KPolicy.fixed(3)))
        with pytest.raises(ConfigError):
            job.resolved_model()

    def test_parse_rejects_bad_json(self) -> None:
        with pytest.raises(ConfigError):
            TrainJobConfig.parse('{"train": {"lr": -1}}')
