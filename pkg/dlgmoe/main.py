import json
import logging
import sys
from collections.abc import Iterator
from contextlib import contextmanager
from pathlib import Path
from typing import Annotated, Any

import sentry_sdk
import typer

from dlgmoe.core.config import settings
from dlgmoe.core.exceptions import ConfigError, DlgMoeError
from dlgmoe.data.data_model import Dataset
from dlgmoe.data.data_schema import SynthSpec
from dlgmoe.data.data_service import generate
from dlgmoe.data.data_store import DatasetStore, load_dataset, save_dataset
from dlgmoe.harness.eval_service import evaluate
from dlgmoe.harness.harness_schema import TrainJobConfig
from dlgmoe.harness.report_service import (
    accounting_table,
    build_report,
    eval_table,
    print_table,
)
from dlgmoe.harness.route_viz import route_viz
from dlgmoe.harness.train_service import train
from dlgmoe.model.checkpoint_service import load_checkpoint
from dlgmoe.model.model_params import init_params
from dlgmoe.model.model_schema import DlgMoeConfig, full_scale_config
from dlgmoe.streaming.chunk_mask import ms_to_chunk_frames
from dlgmoe.streaming.streaming_service import StreamingSession, read_feature_chunks

logger = logging.getLogger(__name__)

cli = typer.Typer(name=settings.PROJECT_NAME, no_args_is_help=True, add_completion=False)


@cli.callback()
def setup() -> None:
    """Dynamic language group MoE: data, training, evaluation and streaming."""
    logging.basicConfig(
        level=settings.LOG_LEVEL,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if settings.sentry_enabled:
        sentry_sdk.init(dsn=str(settings.SENTRY_DSN), environment=settings.ENVIRONMENT)


@contextmanager
def exit_on_error() -> Iterator[None]:
    try:
        yield
    except (DlgMoeError, OSError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        raise typer.Exit(code=1)


def _read_json(path: Path) -> Any:
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}")


def _language_index(config: DlgMoeConfig, lang: str | None) -> int | None:
    if lang is None:
        return None
    if lang not in config.language_names:
        raise ConfigError(f"Unknown language {lang!r}; expected one of {config.language_names}")
    return config.language_names.index(lang)


def _route_viz_dataset(ckpt: Path, data: Path | None) -> Dataset:
    if data is not None:
        return load_dataset(data)
    recipe = ckpt.parent / DatasetStore.SPEC_FILE
    if not recipe.exists():
        raise ConfigError(f"No --data given and no {recipe.name} next to {ckpt}")
    return generate(SynthSpec.parse(_read_json(recipe)))


def _emit(payload: str, out: Path | None) -> None:
    if out is None:
        typer.echo(payload)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(payload + "\n")


@cli.command("gen-data")
def gen_data(
    out: Annotated[Path, typer.Option(help="Output dataset directory")],
    spec: Annotated[Path | None, typer.Option(help="SynthSpec JSON")] = None,
) -> None:
    """Generate a synthetic bilingual / code-switching corpus."""
    with exit_on_error():
        synth = SynthSpec.parse(_read_json(spec)) if spec else SynthSpec()
        save_dataset(generate(synth), out)


@cli.command("train")
def train_cmd(
    data: Annotated[Path, typer.Option(help="Dataset directory")],
    out: Annotated[Path, typer.Option(help="Checkpoint directory")],
    config: Annotated[Path | None, typer.Option(help="TrainJobConfig JSON")] = None,
) -> None:
    """Train a model; writes train_log.jsonl and checkpoints into OUT."""
    with exit_on_error():
        job = TrainJobConfig.parse(config.read_text()) if config else TrainJobConfig()
        dataset = load_dataset(data)
        model_config = job.resolved_model()
        if model_config.vocab_size != dataset.spec.vocab_size:
            raise ConfigError(
                f"Model vocab_size {model_config.vocab_size} != dataset vocab {dataset.spec.vocab_size}"
            )
        if model_config.d_in != dataset.spec.d_in:
            raise ConfigError(f"Model d_in {model_config.d_in} != dataset d_in {dataset.spec.d_in}")
        if model_config.n_languages != dataset.spec.n_languages:
            raise ConfigError("Model and dataset disagree on the number of languages")
        out.mkdir(parents=True, exist_ok=True)
        # route-viz can rebuild the corpus from the recipe without --data
        (out / DatasetStore.SPEC_FILE).write_text(dataset.spec.model_dump_json(indent=2))
        params = init_params(model_config)
        train(params, dataset.utterances, job.train, out)


@cli.command("eval")
def eval_cmd(
    ckpt: Annotated[Path, typer.Option(help="Checkpoint file")],
    data: Annotated[Path, typer.Option(help="Dataset directory")],
    k: Annotated[int | None, typer.Option(help="Experts per frame")] = None,
    lang: Annotated[str | None, typer.Option(help="Route every frame to this language")] = None,
    workers: Annotated[int | None, typer.Option(help="Decoding threads")] = None,
    out: Annotated[Path | None, typer.Option(help="Write the JSON report here")] = None,
    routing_out: Annotated[
        Path | None, typer.Option(help="Write every routing table here as JSON lines")
    ] = None,
) -> None:
    """Token error rates and routing accuracy at a chosen k."""
    with exit_on_error():
        params, _ = load_checkpoint(ckpt)
        dataset = load_dataset(data)
        report = evaluate(
            params,
            dataset.utterances,
            k,
            _language_index(params.config, lang),
            workers,
            routing_out,
        )
        print_table(eval_table(report))
        _emit(report.model_dump_json(indent=2), out)


@cli.command("stream")
def stream_cmd(
    ckpt: Annotated[Path, typer.Option(help="Checkpoint file")],
    input_path: Annotated[
        Path, typer.Option("--input", help="float64 feature file, or - for stdin")
    ],
    chunk_frames: Annotated[int, typer.Option(help="Frames per chunk")] = 16,
    k: Annotated[int | None, typer.Option(help="Experts per frame")] = None,
    lang: Annotated[str | None, typer.Option(help="Route every frame to this language")] = None,
) -> None:
    """Chunked streaming inference; one JSON line per chunk on stdout."""
    with exit_on_error():
        params, _ = load_checkpoint(ckpt)
        session = StreamingSession(params, k, _language_index(params.config, lang))
        source = sys.stdin.buffer if str(input_path) == "-" else input_path.open("rb")
        try:
            for chunk in read_feature_chunks(source, params.config.d_in, chunk_frames):
                typer.echo(session.feed(chunk).model_dump_json())
        finally:
            if source is not sys.stdin.buffer:
                source.close()
        logger.info(f"Final hypothesis: {session.finalize()}")


@cli.command("route-viz")
def route_viz_cmd(
    ckpt: Annotated[Path, typer.Option(help="Checkpoint file")],
    utt: Annotated[str, typer.Option(help="Utterance id")],
    out: Annotated[Path, typer.Option(help="Output .ppm path")],
    data: Annotated[
        Path | None, typer.Option(help="Dataset directory; defaults to the recipe saved with the checkpoint")
    ] = None,
    k: Annotated[int | None, typer.Option(help="Experts per frame")] = None,
) -> None:
    """Render the first MoE layer's routing next to the true frame languages."""
    with exit_on_error():
        params, _ = load_checkpoint(ckpt)
        strip = route_viz(params, _route_viz_dataset(ckpt, data).by_id(utt), out, k)
        typer.echo(strip.ascii(), nl=False)


@cli.command("report")
def report_cmd(
    frames: Annotated[int, typer.Option(help="Input frames (10 ms each)")] = 2000,
    config: Annotated[Path | None, typer.Option(help="DlgMoeConfig JSON")] = None,
    full_scale: Annotated[bool, typer.Option(help="Use the 12-layer reference model")] = False,
    chunk: Annotated[int | None, typer.Option(help="Chunk size in encoder frames")] = None,
    chunk_ms: Annotated[
        int | None, typer.Option(help="Chunk size in milliseconds (10 ms frames)")
    ] = None,
    out: Annotated[Path | None, typer.Option(help="Write the JSON report here")] = None,
) -> None:
    """Total and activated parameters, and FLOPs, for every k."""
    with exit_on_error():
        if full_scale:
            model_config = full_scale_config()
        elif config is not None:
            model_config = DlgMoeConfig.parse(_read_json(config))
        else:
            model_config = DlgMoeConfig()
        if chunk_ms is not None:
            subsampling = 4 if model_config.subsampling == "conv2d4" else 1
            chunk = ms_to_chunk_frames(chunk_ms, subsampling=subsampling)
        report = build_report(model_config, frames, chunk)
        print_table(accounting_table(report))
        _emit(report.model_dump_json(indent=2), out)


if __name__ == "__main__":
    cli()
