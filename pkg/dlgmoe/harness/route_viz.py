"""
Routing strips: the first MoE layer's per-frame language above the true
frame language, as a binary PPM (P6) image plus a one-letter-per-frame
ASCII rendering.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from dlgmoe.core.exceptions import ContractError
from dlgmoe.data.data_model import Utterance
from dlgmoe.model.encoder_service import encoder_forward
from dlgmoe.model.model_params import ModelParams
from dlgmoe.tensor.tensor_model import Tensor, no_grad

logger = logging.getLogger(__name__)

# zh red, en green; further languages cycle through the rest
PALETTE: list[tuple[int, int, int]] = [
    (220, 40, 40),
    (40, 170, 60),
    (50, 90, 210),
    (230, 170, 30),
]
SEPARATOR = (128, 128, 128)


@dataclass
class RouteStrip:
    predicted: NDArray[np.int64]
    truth: NDArray[np.int64]
    ascii_predicted: str
    ascii_truth: str

    def ascii(self) -> str:
        return f"route: {self.ascii_predicted}\ntruth: {self.ascii_truth}\n"


def ascii_strip(lang_ids: NDArray[np.int64], language_names: list[str]) -> str:
    letters = [name[:1].upper() or "?" for name in language_names]
    return "".join(letters[int(i)] for i in lang_ids)


def render_ppm(
    rows: list[NDArray[np.int64]],
    px_per_frame: int = 4,
    strip_height: int = 12,
) -> bytes:
    """Stack one colour strip per row, separated by a grey line."""
    if not rows or any(r.size != rows[0].size for r in rows):
        raise ContractError("Every strip must cover the same frames")
    width = rows[0].size * px_per_frame
    bands = []
    for i, row in enumerate(rows):
        colours = np.asarray([PALETTE[int(lang) % len(PALETTE)] for lang in row], dtype=np.uint8)
        band = np.repeat(colours, px_per_frame, axis=0)
        bands.append(np.broadcast_to(band, (strip_height, width, 3)))
        if i < len(rows) - 1:
            bands.append(np.broadcast_to(np.asarray(SEPARATOR, dtype=np.uint8), (2, width, 3)))
    image = np.ascontiguousarray(np.concatenate(bands, axis=0))
    header = f"P6\n{width} {image.shape[0]}\n255\n".encode("ascii")
    return header + image.tobytes()


def route_strip(params: ModelParams, utt: Utterance, k: int | None = None) -> RouteStrip:
    if params.config.n_moe_layers == 0:
        raise ContractError("The model has no MoE layer to visualise")
    with no_grad():
        enc = encoder_forward(Tensor(utt.feats), params, k=k)
    predicted = enc.routing_tables[0].lang_ids
    names = params.config.language_names
    return RouteStrip(
        predicted=predicted,
        truth=utt.true_frame_lang,
        ascii_predicted=ascii_strip(predicted, names),
        ascii_truth=ascii_strip(utt.true_frame_lang, names),
    )


def route_viz(
    params: ModelParams, utt: Utterance, out_path: Path, k: int | None = None
) -> RouteStrip:
    """Write ``out_path`` (PPM) and a ``.txt`` sibling with the ASCII strips."""
    strip = route_strip(params, utt, k)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_bytes(render_ppm([strip.predicted, strip.truth]))
    out_path.with_suffix(".txt").write_text(strip.ascii())
    logger.info(f"Wrote routing strip for {utt.utt_id} to {out_path}")
    return strip
