"""
Parameter containers.

Every tensor lives once in a ``ParamStore`` under a dotted name; the
structured views below hold references to the same tensors, so an optimizer
walking the store updates what the forward pass reads.
"""

from __future__ import annotations

import hashlib
import logging
from collections.abc import Iterator
from dataclasses import dataclass

import numpy as np

from dlgmoe.core.exceptions import CheckpointError
from dlgmoe.group.group_model import ExpertGroup, ExpertParams
from dlgmoe.model.model_schema import DlgMoeConfig
from dlgmoe.router.router_model import SlrParams
from dlgmoe.tensor.tensor_model import Tensor

logger = logging.getLogger(__name__)


class ParamStore:
    def __init__(self, seed: int = 0) -> None:
        self._params: dict[str, Tensor] = {}
        self._rng = np.random.default_rng(seed)

    def __iter__(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def __len__(self) -> int:
        return len(self._params)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def _register(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"Parameter {name} registered twice")
        tensor = Tensor(data, requires_grad=True, name=name)
        self._params[name] = tensor
        return tensor

    def weight(self, name: str, fan_in: int, fan_out: int) -> Tensor:
        std = 1.0 / np.sqrt(fan_in)
        return self._register(name, self._rng.normal(0.0, std, size=(fan_in, fan_out)))

    def zeros(self, name: str, *shape: int) -> Tensor:
        return self._register(name, np.zeros(shape))

    def ones(self, name: str, *shape: int) -> Tensor:
        return self._register(name, np.ones(shape))

    def count(self) -> int:
        return int(sum(t.data.size for t in self._params.values()))

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name, tensor in self._params.items():
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())
        return digest.hexdigest()

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(arrays)
        unexpected = set(arrays) - set(self._params)
        if missing or unexpected:
            raise CheckpointError(
                f"Parameter mismatch: missing={sorted(missing)}, unexpected={sorted(unexpected)}"
            )
        for name, tensor in self._params.items():
            if arrays[name].shape != tensor.data.shape:
                raise CheckpointError(
                    f"Parameter {name} has shape {arrays[name].shape}, expected {tensor.data.shape}"
                )
            tensor.data = np.array(arrays[name], dtype=np.float64)


@dataclass
class NormParams:
    gamma: Tensor
    beta: Tensor


@dataclass
class FfnParams:
    norm: NormParams
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class AttentionParams:
    norm: NormParams
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor


@dataclass
class ConvParams:
    norm: NormParams
    pw1: Tensor  # d x 2d, followed by GLU
    pw1_b: Tensor
    depthwise: Tensor  # K x d
    depthwise_b: Tensor
    inner_norm: NormParams
    pw2: Tensor
    pw2_b: Tensor


@dataclass
class MoeParams:
    norm: NormParams
    groups: list[ExpertGroup]


@dataclass
class EncoderLayerParams:
    ffn1: FfnParams
    mhsa: AttentionParams
    conv: ConvParams | None
    ffn2: FfnParams | None
    moe: MoeParams | None
    final_norm: NormParams

    @property
    def is_moe(self) -> bool:
        return self.moe is not None


@dataclass
class DecoderLayerParams:
    self_attn: AttentionParams
    cross_attn: AttentionParams
    ffn: FfnParams


@dataclass
class DecoderParams:
    embedding: Tensor  # (V+2) x d, sos = V, eos = V+1
    layers: list[DecoderLayerParams]
    final_norm: NormParams
    out_w: Tensor
    out_b: Tensor


@dataclass
class ModelParams:
    config: DlgMoeConfig
    store: ParamStore
    input_w: Tensor
    input_b: Tensor
    vanilla_layers: list[EncoderLayerParams]
    moe_layers: list[EncoderLayerParams]
    slr: SlrParams
    ctc_w: Tensor
    ctc_b: Tensor
    decoder: DecoderParams

    @property
    def layers(self) -> list[EncoderLayerParams]:
        return self.vanilla_layers + self.moe_layers

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.store)

    def parameters(self) -> list[Tensor]:
        return self.store.tensors()


def _norm(store: ParamStore, prefix: str, d: int) -> NormParams:
    return NormParams(store.ones(f"{prefix}.gamma", d), store.zeros(f"{prefix}.beta", d))


def _ffn(store: ParamStore, prefix: str, d: int, d_ffn: int) -> FfnParams:
    return FfnParams(
        norm=_norm(store, f"{prefix}.norm", d),
        w1=store.weight(f"{prefix}.w1", d, d_ffn),
        b1=store.zeros(f"{prefix}.b1", d_ffn),
        w2=store.weight(f"{prefix}.w2", d_ffn, d),
        b2=store.zeros(f"{prefix}.b2", d),
    )


def _attention(store: ParamStore, prefix: str, d: int) -> AttentionParams:
    return AttentionParams(
        norm=_norm(store, f"{prefix}.norm", d),
        wq=store.weight(f"{prefix}.wq", d, d),
        bq=store.zeros(f"{prefix}.bq", d),
        wk=store.weight(f"{prefix}.wk", d, d),
        bk=store.zeros(f"{prefix}.bk", d),
        wv=store.weight(f"{prefix}.wv", d, d),
        bv=store.zeros(f"{prefix}.bv", d),
        wo=store.weight(f"{prefix}.wo", d, d),
        bo=store.zeros(f"{prefix}.bo", d),
    )


def _conv(store: ParamStore, prefix: str, d: int, kernel: int) -> ConvParams:
    return ConvParams(
        norm=_norm(store, f"{prefix}.norm", d),
        pw1=store.weight(f"{prefix}.pw1", d, 2 * d),
        pw1_b=store.zeros(f"{prefix}.pw1_b", 2 * d),
        depthwise=store.weight(f"{prefix}.depthwise", kernel, d),
        depthwise_b=store.zeros(f"{prefix}.depthwise_b", d),
        inner_norm=_norm(store, f"{prefix}.inner_norm", d),
        pw2=store.weight(f"{prefix}.pw2", d, d),
        pw2_b=store.zeros(f"{prefix}.pw2_b", d),
    )


def _expert_group(
    store: ParamStore, prefix: str, d: int, d_ffn: int, n_experts: int, language: int | None
) -> ExpertGroup:
    router = store.weight(f"{prefix}.unsup_router", d, n_experts)
    experts = [
        ExpertParams(
            w1=store.weight(f"{prefix}.expert{i}.w1", d, d_ffn),
            b1=store.zeros(f"{prefix}.expert{i}.b1", d_ffn),
            w2=store.weight(f"{prefix}.expert{i}.w2", d_ffn, d),
            b2=store.zeros(f"{prefix}.expert{i}.b2", d),
        )
        for i in range(n_experts)
    ]
    return ExpertGroup(experts=experts, unsup_router=router, language=language)


def _encoder_layer(
    store: ParamStore, prefix: str, config: DlgMoeConfig, moe: bool
) -> EncoderLayerParams:
    d, f = config.d_model, config.d_ffn
    ffn1 = _ffn(store, f"{prefix}.ffn1", d, f)
    mhsa = _attention(store, f"{prefix}.mhsa", d)
    conv = _conv(store, f"{prefix}.conv", d, config.conv_kernel) if config.conv_kernel else None
    ffn2: FfnParams | None = None
    moe_params: MoeParams | None = None
    if moe:
        norm = _norm(store, f"{prefix}.moe.norm", d)
        if config.language_routed:
            groups = [
                _expert_group(store, f"{prefix}.moe.group{lang}", d, f, config.experts_per_group, lang)
                for lang in range(config.n_languages)
            ]
        else:
            groups = [
                _expert_group(store, f"{prefix}.moe.group", d, f, config.experts_in_routed_group, None)
            ]
        moe_params = MoeParams(norm=norm, groups=groups)
    else:
        ffn2 = _ffn(store, f"{prefix}.ffn2", d, f)
    final_norm = _norm(store, f"{prefix}.final_norm", d)
    return EncoderLayerParams(ffn1, mhsa, conv, ffn2, moe_params, final_norm)


def init_params(config: DlgMoeConfig, seed: int | None = None) -> ModelParams:
    """Randomly initialise every parameter; identical seeds give identical models."""
    store = ParamStore(config.init_seed if seed is None else seed)
    d, v = config.d_model, config.vocab_size

    input_w = store.weight("encoder.input.w", config.d_in, d)
    input_b = store.zeros("encoder.input.b", d)
    vanilla = [
        _encoder_layer(store, f"encoder.layer{i}", config, moe=False)
        for i in range(config.n_vanilla_layers)
    ]
    moe_layers = [
        _encoder_layer(store, f"encoder.layer{config.n_vanilla_layers + i}", config, moe=True)
        for i in range(config.n_moe_layers)
    ]
    slr = SlrParams(
        w_lid=store.weight("slr.w_lid", d, config.n_languages + 1),
        b_lid=store.zeros("slr.b_lid", config.n_languages + 1),
        w_asr=store.weight("slr.w_asr", d, v),
        b_asr=store.zeros("slr.b_asr", v),
    )
    ctc_w = store.weight("ctc.w", d, v)
    ctc_b = store.zeros("ctc.b", v)

    dec_vocab = v + 2
    decoder = DecoderParams(
        embedding=store.weight("decoder.embedding", dec_vocab, d),
        layers=[
            DecoderLayerParams(
                self_attn=_attention(store, f"decoder.layer{i}.self_attn", d),
                cross_attn=_attention(store, f"decoder.layer{i}.cross_attn", d),
                ffn=_ffn(store, f"decoder.layer{i}.ffn", d, config.d_ffn),
            )
            for i in range(config.decoder_layers)
        ],
        final_norm=_norm(store, "decoder.final_norm", d),
        out_w=store.weight("decoder.out.w", d, dec_vocab),
        out_b=store.zeros("decoder.out.b", dec_vocab),
    )
    params = ModelParams(
        config=config,
        store=store,
        input_w=input_w,
        input_b=input_b,
        vanilla_layers=vanilla,
        moe_layers=moe_layers,
        slr=slr,
        ctc_w=ctc_w,
        ctc_b=ctc_b,
        decoder=decoder,
    )
    logger.debug(f"Initialised {len(store)} tensors ({store.count()} parameters)")
    return params
