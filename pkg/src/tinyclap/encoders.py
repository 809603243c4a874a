"""Tiny order-sensitive dual encoders over token and frame sequences.

Both towers share one shape: per-position input embedding plus a learned
positional embedding, a position-wise hidden layer, mean pooling over
positions, an output layer, and row L2 normalization. The hidden layer sits
before the pool; with purely additive positions a plain mean is permutation
invariant, so the nonlinearity must see positions to make order matter.

Batched encoding groups same-length sequences so each group is a handful of
matrix ops instead of per-sample graphs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import (
    EmptyInput,
    InvalidConfig,
    MissingNegative,
    SequenceTooLong,
)

UNK_TOKEN = "<unk>"
INIT_STD = 0.02
LOG_TEMPERATURE_INIT = math.log(1.0 / 0.07)

PARAM_ORDER = (
    "text.embed",
    "text.pos",
    "text.w1",
    "text.b1",
    "text.w2",
    "text.b2",
    "audio.proj",
    "audio.pos",
    "audio.w1",
    "audio.b1",
    "audio.w2",
    "audio.b2",
    "log_temperature",
)


@dataclass(frozen=True)
class EncoderConfig:
    frame_dim: int = 16
    vocab_size: int = 0  # 0 = take the size of the vocab passed to init_params
    token_embed_dim: int = 64
    max_positions: int = 64
    hidden_dim: int = 192
    shared_dim: int = 64

    def __post_init__(self):
        for name in ("frame_dim", "token_embed_dim", "max_positions", "hidden_dim", "shared_dim"):
            if getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.vocab_size < 0:
            raise InvalidConfig(f"vocab_size must be >= 0, got {self.vocab_size}")


@dataclass(frozen=True)
class TextVocab:
    tokens: tuple[str, ...]  # tokens[0] is always <unk>
    _ids: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.tokens or self.tokens[0] != UNK_TOKEN:
            raise InvalidConfig(f"vocab must start with {UNK_TOKEN!r}")
        ids = {}
        for i, tok in enumerate(self.tokens):
            if tok in ids:
                raise InvalidConfig(f"duplicate vocab token {tok!r}")
            ids[tok] = i
        object.__setattr__(self, "_ids", ids)

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, tokens) -> list[int]:
        return [self._ids.get(tok, 0) for tok in tokens]


def build_vocab(manifests) -> TextVocab:
    """Every caption token (positives then the record's negative), in first-occurrence order."""
    manifests = list(manifests)
    if not manifests:
        raise InvalidConfig("build_vocab needs at least one manifest")
    seen: dict[str, None] = {}
    n_tokens = 0
    for manifest in manifests:
        for rec in manifest.records:
            for cap in (getattr(rec, "caption_pos", None), getattr(rec, "caption_neg", None)):
                if cap is None:
                    continue
                for tok in cap.tokens:
                    n_tokens += 1
                    seen.setdefault(tok, None)
    if n_tokens == 0:
        raise InvalidConfig("corpus has no caption tokens to build a vocab from")
    return TextVocab(tokens=(UNK_TOKEN, *seen.keys()))


@dataclass
class ModelParams:
    config: EncoderConfig
    vocab: TextVocab
    tensors: dict[str, T.Tensor]

    def __getitem__(self, name: str) -> T.Tensor:
        return self.tensors[name]

    def named(self) -> dict[str, T.Tensor]:
        return self.tensors

    def trainable(self) -> list[T.Tensor]:
        return list(self.tensors.values())


def init_params(config: EncoderConfig, vocab: TextVocab, seed: int) -> ModelParams:
    """Weights and positional tables N(0, 0.02), biases zero, temperature ln(1/0.07).

    Tensors are drawn in PARAM_ORDER from a single generator; the order is
    part of the format (same seed, same bits).
    """
    v = config.vocab_size or len(vocab)
    if v != len(vocab):
        raise InvalidConfig(f"config.vocab_size {config.vocab_size} != vocab size {len(vocab)}")
    e, h, d = config.token_embed_dim, config.hidden_dim, config.shared_dim
    shapes = {
        "text.embed": (v, e),
        "text.pos": (config.max_positions, e),
        "text.w1": (e, h),
        "text.b1": (h,),
        "text.w2": (h, d),
        "text.b2": (d,),
        "audio.proj": (config.frame_dim, e),
        "audio.pos": (config.max_positions, e),
        "audio.w1": (e, h),
        "audio.b1": (h,),
        "audio.w2": (h, d),
        "audio.b2": (d,),
        "log_temperature": (),
    }
    rng = np.random.default_rng(seed)
    tensors: dict[str, T.Tensor] = {}
    for name in PARAM_ORDER:
        shape = shapes[name]
        if name == "log_temperature":
            data = np.array(LOG_TEMPERATURE_INIT)
        elif name.endswith((".b1", ".b2")):
            data = np.zeros(shape)
        else:
            data = INIT_STD * rng.standard_normal(shape)
        tensors[name] = T.parameter(name, data)
    return ModelParams(config=config, vocab=vocab, tensors=tensors)


def _check_length(n: int, max_positions: int, what: str) -> None:
    if n < 1:
        raise EmptyInput(f"{what} is empty")
    if n > max_positions:
        raise SequenceTooLong(f"{what} has {n} positions, max is {max_positions}")


def _tower_names(tower: str) -> tuple[str, str, str, str, str, str]:
    return (
        f"{tower}.pos", f"{tower}.w1", f"{tower}.b1", f"{tower}.w2", f"{tower}.b2",
        "text.embed" if tower == "text" else "audio.proj",
    )


def _encode_groups(params: ModelParams, tower: str, inputs: list) -> T.Tensor:
    """Shared batched tower: inputs are token-id lists (text) or T x F arrays (audio).

    Same-length inputs are flattened into one per-position pass, pooled with a
    block mean, and the pooled rows of all groups go through the output layer
    together; a final row gather restores input order.
    """
    pos_name, w1, b1, w2, b2, in_name = _tower_names(tower)
    cfg = params.config
    by_len: dict[int, list[int]] = {}
    for i, item in enumerate(inputs):
        n = len(item)
        _check_length(n, cfg.max_positions, f"{tower} input {i}")
        by_len.setdefault(n, []).append(i)

    pooled_parts: list[T.Tensor] = []
    order: list[int] = []
    for n, idxs in by_len.items():
        order.extend(idxs)
        if tower == "text":
            flat_ids = [tid for i in idxs for tid in inputs[i]]
            x = T.gather_rows(params[in_name], flat_ids)  # (k*n) x E
        else:
            stacked = np.concatenate([inputs[i] for i in idxs], axis=0)
            x = T.matmul(T.Tensor(stacked), params[in_name])  # (k*n) x E
        pos = T.gather_rows(params[pos_name], list(range(n)) * len(idxs))
        hidden = T.relu(T.add_bias(T.matmul(T.add(x, pos), params[w1]), params[b1]))
        pooled_parts.append(T.block_mean_rows(hidden, n))  # k x H
    pooled = T.concat_rows(pooled_parts)
    out = T.row_l2_normalize(T.add_bias(T.matmul(pooled, params[w2]), params[b2]))
    if order == list(range(len(inputs))):
        return out
    inverse = np.argsort(np.asarray(order, dtype=np.int64))
    return T.gather_rows(out, inverse)


def encode_text(params: ModelParams, tokens) -> T.Tensor:
    """One caption to a 1 x D unit-norm row; token ids come from params.vocab."""
    ids = params.vocab.encode(tokens)
    return _encode_groups(params, "text", [ids])


def encode_audio(params: ModelParams, frames: np.ndarray) -> T.Tensor:
    """One T x F clip to a 1 x D unit-norm row."""
    frames = np.asarray(frames)
    if frames.ndim != 2 or frames.shape[1] != params.config.frame_dim:
        raise InvalidConfig(
            f"clip must be T x {params.config.frame_dim}, got shape {frames.shape}"
        )
    return _encode_groups(params, "audio", [frames])


def encode_text_batch(params: ModelParams, token_seqs) -> T.Tensor:
    return _encode_groups(params, "text", [params.vocab.encode(toks) for toks in token_seqs])


def encode_audio_batch(params: ModelParams, clips) -> T.Tensor:
    return _encode_groups(params, "audio", [np.asarray(c) for c in clips])


@dataclass
class BatchEmbeddings:
    audio: T.Tensor  # N x D
    text: T.Tensor  # N x D
    text_neg: T.Tensor | None  # M x D, aligned with mask order
    temporal_rows: tuple[int, ...]  # batch row index of each text_neg row


def forward_batch(params: ModelParams, records, temporal_mask) -> BatchEmbeddings:
    """Embed a batch of records; rows flagged in temporal_mask also embed
    their order-reversed caption."""
    records = list(records)
    mask = list(temporal_mask)
    if not records:
        raise EmptyInput("forward_batch got an empty batch")
    if len(mask) != len(records):
        raise InvalidConfig(f"mask length {len(mask)} != batch size {len(records)}")
    temporal_rows = tuple(i for i, flag in enumerate(mask) if flag)
    for i in temporal_rows:
        if records[i].caption_neg is None:
            raise MissingNegative(f"batch row {i} is flagged temporal but has no caption_neg")

    seqs = [params.vocab.encode(r.caption_pos.tokens) for r in records]
    seqs += [params.vocab.encode(records[i].caption_neg.tokens) for i in temporal_rows]
    text_all = _encode_groups(params, "text", seqs)
    n = len(records)
    if temporal_rows:
        text = T.gather_rows(text_all, np.arange(n))
        text_neg = T.gather_rows(text_all, np.arange(n, n + len(temporal_rows)))
    else:
        text, text_neg = text_all, None
    audio = _encode_groups(params, "audio", [r.clip.frames for r in records])
    return BatchEmbeddings(audio=audio, text=text, text_neg=text_neg, temporal_rows=temporal_rows)
