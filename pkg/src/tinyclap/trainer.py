"""Training loop: mixed batches, linear warmup, Adam, binary checkpoints.

Each batch draws floor(batch_size * temporal_fraction) records from the
order-negative pool (mask true) and the rest from the primary pool, without
replacement within a batch, then shuffles. Training state is a pure function
of (config, data, seed): the checkpoint carries parameters, optimizer
moments, and the batch generator's bit state, so an interrupted run resumed
at a checkpoint boundary reproduces the uninterrupted run bit for bit.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from dataclasses import replace as dc_replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .corpus import DatasetManifest, load_manifest
from .encoders import (
    EncoderConfig,
    ModelParams,
    TextVocab,
    build_vocab,
    forward_batch,
    init_params,
)
from .errors import EmptyPool, FormatError, InvalidConfig, NumericError
from .losses import LossConfig, train_loss

CHECKPOINT_MAGIC = b"TCKP"
CHECKPOINT_VERSION = 1
LOG_TEMPERATURE_MIN = -math.log(100.0)
LOG_TEMPERATURE_MAX = math.log(100.0)
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch_size: int = 64
    base_lr: float = 1e-3
    warmup_steps: int = 300
    temporal_fraction: float = 0.2  # 1:4 negative:primary within each batch
    seed: int = 0
    checkpoint_every: int = 0  # 0 = final checkpoint only
    order_loss_start_step: int = 0  # steps before this train with lambda_l = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise InvalidConfig(
                f"need steps >= 0 and batch_size >= 1, got {self.steps}, {self.batch_size}"
            )
        if self.warmup_steps < 0 or self.warmup_steps > max(self.steps, 1):
            raise InvalidConfig(
                f"warmup_steps must be in [0, steps], got {self.warmup_steps} vs {self.steps}"
            )
        if not 0.0 <= self.temporal_fraction <= 1.0:
            raise InvalidConfig(f"temporal_fraction must be in [0,1], got {self.temporal_fraction}")
        if self.checkpoint_every < 0:
            raise InvalidConfig(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")
        if self.order_loss_start_step < 0:
            raise InvalidConfig(
                f"order_loss_start_step must be >= 0, got {self.order_loss_start_step}"
            )
        if not np.isfinite(self.base_lr) or self.base_lr <= 0:
            raise InvalidConfig(f"base_lr must be finite and > 0, got {self.base_lr}")

    @property
    def lambda_l(self) -> float:
        return self.loss.lambda_l


def full_scale_preset() -> TrainConfig:
    """Reference values for the full-size recipe; hours of CPU, kept for documentation."""
    return TrainConfig(steps=30_000, batch_size=512, base_lr=1e-4, warmup_steps=10_000)


def compose_batch(primary_pool, temporal_pool, batch_size, temporal_fraction, rng):
    """Returns (records, temporal_mask); draw order is temporal idx, primary idx, shuffle."""
    n_temporal = math.floor(batch_size * temporal_fraction + 1e-9)
    n_primary = batch_size - n_temporal
    if n_temporal > len(temporal_pool):
        raise EmptyPool(
            f"batch needs {n_temporal} order-negative records, pool has {len(temporal_pool)}"
        )
    if n_primary > len(primary_pool):
        raise EmptyPool(f"batch needs {n_primary} primary records, pool has {len(primary_pool)}")
    picks: list = []
    mask: list[bool] = []
    if n_temporal:
        for i in rng.choice(len(temporal_pool), size=n_temporal, replace=False):
            picks.append(temporal_pool[int(i)])
            mask.append(True)
    if n_primary:
        for i in rng.choice(len(primary_pool), size=n_primary, replace=False):
            picks.append(primary_pool[int(i)])
            mask.append(False)
    perm = rng.permutation(batch_size)
    return [picks[int(i)] for i in perm], [mask[int(i)] for i in perm]


def lr_schedule(step: int, config: TrainConfig) -> float:
    if step < 0:
        raise InvalidConfig(f"step must be >= 0, got {step}")
    if config.warmup_steps <= 0:
        return config.base_lr
    return config.base_lr * min(1.0, (step + 1) / config.warmup_steps)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS


def init_optimizer(params: ModelParams) -> OptimizerState:
    return OptimizerState(
        m={name: np.zeros_like(t.data) for name, t in params.named().items()},
        v={name: np.zeros_like(t.data) for name, t in params.named().items()},
    )


def adam_step(params: ModelParams, grads, state: OptimizerState, lr: float) -> None:
    """In-place Adam with bias correction; log_temperature clamped afterwards."""
    t = state.step + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.named().items():
        g = np.asarray(grads[name], dtype=p.data.dtype)
        if g.shape != p.data.shape:
            raise InvalidConfig(f"gradient shape {g.shape} != {p.data.shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r} at step {t}")
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    lt = params["log_temperature"]
    lt.data = np.clip(lt.data, LOG_TEMPERATURE_MIN, LOG_TEMPERATURE_MAX)
    state.step = t


@dataclass
class Checkpoint:
    params: ModelParams
    train_config: TrainConfig
    optimizer: OptimizerState
    step: int
    rng_state: dict


# -- checkpoint file format ------------------------------------------------------
# "TCKP" + u32 version, then sections of (u32 name length, name bytes,
# u64 payload length, payload). "meta" holds canonical JSON; each tensor
# section holds u32 ndim, u32 per dim, then little-endian f64 values.


def _dump_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _tensor_payload(arr: np.ndarray) -> bytes:
    shape = arr.shape
    head = struct.pack("<I", len(shape)) + b"".join(struct.pack("<I", d) for d in shape)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def _tensor_from_payload(raw: bytes, where: str) -> np.ndarray:
    if len(raw) < 4:
        raise FormatError(f"{where}: truncated tensor section")
    (ndim,) = struct.unpack_from("<I", raw, 0)
    if len(raw) < 4 + 4 * ndim:
        raise FormatError(f"{where}: truncated tensor shape")
    shape = struct.unpack_from(f"<{ndim}I", raw, 4) if ndim else ()
    body = raw[4 + 4 * ndim :]
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    if len(body) != 8 * count:
        raise FormatError(f"{where}: tensor payload is {len(body)} bytes, expected {8 * count}")
    return np.frombuffer(body, dtype="<f8").reshape(shape).astype(np.float64).copy()


def _write_section(out: list[bytes], name: str, payload: bytes) -> None:
    nb = name.encode("utf-8")
    out.append(struct.pack("<I", len(nb)) + nb + struct.pack("<Q", len(payload)) + payload)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "step": ckpt.step,
        "train_config": asdict(ckpt.train_config),
        "vocab": list(ckpt.params.vocab.tokens),
        "optimizer": {
            "step": ckpt.optimizer.step,
            "beta1": ckpt.optimizer.beta1,
            "beta2": ckpt.optimizer.beta2,
            "eps": ckpt.optimizer.eps,
        },
        "param_names": list(ckpt.params.named().keys()),
    }
    blobs: list[bytes] = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    _write_section(blobs, "meta", _dump_json(meta))
    for name, p in ckpt.params.named().items():
        _write_section(blobs, f"tensor:{name}", _tensor_payload(p.data))
        _write_section(blobs, f"adam.m:{name}", _tensor_payload(ckpt.optimizer.m[name]))
        _write_section(blobs, f"adam.v:{name}", _tensor_payload(ckpt.optimizer.v[name]))
    _write_section(blobs, "rng", _dump_json(ckpt.rng_state))
    path.write_bytes(b"".join(blobs))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"checkpoint {path} does not exist")
    raw = path.read_bytes()
    if len(raw) < 8 or raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic (expected {CHECKPOINT_MAGIC!r})")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(
            f"{path}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
        )
    sections: dict[str, bytes] = {}
    off = 8
    while off < len(raw):
        if off + 4 > len(raw):
            raise FormatError(f"{path}: truncated section header")
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        if off + nlen + 8 > len(raw):
            raise FormatError(f"{path}: truncated section header")
        name = raw[off : off + nlen].decode("utf-8")
        off += nlen
        (plen,) = struct.unpack_from("<Q", raw, off)
        off += 8
        if off + plen > len(raw):
            raise FormatError(f"{path}: truncated payload for section {name!r}")
        sections[name] = raw[off : off + plen]
        off += plen
    if "meta" not in sections or "rng" not in sections:
        raise FormatError(f"{path}: missing required sections (meta, rng)")
    try:
        meta = json.loads(sections["meta"])
        rng_state = json.loads(sections["rng"])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: bad JSON section: {exc}") from exc
    try:
        tc = dict(meta["train_config"])
        tc["encoder"] = EncoderConfig(**tc["encoder"])
        tc["loss"] = LossConfig(**tc["loss"])
        train_config = TrainConfig(**tc)
        vocab = TextVocab(tokens=tuple(meta["vocab"]))
        param_names = list(meta["param_names"])
        opt_meta = meta["optimizer"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: bad meta section: {exc}") from exc
    tensors: dict[str, T.Tensor] = {}
    m: dict[str, np.ndarray] = {}
    v: dict[str, np.ndarray] = {}
    for name in param_names:
        for kind, store in (("tensor", None), ("adam.m", m), ("adam.v", v)):
            key = f"{kind}:{name}"
            if key not in sections:
                raise FormatError(f"{path}: missing section {key!r}")
            arr = _tensor_from_payload(sections[key], f"{path} [{key}]")
            if store is None:
                tensors[name] = T.parameter(name, arr)
            else:
                store[name] = arr
    params = ModelParams(config=train_config.encoder, vocab=vocab, tensors=tensors)
    optimizer = OptimizerState(
        m=m,
        v=v,
        step=int(opt_meta["step"]),
        beta1=float(opt_meta["beta1"]),
        beta2=float(opt_meta["beta2"]),
        eps=float(opt_meta["eps"]),
    )
    return Checkpoint(
        params=params,
        train_config=train_config,
        optimizer=optimizer,
        step=int(meta["step"]),
        rng_state=rng_state,
    )


# -- training loop ---------------------------------------------------------------

def _as_manifest(m) -> DatasetManifest:
    return m if isinstance(m, DatasetManifest) else load_manifest(m)


def init_run(config: TrainConfig, primary, temporal=None) -> tuple[TrainConfig, ModelParams]:
    """Vocab from both corpora (negatives included), fresh parameters.

    This is exactly the step-0 state of train(); kept separate so an
    untrained baseline can be built without running the loop.
    """
    primary = _as_manifest(primary)
    temporal = _as_manifest(temporal) if temporal is not None else None
    manifests = [primary] + ([temporal] if temporal is not None else [])
    vocab = build_vocab(manifests)
    enc = config.encoder
    if enc.vocab_size == 0:
        enc = EncoderConfig(
            frame_dim=enc.frame_dim,
            vocab_size=len(vocab),
            token_embed_dim=enc.token_embed_dim,
            max_positions=enc.max_positions,
            hidden_dim=enc.hidden_dim,
            shared_dim=enc.shared_dim,
        )
        config = TrainConfig(**{**asdict(config), "encoder": enc, "loss": config.loss})
    return config, init_params(enc, vocab, config.seed)


def _metric_line(step, lr, breakdown) -> str:
    rec = {
        "step": step,
        "lr": lr,
        "l_c": float(breakdown.l_c.data),
        "l_t": float(breakdown.l_t.data),
        "l_train": float(breakdown.l_train.data),
        "temporal_count": breakdown.temporal_count,
    }
    return json.dumps(rec, sort_keys=True, separators=(",", ":"))


def train(
    config: TrainConfig,
    primary_manifest,
    temporal_manifest=None,
    out_dir=".",
    resume_from=None,
) -> Checkpoint:
    """Run the loop; writes metrics.jsonl and final.tckp under out_dir.

    With resume_from, picks up a saved checkpoint and appends to the metrics
    log; the result is bit-identical to the uninterrupted run.
    """
    primary = _as_manifest(primary_manifest)
    temporal = _as_manifest(temporal_manifest) if temporal_manifest is not None else None
    if temporal is not None and temporal.catalog_ref != primary.catalog_ref:
        raise InvalidConfig("primary and temporal manifests reference different catalogs")
    if temporal is None and math.floor(config.batch_size * config.temporal_fraction + 1e-9) > 0:
        raise EmptyPool("temporal_fraction > 0 but no order-negative manifest given")
    temporal_pool = list(temporal.records) if temporal is not None else []
    for rec in temporal_pool:
        if rec.caption_neg is None:
            raise InvalidConfig(f"temporal record {rec.record_id} lacks a negative caption")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        params, opt = ckpt.params, ckpt.optimizer
        start_step = ckpt.step
        rng = np.random.default_rng()
        rng.bit_generator.state = ckpt.rng_state
        mode = "a"
    else:
        config, params = init_run(config, primary, temporal)
        opt = init_optimizer(params)
        start_step = 0
        # batch stream seeded apart from the weight init stream
        rng = np.random.default_rng([config.seed, 1])
        mode = "w"

    primary_pool = list(primary.records)
    ckpt = Checkpoint(
        params=params,
        train_config=config,
        optimizer=opt,
        step=start_step,
        rng_state=rng.bit_generator.state,
    )
    warmup_loss = dc_replace(config.loss, lambda_l=0.0)
    with open(metrics_path, mode, encoding="utf-8") as metrics:
        for step in range(start_step, config.steps):
            lr = lr_schedule(step, config)
            records, mask = compose_batch(
                primary_pool, temporal_pool, config.batch_size, config.temporal_fraction, rng
            )
            emb = forward_batch(params, records, mask)
            loss_cfg = warmup_loss if step < config.order_loss_start_step else config.loss
            breakdown = train_loss(emb, loss_cfg, params["log_temperature"])
            grads = T.backward(breakdown.l_train, params.trainable())
            adam_step(params, grads, opt, lr)
            metrics.write(_metric_line(step, lr, breakdown) + "\n")
            ckpt = Checkpoint(
                params=params,
                train_config=config,
                optimizer=opt,
                step=step + 1,
                rng_state=rng.bit_generator.state,
            )
            if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                metrics.flush()
                save_checkpoint(ckpt, out_dir / f"step{step + 1:06d}.tckp")
    save_checkpoint(ckpt, out_dir / "final.tckp")
    return ckpt
