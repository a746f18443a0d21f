"""AdamW training of enhancer + detection head, and the binary checkpoint format."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .dataset import Annotation, DataError, Record, read_annotations, read_ppm, resolve
from .detector import detection_loss, head_forward, head_shapes, init_head_params
from .net import NetConfig, Params, enhance_tensor, init_params, param_shapes
from .tensor import Graph, Tensor

logger = logging.getLogger(__name__)

MAGIC = b"AQFT1\n"


class NumericError(RuntimeError):
    """Non-finite loss or gradient."""


class CheckpointError(DataError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 3e-4
    batch_size: int = 6
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    steps: int = 500
    seed: int = 0
    checkpoint_path: str = "aquafeat.ckpt"
    checkpoint_every: int = 0
    trainable: str = "all"  # "all" or "head" (enhancer frozen)

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not all(0 <= b < 1 for b in self.betas):
            raise ValueError(f"betas must be in [0, 1), got {self.betas}")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.trainable not in ("all", "head"):
            raise ValueError(f"trainable must be 'all' or 'head', got {self.trainable!r}")


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Params) -> "OptimizerState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()}, 0)


def adamw_step(params: Params, grads: dict[str, np.ndarray], state: OptimizerState,
               config: TrainConfig) -> tuple[Params, OptimizerState]:
    """One AdamW update with decoupled weight decay, applied in place.

    Parameters without an entry in ``grads`` are left untouched.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    b1, b2 = config.betas
    lr, wd, eps = config.learning_rate, config.weight_decay, config.eps
    t = state.step + 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, g in grads.items():
        p = params[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + eps) + wd * p.data
        p.data = (p.data - lr * update).astype(p.dtype, copy=False)
    state.step = t
    return params, state


# -------------------------------------------------------------- checkpoints


def _dims(shape: tuple[int, ...], name: str) -> tuple[int, int, int, int]:
    if len(shape) > 4:
        raise CheckpointError(f"tensor {name} has {len(shape)} dims, format allows 4")
    return tuple(shape) + (1,) * (4 - len(shape))


def _pack(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    dims = _dims(arr.shape, name)
    return (struct.pack("<I", len(raw)) + raw + struct.pack("<4i", *dims)
            + np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_checkpoint(params: Params, state: OptimizerState | None, path) -> None:
    """Write ``params`` then optimizer moments (``.m`` / ``.v``) and the step."""
    state = state or OptimizerState.zeros_like(params)
    chunks = [MAGIC]
    chunks += [_pack(k, p.data) for k, p in params.items()]
    for k in params:
        chunks.append(_pack(k + ".m", state.m[k]))
        chunks.append(_pack(k + ".v", state.v[k]))
    chunks.append(struct.pack("<Q", state.step))
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def _read_tensors(buf: bytes, path) -> tuple[dict[str, np.ndarray], int]:
    if buf[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not an AQFT1 checkpoint (bad magic/version header)")
    pos = len(MAGIC)
    end = len(buf) - 8
    if end < pos:
        raise CheckpointError(f"{path}: truncated checkpoint (no step counter)")
    out: dict[str, np.ndarray] = {}
    while pos < end:
        if pos + 4 > end:
            raise CheckpointError(f"{path}: truncated tensor header at byte {pos}")
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if pos + nlen + 16 > end:
            raise CheckpointError(f"{path}: truncated tensor header at byte {pos}")
        name = buf[pos : pos + nlen].decode("utf-8", errors="replace")
        pos += nlen
        dims = struct.unpack_from("<4i", buf, pos)
        pos += 16
        if any(d < 0 for d in dims):
            raise CheckpointError(f"{path}: tensor {name} has negative dimension {dims}")
        count = 1
        for d in dims:
            count *= d
        nbytes = 4 * count
        if nbytes > end - pos:
            kind = "dimension overflow" if nbytes > len(buf) else "truncated tensor"
            raise CheckpointError(f"{path}: {kind} for {name}: dims {dims} need {nbytes} bytes, {end - pos} left")
        out[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
        pos += nbytes
    (step,) = struct.unpack_from("<Q", buf, end)
    return out, step


def load_checkpoint(path, expected: dict[str, tuple[int, ...]] | None = None) -> tuple[Params, OptimizerState]:
    """Read a checkpoint; with ``expected`` shapes, validate and reshape each tensor."""
    tensors, step = _read_tensors(Path(path).read_bytes(), path)
    names = [k for k in tensors if not k.endswith((".m", ".v"))]
    if expected is not None:
        missing = [k for k in expected if k not in tensors]
        if missing:
            raise CheckpointError(f"{path}: checkpoint lacks tensor {missing[0]} (architecture mismatch)")
        extra = [k for k in names if k not in expected]
        if extra:
            raise CheckpointError(f"{path}: unexpected tensor {extra[0]} (architecture mismatch)")
        names = list(expected)
    shapes = {}
    for k in names:
        want = tuple(expected[k]) if expected is not None else tensors[k].shape
        if tensors[k].shape != _dims(want, k):
            raise CheckpointError(f"{path}: shape mismatch for tensor {k}: file has {tensors[k].shape}, model expects {want}")
        shapes[k] = want
    params = {k: Tensor(tensors[k].reshape(shapes[k]), requires_grad=True, name=k) for k in names}
    state = OptimizerState(step=step)
    for k in names:
        for suffix, store in ((".m", state.m), (".v", state.v)):
            arr = tensors.get(k + suffix)
            store[k] = arr.reshape(shapes[k]) if arr is not None else np.zeros(shapes[k], np.float32)
    return params, state


def model_shapes(cfg: NetConfig) -> dict[str, tuple[int, ...]]:
    return {**param_shapes(cfg), **head_shapes(cfg)}


# ------------------------------------------------------------------ training


Sample = tuple[np.ndarray, Sequence[Annotation]]


def init_model(cfg: NetConfig, seed: int, dtype=None) -> Params:
    """Enhancer and head drawn from independent streams of ``seed``."""
    enh_seq, head_seq = np.random.SeedSequence(seed).spawn(2)
    params = init_params(cfg, np.random.default_rng(enh_seq), dtype)
    params.update(init_head_params(cfg, np.random.default_rng(head_seq), dtype))
    return params


def batch_loss(params: Params, images: Sequence[np.ndarray], gts: Sequence[Sequence[Annotation]],
               cfg: NetConfig, enhance: bool = True) -> Tensor:
    """Detection loss of enhance -> head on a batch (mean over images)."""
    dtype = params["head.pred.weight"].dtype
    shapes = {im.shape for im in images}
    groups = [list(range(len(images)))] if len(shapes) == 1 else [[i] for i in range(len(images))]
    total = None
    for idx in groups:
        batch = np.stack([images[i].transpose(2, 0, 1) for i in idx]).astype(dtype)
        x = enhance_tensor(batch, params, cfg) if enhance else Tensor(batch)
        loss = T.mul(detection_loss(head_forward(x, params, cfg), [gts[i] for i in idx]), len(idx) / len(images))
        total = loss if total is None else T.add(total, loss)
    return total


def train(config: TrainConfig, samples: Sequence[Sample], cfg: NetConfig | None = None,
          log: Callable[[str], None] | None = None, params: Params | None = None) -> tuple[Params, OptimizerState, list[float]]:
    """Optimise on in-memory samples. Returns params, optimizer state and per-step losses."""
    if not samples:
        raise DataError("training set is empty")
    cfg = cfg or NetConfig()
    params = params if params is not None else init_model(cfg, config.seed)
    state = OptimizerState.zeros_like(params)
    batch_rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(3)[2])
    trainable = {k: p for k, p in params.items() if config.trainable == "all" or k.startswith("head.")}
    frozen_enhancer = config.trainable == "head"
    images = [s[0] for s in samples]
    gts = [list(s[1]) for s in samples]
    losses = []
    for step in range(1, config.steps + 1):
        pick = batch_rng.integers(0, len(samples), size=config.batch_size)
        bimgs = [images[i] for i in pick]
        if frozen_enhancer:
            # enhancer runs tape-free; the head sees its output as a constant input
            dtype = params["head.pred.weight"].dtype
            with T.no_grad():
                bimgs = [enhance_tensor(im.transpose(2, 0, 1)[None].astype(dtype), params, cfg).data[0].transpose(1, 2, 0)
                         for im in bimgs]
        # overflow is reported below as a NumericError, so numpy's warnings are redundant
        with np.errstate(over="ignore", invalid="ignore"):
            with Graph() as graph:
                loss = batch_loss(params, bimgs, [gts[i] for i in pick], cfg, enhance=not frozen_enhancer)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(f"loss became {value} at step {step}")
            grads = T.backward(graph, loss, trainable)
        adamw_step(params, grads, state, config)
        losses.append(value)
        if log is not None:
            log(f"step={step} loss={value:.6f}")
        if config.checkpoint_every and step % config.checkpoint_every == 0:
            save_checkpoint(params, state, config.checkpoint_path)
    return params, state, losses


def load_samples(records: Sequence[Record], base) -> list[Sample]:
    samples = []
    for r in records:
        try:
            img = read_ppm(resolve(base, r.image_path))
            anns = read_annotations(resolve(base, r.ann_path))
        except OSError as exc:
            raise DataError(f"cannot read sample {r.image_path}: {exc}") from exc
        samples.append((img, anns))
    return samples


def train_loop(config: TrainConfig, records: Sequence[Record], base=".", cfg: NetConfig | None = None,
               log: Callable[[str], None] | None = None) -> Path:
    """Load the records, train, and write the final checkpoint."""
    if not records:
        raise DataError("dataset has no records")
    samples = load_samples(records, base)
    params, state, _ = train(config, samples, cfg, log)
    path = Path(config.checkpoint_path)
    try:
        save_checkpoint(params, state, path)
    except OSError as exc:
        raise DataError(f"cannot write checkpoint {path}: {exc}") from exc
    return path
