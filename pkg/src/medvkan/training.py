"""AdamW, cosine learning-rate schedule, training/evaluation loops and checkpoints."""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import init
from .data import Sample, TensorFormatError, decode_tensor, encode_tensor
from .init import make_rng
from .losses import deep_supervision_loss, stage_loss
from .metrics import MetricsReport, aggregate, sample_metrics
from .model import ModelConfig, check_input, forward, init_params
from .tensor import backward, no_grad

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"VKC1"
CHECKPOINT_VERSION = 1
_SHUFFLE_STREAM = 1 << 32


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 2e-4
    lr_min: float = 1e-6
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 1000
    max_steps: int | None = None
    seed: int = 0
    checkpoint_every: int = 0
    grad_clip: float | None = None

    def __post_init__(self):
        if not 0 < self.lr_min <= self.lr0:
            raise ValueError(f"need 0 < lr_min <= lr0, got lr_min={self.lr_min}, lr0={self.lr0}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def total_steps(self, n_samples: int) -> int:
        if self.max_steps is not None:
            return int(self.max_steps)
        return self.epochs * math.ceil(n_samples / self.batch_size)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adamw_step(params: dict, grads: dict, state: OptimizerState, lr: float, config: TrainConfig):
    """One decoupled-weight-decay Adam update, in place.

    ``params`` maps names to leaf nodes, ``grads`` names to arrays.
    θ ← θ(1 − lr·λ) − lr·m̂/(√v̂ + eps).
    """
    b1, b2 = config.beta1, config.beta2
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, node in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(node.value)
        if g.shape != node.value.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {node.value.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(node.value)
            v = np.zeros_like(node.value)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + config.eps)
        node.value = (node.value * (1.0 - lr * config.weight_decay) - lr * update).astype(node.value.dtype)
    return params, state


def cosine_lr(step: int, total_steps: int, lr0: float, lr_min: float) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return lr0
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


# -- checkpoints -------------------------------------------------------------

def _pack_table(named: dict) -> bytes:
    out = [struct.pack("<I", len(named))]
    for name, arr in named.items():
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw + encode_tensor(arr))
    return b"".join(out)


def _unpack_table(buf, pos):
    if len(buf) - pos < 4:
        raise CheckpointError("checkpoint truncated in table header")
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    table = {}
    for _ in range(count):
        if len(buf) - pos < 4:
            raise CheckpointError("checkpoint truncated in entry name")
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if len(buf) - pos < n:
            raise CheckpointError("checkpoint truncated in entry name")
        name = bytes(buf[pos:pos + n]).decode("utf-8")
        pos += n
        try:
            table[name], pos = decode_tensor(buf, pos)
        except TensorFormatError as exc:
            raise CheckpointError(f"tensor {name!r}: {exc}") from exc
    return table, pos


def checkpoint_save(path, params, optimizer_state: OptimizerState, config: ModelConfig,
                    train_config: TrainConfig | None = None) -> Path:
    """Write model parameters (incl. norm statistics) and optimizer state."""
    meta = {
        "model": config.to_dict(),
        "train": train_config.to_dict() if train_config else None,
        "step": optimizer_state.t,
    }
    meta_raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    named = {name: leaf.value for name, leaf in init.flatten(params).items()}
    opt = {"step": np.array(optimizer_state.t, dtype=np.int64)}
    for name in optimizer_state.m:
        opt[f"m.{name}"] = optimizer_state.m[name]
        opt[f"v.{name}"] = optimizer_state.v[name]
    blob = (
        CHECKPOINT_MAGIC
        + struct.pack("<I", CHECKPOINT_VERSION)
        + struct.pack("<I", len(meta_raw))
        + meta_raw
        + _pack_table(named)
        + _pack_table(opt)
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    return path


@dataclass
class Checkpoint:
    params: dict
    optimizer_state: OptimizerState
    config: ModelConfig
    train_config: TrainConfig | None
    step: int


def checkpoint_load(path, params=None) -> Checkpoint:
    """Read a checkpoint; parameters are copied into ``params`` (or a fresh tree)."""
    buf = Path(path).read_bytes()
    if len(buf) < 12:
        raise CheckpointError("checkpoint truncated")
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"not a checkpoint: bad magic {buf[:4]!r}")
    version, meta_len = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
    pos = 12
    if len(buf) - pos < meta_len:
        raise CheckpointError("checkpoint truncated in config block")
    meta = json.loads(buf[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    config = ModelConfig.from_dict(meta["model"])
    train_config = TrainConfig(**meta["train"]) if meta.get("train") else None
    named, pos = _unpack_table(buf, pos)
    opt, pos = _unpack_table(buf, pos)
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes in checkpoint")

    if params is None:
        params = init_params(config, seed=0, dtype=next(iter(named.values())).dtype if named else np.float32)
    leaves = init.flatten(params)
    unknown = sorted(set(named) - set(leaves))
    if unknown:
        raise CheckpointError(f"unknown parameter name(s) in checkpoint: {unknown[:5]}")
    missing = sorted(set(leaves) - set(named))
    if missing:
        raise CheckpointError(f"checkpoint lacks parameter(s): {missing[:5]}")
    for name, arr in named.items():
        if arr.shape != leaves[name].value.shape:
            raise CheckpointError(f"shape mismatch for {name}: {arr.shape} vs {leaves[name].value.shape}")
        leaves[name].value = arr.copy()

    state = OptimizerState(t=int(opt.pop("step", np.array(meta["step"]))))
    for key, arr in opt.items():
        kind, name = key.split(".", 1)
        (state.m if kind == "m" else state.v)[name] = arr.copy()
    return Checkpoint(params, state, config, train_config, state.t)


# -- loops ---------------------------------------------------------------------

@dataclass
class TrainResult:
    params: dict
    optimizer_state: OptimizerState
    history: list
    checkpoint_path: Path | None = None


def stack_batch(samples):
    images = np.stack([s.image for s in samples]).astype(np.float32)
    labels = np.stack([s.label for s in samples]).astype(np.int64)
    return images, labels


def _check_dataset(model_config: ModelConfig, dataset):
    if not dataset:
        raise ValueError("training dataset is empty")
    for i, s in enumerate(dataset):
        try:
            check_input((1,) + s.image.shape, model_config)
            s.validate(model_config.num_classes)
        except ValueError as exc:
            raise ValueError(f"sample {i}: {exc}") from exc


def compute_loss(outputs, labels, model_config: ModelConfig):
    if model_config.deep_supervision:
        return deep_supervision_loss(outputs, labels, model_config.ds_weights)
    return stage_loss(outputs[0], labels)


def _clip(grads, max_norm):
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        grads = {k: g * scale for k, g in grads.items()}
    return grads


def train(model_config: ModelConfig, train_config: TrainConfig, dataset: list[Sample],
          out_dir=None, resume=None, params=None, callback=None) -> TrainResult:
    """Minibatch AdamW training with a per-step cosine schedule.

    Each epoch uses a permutation drawn from ``(seed, epoch)``, so a resumed
    run replays exactly the batches it would have seen.
    """
    _check_dataset(model_config, dataset)
    n = len(dataset)
    steps_per_epoch = math.ceil(n / train_config.batch_size)
    total = train_config.total_steps(n)

    if resume is not None:
        ckpt = checkpoint_load(resume, params if params is not None else init_params(model_config, train_config.seed))
        params, state = ckpt.params, ckpt.optimizer_state
    else:
        params = params if params is not None else init_params(model_config, train_config.seed)
        state = OptimizerState()
    trainable = init.trainable(params)

    out = Path(out_dir) if out_dir is not None else None
    ckpt_path = None
    history = []
    perm_epoch, perm = -1, None
    step = state.t
    while step < total:
        epoch, slot = divmod(step, steps_per_epoch)
        if epoch != perm_epoch:
            perm = make_rng(train_config.seed, _SHUFFLE_STREAM + epoch).permutation(n)
            perm_epoch = epoch
        idx = perm[slot * train_config.batch_size:(slot + 1) * train_config.batch_size]
        images, labels = stack_batch([dataset[i] for i in idx])
        lr = cosine_lr(step, total, train_config.lr0, train_config.lr_min)

        init.zero_grads(params)
        outputs = forward(images, params, model_config, training=True)
        loss = compute_loss(outputs, labels, model_config)
        backward(loss)
        grads = {k: v.grad for k, v in trainable.items() if v.grad is not None}
        if train_config.grad_clip:
            grads = _clip(grads, train_config.grad_clip)
        adamw_step(trainable, grads, state, lr, train_config)

        record = {"step": step, "epoch": epoch, "lr": lr, "loss": float(loss.value)}
        history.append(record)
        if callback is not None:
            callback(record)
        log.debug("step %d loss %.5f lr %.3g", step, record["loss"], lr)
        step += 1
        if out is not None and train_config.checkpoint_every and step % train_config.checkpoint_every == 0:
            ckpt_path = checkpoint_save(out / f"checkpoint_{step:06d}.vkc", params, state, model_config, train_config)
    init.zero_grads(params)
    if out is not None:
        ckpt_path = checkpoint_save(out / "checkpoint.vkc", params, state, model_config, train_config)
    return TrainResult(params, state, history, ckpt_path)


def predict_logits(params, model_config: ModelConfig, images, batch_size=8) -> np.ndarray:
    """Full-resolution logits in eval mode (running norm statistics)."""
    images = np.asarray(images, dtype=np.float32)
    outs = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            outs.append(forward(images[start:start + batch_size], params, model_config, training=False)[0].value)
    return np.concatenate(outs, axis=0)


def predict_labels(params, model_config: ModelConfig, images, batch_size=8) -> np.ndarray:
    return predict_logits(params, model_config, images, batch_size).argmax(axis=1).astype(np.uint8)


def evaluate(checkpoint, dataset: list[Sample], tau=1.0, model_config: ModelConfig | None = None,
             batch_size=8) -> MetricsReport:
    """Metrics of the argmax of the full-resolution head, averaged over samples.

    ``checkpoint`` is a checkpoint path or an in-memory parameter tree (then
    ``model_config`` is required).
    """
    if isinstance(checkpoint, (str, Path)):
        ckpt = checkpoint_load(checkpoint)
        params, model_config = ckpt.params, ckpt.config
    else:
        params = checkpoint
        if model_config is None:
            raise ValueError("model_config is required when evaluating an in-memory parameter tree")
    k = model_config.num_classes
    for i, s in enumerate(dataset):
        if s.label.size and s.label.max() >= k:
            raise ValueError(f"sample {i} has label {int(s.label.max())} but the model predicts {k} classes")
    images, labels = stack_batch(dataset)
    preds = predict_labels(params, model_config, images, batch_size)
    per_sample = [sample_metrics(p, g, k, tau) for p, g in zip(preds, labels)]
    return aggregate(per_sample, k, tau)
