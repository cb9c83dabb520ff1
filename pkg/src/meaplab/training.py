"""AdamW, the warmup-cosine schedule, the training loop, and checkpoints.

The loop is a serial state machine: draw a batch in a seeded order, corrupt
it per the objective, run forward/backward per sequence, average the
gradients in batch order, clip the global norm, and apply AdamW with the
scheduled rate. Runs are bit-reproducible for a fixed seed and thread count.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import BinaryIO

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corruption import (
    CorruptedBatch,
    corrupt_pretrain,
    ntp_batch,
    pack_finetune,
)
from .data import Corpus
from .errors import (
    ConfigError,
    ContractError,
    FormatError,
    LengthError,
    NumericError,
    TrainingAbort,
)
from .model import ModelConfig, forward, init_parameters, parameter_shapes
from .rng import mix_seed

CHECKPOINT_MAGIC = b"MEAPCKPT"
CHECKPOINT_VERSION = 1

OBJECTIVES = ("ntp", "meap-pretrain", "meap-finetune")
DEFAULT_MASK_RATIO = {"ntp": 0.0, "meap-pretrain": 0.15, "meap-finetune": 0.10}


@dataclass(frozen=True)
class Schedule:
    max_lr: float
    min_lr: float
    total_steps: int
    warmup_fraction: float = 0.10

    def __post_init__(self):
        if not (0.0 < self.min_lr <= self.max_lr):
            raise ConfigError(f"need 0 < min_lr <= max_lr, got {self.min_lr}, {self.max_lr}")
        if not (0.0 <= self.warmup_fraction < 1.0):
            raise ConfigError(f"warmup fraction {self.warmup_fraction} outside [0, 1)")
        if self.total_steps <= 0:
            raise ConfigError("total_steps must be positive")

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_fraction * self.total_steps))


def lr_at(schedule: Schedule, step: int) -> float:
    """Linear 0 -> max_lr over warmup, then cosine max_lr -> min_lr."""
    if not (0 <= step <= schedule.total_steps):
        raise ContractError(
            f"step {step} outside [0, {schedule.total_steps}]")
    w = schedule.warmup_steps
    if step < w:
        return schedule.max_lr * step / w
    span = schedule.total_steps - w
    progress = (step - w) / span if span > 0 else 1.0
    return schedule.min_lr + 0.5 * (schedule.max_lr - schedule.min_lr) * (
        1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    step: int
    beta1: float
    beta2: float
    eps: float
    weight_decay: float
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]


def init_optimizer(params: dict[str, Tensor], beta1: float = 0.9,
                   beta2: float = 0.95, eps: float = 1e-8,
                   weight_decay: float = 0.05) -> OptimizerState:
    return OptimizerState(
        step=0, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay,
        m={k: np.zeros_like(t.data) for k, t in params.items()},
        v={k: np.zeros_like(t.data) for k, t in params.items()},
    )


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
               state: OptimizerState, lr: float) -> None:
    """One bias-corrected AdamW update with decoupled weight decay.

    The decay multiplies parameters by exactly (1 - lr * weight_decay),
    applied separately from the moment-driven update.
    """
    if lr < 0:
        raise ContractError(f"negative learning rate {lr}")
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    decay = 1.0 - lr * state.weight_decay
    for name, p in params.items():
        g = grads[name].astype(p.data.dtype, copy=False)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = p.data * p.data.dtype.type(decay) - p.data.dtype.type(lr) * update


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all grads so the global L2 norm is at most max_norm.

    Returns the pre-clip norm; scaling happens in place.
    """
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for g in grads.values():
            g *= g.dtype.type(scale)
    return norm


@dataclass
class TrainRunConfig:
    objective: str = "ntp"
    mask_ratio: float | None = None      # None -> objective default
    strategy: str = "random"
    loss_scope: str = "union"
    batch_size: int = 4
    seq_len: int = 128
    steps: int = 100
    seed: int = 0
    max_lr: float = 4e-4
    min_lr: float = 4e-5
    warmup_fraction: float = 0.10
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.05
    grad_clip: float | None = 1.0
    checkpoint_interval: int = 0         # 0 -> final checkpoint only
    answer_gate: int = 50

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective {self.objective!r} not in {OBJECTIVES}")
        if self.mask_ratio is None:
            self.mask_ratio = DEFAULT_MASK_RATIO[self.objective]
        if self.objective == "ntp" and self.mask_ratio != 0.0:
            raise ConfigError("a mask ratio is meaningless for the ntp objective")
        if self.batch_size <= 0 or self.steps <= 0 or self.seq_len < 2:
            raise ConfigError("batch_size/steps/seq_len out of range")

    @property
    def schedule(self) -> Schedule:
        return Schedule(self.max_lr, self.min_lr, self.steps, self.warmup_fraction)


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    opt_state: OptimizerState
    metrics: list[dict]
    checkpoint_path: Path | None
    metrics_path: Path | None


def _draw_order(n_items: int, seed: int, epoch: int) -> np.ndarray:
    rng = np.random.default_rng([seed & 0x7FFFFFFF, 0x0D0E, epoch])
    return rng.permutation(n_items)


def _build_batch(run: TrainRunConfig, model: ModelConfig,
                 corpus: Corpus, item: int, mask_seed: int) -> CorruptedBatch:
    if run.objective == "meap-finetune":
        prompt = corpus.sequences[2 * item][:run.seq_len]
        answer = corpus.sequences[2 * item + 1][:run.seq_len]
        return pack_finetune(prompt, answer, run.mask_ratio, mask_seed,
                             loss_scope=run.loss_scope,
                             max_context=model.max_context,
                             answer_gate=run.answer_gate)
    seq = corpus.sequences[item][:run.seq_len]
    if run.objective == "ntp":
        return ntp_batch(seq)
    return corrupt_pretrain(seq, run.mask_ratio, run.strategy, mask_seed)


def train(run: TrainRunConfig, model: ModelConfig, corpus: Corpus,
          params: dict[str, Tensor] | None = None,
          out_dir: Path | str | None = None,
          progress_every: int = 100) -> TrainResult:
    """Run the training loop; returns parameters, metrics, and file paths.

    When out_dir is given, writes metrics.jsonl (one header line plus one
    line per step) and checkpoint.bin there. A non-finite loss aborts the
    run, keeping the last checkpoint that was written.
    """
    if not corpus.sequences:
        raise ConfigError("empty corpus")
    if corpus.vocab_size > model.vocab_size:
        raise ConfigError(
            f"corpus vocab {corpus.vocab_size} exceeds model vocab {model.vocab_size}")
    n_items = len(corpus.sequences)
    if run.objective == "meap-finetune":
        if n_items % 2 != 0:
            raise ConfigError("finetune corpus must hold alternating prompt/answer pairs")
        n_items //= 2

    if params is None:
        params = init_parameters(model, run.seed)
    opt = init_optimizer(params, run.beta1, run.beta2, run.eps, run.weight_decay)
    schedule = run.schedule

    out = Path(out_dir) if out_dir is not None else None
    metrics_path = checkpoint_path = None
    metrics_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.jsonl"
        checkpoint_path = out / "checkpoint.bin"
        metrics_file = open(metrics_path, "w", encoding="utf-8")
        header = {"type": "header", "objective": run.objective,
                  "mask_ratio": run.mask_ratio, "strategy": run.strategy,
                  "steps": run.steps, "seed": run.seed}
        metrics_file.write(json.dumps(header, sort_keys=True) + "\n")

    metrics: list[dict] = []
    order = _draw_order(n_items, run.seed, 0)
    cursor = 0
    epoch = 0
    draw_counter = 0
    wrote_checkpoint = False

    try:
        for step in range(1, run.steps + 1):
            losses = []
            mask_count = 0
            eligible_count = 0
            for _ in range(run.batch_size):
                if cursor == len(order):
                    epoch += 1
                    order = _draw_order(n_items, run.seed, epoch)
                    cursor = 0
                item = int(order[cursor])
                cursor += 1
                mask_seed = run.seed ^ draw_counter
                draw_counter += 1
                batch = _build_batch(run, model, corpus, item, mask_seed)
                mask_count += int(batch.mask_positions.shape[0])
                eligible_count += batch.eligible_count
                logits, _ = forward(model, params, batch.input_ids)
                losses.append(ad.cross_entropy(logits, batch.target_ids,
                                               batch.loss_mask))
            total = losses[0]
            for piece in losses[1:]:
                total = ad.add(total, piece)
            loss = ad.mul(total, 1.0 / run.batch_size)
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise TrainingAbort(
                    f"non-finite loss {loss_val} at step {step}; "
                    f"last checkpoint {'kept' if wrote_checkpoint else 'absent'}")
            ad.backward(loss)
            grads = {name: p.grad for name, p in params.items()}
            if any(g is None for g in grads.values()):
                missing = [n for n, g in grads.items() if g is None]
                raise ContractError(f"no gradient for {missing[:3]}")
            if run.grad_clip is not None:
                grad_norm = clip_global_norm(grads, run.grad_clip)
            else:
                grad_norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2))
                                          for g in grads.values()))
            lr = lr_at(schedule, step)
            adamw_step(params, grads, opt, lr)

            row = {
                "step": step,
                "loss": loss_val,
                "lr": lr,
                "grad_norm": grad_norm,
                "masked_fraction": (mask_count / eligible_count) if eligible_count else 0.0,
            }
            metrics.append(row)
            if metrics_file is not None:
                metrics_file.write(json.dumps(row, sort_keys=True) + "\n")
            if progress_every and step % progress_every == 0:
                print(f"step {step}/{run.steps} loss {loss_val:.4f} lr {lr:.3e}")
            if (out is not None and run.checkpoint_interval
                    and step % run.checkpoint_interval == 0):
                save_checkpoint(checkpoint_path, model, params, opt, run)
                wrote_checkpoint = True
    finally:
        if metrics_file is not None:
            metrics_file.close()

    if out is not None:
        save_checkpoint(checkpoint_path, model, params, opt, run)
        wrote_checkpoint = True

    return TrainResult(params=params, opt_state=opt, metrics=metrics,
                       checkpoint_path=checkpoint_path if wrote_checkpoint else None,
                       metrics_path=metrics_path)


# ---------------------------------------------------------------------------
# checkpoint format: MEAPCKPT | u32 version | u32 json length | json |
# repeated (u16 name len, name, u8 ndim, u32 dims..., f32 data), little-endian


def _write_tensor(f: BinaryIO, name: str, arr: np.ndarray) -> None:
    blob = name.encode("utf-8")
    f.write(struct.pack("<H", len(blob)))
    f.write(blob)
    f.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        f.write(struct.pack("<I", d))
    f.write(arr.astype("<f4").tobytes())


def save_checkpoint(path, model: ModelConfig, params: dict[str, Tensor],
                    opt: OptimizerState | None,
                    run: TrainRunConfig | None) -> None:
    for name, p in params.items():
        if not np.isfinite(p.data).all():
            raise NumericError(f"refusing to checkpoint non-finite tensor {name}")
    meta = {
        "model": asdict(model),
        "run": asdict(run) if run is not None else None,
        "optimizer": None if opt is None else {
            "step": opt.step, "beta1": opt.beta1, "beta2": opt.beta2,
            "eps": opt.eps, "weight_decay": opt.weight_decay,
        },
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name, p in params.items():
            _write_tensor(f, name, p.data)
        if opt is not None:
            for name in params:
                _write_tensor(f, f"opt.m.{name}", opt.m[name])
                _write_tensor(f, f"opt.v.{name}", opt.v[name])


def _read_exact(f: BinaryIO, n: int, offset: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise LengthError(f"checkpoint truncated at offset {offset}: "
                          f"wanted {n} bytes, got {len(buf)}")
    return buf


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, Tensor],
                                   OptimizerState | None, dict | None]:
    """Read a checkpoint back: (model config, params, optimizer, run dict).

    Tensor shapes are validated against the config; a mismatch names the
    offending parameter.
    """
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        offset = 8
        (version,) = struct.unpack("<I", _read_exact(f, 4, offset))
        offset += 4
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", _read_exact(f, 4, offset))
        offset += 4
        meta = json.loads(_read_exact(f, blob_len, offset).decode("utf-8"))
        offset += blob_len

        tensors: dict[str, np.ndarray] = {}
        while True:
            head = f.read(2)
            if not head:
                break
            if len(head) != 2:
                raise LengthError(f"checkpoint truncated at offset {offset}")
            (name_len,) = struct.unpack("<H", head)
            offset += 2
            name = _read_exact(f, name_len, offset).decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack("<B", _read_exact(f, 1, offset))
            offset += 1
            dims = []
            for _ in range(ndim):
                (d,) = struct.unpack("<I", _read_exact(f, 4, offset))
                offset += 4
                dims.append(d)
            count = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(_read_exact(f, 4 * count, offset), dtype="<f4")
            offset += 4 * count
            tensors[name] = data.reshape(dims).astype(np.float32)

    model = ModelConfig(**meta["model"])
    expected = parameter_shapes(model)
    params: dict[str, Tensor] = {}
    for name, shape in expected.items():
        if name not in tensors:
            raise ConfigError(f"checkpoint is missing parameter {name}")
        if tensors[name].shape != shape:
            raise ConfigError(
                f"checkpoint parameter {name} has shape {tensors[name].shape}, "
                f"config demands {shape}")
        params[name] = ad.parameter(tensors[name])

    opt = None
    if meta.get("optimizer") is not None:
        o = meta["optimizer"]
        opt = OptimizerState(
            step=o["step"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"],
            weight_decay=o["weight_decay"],
            m={n: tensors[f"opt.m.{n}"] for n in expected},
            v={n: tensors[f"opt.v.{n}"] for n in expected},
        )
    return model, params, opt, meta.get("run")
