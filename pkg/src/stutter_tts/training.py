"""Minibatch assembly, the optimization loop and checkpointing.

Training is teacher-forced throughout. Each draw of the ratio sampler is
an independent Bernoulli choice between the fluent and stuttered pools
(the configured ratio constrains the expectation, not per-batch counts).
Utterances are bucketed by frame length into homogeneous padded batches;
padded frames are excluded from the loss through the batch mask.

Everything stochastic inside the loop draws from one RNG whose state goes
into the checkpoint, so resuming from an epoch checkpoint replays the
non-resumed run step for step.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import frontend as fe
from . import synthdata as sd
from .model import ModelConfig, StutterTTS

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"STTS"
CHECKPOINT_VERSION = 1

METRICS_HEADER = "step,loss_total,loss_pre,loss_post,loss_stop,lr"


class TrainingError(RuntimeError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass
class TrainConfig:
    ratio_fluent: int = 90
    ratio_stuttered: int = 10
    bucket_boundaries: list[int] = field(default_factory=lambda: [240, 480, 960])
    bucket_batch_sizes: list[int] = field(default_factory=lambda: [16, 8, 4])
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    lr_decay: float = 1.0  # per-epoch multiplier
    steps_per_epoch: int = 200
    epochs: int = 2
    lambda_stop: float = 1.0
    seed: int = 0
    precision: str = "f32"

    def __post_init__(self):
        if self.ratio_fluent < 0 or self.ratio_stuttered < 0 \
                or self.ratio_fluent + self.ratio_stuttered <= 0:
            raise ConfigurationError("ratio parts must be non-negative and "
                                     "not both zero")
        if len(self.bucket_boundaries) != len(self.bucket_batch_sizes):
            raise ConfigurationError("one batch size per bucket required")
        if list(self.bucket_boundaries) != sorted(self.bucket_boundaries):
            raise ConfigurationError("bucket boundaries must be ascending")
        if any(b < 1 for b in self.bucket_batch_sizes):
            raise ConfigurationError("batch sizes must be positive")


def ratio_sampler(fluent_pool, stuttered_pool, ratio, rng):
    """Infinite utterance stream honoring the fluent:stuttered ratio.

    Each draw independently picks the stuttered pool with probability
    s/(f+s); within a pool, selection is uniform via reshuffled epochs.
    """
    f, s = ratio
    p_stutter = s / (f + s)
    if p_stutter > 0 and not stuttered_pool:
        raise ConfigurationError("ratio requires stuttered data but the "
                                 "stuttered pool is empty")
    if p_stutter < 1 and not fluent_pool:
        raise ConfigurationError("ratio requires fluent data but the "
                                 "fluent pool is empty")
    return _ratio_stream(fluent_pool, stuttered_pool, p_stutter, rng)


def _ratio_stream(fluent_pool, stuttered_pool, p_stutter, rng):
    def pool_stream(pool):
        order = np.arange(len(pool))
        pos = len(pool)
        while True:
            if pos >= len(pool):
                rng.shuffle(order)
                pos = 0
            yield pool[order[pos]]
            pos += 1

    fluent = pool_stream(fluent_pool) if fluent_pool else None
    stuttered = pool_stream(stuttered_pool) if stuttered_pool else None
    while True:
        if rng.random() < p_stutter:
            yield next(stuttered)
        else:
            yield next(fluent)


@dataclass
class Batch:
    items: list
    padded: np.ndarray  # B x Tmax x D
    mask: np.ndarray    # B x Tmax, True on real frames


def _make_batch(items):
    t_max = max(it.targets.shape[0] for it in items)
    d = items[0].targets.shape[1]
    padded = np.zeros((len(items), t_max, d), dtype=np.float32)
    mask = np.zeros((len(items), t_max), dtype=bool)
    for i, it in enumerate(items):
        t = it.targets.shape[0]
        padded[i, :t] = it.targets
        mask[i, :t] = True
    return Batch(items, padded, mask)


def bucket_batches(stream, boundaries, batch_sizes):
    """Group a stream of utterances into homogeneous per-bucket batches.

    Utterances longer than the last boundary are skipped with a warning.
    """
    buffers = [[] for _ in boundaries]
    for item in stream:
        t = item.targets.shape[0]
        bucket = None
        for bi, bound in enumerate(boundaries):
            if t <= bound:
                bucket = bi
                break
        if bucket is None:
            log.warning("skipping over-length utterance %s (%d frames)",
                        item.utt_id, t)
            continue
        buffers[bucket].append(item)
        if len(buffers[bucket]) >= batch_sizes[bucket]:
            yield _make_batch(buffers[bucket])
            buffers[bucket] = []


def batch_loss_parts(model, batch, rng, lambda_stop, ref_pools=None):
    """Mean teacher-forced loss over a padded batch, via the mask.

    Returns (per-utterance loss tensors, mean parts dict). Backward over
    the scaled per-utterance losses averages gradients across the batch.
    ref_pools maps speaker id -> list of feature arrays; when given, each
    utterance's reference frames are drawn from a random utterance of the
    same speaker, so the reference channel carries speaker identity rather
    than a preview of the target (matching inference, where the reference
    is a different recording). Without pools the target doubles as its own
    reference.
    """
    totals = []
    parts_acc = {"pre": 0.0, "post": 0.0, "stop": 0.0}
    for i, item in enumerate(batch.items):
        targets = batch.padded[i][batch.mask[i]]
        pool = ref_pools.get(item.speaker_id) if ref_pools else None
        ref = pool[int(rng.integers(len(pool)))] if pool else targets
        total, parts = model.forward_teacher_forced(
            item.ids, targets, ref, rng, mode="train",
            lambda_stop=lambda_stop)
        totals.append(total)
        for k in parts_acc:
            parts_acc[k] += parts[k] / len(batch.items)
    return totals, parts_acc


@dataclass
class UtteranceData:
    utt_id: str
    ids: list[int]
    targets: np.ndarray
    stuttered: bool
    speaker_id: str = ""


def load_training_data(corpus_dir):
    """Read manifest + features into memory; returns (items, inventory,
    lexicon)."""
    corpus_dir = Path(corpus_dir)
    lexicon = fe.Lexicon.load(corpus_dir / "lexicon.tsv")
    inventory = fe.PhonemeInventory.load(corpus_dir / "inventory.txt")
    items = []
    for entry in sd.read_manifest(corpus_dir / "manifest.jsonl"):
        text = fe.parse_transcript(entry.transcript)
        ids = fe.g2p(text, lexicon, inventory)
        feats = sd.read_features(corpus_dir / entry.feature_path)
        items.append(UtteranceData(entry.utt_id, ids, feats.frames,
                                   bool(entry.events), entry.speaker_id))
    return items, inventory, lexicon


# ---------------------------------------------------------------------------
# checkpoint serialization

_DTYPE_CODES = {0: np.float32, 1: np.float64}
_CODE_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def _write_tensor(fh, name, array):
    nb = name.encode()
    fh.write(struct.pack("<H", len(nb)))
    fh.write(nb)
    # note: ascontiguousarray would promote 0-d arrays to rank 1
    arr = np.asarray(array)
    if arr.ndim and not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    fh.write(struct.pack("<BB", _CODE_FOR[arr.dtype], arr.ndim))
    for dim in arr.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def _read_tensor(fh):
    raw = fh.read(2)
    if len(raw) != 2:
        raise sd.FormatError("truncated checkpoint (tensor name length)")
    (nlen,) = struct.unpack("<H", raw)
    name = fh.read(nlen).decode()
    code, rank = struct.unpack("<BB", fh.read(2))
    dims = struct.unpack("<" + "I" * rank, fh.read(4 * rank))
    dtype = np.dtype(_DTYPE_CODES[code]).newbyteorder("<")
    count = int(np.prod(dims)) if rank else 1
    payload = fh.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise sd.FormatError(f"truncated checkpoint payload for {name!r}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return name, arr.astype(_DTYPE_CODES[code])


def save_checkpoint(path, model: StutterTTS, optimizer: ag.Optimizer,
                    rng: np.random.Generator, step: int,
                    train_cfg: TrainConfig | None = None):
    meta = {
        "model_config": dataclasses.asdict(model.cfg),
        "train_config": dataclasses.asdict(train_cfg) if train_cfg else None,
        "optimizer": {"kind": optimizer.kind,
                      "learning_rate": optimizer.learning_rate,
                      "step_count": optimizer.step_count},
        "rng_state": rng.bit_generator.state,
        "step": step,
    }
    tensors = {f"param.{k}": v.data for k, v in model.params.items()}
    tensors.update(optimizer.state_tensors())
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            _write_tensor(fh, name, tensors[name])


def load_checkpoint(path):
    """Returns (model, optimizer, rng, step, train_cfg-or-None)."""
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise sd.FormatError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise sd.FormatError(f"{path}: unsupported version {version}")
        (blob_len,) = struct.unpack("<I", fh.read(4))
        blob = fh.read(blob_len)
        if len(blob) != blob_len:
            raise sd.FormatError(f"{path}: truncated metadata")
        meta = json.loads(blob)
        (count,) = struct.unpack("<I", fh.read(4))
        tensors = dict(_read_tensor(fh) for _ in range(count))

    model = StutterTTS(ModelConfig(**meta["model_config"]), seed=0)
    for name, p in model.params.items():
        arr = tensors[f"param.{name}"]
        if arr.shape != p.data.shape:
            raise sd.FormatError(f"{path}: shape mismatch for {name}")
        p.data = arr.astype(model.cfg.dtype)
    opt_meta = meta["optimizer"]
    optimizer = ag.Optimizer(opt_meta["kind"], opt_meta["learning_rate"])
    optimizer.step_count = opt_meta["step_count"]
    for name, arr in tensors.items():
        if name.startswith("adam.m."):
            optimizer.m[name[len("adam.m."):]] = arr.copy()
        elif name.startswith("adam.v."):
            optimizer.v[name[len("adam.v."):]] = arr.copy()
    rng = np.random.default_rng(0)
    state = meta["rng_state"]
    # json round-trips the 128-bit PCG64 integers losslessly (arbitrary
    # precision ints), but keys must be restored as-is
    rng.bit_generator.state = state
    train_cfg = TrainConfig(**meta["train_config"]) \
        if meta.get("train_config") else None
    return model, optimizer, rng, meta["step"], train_cfg


# ---------------------------------------------------------------------------
# the training loop

def train(train_cfg: TrainConfig, model_cfg: ModelConfig | None, corpus_dir,
          out_dir, resume_from=None):
    """Train on a rendered corpus; writes metrics.csv and per-epoch
    checkpoints under out_dir. Returns (model, metrics rows)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    items, inventory, _ = load_training_data(corpus_dir)
    fluent_pool = [it for it in items if not it.stuttered]
    stuttered_pool = [it for it in items if it.stuttered]
    ref_pools: dict[str, list[np.ndarray]] = {}
    for it in items:
        ref_pools.setdefault(it.speaker_id, []).append(it.targets)

    if resume_from is not None:
        model, optimizer, rng, start_step, _ = load_checkpoint(resume_from)
    else:
        if model_cfg is None:
            model_cfg = ModelConfig(n_phonemes=len(inventory),
                                    precision=train_cfg.precision)
        if model_cfg.n_phonemes < len(inventory):
            raise ConfigurationError("model vocabulary smaller than the "
                                     "corpus phoneme inventory")
        model = StutterTTS(model_cfg, seed=train_cfg.seed)
        optimizer = ag.Optimizer(train_cfg.optimizer, train_cfg.learning_rate)
        rng = np.random.default_rng([train_cfg.seed, 11])
        start_step = 0

    ratio = (train_cfg.ratio_fluent, train_cfg.ratio_stuttered)
    rows = []
    metrics_path = out_dir / "metrics.csv"
    mode = "a" if resume_from is not None and metrics_path.exists() else "w"
    with open(metrics_path, mode, encoding="utf-8") as metrics:
        if mode == "w":
            metrics.write(METRICS_HEADER + "\n")
        step = start_step
        start_epoch = start_step // train_cfg.steps_per_epoch
        for epoch in range(start_epoch, train_cfg.epochs):
            lr = train_cfg.learning_rate * train_cfg.lr_decay ** epoch
            optimizer.learning_rate = lr
            # fresh sampler/bucket state each epoch keeps resume exact
            stream = ratio_sampler(fluent_pool, stuttered_pool, ratio, rng)
            batches = bucket_batches(stream, train_cfg.bucket_boundaries,
                                     train_cfg.bucket_batch_sizes)
            for _ in range(train_cfg.steps_per_epoch):
                batch = next(batches)
                ag.zero_grads(model.params)
                totals, parts = batch_loss_parts(model, batch, rng,
                                                 train_cfg.lambda_stop,
                                                 ref_pools)
                mean_total = sum(t.item() for t in totals) / len(totals)
                if not np.isfinite(mean_total):
                    raise TrainingError(
                        f"non-finite loss at step {step}; batch utterances: "
                        f"{[it.utt_id for it in batch.items]}")
                for t in totals:
                    ag.scale(t, 1.0 / len(totals)).backward()
                optimizer.step(model.params)
                step += 1
                row = (f"{step},{mean_total:.8g},{parts['pre']:.8g},"
                       f"{parts['post']:.8g},{parts['stop']:.8g},{lr:.8g}")
                metrics.write(row + "\n")
                rows.append(row)
            save_checkpoint(out_dir / f"checkpoint_epoch{epoch + 1}.ckpt",
                            model, optimizer, rng, step, train_cfg)
    return model, rows
