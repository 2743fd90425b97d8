"""Synthetic paired modalities, the M3DS dataset file, and batching.

Every continuous modality is a fixed linear view of one shared Gaussian
latent plus isotropic noise, unit-normalized; a one-hot modality carries the
class given by a fixed linear readout of the same latent. This stands in for
frozen pretrained encoders whose outputs share semantic content.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError, PreconditionError, TruncatedError
from .numeric import NArray, as_narray, matmul

CONTINUOUS = "continuous"
ONE_HOT = "one_hot"
_KIND_CODES = {CONTINUOUS: 0, ONE_HOT: 1}

M3DS_MAGIC = b"M3DS"
M3DS_VERSION = 1


@dataclass(frozen=True)
class ModalitySpec:
    id: int
    name: str
    dim: int
    kind: str = CONTINUOUS


@dataclass(frozen=True)
class TaskSpec:
    """A directional task: concatenated input modalities -> output modalities."""

    id: int
    inputs: tuple
    outputs: tuple

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "outputs", tuple(self.outputs))
        if not self.inputs or not self.outputs:
            raise PreconditionError(f"task {self.id}: input and output sets must be non-empty")

    @property
    def input_sig(self):
        return signature(self.inputs)

    @property
    def output_sig(self):
        return signature(self.outputs)


def signature(modality_ids):
    """Canonical key for a modality set: sorted ids joined by '-'."""
    return "-".join(str(m) for m in sorted(modality_ids))


class ModalityRegistry:
    """Declared modalities, indexed by their 1-based contiguous ids."""

    def __init__(self, modalities):
        self.modalities = tuple(sorted(modalities, key=lambda m: m.id))
        ids = [m.id for m in self.modalities]
        if ids != list(range(1, len(ids) + 1)):
            raise PreconditionError(f"modality ids must be contiguous from 1, got {ids}")
        for m in self.modalities:
            if m.dim < 1:
                raise PreconditionError(f"modality {m.id}: dim must be >= 1")
            if m.kind not in _KIND_CODES:
                raise PreconditionError(f"modality {m.id}: unknown kind {m.kind!r}")
        self._by_id = {m.id: m for m in self.modalities}

    def __len__(self):
        return len(self.modalities)

    def __iter__(self):
        return iter(self.modalities)

    def __getitem__(self, mid):
        try:
            return self._by_id[mid]
        except KeyError:
            raise PreconditionError(f"unknown modality id {mid}") from None

    def set_dim(self, ids):
        return sum(self[m].dim for m in ids)

    def check_task(self, task: TaskSpec):
        for m in (*task.inputs, *task.outputs):
            self[m]
        return task


@dataclass
class SynthConfig:
    latent_dim: int = 16
    noise_std: float | list = 0.05
    num_samples: int = 5120
    train_end: int = 4096
    val_end: int = 4608
    num_classes: int | None = None
    seed: int = 0

    def noise_for(self, index):
        if isinstance(self.noise_std, (list, tuple)):
            return float(self.noise_std[index])
        return float(self.noise_std)


@dataclass
class Dataset:
    modalities: tuple
    arrays: dict  # modality id -> (num_samples, dim) float64
    train_end: int
    val_end: int

    @property
    def num_samples(self):
        return next(iter(self.arrays.values())).shape[0]

    def split_range(self, split):
        n = self.num_samples
        bounds = {"train": (0, self.train_end), "val": (self.train_end, self.val_end),
                  "test": (self.val_end, n), "all": (0, n)}
        try:
            return bounds[split]
        except KeyError:
            raise PreconditionError(f"unknown split {split!r}") from None

    def split(self, split, modality_id):
        lo, hi = self.split_range(split)
        return self.arrays[modality_id][lo:hi]

    def split_size(self, split):
        lo, hi = self.split_range(split)
        return hi - lo

    def gather(self, modality_ids, rows):
        """Concatenate modality rows in canonical (sorted id) order."""
        return np.concatenate([self.arrays[m][rows] for m in sorted(modality_ids)], axis=1)

    def labels(self, modality_id, split="all"):
        return np.argmax(self.split(split, modality_id), axis=1)

    def quantized(self):
        """Copy with every value rounded through float32, as stored on disk."""
        arrays = {k: v.astype(np.float32).astype(np.float64) for k, v in self.arrays.items()}
        return Dataset(self.modalities, arrays, self.train_end, self.val_end)

    def equals(self, other):
        return (self.modalities == other.modalities and self.train_end == other.train_end
                and self.val_end == other.val_end
                and all(np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays))


def mixing_matrix(rng, rows, cols):
    a = rng.standard_normal((rows, cols))
    return a / np.linalg.norm(a, axis=1, keepdims=True)


@dataclass
class GroundTruth:
    latent: np.ndarray
    mixing: dict = field(default_factory=dict)
    readout: np.ndarray | None = None


def generate(cfg: SynthConfig, registry: ModalityRegistry, return_truth=False):
    """Draw a paired dataset from the shared-latent model."""
    if cfg.latent_dim < 1 or cfg.num_samples < 1:
        raise PreconditionError("latent_dim and num_samples must be positive")
    if not 0 <= cfg.train_end <= cfg.val_end <= cfg.num_samples:
        raise PreconditionError("need 0 <= train_end <= val_end <= num_samples")
    rng = np.random.default_rng(cfg.seed)
    struct_rng = np.random.default_rng([cfg.seed, 7919])
    z = rng.standard_normal((cfg.num_samples, cfg.latent_dim))
    truth = GroundTruth(latent=z)
    arrays = {}
    for idx, m in enumerate(registry):
        if m.kind == ONE_HOT:
            if cfg.num_classes is None or cfg.num_classes != m.dim:
                raise PreconditionError(
                    f"modality {m.id}: one_hot dim {m.dim} needs num_classes == dim")
            if truth.readout is None:
                truth.readout = mixing_matrix(struct_rng, cfg.num_classes, cfg.latent_dim)
            classes = np.argmax(z @ truth.readout.T, axis=1)
            arrays[m.id] = np.eye(m.dim)[classes]
            continue
        a = mixing_matrix(struct_rng, m.dim, cfg.latent_dim)
        e = z @ a.T
        std = cfg.noise_for(idx)
        if std < 0:
            raise PreconditionError(f"modality {m.id}: noise_std must be >= 0")
        if std > 0:
            e = e + std * rng.standard_normal(e.shape)
        e = e / np.linalg.norm(e, axis=1, keepdims=True)
        arrays[m.id] = e
        truth.mixing[m.id] = a
    ds = Dataset(tuple(registry.modalities), arrays, cfg.train_end, cfg.val_end)
    return (ds, truth) if return_truth else ds


def adapter_apply(e, adapter=None):
    """Apply an optional trainable linear adapter to encoder outputs.

    ``adapter`` is a square ``(d, d)`` NArray applied on the right; ``None``
    is the frozen encoder and returns ``e`` untouched.
    """
    if adapter is None:
        return e
    e = as_narray(e)
    if adapter.ndim != 2 or adapter.shape[0] != adapter.shape[1] or adapter.shape[0] != e.shape[-1]:
        raise DimensionError(f"adapter {adapter.shape} does not fit embeddings {e.shape}")
    return matmul(e, adapter)


def identity_adapter(dim, name=None):
    return NArray(np.eye(dim), requires_grad=True, name=name)


# ---------------------------------------------------------------- M3DS format


def save_dataset(ds: Dataset, path) -> None:
    parts = [M3DS_MAGIC, struct.pack("<II", M3DS_VERSION, len(ds.modalities))]
    for m in ds.modalities:
        name = m.name.encode("utf-8")
        parts.append(struct.pack("<H", len(name)) + name)
        parts.append(struct.pack("<IB", m.dim, _KIND_CODES[m.kind]))
    parts.append(struct.pack("<QQQ", ds.num_samples, ds.train_end, ds.val_end))
    for m in ds.modalities:
        parts.append(np.ascontiguousarray(ds.arrays[m.id], dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf, what):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"{self.what}: file ends at byte {len(self.buf)}, "
                                 f"needed {self.pos + n}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_dataset(path) -> Dataset:
    buf = Path(path).read_bytes()
    r = _Reader(buf, "M3DS")
    if len(buf) < 4 or buf[:4] != M3DS_MAGIC:
        raise FormatError(f"{path}: not an M3DS file (bad magic)")
    r.take(4)
    version, count = r.unpack("<II")
    if version != M3DS_VERSION:
        raise FormatError(f"{path}: unsupported M3DS version {version}")
    kinds = {v: k for k, v in _KIND_CODES.items()}
    mods = []
    for i in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        dim, kind = r.unpack("<IB")
        if kind not in kinds:
            raise FormatError(f"{path}: unknown modality kind code {kind}")
        mods.append(ModalitySpec(i + 1, name, dim, kinds[kind]))
    n, train_end, val_end = r.unpack("<QQQ")
    arrays = {}
    for m in mods:
        raw = r.take(n * m.dim * 4)
        arrays[m.id] = np.frombuffer(raw, dtype="<f4").reshape(n, m.dim).astype(np.float64)
    return Dataset(tuple(mods), arrays, train_end, val_end)


# ---------------------------------------------------------------- batching


@dataclass
class Batch:
    rows: np.ndarray
    arrays: dict

    def gather(self, modality_ids):
        return np.concatenate([self.arrays[m] for m in sorted(modality_ids)], axis=1)


def epoch_order(n, seed, epoch):
    return np.random.default_rng([seed, epoch, 104729]).permutation(n)


def batch_iter(ds: Dataset, split, batch_size, seed, epoch, contrastive=True):
    """Yield the batches of one seeded epoch over ``split``."""
    if contrastive and batch_size < 2:
        raise PreconditionError("contrastive loss needs batch_size >= 2 for in-batch negatives")
    size = ds.split_size(split)
    if batch_size > size or batch_size < 1:
        raise PreconditionError(f"batch_size {batch_size} invalid for split of {size}")
    lo, _ = ds.split_range(split)
    order = epoch_order(size, seed, epoch) + lo
    stop = size - size % batch_size if contrastive else size
    for start in range(0, stop, batch_size):
        rows = order[start:start + batch_size]
        yield Batch(rows, {m.id: ds.arrays[m.id][rows] for m in ds.modalities})


class BatchStream:
    """Endless epoch-by-epoch batch stream with an integer cursor for resuming."""

    def __init__(self, ds, split, batch_size, seed, cursor=0):
        if batch_size < 2:
            raise PreconditionError("contrastive loss needs batch_size >= 2 for in-batch negatives")
        self.ds = ds
        self.split = split
        self.batch_size = batch_size
        self.seed = seed
        self.cursor = cursor
        size = ds.split_size(split)
        if batch_size > size:
            raise PreconditionError(f"batch_size {batch_size} exceeds split size {size}")
        self.per_epoch = size // batch_size
        self._epoch = None
        self._order = None

    def next(self):
        epoch, k = divmod(self.cursor, self.per_epoch)
        if epoch != self._epoch:
            lo, _ = self.ds.split_range(self.split)
            self._order = epoch_order(self.ds.split_size(self.split), self.seed, epoch) + lo
            self._epoch = epoch
        rows = self._order[k * self.batch_size:(k + 1) * self.batch_size]
        self.cursor += 1
        return Batch(rows, {m.id: self.ds.arrays[m.id][rows] for m in self.ds.modalities})
