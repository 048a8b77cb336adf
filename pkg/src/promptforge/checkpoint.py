"""Binary checkpoints and task files.

Layout (all integers little-endian)::

    magic         4 bytes, b"PMPT" (checkpoint) or b"PMTK" (task)
    version       u32
    config        u32 byte length + UTF-8 "key = value" lines
    metadata      u32 byte length + UTF-8 "key = value" lines
    count         u32 number of records
    record*       u32 name length, name (UTF-8), u8 flag, u32 rank,
                  rank x u64 extents, prod(extents) x f64 values (row-major)

For checkpoints the flag is 1 for trainable slots and 0 for frozen ones.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ModelConfig, TrainConfig, format_config, parse_config
from .data import Split, SyntheticTask
from .encoders import ClassTokens, backbone_spec
from .engine import Model
from .params import ParamStore

CHECKPOINT_MAGIC = b"PMPT"
TASK_MAGIC = b"PMTK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class VersionError(CheckpointError):
    """Wrong magic bytes or an unsupported format version."""


@dataclass
class Checkpoint:
    config: ModelConfig
    slots: dict[str, tuple[bool, np.ndarray]]
    train: TrainConfig | None = None
    metadata: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: Model, train: TrainConfig | None = None, **metadata) -> "Checkpoint":
        slots = {k: (p.trainable, p.value.copy()) for k, p in model.params.items()}
        meta = {"seed": str(model.params.seed)}
        meta.update({k: str(v) for k, v in metadata.items()})
        return cls(model.cfg, slots, train, meta)

    def to_model(self) -> Model:
        store = ParamStore(int(self.metadata.get("seed", self.config.seed)))
        for name in sorted(self.slots):
            trainable, value = self.slots[name]
            store.add(name, value, trainable)
        return Model.from_params(self.config, store)


# --- record codec --------------------------------------------------------

def _write_text(buf, text: str) -> None:
    raw = text.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def _write_record(buf, name: str, flag: int, value: np.ndarray) -> None:
    raw = name.encode("utf-8")
    value = np.ascontiguousarray(value, dtype="<f8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<BI", flag, value.ndim))
    buf.write(struct.pack(f"<{value.ndim}Q", *value.shape))
    buf.write(value.tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("file is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def text(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")

    def record(self) -> tuple[str, int, np.ndarray]:
        (n,) = self.unpack("<I")
        name = self.take(n).decode("utf-8")
        flag, rank = self.unpack("<BI")
        shape = self.unpack(f"<{rank}Q") if rank else ()
        count = int(np.prod(shape)) if shape else 1
        value = np.frombuffer(self.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
        return name, flag, value


def _encode(magic: bytes, config_text: str, metadata: dict[str, str],
            records: list[tuple[str, int, np.ndarray]]) -> bytes:
    buf = io.BytesIO()
    buf.write(magic)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    _write_text(buf, config_text)
    _write_text(buf, "".join(f"{k} = {v}\n" for k, v in sorted(metadata.items())))
    buf.write(struct.pack("<I", len(records)))
    for name, flag, value in records:
        _write_record(buf, name, flag, value)
    return buf.getvalue()


def _decode(data: bytes, magic: bytes):
    r = _Reader(data)
    if len(data) < 8 or r.take(4) != magic:
        raise VersionError(f"bad magic bytes; expected {magic!r}")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported format version {version} (expected {FORMAT_VERSION})")
    config_text = r.text()
    metadata = {}
    for line in r.text().splitlines():
        k, _, v = line.partition("=")
        metadata[k.strip()] = v.strip()
    (count,) = r.unpack("<I")
    records = [r.record() for _ in range(count)]
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after the last record")
    return config_text, metadata, records


# --- checkpoints ---------------------------------------------------------

def expected_shapes(cfg: ModelConfig) -> dict[str, tuple[tuple[int, ...], bool]]:
    """Slot name -> (shape, trainable) for a model built from ``cfg``."""
    shapes = {name: (shape, False) for name, shape, _ in backbone_spec(cfg)}
    h = cfg.gen_hidden
    shapes["gen.vision.W1"] = ((cfg.d, h), True)
    shapes["gen.vision.W2"] = ((h, cfg.d_v), True)
    for j in range(cfg.J):
        shapes[f"gen.vision.b1.{j:02d}"] = ((h,), True)
        shapes[f"gen.vision.b2.{j:02d}"] = ((cfg.d_v,), True)
        shapes[f"prompt.vision.{j:02d}"] = ((cfg.a, cfg.d_v), True)
    shapes["gen.text.W1"] = ((cfg.d, h), True)
    shapes["gen.text.b1"] = ((h,), True)
    shapes["gen.text.W2"] = ((h, cfg.d_l), True)
    shapes["gen.text.b2"] = ((cfg.d_l,), True)
    shapes["prompt.text"] = ((cfg.b, cfg.d_l), True)
    return shapes


def _check_slots(slots: dict[str, tuple[bool, np.ndarray]], cfg: ModelConfig) -> None:
    expected = expected_shapes(cfg)
    if set(slots) != set(expected):
        missing, extra = sorted(set(expected) - set(slots)), sorted(set(slots) - set(expected))
        raise CheckpointError(f"slot mismatch; missing {missing[:3]}, unexpected {extra[:3]}")
    for name, (trainable, value) in slots.items():
        shape, should_train = expected[name]
        if value.shape != shape:
            raise CheckpointError(f"{name}: stored shape {value.shape}, config expects {shape}")
        if trainable != should_train:
            raise CheckpointError(f"{name}: trainable flag {trainable}, expected {should_train}")


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    records = [(name, int(tr), value) for name, (tr, value) in sorted(ckpt.slots.items())]
    Path(path).write_bytes(_encode(CHECKPOINT_MAGIC, format_config(ckpt.config, ckpt.train),
                                   ckpt.metadata, records))


def load_checkpoint(path: str | Path, cfg: ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint; with ``cfg`` the slot shapes must also match that config."""
    config_text, metadata, records = _decode(Path(path).read_bytes(), CHECKPOINT_MAGIC)
    stored_cfg, train = parse_config(config_text)
    slots = {}
    for name, flag, value in records:
        if flag not in (0, 1):
            raise CheckpointError(f"{name}: bad flag byte {flag}")
        slots[name] = (bool(flag), value)
    _check_slots(slots, stored_cfg)
    if cfg is not None:
        _check_slots(slots, cfg)
    return Checkpoint(stored_cfg, slots, train, metadata)


# --- task files ----------------------------------------------------------

_TASK_ARRAYS = ("classes.ids", "classes.lengths", "prototypes", "base_ids", "novel_ids",
                "train.images", "train.labels", "test_base.images", "test_base.labels",
                "test_novel.images", "test_novel.labels")


def save_task(task: SyntheticTask, cfg: ModelConfig, path: str | Path) -> None:
    arrays = {
        "classes.ids": task.classes.ids, "classes.lengths": task.classes.lengths,
        "prototypes": task.prototypes, "base_ids": task.base_ids, "novel_ids": task.novel_ids,
        "train.images": task.train.images, "train.labels": task.train.labels,
        "test_base.images": task.test_base.images, "test_base.labels": task.test_base.labels,
        "test_novel.images": task.test_novel.images, "test_novel.labels": task.test_novel.labels,
    }
    meta = {"seed": str(task.seed), "noise": repr(task.noise), "K": str(task.K)}
    records = [(k, 0, np.asarray(arrays[k], dtype=np.float64)) for k in _TASK_ARRAYS]
    Path(path).write_bytes(_encode(TASK_MAGIC, format_config(cfg), meta, records))


def load_task(path: str | Path) -> tuple[SyntheticTask, ModelConfig]:
    config_text, meta, records = _decode(Path(path).read_bytes(), TASK_MAGIC)
    cfg, _ = parse_config(config_text)
    arrays = {name: value for name, _, value in records}
    if set(arrays) != set(_TASK_ARRAYS):
        raise CheckpointError("task file is missing arrays")
    ints = lambda k: arrays[k].astype(np.int64)
    task = SyntheticTask(
        classes=ClassTokens(ints("classes.ids"), ints("classes.lengths")),
        prototypes=arrays["prototypes"],
        base_ids=ints("base_ids"),
        novel_ids=ints("novel_ids"),
        train=Split(arrays["train.images"], ints("train.labels")),
        test_base=Split(arrays["test_base.images"], ints("test_base.labels")),
        test_novel=Split(arrays["test_novel.images"], ints("test_novel.labels")),
        seed=int(meta["seed"]),
        noise=float(meta["noise"]),
    )
    return task, cfg
