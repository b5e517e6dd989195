"""Synthetic latent generation, binary formats, captions, and metric sinks.

Formats (all little-endian):

  latent dataset  magic "MSNL", u32 version=1, u32 count, u32 T, u32 D,
                  count*T*D float32 values, then count u16 class labels.

  checkpoint      magic "MSNC", u32 version=1, then one record per tensor:
                  u16 name length, UTF-8 name, u8 ndim, u32 per dim,
                  float32 payload; a trailing u32 CRC-32 covers every byte
                  between the version field and the CRC, so truncation at
                  any offset is detected. Records end when exactly four
                  bytes remain.

Synthetic clips are damped sinusoids with per-class frequency, amplitude,
damping, and phase profiles, which keeps classes linearly separable. One
designated class is bimodal: it emits its pattern with a random sign, so
the same underlying content maps to two opposite targets.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import Module
from .tensor import Tensor

LATENT_MAGIC = b"MSNL"
CHECKPOINT_MAGIC = b"MSNC"
LATENT_VERSION = 1
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    """Checkpoint file unreadable, corrupt, or inconsistent with the model."""


class DatasetFormatError(RuntimeError):
    """Latent dataset file unreadable or malformed."""


# ----------------------------------------------------------------------
# synthetic latents


@dataclass
class SyntheticLatentSpec:
    """Per-class damped-sinusoid parameters, derived deterministically from seed."""

    n_classes: int
    frames: int
    dim: int
    noise_std: float
    seed: int
    bimodal_class: int | None
    frequencies: np.ndarray = field(repr=False)
    amplitudes: np.ndarray = field(repr=False)
    damping: np.ndarray = field(repr=False)
    phases: np.ndarray = field(repr=False)

    @classmethod
    def create(cls, n_classes: int = 4, frames: int = 32, dim: int = 16,
               noise_std: float = 0.05, seed: int = 0,
               bimodal_class: int | None = -1) -> "SyntheticLatentSpec":
        """bimodal_class -1 designates the last class; None disables bimodality."""
        if n_classes < 2:
            raise ValueError(f"need at least 2 classes, got {n_classes}")
        if noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if bimodal_class is not None:
            bimodal_class = bimodal_class % n_classes
        rng = np.random.default_rng(seed)
        return cls(
            n_classes=n_classes,
            frames=frames,
            dim=dim,
            noise_std=noise_std,
            seed=seed,
            bimodal_class=bimodal_class,
            frequencies=rng.uniform(1.0, 8.0, size=(n_classes, dim)),
            amplitudes=rng.uniform(0.5, 1.5, size=(n_classes, dim)),
            damping=rng.uniform(0.5, 3.0, size=(n_classes, dim)),
            phases=rng.uniform(0.0, 2.0 * np.pi, size=(n_classes, dim)),
        )


def class_pattern(spec: SyntheticLatentSpec, label: int) -> np.ndarray:
    """Noise-free (frames, dim) pattern for one class."""
    if not 0 <= label < spec.n_classes:
        raise ValueError(f"class {label} outside [0, {spec.n_classes})")
    t = (np.arange(spec.frames) / spec.frames)[:, None]
    wave = np.sin(2.0 * np.pi * spec.frequencies[label] * t + spec.phases[label])
    envelope = np.exp(-spec.damping[label] * t)
    return (spec.amplitudes[label] * wave * envelope).astype(np.float32)


@dataclass
class LatentDataset:
    values: np.ndarray   # (N, frames, dim) float32
    labels: np.ndarray   # (N,) uint16

    def __len__(self) -> int:
        return self.values.shape[0]

    def variance(self) -> float:
        return float(self.values.astype(np.float64).var())

    def subset(self, mask) -> "LatentDataset":
        return LatentDataset(self.values[mask], self.labels[mask])


def gen_latent_dataset(spec: SyntheticLatentSpec, n_per_class: int,
                       split: str = "train") -> LatentDataset:
    """Clips are generated from independent per-sample substreams keyed by
    (seed, split, class, index), so any subset is reproducible bit-for-bit
    and generation order cannot matter."""
    split_key = zlib.crc32(split.encode())
    patterns = [class_pattern(spec, c) for c in range(spec.n_classes)]
    values = np.empty((spec.n_classes * n_per_class, spec.frames, spec.dim), dtype=np.float32)
    labels = np.empty(spec.n_classes * n_per_class, dtype=np.uint16)
    row = 0
    for c in range(spec.n_classes):
        for i in range(n_per_class):
            rng = np.random.default_rng(np.random.SeedSequence((spec.seed, split_key, c, i)))
            sign = 1.0
            if spec.bimodal_class == c:
                sign = 1.0 if rng.random() < 0.5 else -1.0
            noise = rng.standard_normal((spec.frames, spec.dim))
            values[row] = sign * patterns[c] + spec.noise_std * noise.astype(np.float32)
            labels[row] = c
            row += 1
    return LatentDataset(values, labels)


# ----------------------------------------------------------------------
# latent dataset file format


def save_latents(path, dataset: LatentDataset) -> None:
    values = np.ascontiguousarray(dataset.values, dtype="<f4")
    labels = np.ascontiguousarray(dataset.labels, dtype="<u2")
    n, frames, dim = values.shape
    with open(path, "wb") as f:
        f.write(LATENT_MAGIC)
        f.write(struct.pack("<IIII", LATENT_VERSION, n, frames, dim))
        f.write(values.tobytes())
        f.write(labels.tobytes())


def load_latents(path) -> LatentDataset:
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:4] != LATENT_MAGIC:
        raise DatasetFormatError(f"{path}: not a latent dataset file")
    version, n, frames, dim = struct.unpack_from("<IIII", raw, 4)
    if version != LATENT_VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    expected = 20 + 4 * n * frames * dim + 2 * n
    if len(raw) != expected:
        raise DatasetFormatError(f"{path}: size {len(raw)} != expected {expected}")
    values = np.frombuffer(raw, dtype="<f4", count=n * frames * dim, offset=20)
    labels = np.frombuffer(raw, dtype="<u2", count=n, offset=20 + 4 * n * frames * dim)
    return LatentDataset(values.reshape(n, frames, dim).copy(), labels.copy())


# ----------------------------------------------------------------------
# checkpoints


def _named_tensors(source) -> list[tuple[str, np.ndarray]]:
    if isinstance(source, Module):
        return [(name, t.data) for name, t in source.named_tensors()]
    if isinstance(source, dict):
        return [(k, v.data if isinstance(v, Tensor) else np.asarray(v)) for k, v in source.items()]
    raise TypeError(f"cannot checkpoint a {type(source).__name__}")


def save_checkpoint(path, source) -> None:
    chunks: list[bytes] = []
    for name, arr in _named_tensors(source):
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        arr = np.asarray(arr, dtype="<f4", order="C")
        if arr.ndim > 0xFF:
            raise CheckpointError(f"{name}: ndim {arr.ndim} exceeds format limit")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    records = b"".join(chunks)
    crc = zlib.crc32(records) & 0xFFFFFFFF
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(records)
        f.write(struct.pack("<I", crc))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    """Parse and CRC-verify; returns name -> float32 array. Fails atomically:
    either the whole file parses or nothing is returned."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    records = raw[8:-4]
    (stored_crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(records) & 0xFFFFFFFF != stored_crc:
        raise CheckpointError(f"{path}: CRC mismatch, file corrupt or truncated")
    tensors: dict[str, np.ndarray] = {}
    off = 0
    end = len(records)
    while off < end:
        try:
            (name_len,) = struct.unpack_from("<H", records, off)
            off += 2
            name = records[off:off + name_len].decode("utf-8")
            off += name_len
            (ndim,) = struct.unpack_from("<B", records, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", records, off)
            off += 4 * ndim
            count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            payload = np.frombuffer(records, dtype="<f4", count=count, offset=off)
            off += 4 * count
        except (struct.error, ValueError) as e:
            raise CheckpointError(f"{path}: truncated or malformed record at offset {off}") from e
        if name in tensors:
            raise CheckpointError(f"{path}: duplicate tensor name {name!r}")
        tensors[name] = payload.reshape(shape).copy()
    if off != end:
        raise CheckpointError(f"{path}: {end - off} stray bytes after last record")
    return tensors


def load_checkpoint(path, model: Module) -> None:
    """Load into an existing model. Name sets must match exactly; mismatches
    are reported with the offending names listed."""
    tensors = read_checkpoint(path)
    expected = {name: t for name, t in model.named_tensors()}
    unknown = sorted(set(tensors) - set(expected))
    missing = sorted(set(expected) - set(tensors))
    if unknown or missing:
        raise CheckpointError(
            f"{path}: name mismatch; unknown in file: {unknown or 'none'}, "
            f"missing from file: {missing or 'none'}"
        )
    for name, arr in tensors.items():
        target = expected[name]
        if tuple(arr.shape) != tuple(target.shape):
            raise CheckpointError(
                f"{path}: {name} has shape {arr.shape}, model expects {target.shape}"
            )
    for name, arr in tensors.items():
        target = expected[name]
        target.data = arr.astype(target.dtype, copy=False)


# ----------------------------------------------------------------------
# captions and text pairs

EVENT_NOUNS = ["chime", "drum", "siren", "wave", "motor", "bell",
               "flute", "organ", "horn", "pulse"]
ADJECTIVES = ["gentle", "loud", "distant", "bright", "muffled", "steady"]
VERBS = ["ringing", "playing", "fading", "humming", "swelling"]
INSTRUCTIONS = ["What sound is in this clip?", "Describe this audio.",
                "Name the sound you hear."]


def gen_caption(label: int, rng: np.random.Generator) -> str:
    """Template caption; the event noun identifies the class."""
    if not 0 <= label < len(EVENT_NOUNS):
        raise ValueError(f"no event noun for class {label}")
    adj = ADJECTIVES[rng.integers(0, len(ADJECTIVES))]
    verb = VERBS[rng.integers(0, len(VERBS))]
    return f"A {adj} {EVENT_NOUNS[label]} is {verb}"


def save_pairs_jsonl(path, pairs: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for obj in pairs:
            f.write(json.dumps(obj, sort_keys=True) + "\n")


def load_pairs_jsonl(path) -> list[dict]:
    pairs = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetFormatError(f"{path}:{line_no}: invalid JSON") from e
            if "caption" not in obj or "audio_tokens" not in obj:
                raise DatasetFormatError(f"{path}:{line_no}: missing caption or audio_tokens")
            pairs.append(obj)
    return pairs


# ----------------------------------------------------------------------
# metrics


class MetricsLog:
    """Rows of (step, split, metric, value) plus a JSON summary mirror.

    The CSV carries no timestamps or environment data, so identical runs
    produce identical bytes; run metadata lives only in the JSON."""

    def __init__(self):
        self.rows: list[tuple[int, str, str, float]] = []

    def add(self, step: int, split: str, metric: str, value: float) -> None:
        self.rows.append((int(step), str(split), str(metric), float(value)))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "split", "metric", "value"])
            for step, split, metric, value in self.rows:
                writer.writerow([step, split, metric, repr(value)])

    def write_json(self, path, **metadata) -> None:
        finals: dict[str, float] = {}
        for step, split, metric, value in self.rows:
            finals[f"{split}/{metric}"] = value
        payload = {"final": finals, "rows": len(self.rows), **metadata}
        with open(path, "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")


def config_digest(config: dict) -> str:
    """Stable hash of a flat configuration dict."""
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]
