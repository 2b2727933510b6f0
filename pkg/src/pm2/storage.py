"""Feature files, result files, and trained-parameter files.

PM2F layout (all integers and floats little-endian):

    offset 0   magic     4 bytes  "PM2F"
    offset 4   version   u32      = 1
    offset 8   records   u32
    offset 12  n_tokens  u32      N; 0 marks a text-feature file
    offset 16  d_cls     u32
    offset 20  d_tok     u32
    offset 24  classes   u32      C
    offset 28  record[0], record[1], ...

    record: label u32, cls_token d_cls x f32, visual_tokens N x d_tok x f32
            (row-major; omitted entirely when N = 0)

Floats are stored in single precision; everything computes in double.
Writing the same header/records twice produces identical bytes.
"""

import hashlib
import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadMagicError,
    NonFiniteDataError,
    TruncatedFileError,
    UnsupportedVersionError,
    ValidationError,
)

MAGIC = b"PM2F"
VERSION = 1
HEADER_SIZE = 28

PARAMS_MAGIC = b"PM2P"
PARAMS_VERSION = 1


@dataclass(frozen=True)
class Pm2fHeader:
    record_count: int
    n_tokens: int
    d_cls: int
    d_tok: int
    class_count: int
    version: int = VERSION

    @property
    def record_nbytes(self) -> int:
        return 4 + 4 * self.d_cls + 4 * self.n_tokens * self.d_tok

    def file_nbytes(self) -> int:
        return HEADER_SIZE + self.record_count * self.record_nbytes


@dataclass
class FeatureRecord:
    label: int
    cls_token: np.ndarray  # (d_cls,) float32
    visual_tokens: np.ndarray | None = None  # (N, d_tok) float32


def _validate_record(header: Pm2fHeader, rec: FeatureRecord, index: int) -> FeatureRecord:
    cls_token = np.ascontiguousarray(rec.cls_token, dtype=np.float32)
    if cls_token.shape != (header.d_cls,):
        raise ValidationError(
            f"record {index}: cls_token shape {cls_token.shape} != ({header.d_cls},)"
        )
    if not np.all(np.isfinite(cls_token)):
        raise ValidationError(f"record {index}: non-finite cls_token value")
    if rec.label < 0 or rec.label >= header.class_count:
        raise ValidationError(f"record {index}: label {rec.label} out of range")
    visual = None
    if header.n_tokens > 0:
        if rec.visual_tokens is None:
            raise ValidationError(f"record {index}: missing visual tokens")
        visual = np.ascontiguousarray(rec.visual_tokens, dtype=np.float32)
        if visual.shape != (header.n_tokens, header.d_tok):
            raise ValidationError(
                f"record {index}: visual tokens shape {visual.shape} != "
                f"({header.n_tokens}, {header.d_tok})"
            )
        if not np.all(np.isfinite(visual)):
            raise ValidationError(f"record {index}: non-finite token value")
    elif rec.visual_tokens is not None:
        raise ValidationError(f"record {index}: tokens present but header has N = 0")
    return FeatureRecord(label=int(rec.label), cls_token=cls_token, visual_tokens=visual)


def write_pm2f(path, header: Pm2fHeader, records: list[FeatureRecord]) -> None:
    """Write a feature file; validates everything before touching the disk."""
    if header.version != VERSION:
        raise ValidationError(f"can only write version {VERSION}")
    if len(records) != header.record_count:
        raise ValidationError(
            f"record count {len(records)} != header count {header.record_count}"
        )
    clean = [_validate_record(header, rec, i) for i, rec in enumerate(records)]
    chunks = [
        MAGIC,
        struct.pack(
            "<6I",
            header.version,
            header.record_count,
            header.n_tokens,
            header.d_cls,
            header.d_tok,
            header.class_count,
        ),
    ]
    for rec in clean:
        chunks.append(struct.pack("<I", rec.label))
        chunks.append(rec.cls_token.astype("<f4").tobytes())
        if rec.visual_tokens is not None:
            chunks.append(rec.visual_tokens.astype("<f4").tobytes())
    blob = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(blob)


def read_pm2f(path) -> tuple[Pm2fHeader, list[FeatureRecord]]:
    """Read and validate a feature file; exact inverse of write_pm2f."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < HEADER_SIZE:
        raise TruncatedFileError(
            f"file is {len(data)} bytes, header needs {HEADER_SIZE}", len(data)
        )
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}", 0)
    version, count, n_tokens, d_cls, d_tok, classes = struct.unpack("<6I", data[4:HEADER_SIZE])
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}", 4)
    header = Pm2fHeader(
        record_count=count, n_tokens=n_tokens, d_cls=d_cls, d_tok=d_tok, class_count=classes
    )
    expected = header.file_nbytes()
    if len(data) != expected:
        raise TruncatedFileError(
            f"file is {len(data)} bytes, layout requires {expected}", min(len(data), expected)
        )
    records = []
    offset = HEADER_SIZE
    for i in range(count):
        (label,) = struct.unpack_from("<I", data, offset)
        if label >= classes:
            raise ValidationError(f"record {i}: label {label} out of range")
        cls_off = offset + 4
        cls_token = np.frombuffer(data, dtype="<f4", count=d_cls, offset=cls_off).copy()
        if not np.all(np.isfinite(cls_token)):
            bad = int(np.flatnonzero(~np.isfinite(cls_token))[0])
            raise NonFiniteDataError(f"record {i}: non-finite cls_token", cls_off + 4 * bad)
        visual = None
        if n_tokens > 0:
            tok_off = cls_off + 4 * d_cls
            flat = np.frombuffer(data, dtype="<f4", count=n_tokens * d_tok, offset=tok_off)
            if not np.all(np.isfinite(flat)):
                bad = int(np.flatnonzero(~np.isfinite(flat))[0])
                raise NonFiniteDataError(f"record {i}: non-finite token", tok_off + 4 * bad)
            visual = flat.reshape(n_tokens, d_tok).copy()
        records.append(FeatureRecord(label=int(label), cls_token=cls_token, visual_tokens=visual))
        offset += header.record_nbytes
    return header, records


def file_checksum(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def array_checksum(named_arrays) -> str:
    """SHA-256 over (name, bytes) pairs in the given order."""
    h = hashlib.sha256()
    for name, arr in named_arrays:
        h.update(str(name).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def records_to_dataset(header: Pm2fHeader, records: list[FeatureRecord], class_names=None):
    """PM2F records as a trainer dataset (promoted to float64)."""
    from .trainer import FeatureDataset

    cls_tokens = np.stack([r.cls_token for r in records]).astype(np.float64)
    labels = np.array([r.label for r in records], dtype=np.int64)
    visual = None
    if header.n_tokens > 0:
        visual = np.stack([r.visual_tokens for r in records]).astype(np.float64)
    return FeatureDataset(
        cls_tokens=cls_tokens,
        labels=labels,
        n_classes=header.class_count,
        visual_tokens=visual,
        class_names=class_names,
    )


def load_dataset(path, class_names=None):
    header, records = read_pm2f(path)
    return records_to_dataset(header, records, class_names)


def load_text_features(path):
    """Text-feature file (N = 0) as a trainer TextFeatureSet."""
    from .trainer import TextFeatureSet

    header, records = read_pm2f(path)
    if header.n_tokens != 0:
        raise ValidationError(f"{path} is not a text-feature file (N = {header.n_tokens})")
    features = np.stack([r.cls_token for r in records]).astype(np.float64)
    labels = np.array([r.label for r in records], dtype=np.int64)
    return TextFeatureSet(features=features, labels=labels)


def save_params(path, params, mode, sopool=None, coop_context=None, meta=None) -> None:
    """Trained parameters: JSON manifest + raw float64 blobs, deterministic
    bytes."""
    arrays = dict(params.param_dict())
    if coop_context is not None:
        arrays["coop_ctx"] = coop_context.context
    manifest = {
        "mode": mode.value,
        "arrays": [[name, list(arr.shape)] for name, arr in arrays.items()],
        "meta": meta or {},
    }
    if sopool is not None:
        manifest["sopool"] = {
            "reduced_dim": sopool.reduced_dim,
            "ns_iterations": sopool.ns_iterations,
            "trace_epsilon": sopool.trace_epsilon,
            "strict_degeneracy": sopool.strict_degeneracy,
        }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(PARAMS_MAGIC)
        fh.write(struct.pack("<2I", PARAMS_VERSION, len(blob)))
        fh.write(blob)
        for name, arr in arrays.items():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_params(path):
    """Inverse of save_params; returns (HeadParams, mode, sopool, coop, meta)."""
    from .heads import HeadMode, HeadParams
    from .prompts import CoopContext
    from .sopool import SoPoolConfig

    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != PARAMS_MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {PARAMS_MAGIC!r}", 0)
    version, json_len = struct.unpack_from("<2I", data, 4)
    if version != PARAMS_VERSION:
        raise UnsupportedVersionError(f"unsupported params version {version}", 4)
    manifest = json.loads(data[12 : 12 + json_len])
    offset = 12 + json_len
    arrays = {}
    for name, shape in manifest["arrays"]:
        n = int(np.prod(shape)) if shape else 1
        arrays[name] = (
            np.frombuffer(data, dtype="<f8", count=n, offset=offset)
            .reshape(shape)
            .astype(np.float64)
        )
        offset += 8 * n
    mode = HeadMode.from_string(manifest["mode"])
    params = HeadParams(
        shared_w=arrays["shared_w"],
        shared_b=arrays["shared_b"],
        proj_weight=arrays.get("proj_weight"),
        proj_bias=arrays.get("proj_bias"),
        so_w=arrays.get("so_w"),
        so_b=arrays.get("so_b"),
    )
    sopool = None
    if "sopool" in manifest:
        sopool = SoPoolConfig(**manifest["sopool"])
    coop = CoopContext(context=arrays["coop_ctx"]) if "coop_ctx" in arrays else None
    return params, mode, sopool, coop, manifest["meta"]


def _json_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def write_results(run_dir, table) -> tuple[str, str]:
    """Per-episode JSON lines plus a summary CSV mirroring the prompt-scheme
    ablation layout (one row per scheme, one column per shot). Stable key
    order and shortest-roundtrip floats keep re-runs byte-identical."""
    os.makedirs(run_dir, exist_ok=True)
    episodes_path = os.path.join(run_dir, "episodes.jsonl")
    summary_path = os.path.join(run_dir, "summary.csv")
    with open(episodes_path, "w", encoding="utf-8", newline="\n") as fh:
        for record in table.records:
            fh.write(_json_line(record))
            fh.write("\n")
    lines = ["text_prompt," + ",".join(f"{s}-shot" for s in table.shots)]
    for scheme in table.schemes:
        cells = [repr(table.means[scheme][s]) for s in table.shots]
        lines.append(scheme + "," + ",".join(cells))
    with open(summary_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines))
        fh.write("\n")
    return episodes_path, summary_path


def read_results(run_dir) -> list[dict]:
    with open(os.path.join(run_dir, "episodes.jsonl"), encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def summarize_records(records: list[dict]) -> dict[str, dict[int, float]]:
    """Recompute per-(scheme, shot) mean accuracy from episode records."""
    buckets: dict[str, dict[int, list[float]]] = {}
    for rec in records:
        buckets.setdefault(rec["scheme"], {}).setdefault(rec["shots"], []).append(rec["accuracy"])
    return {
        scheme: {shot: sum(v) / len(v) for shot, v in shots.items()}
        for scheme, shots in buckets.items()
    }
