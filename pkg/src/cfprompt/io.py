"""On-disk formats: SCM datasets, named-tensor checkpoints, PGM triplets and metrics CSVs.

All binary numbers are little-endian; floats are IEEE-754 float64. Every
writer takes a ``lineage`` string (the hex config hash of the run that
produced the file) and stores it inside the file.
"""
from __future__ import annotations

import csv
import io
import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import ContractViolation, MissingArtifactError
from .scm import IMAGE_SIDE, N_DIM, ScmDataset

DATASET_MAGIC = b"CFSD"
DATASET_VERSION = 1
# magic, version, K, m, count, n_dim, reserved, lineage digest (32 raw bytes)
_DATASET_HEADER = struct.Struct("<4sHHIIHH32s")

CHECKPOINT_MAGIC = b"CFCK"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sHI")

CSV_SCHEMA_VERSION = 1

NO_LINEAGE = "0" * 64


def _digest(lineage):
    lineage = lineage or NO_LINEAGE
    try:
        raw = bytes.fromhex(lineage)
    except ValueError:
        raise ContractViolation(f"lineage must be a 64-digit hex digest, got {lineage!r}") from None
    if len(raw) != 32:
        raise ContractViolation("lineage must be a 64-digit hex digest")
    return raw


def _record_dtype(m, n_dim):
    return np.dtype([("y", "<i4"), ("n", "<f8", (n_dim,)), ("u_x", "<f8", (m,)), ("x", "<f8", (m,))])


def require(path, producer):
    """Raise a :class:`MissingArtifactError` that names the subcommand producing ``path``."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing artifact {path}; run `{producer}` first")
    return path


# -- datasets ------------------------------------------------------------------


def write_dataset(path, data: ScmDataset, num_classes, lineage=None, manifest=None):
    """Write ``data`` and a sidecar ``<path>.manifest`` of ``key = value`` lines."""
    path = Path(path)
    m = data.x.shape[1]
    n_dim = data.n.shape[1] if data.n.ndim == 2 else N_DIM
    rec = np.zeros(len(data), dtype=_record_dtype(m, n_dim))
    rec["y"] = data.y
    rec["n"] = data.n
    rec["u_x"] = data.u_x
    rec["x"] = data.x
    header = _DATASET_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, num_classes, m, len(data), n_dim, 0,
                                  _digest(lineage))
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(rec.tobytes())
    lines = {"format": f"cfsd/{DATASET_VERSION}", "num_classes": num_classes, "image_dim": m,
             "count": len(data), "n_dim": n_dim, "lineage": lineage or NO_LINEAGE}
    lines.update(manifest or {})
    with open(str(path) + ".manifest", "w", encoding="utf-8", newline="\n") as fh:
        for k, v in lines.items():
            fh.write(f"{k} = {v}\n")
    return path


def read_dataset(path):
    """Returns ``(dataset, info)``; ``info`` holds ``num_classes`` and ``lineage``."""
    raw = Path(path).read_bytes()
    if len(raw) < _DATASET_HEADER.size:
        raise ContractViolation(f"{path}: truncated dataset header")
    magic, version, K, m, count, n_dim, _, digest = _DATASET_HEADER.unpack_from(raw)
    if magic != DATASET_MAGIC:
        raise ContractViolation(f"{path}: not a dataset file")
    if version != DATASET_VERSION:
        raise ContractViolation(f"{path}: unsupported dataset version {version}")
    dt = _record_dtype(m, n_dim)
    body = raw[_DATASET_HEADER.size:]
    if len(body) != count * dt.itemsize:
        raise ContractViolation(f"{path}: expected {count} records, file size disagrees")
    rec = np.frombuffer(body, dtype=dt)
    data = ScmDataset(
        y=rec["y"].astype(np.int64), n=rec["n"].astype(np.float64),
        u_x=rec["u_x"].astype(np.float64), x=rec["x"].astype(np.float64),
    )
    return data, {"num_classes": K, "lineage": digest.hex()}


def read_manifest(path):
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


# -- checkpoints -----------------------------------------------------------------


def write_checkpoint(path, tensors, meta=None, lineage=None):
    """Named float64 tensors plus a JSON metadata block."""
    names = sorted(tensors)
    entries = [{"name": k, "shape": list(np.shape(tensors[k]))} for k in names]
    header = json.dumps({"tensors": entries, "meta": meta or {}, "lineage": lineage or NO_LINEAGE},
                        sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for k in names:
            fh.write(np.ascontiguousarray(tensors[k], dtype="<f8").tobytes())
    return path


def read_checkpoint(path):
    """Returns ``(tensors, meta, lineage)``."""
    raw = Path(path).read_bytes()
    magic, version, hlen = _CKPT_HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise ContractViolation(f"{path}: not a checkpoint file")
    if version != CHECKPOINT_VERSION:
        raise ContractViolation(f"{path}: unsupported checkpoint version {version}")
    start = _CKPT_HEADER.size
    header = json.loads(raw[start:start + hlen].decode("utf-8"))
    offset = start + hlen
    tensors = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        tensors[e["name"]] = arr.astype(np.float64).reshape(e["shape"])
        offset += 8 * count
    if offset != len(raw):
        raise ContractViolation(f"{path}: trailing bytes after tensor data")
    return tensors, header["meta"], header["lineage"]


# -- images ----------------------------------------------------------------------


def to_gray8(image):
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path, image, side=IMAGE_SIDE):
    """Binary (P5) 8-bit portable graymap of a flat [0, 1] image."""
    pix = to_gray8(image).reshape(side, -1)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{pix.shape[1]} {pix.shape[0]}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())
    return path


def read_pgm(path):
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ContractViolation(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ContractViolation(f"{path}: only 8-bit PGM is supported")
    data = raw[len(raw) - w * h:]
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


def write_triplet(directory, index, x, x_cf):
    """``factual``, ``counterfactual`` and ``diff`` PGMs; diff is ``0.5 + (x_cf - x) / 2``."""
    directory = Path(directory)
    stem = f"{index:04d}"
    write_pgm(directory / f"{stem}_factual.pgm", x)
    write_pgm(directory / f"{stem}_counterfactual.pgm", x_cf)
    write_pgm(directory / f"{stem}_diff.pgm", 0.5 + 0.5 * (np.asarray(x_cf) - np.asarray(x)))


# -- metrics CSV -----------------------------------------------------------------


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_csv(path, rows, columns, schema, lineage=None):
    """Metrics CSV whose first line is ``# schema=<schema>/<version> lineage=<hash>``."""
    buf = io.StringIO()
    buf.write(f"# schema={schema}/{CSV_SCHEMA_VERSION} lineage={lineage or NO_LINEAGE}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        missing = [c for c in columns if c not in r]
        if missing:
            raise ContractViolation(f"row lacks columns {missing}")
        w.writerow([_fmt(r[c]) for c in columns])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(buf.getvalue(), encoding="utf-8", newline="\n")
    os.replace(tmp, path)
    return path


def read_csv(path):
    """Returns ``(info, rows)`` with ``info`` parsed from the schema comment."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("# "):
        raise ContractViolation(f"{path}: missing schema comment")
    info = dict(tok.split("=", 1) for tok in lines[0][2:].split())
    rows = list(csv.DictReader(lines[1:]))
    return info, rows
