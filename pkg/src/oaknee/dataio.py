"""File formats and dataset assembly.

* ``.pts`` landmark files (``version: 1`` / ``n_points: N`` / ``{`` ... ``}``)
* binary PGM (P5), maxval 255 or 65535, big-endian 16-bit samples
* manifest CSV with a mandatory header row
* feature CSVs (``knee_id,label,<feature columns>``)
"""

import csv
import hashlib
import io
import json
import math
import os
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import CheckpointError, IoError, ManifestError, ParseError, Unsupported

MANIFEST_COLUMNS = ("image_path", "points_path", "knee_id", "subject_id", "side", "kl_grade", "spacing_mm")


# ---------------------------------------------------------------------------
# landmarks
# ---------------------------------------------------------------------------


def read_points(path):
    """Parse a ``.pts`` file into an (n, 2) float array (mm)."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except UnicodeDecodeError as exc:
        raise ParseError("not UTF-8 text", f"{path}") from exc
    lines = text.splitlines()

    def loc(i):
        return f"{path}:{i + 1}"

    def expect(i, key):
        if i >= len(lines):
            raise ParseError(f"missing '{key}' line", loc(i))
        parts = lines[i].split(":")
        if len(parts) != 2 or parts[0].strip() != key:
            raise ParseError(f"expected '{key}: <int>', got {lines[i]!r}", loc(i))
        try:
            return int(parts[1].strip())
        except ValueError:
            raise ParseError(f"non-integer {key}: {parts[1].strip()!r}", loc(i)) from None

    version = expect(0, "version")
    if version != 1:
        raise ParseError(f"unsupported version {version}", loc(0))
    n = expect(1, "n_points")
    if n < 0:
        raise ParseError(f"negative point count {n}", loc(1))
    if len(lines) < 3 or lines[2].strip() != "{":
        raise ParseError("expected '{'", loc(2))
    body = []
    i = 3
    while i < len(lines) and lines[i].strip() != "}":
        body.append(i)
        i += 1
    if i >= len(lines):
        raise ParseError("missing closing '}'", loc(i))
    if any(line.strip() for line in lines[i + 1:]):
        raise ParseError("content after closing '}'", loc(i + 1))
    if len(body) != n:
        raise ParseError(f"count mismatch: header says {n} points, found {len(body)}", loc(1))
    pts = np.empty((n, 2))
    for j, li in enumerate(body):
        parts = lines[li].split()
        if len(parts) != 2:
            raise ParseError(f"expected '<x> <y>', got {lines[li]!r}", loc(li))
        try:
            pts[j] = [float(parts[0]), float(parts[1])]
        except ValueError:
            raise ParseError(f"non-numeric coordinate in {lines[li]!r}", loc(li)) from None
        if not np.all(np.isfinite(pts[j])):
            raise ParseError(f"non-finite coordinate in {lines[li]!r}", loc(li))
    return pts


def write_points(path, points):
    pts = np.asarray(points, dtype=np.float64)
    lines = ["version: 1", f"n_points: {len(pts)}", "{"]
    lines += [f"{x!r} {y!r}" for x, y in pts.tolist()]
    lines.append("}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# PGM
# ---------------------------------------------------------------------------


def _pgm_header_tokens(data, path):
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ParseError("truncated header", f"{path}@{pos}")
        tokens.append((data[start:pos], start))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ParseError("header must end with a single whitespace byte", f"{path}@{pos}")
    return tokens, pos + 1


def read_pgm(path):
    """Read a binary PGM.  Returns uint8 (maxval 255) or uint16 (maxval 65535) pixels."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if data[:2] != b"P5":
        raise ParseError(f"bad magic {data[:2]!r}, expected b'P5'", f"{path}@0")
    tokens, offset = _pgm_header_tokens(data, path)
    values = []
    for tok, at in tokens[1:]:
        try:
            values.append(int(tok))
        except ValueError:
            raise ParseError(f"non-integer header field {tok!r}", f"{path}@{at}") from None
    width, height, maxval = values
    if width < 1 or height < 1:
        raise ParseError(f"invalid dimensions {width}x{height}", f"{path}@{tokens[1][1]}")
    if maxval not in (255, 65535):
        raise Unsupported(f"{path}: maxval {maxval} not supported (255 or 65535 only)")
    dtype = np.dtype(">u2") if maxval == 65535 else np.dtype(np.uint8)
    need = width * height * dtype.itemsize
    payload = data[offset:]
    if len(payload) < need:
        raise ParseError(f"truncated payload: {len(payload)} of {need} bytes", f"{path}@{offset}")
    if len(payload) > need:
        raise ParseError(f"{len(payload) - need} trailing bytes after payload", f"{path}@{offset + need}")
    pixels = np.frombuffer(payload, dtype=dtype).reshape(height, width)
    return pixels.astype(np.uint16 if maxval == 65535 else np.uint8)


def write_pgm(path, pixels):
    p = np.asarray(pixels)
    if p.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {p.shape}")
    if p.dtype == np.uint8:
        maxval, payload = 255, p.tobytes()
    elif p.dtype == np.uint16:
        maxval, payload = 65535, p.astype(">u2").tobytes()
    else:
        raise Unsupported(f"PGM writer takes uint8 or uint16, got {p.dtype}")
    header = f"P5\n{p.shape[1]} {p.shape[0]}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + payload)


def raster_io(path, image=None):
    """Read (``image is None``) or write a :class:`~oaknee.imaging.RasterImage`.

    PGM carries no spacing; reads return spacing 1.0 and callers take the
    real value from the manifest.
    """
    from .imaging import RasterImage

    if image is None:
        return RasterImage(read_pgm(path), 1.0)
    write_pgm(path, image.pixels)
    return path


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    image_path: str
    points_path: str
    knee_id: str
    subject_id: str
    side: str
    kl_grade: int
    spacing_mm: float

    @property
    def label(self):
        return int(self.kl_grade >= 2)


def kl_to_label(kl_grade):
    return int(kl_grade >= 2)


def read_manifest(path):
    """Parse a manifest CSV.  Paths inside are resolved relative to the manifest."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read manifest {path}: {exc}") from exc
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ManifestError(f"{path}: not UTF-8 ({exc})") from exc
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ManifestError(f"{path}: empty manifest, header row required") from None
    if tuple(h.strip() for h in header) != MANIFEST_COLUMNS:
        raise ManifestError(f"{path}:1: header must be {','.join(MANIFEST_COLUMNS)}, got {','.join(header)}")
    entries = []
    seen = set()
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(MANIFEST_COLUMNS):
            raise ManifestError(f"{path}:{lineno}: expected {len(MANIFEST_COLUMNS)} fields, got {len(row)}")
        rec = dict(zip(MANIFEST_COLUMNS, (v.strip() for v in row)))
        try:
            kl = int(rec["kl_grade"])
            spacing = float(rec["spacing_mm"])
        except ValueError as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from None
        if not 0 <= kl <= 4:
            raise ManifestError(f"{path}:{lineno}: kl_grade {kl} outside 0..4")
        if not (spacing > 0 and math.isfinite(spacing)):
            raise ManifestError(f"{path}:{lineno}: spacing_mm must be positive, got {rec['spacing_mm']}")
        if rec["side"] not in ("L", "R"):
            raise ManifestError(f"{path}:{lineno}: side must be L or R, got {rec['side']!r}")
        if not rec["knee_id"] or not rec["subject_id"]:
            raise ManifestError(f"{path}:{lineno}: knee_id and subject_id are required")
        if rec["knee_id"] in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate knee_id {rec['knee_id']!r}")
        seen.add(rec["knee_id"])
        entries.append(ManifestEntry(rec["image_path"], rec["points_path"], rec["knee_id"],
                                     rec["subject_id"], rec["side"], kl, spacing))
    return entries


def write_manifest(path, entries):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for e in entries:
            w.writerow([e.image_path, e.points_path, e.knee_id, e.subject_id, e.side,
                        e.kl_grade, repr(float(e.spacing_mm))])


def resolve(manifest_path, rel):
    p = Path(rel)
    return p if p.is_absolute() else Path(manifest_path).parent / p


def check_files(manifest_path, entries, image=True, points=True):
    for e in entries:
        for kind, rel, wanted in (("image", e.image_path, image), ("points", e.points_path, points)):
            if wanted and not resolve(manifest_path, rel).is_file():
                raise IoError(f"{manifest_path}: {kind} file for {e.knee_id} not found: {rel}")


# ---------------------------------------------------------------------------
# subject-level splits
# ---------------------------------------------------------------------------


def subject_bucket(subject_id, split_seed):
    """Uniform value in [0, 1) derived from a hash of (seed, subject id)."""
    digest = hashlib.sha256(f"{split_seed}:{subject_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") / 2 ** 64


def split_entries(entries, split, split_seed=0, val_fraction=0.1):
    """Carve the validation split out of a training manifest by subject."""
    if split not in ("train", "val", "test"):
        raise ValueError(f"split must be train, val or test, got {split!r}")
    if split == "test":
        return list(entries)
    in_val = {e.subject_id: subject_bucket(e.subject_id, split_seed) < val_fraction for e in entries}
    want_val = split == "val"
    return [e for e in entries if in_val[e.subject_id] == want_val]


# ---------------------------------------------------------------------------
# feature tables
# ---------------------------------------------------------------------------


def write_feature_csv(path, knee_ids, labels, names, values):
    values = np.asarray(values, dtype=np.float64)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["knee_id", "label", *names])
        for kid, lab, row in zip(knee_ids, labels, values):
            w.writerow([kid, int(lab), *(repr(float(v)) for v in row)])


@dataclass
class FeatureTable:
    knee_ids: list
    labels: np.ndarray
    names: list
    values: np.ndarray

    def select(self, prefix_or_names):
        if isinstance(prefix_or_names, str):
            cols = [i for i, n in enumerate(self.names) if n.startswith(prefix_or_names)]
        else:
            missing = [n for n in prefix_or_names if n not in self.names]
            if missing:
                raise ManifestError(f"feature table lacks columns {missing}")
            cols = [self.names.index(n) for n in prefix_or_names]
        return self.values[:, cols]

    def subset(self, knee_ids):
        pos = {k: i for i, k in enumerate(self.knee_ids)}
        missing = [k for k in knee_ids if k not in pos]
        if missing:
            raise ManifestError(f"feature table lacks knees {missing[:3]}{'...' if len(missing) > 3 else ''}")
        idx = [pos[k] for k in knee_ids]
        return FeatureTable(list(knee_ids), self.labels[idx], self.names, self.values[idx])


def read_feature_csv(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read feature table {path}: {exc}") from exc
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0][:2] != ["knee_id", "label"]:
        raise ParseError("feature CSV must start with header 'knee_id,label,...'", f"{path}:1")
    names = rows[0][2:]
    ids, labels, values = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(names) + 2:
            raise ParseError(f"expected {len(names) + 2} fields, got {len(row)}", f"{path}:{lineno}")
        try:
            labels.append(int(row[1]))
            values.append([float(v) for v in row[2:]])
        except ValueError as exc:
            raise ParseError(str(exc), f"{path}:{lineno}") from None
        ids.append(row[0])
    return FeatureTable(ids, np.array(labels, dtype=np.int64), names,
                        np.array(values, dtype=np.float64).reshape(len(ids), len(names)))


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return Path(path)


def dataclass_dict(obj):
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"OAKN"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<i8"): 3, np.dtype("u1"): 4}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def _pack_str(s):
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def save_checkpoint(path, arch, tensors, metadata):
    """Write ``OAKN | version | arch | metadata JSON | tensors | sha256``.

    Tensors are written in sorted name order so equal models give equal bytes.
    """
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), _pack_str(arch),
             _pack_str(json.dumps(metadata, sort_keys=True, separators=(",", ":"))),
             struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise CheckpointError(f"tensor {name}: unsupported dtype {arr.dtype}")
        parts += [_pack_str(name), struct.pack("<BI", _DTYPE_CODES[dt], arr.ndim),
                  struct.pack(f"<{arr.ndim}Q", *arr.shape),
                  np.ascontiguousarray(arr, dtype=dt).tobytes()]
    body = b"".join(parts)
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


class _Reader:
    def __init__(self, data, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self):
        (n,) = self.unpack("<I")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"{self.path}: invalid UTF-8 string at byte {self.pos - n}") from None


def load_checkpoint(path):
    """Returns ``(arch, tensors, metadata)``; raises CheckpointError on any defect."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}, not an OAKN checkpoint")
    if len(data) < 8 + 32:
        raise CheckpointError(f"{path}: file too short")
    (version,) = struct.unpack("<I", data[4:8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")
    r = _Reader(body, path)
    r.take(8)
    arch = r.string()
    try:
        metadata = json.loads(r.string())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: bad metadata JSON: {exc}") from None
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        name = r.string()
        code, ndim = r.unpack("<BI")
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"{path}: tensor {name} has unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}Q")
        dt = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(r.take(nbytes), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.pos != len(body):
        raise CheckpointError(f"{path}: {len(body) - r.pos} unexpected bytes after tensors")
    return arch, tensors, metadata


# ---------------------------------------------------------------------------
# dataset assembly
# ---------------------------------------------------------------------------


@dataclass
class KneeRecord:
    entry: ManifestEntry
    points: np.ndarray
    image_path: Path

    @property
    def label(self):
        return self.entry.label


def load_dataset(manifest_path, split="test", split_seed=0, val_fraction=0.1, load_points=True):
    """Manifest entries of one split with their landmark points.

    Images are not decoded here (see :func:`read_raster`); every referenced
    file must exist.
    """
    entries = read_manifest(manifest_path)
    chosen = split_entries(entries, split, split_seed, val_fraction)
    check_files(manifest_path, chosen, image=True, points=load_points)
    out = []
    for e in chosen:
        pts = read_points(resolve(manifest_path, e.points_path)) if load_points else None
        out.append(KneeRecord(e, pts, resolve(manifest_path, e.image_path)))
    return out


def read_raster(record):
    from .imaging import RasterImage

    return RasterImage(read_pgm(record.image_path), record.entry.spacing_mm)
