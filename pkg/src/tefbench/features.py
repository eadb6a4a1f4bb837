"""Fixed-length static features: ToyBinary -> 128-vector in [0,1].

Histograms, entropy windows, string scans, and lexicon hits are computed over
the file's *content regions* (section blobs as stored on disk including cave
padding, the debug blob, and the overlay). Header and table metadata feed the
dedicated header/section/import features instead, so e.g. renaming a section
moves only the hashed-name bins.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import lexicons
from .corpus import extract_strings
from .tbf import (
    MAX_SECTIONS,
    ToyBinary,
    compute_checksum,
    fnv1a32,
    is_plausible_timestamp,
    serialize,
)

FEATURE_DIM = 128
LOG_CAP = float(np.log1p(2 ** 24))
ENTROPY_WINDOW = 256

# layout
F_BYTE_HIST = slice(0, 64)
F_ENTROPY_HIST = slice(64, 80)
F_TIMESTAMP = 80
F_CHECKSUM_OK = 81
F_OS_MAJOR = 82
F_OS_MINOR = 83
F_MACHINE = slice(84, 88)
F_DEBUG = 88
F_PACKED = 89
F_VERSION = 90
F_TS_PLAUSIBLE = 91
F_SECTION_COUNT = 92
F_PAYLOAD_ENTROPY = 93
F_SECTION_MEAN_ENTROPY = 94
F_SECTION_MAX_ENTROPY = 95
F_TOTAL_SIZE = 96
F_CAVE_FRACTION = 97
F_OVERLAY_SIZE = 98
F_NAME_BINS = slice(99, 108)
F_IMPORT_LIBS = 108
F_IMPORT_SYMS = 109
F_LIB_BINS = slice(110, 118)
F_STRING_COUNT = 118
F_STRING_MEAN_LEN = 119
F_MARKER_FRACTION = 120
F_BENIGN_FRACTION = 121
F_STRING_BINS = slice(122, 128)

N_NAME_BINS = 9
N_LIB_BINS = 8
N_STRING_BINS = 6


def _log_scale(x: float) -> float:
    return min(1.0, float(np.log1p(max(0.0, x))) / LOG_CAP)


def byte_entropy(data: bytes | np.ndarray) -> float:
    """Shannon entropy of the byte distribution, in bits (0..8)."""
    arr = np.frombuffer(data, dtype=np.uint8) if isinstance(data, bytes) else data
    if arr.size == 0:
        return 0.0
    counts = np.bincount(arr, minlength=256)
    p = counts[counts > 0] / arr.size
    return float(-(p * np.log2(p)).sum())


def _window_entropies(arr: np.ndarray) -> np.ndarray:
    """Entropy of consecutive 256-byte windows; final partial window included."""
    if arr.size == 0:
        return np.zeros(0)
    n_full = arr.size // ENTROPY_WINDOW
    ents = []
    if n_full:
        head = arr[:n_full * ENTROPY_WINDOW]
        win_idx = np.repeat(np.arange(n_full), ENTROPY_WINDOW)
        counts = np.bincount(win_idx * 256 + head, minlength=n_full * 256)
        counts = counts.reshape(n_full, 256)
        p = counts / ENTROPY_WINDOW
        with np.errstate(divide="ignore", invalid="ignore"):
            logp = np.where(p > 0, np.log2(np.where(p > 0, p, 1.0)), 0.0)
        ents.append(-(p * logp).sum(axis=1))
    tail = arr[n_full * ENTROPY_WINDOW:]
    if tail.size:
        ents.append(np.array([byte_entropy(tail)]))
    return np.concatenate(ents) if ents else np.zeros(0)


def _content_bytes(b: ToyBinary) -> bytes:
    parts = []
    for s in b.sections:
        parts.append(s.data)
        parts.append(b"\x00" * (s.alloc_len - len(s.data)))
    if b.debug_blob:
        parts.append(b.debug_blob)
    parts.append(b.overlay)
    return b"".join(parts)


def extract_features(b: ToyBinary) -> np.ndarray:
    """Deterministic 128-dim observation; every entry lies in [0, 1]."""
    v = np.zeros(FEATURE_DIM)
    content = _content_bytes(b)
    arr = np.frombuffer(content, dtype=np.uint8)

    if arr.size:
        hist = np.bincount(arr >> 2, minlength=64).astype(float)
        v[F_BYTE_HIST] = hist / arr.size
        ents = _window_entropies(arr)
        buckets = np.minimum((ents * 2).astype(int), 15)
        ehist = np.bincount(buckets, minlength=16).astype(float)
        v[F_ENTROPY_HIST] = ehist / ents.size

    v[F_TIMESTAMP] = b.timestamp / 2 ** 32
    raw = serialize(b)
    v[F_CHECKSUM_OK] = 1.0 if compute_checksum(raw) == b.checksum else 0.0
    v[F_OS_MAJOR] = b.os_major / 255.0
    v[F_OS_MINOR] = b.os_minor / 255.0
    v[84 + (b.machine_type % 4)] = 1.0
    v[F_DEBUG] = 1.0 if b.debug_present else 0.0
    v[F_PACKED] = 1.0 if b.packed else 0.0
    v[F_VERSION] = b.version / 65535.0
    v[F_TS_PLAUSIBLE] = 1.0 if is_plausible_timestamp(b.timestamp) else 0.0

    v[F_SECTION_COUNT] = len(b.sections) / MAX_SECTIONS
    sec_ents = [byte_entropy(s.data) for s in b.sections]
    if sec_ents:
        v[F_SECTION_MEAN_ENTROPY] = float(np.mean(sec_ents)) / 8.0
        v[F_SECTION_MAX_ENTROPY] = float(np.max(sec_ents)) / 8.0
    exec_idx = [i for i, s in enumerate(b.sections) if s.is_exec]
    if len(exec_idx) == 1:
        v[F_PAYLOAD_ENTROPY] = sec_ents[exec_idx[0]] / 8.0
    total_used = sum(s.used_len for s in b.sections)
    total_alloc = sum(s.alloc_len for s in b.sections)
    v[F_TOTAL_SIZE] = _log_scale(total_used)
    v[F_CAVE_FRACTION] = (total_alloc - total_used) / total_alloc if total_alloc else 0.0
    v[F_OVERLAY_SIZE] = _log_scale(len(b.overlay))
    name_bins = np.zeros(N_NAME_BINS)
    for s in b.sections:
        name_bins[fnv1a32(s.name.encode()) % N_NAME_BINS] = 1.0
    v[F_NAME_BINS] = name_bins

    v[F_IMPORT_LIBS] = _log_scale(len(b.imports))
    v[F_IMPORT_SYMS] = _log_scale(sum(len(i.symbols) for i in b.imports))
    lib_bins = np.zeros(N_LIB_BINS)
    for imp in b.imports:
        lib_bins[fnv1a32(imp.library.encode()) % N_LIB_BINS] = 1.0
    v[F_LIB_BINS] = lib_bins

    strings = extract_strings(content)
    v[F_STRING_COUNT] = _log_scale(len(strings))
    if strings:
        mean_len = sum(len(s) for s in strings) / len(strings)
        v[F_STRING_MEAN_LEN] = min(1.0, mean_len / 256.0)
    v[F_MARKER_FRACTION] = sum(1 for mk in lexicons.MARKERS if mk in content) / len(lexicons.MARKERS)
    v[F_BENIGN_FRACTION] = (sum(1 for w in lexicons.BENIGN_WORDS if w.encode() in content)
                            / len(lexicons.BENIGN_WORDS))
    str_bins = np.zeros(N_STRING_BINS)
    for s in strings:
        str_bins[fnv1a32(s) % N_STRING_BINS] = 1.0
    v[F_STRING_BINS] = str_bins

    return v


def extract_features_bytes(raw: bytes) -> np.ndarray:
    from .tbf import parse
    return extract_features(parse(raw))


# --- feature matrix file format -------------------------------------------------

def save_matrix(path: str | Path, X: np.ndarray, labels: np.ndarray | None = None) -> None:
    """f32 row-major with an 8-byte header; labels land in <path>.labels as u8."""
    path = Path(path)
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {X.shape}")
    with path.open("wb") as f:
        f.write(struct.pack("<II", X.shape[0], X.shape[1]))
        f.write(np.ascontiguousarray(X).tobytes())
    if labels is not None:
        y = np.asarray(labels)
        if y.shape[0] != X.shape[0]:
            raise ValueError("label count does not match row count")
        Path(str(path) + ".labels").write_bytes(y.astype(np.uint8).tobytes())


def load_matrix(path: str | Path, with_labels: bool = False):
    path = Path(path)
    raw = path.read_bytes()
    rows, dim = struct.unpack_from("<II", raw, 0)
    X = np.frombuffer(raw, dtype=np.float32, offset=8).reshape(rows, dim).astype(np.float64)
    if not with_labels:
        return X
    y = np.frombuffer(Path(str(path) + ".labels").read_bytes(), dtype=np.uint8)
    return X, y.astype(np.int64)
