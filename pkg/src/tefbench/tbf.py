"""Toy executable format (TEF): parsing, serialization, validity, packing.

Wire layout (little-endian), extension ``.tef``::

    magic "TEF1"                       4
    version            u16            2
    machine_type       u16            2
    timestamp          u32            4
    checksum           u32            4   sum of all other file bytes mod 2^32
    os_major           u8             1
    os_minor           u8             1
    flags              u8             1   bit0 debug_present, bit1 packed
    section_count      u8             1
    import_lib_count   u16            2
    debug_len          u16            2
    overlay_len        u32            4
    section table      17 * count         name[8] | flags u8 | alloc u32 | used u32
    import table                          lib_len u8 | lib | sym_count u8 | (sym_len u8 | sym)*
    debug blob         debug_len
    section data                          each blob zero-padded to alloc_len, table order
    overlay            overlay_len

Every value object in this module is immutable; all operations are pure
functions, safe to share across threads.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .errors import (
    AlreadyPacked,
    InvariantViolation,
    MalformedHeader,
    NoExecSection,
    NotPacked,
    SectionOverflow,
    TruncatedFile,
    UnpackFailure,
)

MAGIC = b"TEF1"
HEADER_LEN = 28
SECTION_ENTRY_LEN = 17
CHECKSUM_OFFSET = 12

SEC_EXEC = 0x1
SEC_DATA = 0x2

MAX_SECTIONS = 32
MAX_ALLOC = 1 << 24
MAX_IMPORTS = 256
MAX_NAME_LEN = 8
MAX_IMPORT_STR = 32

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_U64 = (1 << 64) - 1

# Timestamps far outside any release window are treated as uninitialized.
# Kept deliberately loose so that randomly drawn timestamps stay warning-free;
# the feature extractor applies the narrower window below instead.
PLAUSIBLE_TS_LO = 946_684_800        # 2000-01-01
PLAUSIBLE_TS_HI = 2_208_988_800      # 2040-01-01


def is_plausible_timestamp(ts: int) -> bool:
    return PLAUSIBLE_TS_LO <= ts < PLAUSIBLE_TS_HI


def _printable(data: bytes) -> bool:
    return all(0x20 <= c <= 0x7E for c in data)


def _ascii_field_ok(text: str, max_len: int) -> bool:
    try:
        raw = text.encode("ascii")
    except UnicodeEncodeError:
        return False
    return 1 <= len(raw) <= max_len and _printable(raw)


@dataclass(frozen=True)
class Section:
    name: str
    flags: int
    alloc_len: int
    data: bytes

    @property
    def used_len(self) -> int:
        return len(self.data)

    @property
    def cave(self) -> int:
        return self.alloc_len - len(self.data)

    @property
    def is_exec(self) -> bool:
        return bool(self.flags & SEC_EXEC)


@dataclass(frozen=True)
class Import:
    library: str
    symbols: tuple[str, ...]


@dataclass(frozen=True)
class ToyBinary:
    version: int
    machine_type: int
    timestamp: int
    checksum: int
    os_major: int
    os_minor: int
    debug_blob: bytes | None
    packed: bool
    sections: tuple[Section, ...]
    imports: tuple[Import, ...]
    overlay: bytes

    @property
    def debug_present(self) -> bool:
        return self.debug_blob is not None

    def payload_index(self) -> int:
        """Index of the unique EXEC section; raises if not unique."""
        idx = [i for i, s in enumerate(self.sections) if s.is_exec]
        if len(idx) != 1:
            raise InvariantViolation(f"expected exactly one EXEC section, found {len(idx)}")
        return idx[0]

    @property
    def payload(self) -> Section:
        return self.sections[self.payload_index()]


@dataclass(frozen=True)
class FunctionalDigest:
    value: int


@dataclass(frozen=True)
class ValidityReport:
    hard_errors: tuple[str, ...]
    warnings: tuple[str, ...]

    @property
    def valid(self) -> bool:
        return not self.hard_errors

    def _rules(self, entries: tuple[str, ...]) -> tuple[str, ...]:
        return tuple(e.split(":", 1)[0] for e in entries)

    @property
    def hard_rules(self) -> tuple[str, ...]:
        return self._rules(self.hard_errors)

    @property
    def warning_rules(self) -> tuple[str, ...]:
        return self._rules(self.warnings)


# --- FNV hashing --------------------------------------------------------------

@lru_cache(maxsize=512)
def fnv1a64(data: bytes) -> int:
    h = FNV64_OFFSET
    for b in data:
        h = ((h ^ b) * FNV64_PRIME) & _U64
    return h


@lru_cache(maxsize=4096)
def fnv1a32(data: bytes) -> int:
    h = 0x811C9DC5
    for b in data:
        h = ((h ^ b) * 0x01000193) & 0xFFFFFFFF
    return h


# --- RLE packer ----------------------------------------------------------------

def rle_encode(data: bytes) -> bytes:
    """Byte-level run-length encoding: a sequence of (count u8 >= 1, byte) pairs."""
    if not data:
        return b""
    arr = np.frombuffer(data, dtype=np.uint8)
    boundaries = np.flatnonzero(arr[1:] != arr[:-1])
    starts = np.concatenate(([0], boundaries + 1))
    lengths = np.diff(np.concatenate((starts, [arr.size])))
    values = arr[starts]
    # split runs longer than 255 into full chunks plus remainder
    full = lengths // 255
    rem = lengths % 255
    counts = []
    out_values = []
    for v, f, r in zip(values, full, rem):
        if f:
            counts.extend([255] * int(f))
            out_values.extend([int(v)] * int(f))
        if r:
            counts.append(int(r))
            out_values.append(int(v))
    pairs = np.empty(2 * len(counts), dtype=np.uint8)
    pairs[0::2] = counts
    pairs[1::2] = out_values
    return pairs.tobytes()


def rle_decode(data: bytes) -> bytes:
    if len(data) % 2 != 0:
        raise UnpackFailure("RLE stream has odd length")
    if not data:
        return b""
    arr = np.frombuffer(data, dtype=np.uint8)
    counts = arr[0::2]
    if np.any(counts == 0):
        raise UnpackFailure("RLE run with zero count")
    return np.repeat(arr[1::2], counts).tobytes()


# --- invariants ----------------------------------------------------------------

def hard_errors(b: ToyBinary) -> list[str]:
    """Structural invariant violations, in a stable order."""
    errs: list[str] = []
    exec_count = sum(1 for s in b.sections if s.is_exec)
    if exec_count != 1:
        errs.append(f"NoUniquePayload: {exec_count} EXEC sections")
    if len(b.sections) > MAX_SECTIONS:
        errs.append(f"SectionCountExceeded: {len(b.sections)} > {MAX_SECTIONS}")
    for i, s in enumerate(b.sections):
        if not _ascii_field_ok(s.name, MAX_NAME_LEN):
            errs.append(f"BadSectionName: section {i} {s.name!r}")
        if s.flags & ~(SEC_EXEC | SEC_DATA):
            errs.append(f"BadSectionFlags: section {i} flags {s.flags:#x}")
        if s.used_len > s.alloc_len:
            errs.append(f"SectionOverflow: section {i} used {s.used_len} > alloc {s.alloc_len}")
        if s.alloc_len > MAX_ALLOC:
            errs.append(f"SectionAllocExceeded: section {i} alloc {s.alloc_len}")
    if len(b.imports) > MAX_IMPORTS:
        errs.append(f"ImportTableExceeded: {len(b.imports)} entries")
    seen: set[str] = set()
    for i, imp in enumerate(b.imports):
        if not _ascii_field_ok(imp.library, MAX_IMPORT_STR):
            errs.append(f"BadImportEntry: library {i} {imp.library!r}")
        if imp.library in seen:
            errs.append(f"DuplicateImportLibrary: {imp.library!r}")
        seen.add(imp.library)
        if len(imp.symbols) > 255:
            errs.append(f"BadImportEntry: library {i} has {len(imp.symbols)} symbols")
        for sym in imp.symbols:
            if not _ascii_field_ok(sym, MAX_IMPORT_STR):
                errs.append(f"BadImportEntry: symbol {sym!r} in library {i}")
    for field, value, hi in (
        ("version", b.version, 1 << 16),
        ("machine_type", b.machine_type, 1 << 16),
        ("timestamp", b.timestamp, 1 << 32),
        ("checksum", b.checksum, 1 << 32),
        ("os_major", b.os_major, 1 << 8),
        ("os_minor", b.os_minor, 1 << 8),
    ):
        if not (0 <= value < hi):
            errs.append(f"FieldRange: {field}={value}")
    if b.debug_blob is not None and len(b.debug_blob) > 0xFFFF:
        errs.append(f"DebugTooLarge: {len(b.debug_blob)} bytes")
    if len(b.overlay) >= 1 << 32:
        errs.append("OverlayTooLarge")
    return errs


# --- serialize / parse ----------------------------------------------------------

def serialize(b: ToyBinary) -> bytes:
    """Canonical encoding; the stored checksum is written verbatim."""
    errs = hard_errors(b)
    if errs:
        raise InvariantViolation(errs[0])
    flags = (1 if b.debug_present else 0) | (2 if b.packed else 0)
    debug = b.debug_blob or b""
    out = bytearray()
    out += MAGIC
    out += struct.pack(
        "<HHIIBBBBHHI",
        b.version,
        b.machine_type,
        b.timestamp,
        b.checksum,
        b.os_major,
        b.os_minor,
        flags,
        len(b.sections),
        len(b.imports),
        len(debug),
        len(b.overlay),
    )
    for s in b.sections:
        out += s.name.encode().ljust(8, b"\x00")
        out += struct.pack("<BII", s.flags, s.alloc_len, s.used_len)
    for imp in b.imports:
        lib = imp.library.encode()
        out += bytes([len(lib)]) + lib + bytes([len(imp.symbols)])
        for sym in imp.symbols:
            sraw = sym.encode()
            out += bytes([len(sraw)]) + sraw
    out += debug
    for s in b.sections:
        out += s.data
        out += b"\x00" * (s.alloc_len - len(s.data))
    out += b.overlay
    return bytes(out)


def compute_checksum(raw: bytes) -> int:
    """Sum of all file bytes except the four checksum bytes, mod 2^32."""
    arr = np.frombuffer(raw, dtype=np.uint8)
    total = int(arr.sum(dtype=np.uint64))
    stored = int(arr[CHECKSUM_OFFSET:CHECKSUM_OFFSET + 4].sum(dtype=np.uint64)) if len(raw) >= 16 else 0
    return (total - stored) & 0xFFFFFFFF


def fix_checksum(b: ToyBinary) -> ToyBinary:
    """Return a copy whose stored checksum matches the serialized bytes."""
    raw = serialize(replace(b, checksum=0))
    return replace(b, checksum=compute_checksum(raw))


def parse(raw: bytes) -> ToyBinary:
    """Decode a TEF byte string; rejects anything serialize() would not emit."""
    n = len(raw)
    if n < HEADER_LEN:
        raise TruncatedFile("ShortHeader", n, f"need {HEADER_LEN} header bytes, have {n}")
    if raw[:4] != MAGIC:
        raise MalformedHeader("BadMagic", 0, f"{raw[:4]!r}")
    (version, machine_type, timestamp, checksum, os_major, os_minor,
     flags, section_count, import_count, debug_len, overlay_len) = struct.unpack_from(
        "<HHIIBBBBHHI", raw, 4)
    if flags & ~0b11:
        raise MalformedHeader("BadFlags", 18, f"{flags:#x}")
    debug_present = bool(flags & 1)
    packed = bool(flags & 2)
    if not debug_present and debug_len:
        raise MalformedHeader("DebugWithoutFlag", 22, f"debug_len={debug_len}")
    if section_count > MAX_SECTIONS:
        raise SectionOverflow("SectionCountExceeded", 19, f"{section_count}")
    if import_count > MAX_IMPORTS:
        raise MalformedHeader("ImportTableExceeded", 20, f"{import_count}")

    off = HEADER_LEN
    table_end = off + SECTION_ENTRY_LEN * section_count
    if table_end > n:
        raise TruncatedFile("SectionTable", off, f"table needs {table_end} bytes, file has {n}")
    entries = []
    exec_seen = 0
    for i in range(section_count):
        name_raw = raw[off:off + 8]
        pad = name_raw.find(b"\x00")
        name_bytes = name_raw if pad < 0 else name_raw[:pad]
        if not name_bytes or not _printable(name_bytes):
            raise MalformedHeader("BadSectionName", off, f"section {i}")
        if pad >= 0 and any(name_raw[pad:]):
            raise MalformedHeader("BadSectionName", off + pad, f"section {i} nonzero padding")
        sflags, alloc_len, used_len = struct.unpack_from("<BII", raw, off + 8)
        if sflags & ~(SEC_EXEC | SEC_DATA):
            raise MalformedHeader("BadSectionFlags", off + 8, f"section {i} flags {sflags:#x}")
        if alloc_len > MAX_ALLOC:
            raise SectionOverflow("SectionAllocExceeded", off + 9, f"section {i} alloc {alloc_len}")
        if used_len > alloc_len:
            raise SectionOverflow("SectionOverflow", off + 13,
                                  f"section {i} used {used_len} > alloc {alloc_len}")
        exec_seen += 1 if sflags & SEC_EXEC else 0
        entries.append((name_bytes.decode(), sflags, alloc_len, used_len))
        off += SECTION_ENTRY_LEN
    if exec_seen != 1:
        raise NoExecSection("NoUniquePayload", HEADER_LEN, f"{exec_seen} EXEC sections")

    imports = []
    seen_libs: set[str] = set()
    for i in range(import_count):
        if off >= n:
            raise TruncatedFile("ImportTable", off, f"library {i}")
        lib_len = raw[off]
        off += 1
        if not (1 <= lib_len <= MAX_IMPORT_STR):
            raise MalformedHeader("BadImportEntry", off - 1, f"library {i} length {lib_len}")
        if off + lib_len + 1 > n:
            raise TruncatedFile("ImportTable", off, f"library {i}")
        lib_raw = raw[off:off + lib_len]
        if not _printable(lib_raw):
            raise MalformedHeader("BadImportEntry", off, f"library {i} not printable")
        lib = lib_raw.decode()
        if lib in seen_libs:
            raise MalformedHeader("DuplicateImportLibrary", off, lib)
        seen_libs.add(lib)
        off += lib_len
        sym_count = raw[off]
        off += 1
        symbols = []
        for j in range(sym_count):
            if off >= n:
                raise TruncatedFile("ImportTable", off, f"symbol {j} of library {i}")
            sym_len = raw[off]
            off += 1
            if not (1 <= sym_len <= MAX_IMPORT_STR):
                raise MalformedHeader("BadImportEntry", off - 1, f"symbol length {sym_len}")
            if off + sym_len > n:
                raise TruncatedFile("ImportTable", off, f"symbol {j} of library {i}")
            sym_raw = raw[off:off + sym_len]
            if not _printable(sym_raw):
                raise MalformedHeader("BadImportEntry", off, "symbol not printable")
            symbols.append(sym_raw.decode())
            off += sym_len
        imports.append(Import(lib, tuple(symbols)))

    if off + debug_len > n:
        raise TruncatedFile("DebugBlob", off, f"need {debug_len} bytes")
    debug_blob = raw[off:off + debug_len] if debug_present else None
    off += debug_len

    sections = []
    for i, (name, sflags, alloc_len, used_len) in enumerate(entries):
        if off + alloc_len > n:
            raise TruncatedFile("SectionData", off, f"section {i} alloc {alloc_len}")
        data = raw[off:off + used_len]
        padding = raw[off + used_len:off + alloc_len]
        if any(padding):
            raise MalformedHeader("CavePaddingNotZero", off + used_len, f"section {i}")
        sections.append(Section(name, sflags, alloc_len, data))
        off += alloc_len

    if off + overlay_len > n:
        raise TruncatedFile("Overlay", off, f"need {overlay_len} bytes")
    overlay = raw[off:off + overlay_len]
    off += overlay_len
    if off != n:
        raise TruncatedFile("TrailingBytes", off, f"{n - off} bytes past declared layout")

    return ToyBinary(
        version=version,
        machine_type=machine_type,
        timestamp=timestamp,
        checksum=checksum,
        os_major=os_major,
        os_minor=os_minor,
        debug_blob=debug_blob,
        packed=packed,
        sections=tuple(sections),
        imports=tuple(imports),
        overlay=overlay,
    )


# --- validity -------------------------------------------------------------------

def validate(b: ToyBinary) -> ValidityReport:
    """Hard errors are invariant violations; checksum/timestamp issues are soft."""
    errs = hard_errors(b)
    warnings: list[str] = []
    if not errs:
        raw = serialize(b)
        actual = compute_checksum(raw)
        if actual != b.checksum:
            warnings.append(f"ChecksumMismatch: stored {b.checksum:#x}, computed {actual:#x}")
        if b.timestamp == 0:
            warnings.append("ImplausibleTimestamp: zero")
    return ValidityReport(tuple(errs), tuple(warnings))


# --- functionality digest ---------------------------------------------------------

def functional_digest(b: ToyBinary) -> FunctionalDigest:
    """FNV-1a(64) of the payload bytes after undoing packing.

    Depends only on the canonical (unpacked) payload, never on names,
    headers, overlay, other sections, or the packing state.
    """
    data = b.payload.data
    if b.packed:
        data = rle_decode(data)
    return FunctionalDigest(fnv1a64(data))


# --- toy packer --------------------------------------------------------------------

def _with_payload(b: ToyBinary, data: bytes, packed: bool) -> ToyBinary:
    idx = b.payload_index()
    old = b.sections[idx]
    alloc = max(old.alloc_len, len(data))
    if alloc > MAX_ALLOC:
        raise InvariantViolation(f"packed payload would need alloc {alloc}")
    new_sections = list(b.sections)
    new_sections[idx] = replace(old, alloc_len=alloc, data=data)
    return replace(b, sections=tuple(new_sections), packed=packed)


def pack(b: ToyBinary) -> ToyBinary:
    """RLE-encode the payload and set the packed flag; may enlarge used_len."""
    if b.packed:
        raise AlreadyPacked("packed flag already set")
    return _with_payload(b, rle_encode(b.payload.data), packed=True)


def unpack(b: ToyBinary) -> ToyBinary:
    if not b.packed:
        raise NotPacked("packed flag not set")
    return _with_payload(b, rle_decode(b.payload.data), packed=False)
