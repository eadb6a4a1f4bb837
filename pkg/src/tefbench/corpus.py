"""Procedural TEF corpora: labeled benign/malicious sets, attack splits, ingredients.

The whole corpus is a pure function of :class:`CorpusConfig`; every file is
generated from a seed stream disjoint from every other file's.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import lexicons, tbf
from .errors import IoFailure, NoUsableIngredients
from .tbf import Import, Section, ToyBinary

BENIGN = 0
MALICIOUS = 1

# stream tags keep every purpose on a disjoint seed stream
_STREAM_CORPUS = 0
_STREAM_INGREDIENTS = 1
_STREAM_ATTACK_SPLIT = 2
_STREAM_FRESH = 3

MIN_STRING_LEN = 5

PLAUSIBLE_GEN_LO = 1_262_304_000   # 2010-01-01, inside the feature window
PLAUSIBLE_GEN_HI = 2_051_222_400   # 2035-01-01


@dataclass(frozen=True)
class CorpusConfig:
    seed: int = 0
    n_target_train_per_class: int = 1000
    n_aux_per_class: int = 2200
    n_eval_per_class: int = 4000
    n_attack_malware: int = 1000
    n_benign_ingredients: int = 100
    attack_split_seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    attack_train_fraction: float = 0.7
    # class-separation knobs
    marker_min: int = 2
    marker_max: int = 5
    benign_payload_range: tuple[int, int] = (1024, 4096)
    mal_payload_range: tuple[int, int] = (2048, 8192)
    packed_prob_benign: float = 0.2
    packed_prob_malicious: float = 0.3
    suspicious_import_prob_benign: float = 0.1
    benign_string_overlap: float = 0.15
    # class-overlap knobs. A slice of both classes is drawn from one shared
    # "riskware" template graded by a continuous suspiciousness scalar u, with
    # overlapping u-ranges. This gives detectors an irreducibly ambiguous band,
    # so their benign score tails are graded instead of collapsing into point
    # masses; without it the 1%-FPR threshold sits inside a point mass and
    # never transfers to fresh data.
    benign_gray_prob: float = 0.10
    benign_gray_entropy_range: tuple[float, float] = (0.2, 0.95)
    riskware_prob: float = 0.12
    riskware_benign_u: tuple[float, float] = (0.0, 0.75)
    riskware_malicious_u: tuple[float, float] = (0.35, 1.0)
    # distribution-shift knob for the aux stream (0 = same distribution)
    aux_shift: float = 0.0

    def __post_init__(self):
        counts = (self.n_target_train_per_class, self.n_aux_per_class,
                  self.n_eval_per_class, self.n_attack_malware, self.n_benign_ingredients)
        if any(c <= 0 for c in counts):
            raise ValueError(f"all corpus counts must be positive, got {counts}")


@dataclass(frozen=True)
class BenignIngredients:
    strings: tuple[bytes, ...]
    section_datas: tuple[tuple[int, bytes], ...]
    whole_binaries: tuple[bytes, ...]
    import_entries: tuple[Import, ...]


@dataclass(frozen=True)
class CorpusSplits:
    target_train: tuple[tuple[str, int], ...]
    aux: tuple[tuple[str, int], ...]
    eval: tuple[tuple[str, int], ...]
    attack_train: tuple[tuple[str, int], ...]
    attack_test: tuple[tuple[str, int], ...]
    ingredient_paths: tuple[str, ...]
    attack_seed: int
    root: str


def _file_rng(cfg_seed: int, stream: int, label: int, index: int) -> np.random.Generator:
    return np.random.default_rng([cfg_seed, stream, label, index])


def _words(rng: np.random.Generator, count: int) -> list[bytes]:
    idx = rng.integers(0, len(lexicons.BENIGN_WORDS), size=count)
    return [lexicons.BENIGN_WORDS[i].encode() for i in idx]


def _benign_text(rng: np.random.Generator, size: int) -> bytes:
    """Low-entropy text-like bytes built from dictionary words."""
    parts: list[bytes] = []
    total = 0
    while total < size:
        w = _words(rng, 16)
        chunk = b" ".join(w) + b"\n"
        parts.append(chunk)
        total += len(chunk)
    return b"".join(parts)[:size]


def _structured_filler(rng: np.random.Generator, size: int) -> bytes:
    """Repetitive opcode-like filler with a small alphabet."""
    pattern = rng.integers(0, 48, size=max(4, size // 37 + 4), dtype=np.uint8)
    reps = size // pattern.size + 1
    return np.tile(pattern, reps).tobytes()[:size]


def _pick(rng: np.random.Generator, seq):
    return seq[int(rng.integers(0, len(seq)))]


def _benign_import_set(rng: np.random.Generator, n_libs: int,
                       suspicious_prob: float) -> list[Import]:
    libs = rng.permutation(len(lexicons.BENIGN_IMPORTS))[:n_libs]
    imports = []
    for li in libs:
        name, pool = lexicons.BENIGN_IMPORTS[int(li)]
        k = int(rng.integers(1, len(pool) + 1))
        syms = tuple(pool[int(i)] for i in rng.permutation(len(pool))[:k])
        imports.append(Import(name, syms))
    if rng.random() < suspicious_prob:
        name, pool = _pick(rng, lexicons.SUSPICIOUS_IMPORTS)
        imports.append(Import(name, (pool[0],)))
    return imports


def gen_binary(label: int, rng_seed: int, cfg: CorpusConfig,
               stream: int = _STREAM_CORPUS) -> ToyBinary:
    """Deterministically generate one valid binary of the requested class."""
    rng = _file_rng(cfg.seed, stream, label, rng_seed)
    if rng.random() < cfg.riskware_prob:
        b = _gen_riskware(rng, cfg, label)
    elif label == BENIGN:
        b = _gen_benign(rng, cfg)
    else:
        b = _gen_malicious(rng, cfg)
    return tbf.fix_checksum(b)


def _shifted(cfg: CorpusConfig) -> CorpusConfig:
    """Config for the aux stream when the distribution-shift knob is nonzero."""
    if cfg.aux_shift == 0.0:
        return cfg

    def clip(p: float) -> float:
        return float(min(1.0, max(0.0, p + cfg.aux_shift)))

    return replace(cfg,
                   packed_prob_malicious=clip(cfg.packed_prob_malicious),
                   packed_prob_benign=clip(cfg.packed_prob_benign),
                   benign_string_overlap=clip(cfg.benign_string_overlap),
                   suspicious_import_prob_benign=clip(cfg.suspicious_import_prob_benign))


def _gen_benign(rng: np.random.Generator, cfg: CorpusConfig) -> ToyBinary:
    lo, hi = cfg.benign_payload_range
    payload_size = int(rng.integers(lo, hi + 1))
    # text-heavy payload with a structured prologue keeps entropy ~4 bits
    prologue = _structured_filler(rng, payload_size // 4)
    payload_data = (prologue + _benign_text(rng, payload_size - len(prologue)))[:payload_size]
    if rng.random() < cfg.benign_gray_prob:
        # embedded compressed-looking blob of random size (packer stubs, media)
        lo_f, hi_f = cfg.benign_gray_entropy_range
        frac = rng.uniform(lo_f, hi_f)
        blob = rng.integers(0, 256, size=int(frac * payload_size), dtype=np.uint8).tobytes()
        start = int(rng.integers(0, max(1, payload_size - len(blob))))
        payload_data = (payload_data[:start] + blob
                        + payload_data[start + len(blob):])[:payload_size]

    packed = rng.random() < cfg.packed_prob_benign
    stored_payload = tbf.rle_encode(payload_data) if packed else payload_data

    payload_name = _pick(rng, ("text", "init", "sdata", "cfg"))
    sections = [Section(payload_name, tbf.SEC_EXEC,
                        len(stored_payload) + int(rng.integers(64, 513)), stored_payload)]

    strings_data = b"\x00".join(_words(rng, int(rng.integers(24, 80))))
    sections.append(Section(_pick(rng, ("data", "rsrc", "didat")), tbf.SEC_DATA,
                            len(strings_data) + int(rng.integers(64, 513)), strings_data))
    if rng.random() < 0.5:
        extra = _structured_filler(rng, int(rng.integers(256, 1025)))
        sections.append(Section(_pick(rng, ("rodata", "reloc", "ndata", "tls")), tbf.SEC_DATA,
                                len(extra) + int(rng.integers(0, 257)), extra))

    imports = _benign_import_set(rng, int(rng.integers(2, 5)),
                                 cfg.suspicious_import_prob_benign)
    os_major, os_minor = _pick(rng, ((5, 1), (6, 0), (6, 1), (6, 2), (10, 0)))
    overlay = _benign_text(rng, int(rng.integers(32, 257))) if rng.random() < 0.3 else b""
    return ToyBinary(
        version=int(rng.integers(1, 41)),
        machine_type=int(rng.integers(0, 4)),
        timestamp=int(rng.integers(PLAUSIBLE_GEN_LO, PLAUSIBLE_GEN_HI)),
        checksum=0,
        os_major=os_major,
        os_minor=os_minor,
        debug_blob=b"pdb:" + bytes(_pick(rng, lexicons.BENIGN_WORDS), "ascii")
                   + bytes(rng.integers(32, 127, size=int(rng.integers(8, 49)), dtype=np.uint8)),
        packed=packed,
        sections=tuple(sections),
        imports=tuple(imports),
        overlay=overlay,
    )


def _gen_malicious(rng: np.random.Generator, cfg: CorpusConfig) -> ToyBinary:
    lo, hi = cfg.mal_payload_range
    payload_size = int(rng.integers(lo, hi + 1))
    payload = bytearray(rng.integers(0, 256, size=payload_size, dtype=np.uint8).tobytes())

    marker_hi = max(cfg.marker_min, cfg.marker_max)
    n_markers = int(rng.integers(cfg.marker_min, marker_hi + 1))
    marker_ids = rng.permutation(len(lexicons.MARKERS))[:n_markers]
    slots = rng.permutation(max(1, payload_size // 8 - 1))[:n_markers]
    for mid, slot in zip(marker_ids, slots):
        off = int(slot) * 8
        payload[off:off + 8] = lexicons.MARKERS[int(mid)]
    if rng.random() < cfg.benign_string_overlap:
        words = b" ".join(_words(rng, 6))
        off = int(rng.integers(0, max(1, payload_size - len(words))))
        payload[off:off + len(words)] = words[:payload_size - off]
    payload_data = bytes(payload)

    packed = rng.random() < cfg.packed_prob_malicious
    stored_payload = tbf.rle_encode(payload_data) if packed else payload_data

    name_pool = lexicons.SHADY_SECTION_NAMES
    sections = [Section(_pick(rng, name_pool), tbf.SEC_EXEC,
                        len(stored_payload) + int(rng.integers(0, 129)), stored_payload)]
    blob = rng.integers(0, 256, size=int(rng.integers(256, 2049)), dtype=np.uint8).tobytes()
    sections.append(Section(_pick(rng, name_pool), tbf.SEC_DATA,
                            len(blob) + int(rng.integers(64, 513)), blob))
    if rng.random() < 0.4:
        blob2 = rng.integers(0, 256, size=int(rng.integers(128, 1025)), dtype=np.uint8).tobytes()
        sections.append(Section(_pick(rng, name_pool), tbf.SEC_DATA,
                                len(blob2) + int(rng.integers(0, 129)), blob2))

    n_susp = int(rng.integers(1, 3))
    susp = rng.permutation(len(lexicons.SUSPICIOUS_IMPORTS))[:n_susp]
    imports = []
    for si in susp:
        name, pool = lexicons.SUSPICIOUS_IMPORTS[int(si)]
        k = int(rng.integers(1, len(pool) + 1))
        imports.append(Import(name, tuple(pool[:k])))
    n_ben = int(rng.integers(0, 3))
    for imp in _benign_import_set(rng, n_ben, 0.0):
        imports.append(imp)

    return ToyBinary(
        version=int(rng.integers(0, 1 << 16)),
        machine_type=int(rng.integers(0, 4)),
        timestamp=int(rng.integers(1, 1 << 32)),
        checksum=0,
        os_major=int(rng.integers(0, 256)),
        os_minor=int(rng.integers(0, 256)),
        debug_blob=rng.integers(0, 256, size=int(rng.integers(16, 65)), dtype=np.uint8).tobytes(),
        packed=packed,
        sections=tuple(sections),
        imports=tuple(imports),
        overlay=rng.integers(0, 256, size=int(rng.integers(32, 513)), dtype=np.uint8).tobytes()
                if rng.random() < 0.2 else b"",
    )


def _gen_riskware(rng: np.random.Generator, cfg: CorpusConfig, label: int) -> ToyBinary:
    """Shared gray-zone template graded by a suspiciousness scalar u.

    Both classes draw from it with overlapping u-ranges, so in the overlap
    band no feature combination resolves the label deterministically.
    """
    lo_u, hi_u = (cfg.riskware_benign_u if label == BENIGN else cfg.riskware_malicious_u)
    u = float(rng.uniform(lo_u, hi_u))

    size_lo = cfg.benign_payload_range[0]
    size_hi = cfg.mal_payload_range[1]
    payload_size = int(size_lo + u * (size_hi - size_lo) * rng.uniform(0.6, 1.0))

    text = _benign_text(rng, payload_size)
    noise = rng.integers(0, 256, size=payload_size, dtype=np.uint8).tobytes()
    cut = int((1.0 - 0.9 * u) * payload_size)
    start = int(rng.integers(0, max(1, payload_size - cut)))
    payload = bytearray(noise)
    payload[start:start + cut] = text[:cut]
    payload = payload[:payload_size]

    if label == MALICIOUS:
        n_markers = 1 + int(rng.binomial(3, 0.6 * u))
    else:
        n_markers = int(rng.binomial(2, max(0.0, u - 0.2)))
    for mid in rng.permutation(len(lexicons.MARKERS))[:n_markers]:
        off = int(rng.integers(0, max(1, payload_size - 8)))
        payload[off:off + 8] = lexicons.MARKERS[int(mid)]
    payload_data = bytes(payload)

    packed_prob = cfg.packed_prob_benign if label == BENIGN else cfg.packed_prob_malicious
    packed = rng.random() < packed_prob
    stored_payload = tbf.rle_encode(payload_data) if packed else payload_data

    shady = rng.random() < 0.5 * u
    name_pool = lexicons.SHADY_SECTION_NAMES if shady else ("text", "init", "sdata", "cfg")
    sections = [Section(_pick(rng, name_pool), tbf.SEC_EXEC,
                        len(stored_payload) + int(rng.integers(32, 257)), stored_payload)]
    n_words = int((1.0 - 0.8 * u) * rng.integers(24, 80)) + 4
    strings_data = b"\x00".join(_words(rng, n_words))
    sections.append(Section(_pick(rng, ("data", "rsrc", "didat")), tbf.SEC_DATA,
                            len(strings_data) + int(rng.integers(64, 513)), strings_data))

    imports = _benign_import_set(rng, int(rng.integers(1, 4)), 0.0)
    n_susp = (1 if label == MALICIOUS else 0) + int(rng.random() < 0.6 * u)
    susp_ids = rng.permutation(len(lexicons.SUSPICIOUS_IMPORTS))[:n_susp]
    for si in susp_ids:
        name, pool = lexicons.SUSPICIOUS_IMPORTS[int(si)]
        k = int(rng.integers(1, len(pool) + 1))
        imports.append(Import(name, tuple(pool[:k])))

    if label == BENIGN:
        timestamp = int(rng.integers(PLAUSIBLE_GEN_LO, PLAUSIBLE_GEN_HI))
        os_major, os_minor = _pick(rng, ((5, 1), (6, 0), (6, 1), (6, 2), (10, 0)))
        version = int(rng.integers(1, 41))
    else:
        timestamp = int(rng.integers(1, 1 << 32))
        if rng.random() < 1.0 - u:
            os_major, os_minor = _pick(rng, ((5, 1), (6, 0), (6, 1), (6, 2), (10, 0)))
            version = int(rng.integers(1, 41))
        else:
            os_major, os_minor = int(rng.integers(0, 256)), int(rng.integers(0, 256))
            version = int(rng.integers(0, 1 << 16))

    return ToyBinary(
        version=version,
        machine_type=int(rng.integers(0, 4)),
        timestamp=timestamp,
        checksum=0,
        os_major=os_major,
        os_minor=os_minor,
        debug_blob=rng.integers(32, 127, size=int(rng.integers(16, 65)),
                                dtype=np.uint8).tobytes(),
        packed=packed,
        sections=tuple(sections),
        imports=tuple(imports),
        overlay=b"",
    )


# --- corpus materialization -----------------------------------------------------


def _write(path: Path, data: bytes) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def build_corpus(cfg: CorpusConfig, out_dir: str | Path) -> CorpusSplits:
    """Write all .tef files plus manifest and attack splits; returns seed-0 splits."""
    root = Path(out_dir)
    records: list[dict] = []

    def emit(split: str, label: int, count: int, start: int,
             stream: int = _STREAM_CORPUS, gen_cfg: CorpusConfig | None = None):
        cls = "benign" if label == BENIGN else "malicious"
        out = []
        for i in range(count):
            idx = start + i
            b = gen_binary(label, idx, gen_cfg or cfg, stream=stream)
            rel = f"{split}/{cls}_{idx:06d}.tef"
            _write(root / rel, tbf.serialize(b))
            rec = {"path": rel, "label": label, "class_seed": idx, "split": split}
            records.append(rec)
            out.append((rel, label))
        return out

    target_train = (emit("target_train", BENIGN, cfg.n_target_train_per_class, 0)
                    + emit("target_train", MALICIOUS, cfg.n_target_train_per_class, 0))
    aux_start = cfg.n_target_train_per_class
    aux_cfg = _shifted(cfg)
    aux = (emit("aux", BENIGN, cfg.n_aux_per_class, aux_start, gen_cfg=aux_cfg)
           + emit("aux", MALICIOUS, cfg.n_aux_per_class, aux_start, gen_cfg=aux_cfg))
    eval_start = aux_start + cfg.n_aux_per_class
    eval_split = (emit("eval", BENIGN, cfg.n_eval_per_class, eval_start)
                  + emit("eval", MALICIOUS, cfg.n_eval_per_class, eval_start))
    attack_start = eval_start + cfg.n_eval_per_class
    attack = emit("attack", MALICIOUS, cfg.n_attack_malware, attack_start)
    ingredients = emit("ingredients", BENIGN, cfg.n_benign_ingredients, 0,
                       stream=_STREAM_INGREDIENTS)

    manifest = root / "manifest.jsonl"
    with manifest.open("w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")

    splits_by_seed = {}
    n_train = int(round(cfg.attack_train_fraction * cfg.n_attack_malware))
    for s in cfg.attack_split_seeds:
        perm = np.random.default_rng([cfg.seed, _STREAM_ATTACK_SPLIT, s]).permutation(
            cfg.n_attack_malware)
        train = [attack[i][0] for i in perm[:n_train]]
        test = [attack[i][0] for i in perm[n_train:]]
        splits_by_seed[str(s)] = {"train": train, "test": test}
    with (root / "attack_splits.json").open("w") as f:
        json.dump(splits_by_seed, f, sort_keys=True, indent=1)

    meta = {"config": asdict(cfg), "counts": {
        "target_train": len(target_train), "aux": len(aux), "eval": len(eval_split),
        "attack": len(attack), "ingredients": len(ingredients)}}
    with (root / "corpus.json").open("w") as f:
        json.dump(meta, f, sort_keys=True, indent=1)

    return load_splits(root, attack_seed=cfg.attack_split_seeds[0])


def load_splits(root: str | Path, attack_seed: int = 0) -> CorpusSplits:
    root = Path(root)
    manifest = root / "manifest.jsonl"
    if not manifest.exists():
        raise IoFailure(f"no manifest at {manifest}")
    by_split: dict[str, list[tuple[str, int]]] = {}
    for line in manifest.read_text().splitlines():
        rec = json.loads(line)
        by_split.setdefault(rec["split"], []).append((rec["path"], rec["label"]))
    with (root / "attack_splits.json").open() as f:
        attack_splits = json.load(f)
    key = str(attack_seed)
    if key not in attack_splits:
        raise IoFailure(f"attack split for seed {attack_seed} not materialized")
    return CorpusSplits(
        target_train=tuple(by_split.get("target_train", ())),
        aux=tuple(by_split.get("aux", ())),
        eval=tuple(by_split.get("eval", ())),
        attack_train=tuple((p, MALICIOUS) for p in attack_splits[key]["train"]),
        attack_test=tuple((p, MALICIOUS) for p in attack_splits[key]["test"]),
        ingredient_paths=tuple(p for p, _ in by_split.get("ingredients", ())),
        attack_seed=attack_seed,
        root=str(root),
    )


def gen_fresh_benign(cfg: CorpusConfig, count: int, offset: int = 0) -> list[ToyBinary]:
    """Benign samples from a stream disjoint from every corpus split."""
    return [gen_binary(BENIGN, offset + i, cfg, stream=_STREAM_FRESH) for i in range(count)]


# --- ingredients ------------------------------------------------------------------


def extract_strings(data: bytes, min_len: int = MIN_STRING_LEN) -> list[bytes]:
    """Printable-ASCII runs of at least min_len bytes."""
    if not data:
        return []
    arr = np.frombuffer(data, dtype=np.uint8)
    printable = (arr >= 0x20) & (arr <= 0x7E)
    padded = np.concatenate(([False], printable, [False]))
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    starts, ends = edges[0::2], edges[1::2]
    return [data[s:e] for s, e in zip(starts, ends) if e - s >= min_len]


def extract_ingredients(benign_paths: list[str | Path]) -> BenignIngredients:
    """Pool strings, section blobs, imports, and whole files from benign binaries."""
    strings: list[bytes] = []
    payload_blobs: list[tuple[int, bytes]] = []
    other_blobs: list[tuple[int, bytes]] = []
    whole: list[bytes] = []
    imports: list[Import] = []
    seen_libs: set[str] = set()
    for p in benign_paths:
        try:
            raw = Path(p).read_bytes()
            b = tbf.parse(raw)
        except Exception:
            continue
        whole.append(raw)
        for s in b.sections:
            if s.data:
                (payload_blobs if s.is_exec else other_blobs).append((s.flags, s.data))
            strings.extend(extract_strings(s.data))
        strings.extend(extract_strings(b.overlay))
        for imp in b.imports:
            if imp.library not in seen_libs and imp.library in lexicons.BENIGN_LIB_NAMES:
                seen_libs.add(imp.library)
                imports.append(imp)
    section_datas = payload_blobs + other_blobs
    if not (strings and section_datas and whole and imports):
        raise NoUsableIngredients(
            f"strings={len(strings)} sections={len(section_datas)} "
            f"binaries={len(whole)} imports={len(imports)}")
    return BenignIngredients(tuple(strings), tuple(section_datas), tuple(whole), tuple(imports))


def load_ingredients(splits: CorpusSplits) -> BenignIngredients:
    root = Path(splits.root)
    return extract_ingredients([root / p for p in splits.ingredient_paths])
