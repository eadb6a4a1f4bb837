"""Episodic mutation environment: functionality-preserving actions against a
hard-label detector, with (observation, label) capture for surrogate training.

Every failure mode of an action degrades to a no-op (the input binary is
returned unchanged) so rollouts never crash; the agent has to learn which
actions are useful instead.
"""

from __future__ import annotations

import enum
import logging
import struct
import threading
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import tbf
from .corpus import BenignIngredients
from .errors import (
    AlreadyPacked,
    EpisodeFinished,
    InvariantViolation,
    MalformedInput,
    NotPacked,
    TefbenchError,
    UnpackFailure,
)
from .features import extract_features
from .lexicons import BENIGN_SECTION_NAMES
from .models.detector import Detector
from .tbf import Import, Section, ToyBinary

log = logging.getLogger("tefbench.env")

EVASION_REWARD = 10.0
DEFAULT_MAX_TURNS = 15
MAX_CAVE_FILL = 256


class ActionId(enum.IntEnum):
    pad_overlay = 0
    append_benign_data_overlay = 1
    append_benign_binary_overlay = 2
    add_bytes_to_section_cave = 3
    add_section_strings = 4
    add_section_benign_data = 5
    add_strings_to_overlay = 6
    add_imports = 7
    rename_section = 8
    remove_debug = 9
    modify_optional_header = 10
    modify_timestamp = 11
    break_checksum = 12
    toy_pack_toggle = 13


N_ACTIONS = len(ActionId)
ACTION_NAMES = tuple(a.name for a in ActionId)


def _choice(rng: np.random.Generator, seq):
    return seq[int(rng.integers(0, len(seq)))]


def _rand_bytes(rng: np.random.Generator, n: int) -> bytes:
    return rng.integers(0, 256, size=n, dtype=np.uint8).tobytes()


def _concat_strings(rng: np.random.Generator, ing: BenignIngredients) -> bytes:
    k = int(rng.integers(8, 33))
    picks = [_choice(rng, ing.strings) for _ in range(k)]
    return b"\x00".join(picks)


def _header_fields(raw: bytes) -> tuple[int, int, int, int]:
    """(version, timestamp, os_major, os_minor) straight from serialized bytes."""
    version = struct.unpack_from("<H", raw, 4)[0]
    timestamp = struct.unpack_from("<I", raw, 8)[0]
    return version, timestamp, raw[16], raw[17]


def _add_section(b: ToyBinary, name: str, data: bytes) -> ToyBinary:
    if len(b.sections) >= tbf.MAX_SECTIONS or len(data) > tbf.MAX_ALLOC:
        return b
    sec = Section(name, tbf.SEC_DATA, len(data), data)
    return replace(b, sections=b.sections + (sec,))


def apply_action(b: ToyBinary, a: ActionId, ing: BenignIngredients,
                 rng: np.random.Generator) -> ToyBinary:
    """Pure transition function; output is always valid and digest-preserving."""
    a = ActionId(a)
    out = b
    try:
        if a == ActionId.pad_overlay:
            n = int(rng.integers(512, 4097))
            out = replace(b, overlay=b.overlay + _rand_bytes(rng, n))
        elif a == ActionId.append_benign_data_overlay:
            _, data = _choice(rng, ing.section_datas)
            out = replace(b, overlay=b.overlay + data)
        elif a == ActionId.append_benign_binary_overlay:
            out = replace(b, overlay=b.overlay + _choice(rng, ing.whole_binaries))
        elif a == ActionId.add_bytes_to_section_cave:
            # payload is excluded: its bytes are covered by the digest
            caves = [(i, s.cave) for i, s in enumerate(b.sections)
                     if not s.is_exec and s.cave > 0]
            if caves:
                idx = max(caves, key=lambda t: t[1])[0]
                sec = b.sections[idx]
                fill = _rand_bytes(rng, min(MAX_CAVE_FILL, sec.cave))
                sections = list(b.sections)
                sections[idx] = replace(sec, data=sec.data + fill)
                out = replace(b, sections=tuple(sections))
        elif a == ActionId.add_section_strings:
            out = _add_section(b, _choice(rng, BENIGN_SECTION_NAMES),
                               _concat_strings(rng, ing))
        elif a == ActionId.add_section_benign_data:
            _, data = _choice(rng, ing.section_datas)
            out = _add_section(b, _choice(rng, BENIGN_SECTION_NAMES), data)
        elif a == ActionId.add_strings_to_overlay:
            out = replace(b, overlay=b.overlay + _concat_strings(rng, ing))
        elif a == ActionId.add_imports:
            present = {imp.library for imp in b.imports}
            unused = [imp for imp in ing.import_entries if imp.library not in present]
            if unused and len(b.imports) < tbf.MAX_IMPORTS:
                new = _choice(rng, unused)
                out = replace(b, imports=b.imports + (Import(new.library, new.symbols),))
        elif a == ActionId.rename_section:
            idx = int(rng.integers(0, len(b.sections)))
            current = b.sections[idx].name
            pool = [n for n in BENIGN_SECTION_NAMES if n != current]
            sections = list(b.sections)
            sections[idx] = replace(sections[idx], name=_choice(rng, pool))
            out = replace(b, sections=tuple(sections))
        elif a == ActionId.remove_debug:
            if b.debug_present:
                out = replace(b, debug_blob=None)
        elif a == ActionId.modify_optional_header:
            version, _, os_major, os_minor = _header_fields(_choice(rng, ing.whole_binaries))
            out = replace(b, version=version, os_major=os_major, os_minor=os_minor)
        elif a == ActionId.modify_timestamp:
            _, timestamp, _, _ = _header_fields(_choice(rng, ing.whole_binaries))
            out = replace(b, timestamp=timestamp)
        elif a == ActionId.break_checksum:
            return replace(b, checksum=(b.checksum + 1) & 0xFFFFFFFF)
        elif a == ActionId.toy_pack_toggle:
            out = tbf.unpack(b) if b.packed else tbf.pack(b)
    except (InvariantViolation, AlreadyPacked, NotPacked, UnpackFailure) as e:
        log.debug("action %s degraded to no-op: %s", a.name, e)
        return b
    if out is b:
        return b
    return tbf.fix_checksum(out)


@dataclass
class StepRecord:
    observation: np.ndarray
    action: ActionId
    reward: float
    done: bool
    label: int


@dataclass
class EpisodeState:
    working: ToyBinary
    turn: int
    initial_digest: int
    evaded: bool
    exhausted: bool
    skipped: bool

    @property
    def done(self) -> bool:
        return self.evaded or self.exhausted or self.skipped


class StepLogger:
    """Per-step episode log; one JSON-lines record per environment step."""

    def __init__(self):
        self.records: list[dict] = []
        self._episode = -1

    def on_reset(self) -> None:
        self._episode += 1

    def on_step(self, turn: int, action: "ActionId", reward: float,
                label: int, done: bool) -> None:
        self.records.append({
            "episode_id": self._episode,
            "turn": turn,
            "action": ActionId(action).name,
            "reward": reward,
            "label": int(label),
            "done": bool(done),
        })

    def save(self, path) -> None:
        import json
        with open(path, "w") as f:
            for rec in self.records:
                f.write(json.dumps(rec, sort_keys=True) + "\n")


class CaptureBuffer:
    """Thread-safe (observation, hard label) accumulator; this is D_sur."""

    def __init__(self):
        self._obs: list[np.ndarray] = []
        self._labels: list[int] = []
        self._lock = threading.Lock()

    def add(self, obs: np.ndarray, label: int) -> None:
        with self._lock:
            self._obs.append(obs)
            self._labels.append(int(label))

    def __len__(self) -> int:
        return len(self._obs)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        if not self._obs:
            return np.zeros((0, 128)), np.zeros(0, dtype=np.int64)
        return np.stack(self._obs), np.array(self._labels, dtype=np.int64)

    def save(self, path) -> None:
        from .features import save_matrix
        X, y = self.arrays()
        save_matrix(path, X, y)


class MutationEnv:
    """One working binary at a time; queries the detector once per reset/step."""

    def __init__(self, detector: Detector, ingredients: BenignIngredients,
                 max_turns: int = DEFAULT_MAX_TURNS, seed: int = 0,
                 capture: CaptureBuffer | None = None, check_invariants: bool = True,
                 step_logger: StepLogger | None = None):
        self.detector = detector
        self.ingredients = ingredients
        self.max_turns = max_turns
        self.capture = capture
        self.check_invariants = check_invariants
        self.step_logger = step_logger
        self._rng = np.random.default_rng([seed, 0xE17])
        self.state: EpisodeState | None = None
        self._obs: np.ndarray | None = None

    def reset(self, source: str | Path | bytes | ToyBinary) -> tuple[np.ndarray, bool]:
        """Load a binary and scan it once; undetected inputs mark the episode skipped."""
        try:
            if isinstance(source, ToyBinary):
                b = source
            else:
                raw = Path(source).read_bytes() if not isinstance(source, bytes) else source
                b = tbf.parse(raw)
            report = tbf.validate(b)
            if not report.valid:
                raise MalformedInput(f"invalid input binary: {report.hard_errors[0]}")
            digest = tbf.functional_digest(b).value
        except MalformedInput:
            raise
        except (TefbenchError, OSError) as e:
            raise MalformedInput(str(e)) from e
        obs = extract_features(b)
        label = self.detector.label(obs)
        if self.capture is not None:
            self.capture.add(obs, label)
        if self.step_logger is not None:
            self.step_logger.on_reset()
        self.state = EpisodeState(working=b, turn=0, initial_digest=digest,
                                  evaded=False, exhausted=False, skipped=(label == 0))
        self._obs = obs
        return obs, label == 1

    @property
    def observation(self) -> np.ndarray:
        if self._obs is None:
            raise EpisodeFinished("environment not reset")
        return self._obs

    def step(self, action: ActionId) -> StepRecord:
        st = self.state
        if st is None or st.done:
            raise EpisodeFinished("episode is not active")
        working = apply_action(st.working, action, self.ingredients, self._rng)
        if self.check_invariants:
            report = tbf.validate(working)
            if not report.valid:
                raise InvariantViolation(
                    f"action {ActionId(action).name} broke validity: {report.hard_errors[0]}")
            digest = tbf.functional_digest(working).value
            if digest != st.initial_digest:
                raise InvariantViolation(
                    f"action {ActionId(action).name} changed the functional digest")
        obs = extract_features(working)
        label = self.detector.label(obs)
        if self.capture is not None:
            self.capture.add(obs, label)
        st.working = working
        st.turn += 1
        st.evaded = label == 0
        st.exhausted = not st.evaded and st.turn >= self.max_turns
        reward = EVASION_REWARD if st.evaded else 0.0
        self._obs = obs
        if self.step_logger is not None:
            self.step_logger.on_step(st.turn, action, reward, label, st.done)
        return StepRecord(observation=obs, action=ActionId(action), reward=reward,
                          done=st.done, label=label)
