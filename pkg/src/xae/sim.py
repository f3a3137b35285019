"""Scripted multi-party conversation loop around an addressee estimator.

A script is a list of perception events.  The controller keeps a robot-centric
spatial memory, asks the estimator who each finished utterance was addressed
to, resolves the estimate against memory (exploring an empty bin when needed)
and switches between listening and speaking.  Every processed event yields
one transcript record; transcripts are JSON lines and fully deterministic.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .models import AddresseeLabel

BINS = ("LEFT", "FRONT", "RIGHT")
HAPPY_CONFIDENCE = 0.8


class SimulationError(ValueError):
    """Malformed script or an event that is inconsistent with the current memory."""


class Role(str, Enum):
    SPEAKER = "SPEAKER"
    LISTENER = "LISTENER"
    ADDRESSEE = "ADDRESSEE"
    NONE = "NONE"


class Mode(str, Enum):
    LISTEN = "LISTEN"
    SPEAK = "SPEAK"
    EXPLORE = "EXPLORE"


class Correction(str, Enum):
    NONE = "NONE"
    INFERRED_ROBOT = "INFERRED_ROBOT"
    DISCOVERED_NEW = "DISCOVERED_NEW"


ROBOT = "ROBOT"
EVENT_KINDS = ("SOUND_DETECTED", "UTTERANCE_END", "PERSON_APPEARS", "PERSON_MOVES", "PERSON_HIDDEN")
# LED colour of the robot's own conversational role
ROLE_COLOR = {Role.SPEAKER: "green", Role.ADDRESSEE: "red", Role.LISTENER: "white", Role.NONE: "white"}


def _check_bin(b) -> str:
    if b not in BINS:
        raise SimulationError(f"bin must be one of {BINS}, got {b!r}")
    return b


# -- spatial memory ---------------------------------------------------------------------

@dataclass
class PersonEntry:
    bin: str
    role: Role = Role.NONE
    last_seen: int = 0

    def to_dict(self) -> dict:
        return {"bin": self.bin, "role": self.role.value, "last_seen": self.last_seen}


@dataclass
class SpatialMemory:
    """Person id -> (bin, role, last_seen), queryable by any of the three keys."""
    entries: dict = field(default_factory=dict)

    def __contains__(self, pid) -> bool:
        return pid in self.entries

    def get(self, pid) -> PersonEntry:
        if pid not in self.entries:
            raise SimulationError(f"unknown person {pid!r}")
        return self.entries[pid]

    def in_bin(self, b: str) -> list[str]:
        _check_bin(b)
        return sorted(p for p, e in self.entries.items() if e.bin == b)

    def with_role(self, role) -> list[str]:
        role = Role(role)
        return sorted(p for p, e in self.entries.items() if e.role == role)

    @property
    def speaker(self) -> str | None:
        s = self.with_role(Role.SPEAKER)
        return s[0] if s else None

    def set_speaker(self, pid: str) -> None:
        """Make ``pid`` the only speaker; everyone else present listens."""
        self.get(pid)
        for p, e in self.entries.items():
            e.role = Role.SPEAKER if p == pid else Role.LISTENER

    def reset_roles(self) -> None:
        for e in self.entries.values():
            e.role = Role.NONE

    def snapshot(self) -> dict:
        return {p: self.entries[p].to_dict() for p in sorted(self.entries)}


# -- events -----------------------------------------------------------------------------

@dataclass
class SimEvent:
    """One scripted perception event.

    ``data`` holds the kind-specific fields: ``direction`` for SOUND_DETECTED;
    ``speaker``, ``addressee`` and optional ``estimate``/``confidence``/``times``
    for UTTERANCE_END; ``id`` and ``bin`` for the PERSON_* kinds.  A
    PERSON_HIDDEN person is present but unseen until the robot explores that bin.
    """
    tick: int
    kind: str
    data: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise SimulationError(f"unknown event kind {self.kind!r}")
        need = {"SOUND_DETECTED": ("direction",), "UTTERANCE_END": ("speaker", "addressee"),
                "PERSON_APPEARS": ("id", "bin"), "PERSON_MOVES": ("id", "bin"),
                "PERSON_HIDDEN": ("id", "bin")}[self.kind]
        missing = [k for k in need if k not in self.data]
        if missing:
            raise SimulationError(f"tick {self.tick}: {self.kind} is missing {missing}")
        for key in ("direction", "bin"):
            if key in self.data:
                _check_bin(self.data[key])

    def to_dict(self) -> dict:
        return {"tick": self.tick, "kind": self.kind, **self.data}

    @classmethod
    def from_dict(cls, d: dict) -> "SimEvent":
        d = dict(d)
        try:
            tick, kind = int(d.pop("tick")), d.pop("kind")
        except (KeyError, TypeError, ValueError) as exc:
            raise SimulationError(f"event needs integer 'tick' and 'kind': {d}") from exc
        return cls(tick, kind, d)


def load_script(path) -> list[SimEvent]:
    events = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            events.append(SimEvent.from_dict(json.loads(line)))
        except json.JSONDecodeError as exc:
            raise SimulationError(f"{path}:{n}: invalid JSON ({exc.msg})") from exc
    return events


def save_script(path, events) -> None:
    Path(path).write_text("".join(json.dumps(e.to_dict(), sort_keys=True) + "\n" for e in events))


def validate_script(events) -> None:
    last = None
    for e in events:
        if last is not None and e.tick < last:
            raise SimulationError(f"ticks must be non-decreasing: {e.tick} after {last}")
        last = e.tick


# -- state and resolution ---------------------------------------------------------------

@dataclass
class RobotState:
    mode: Mode = Mode.LISTEN
    gaze_bin: str = "FRONT"
    role: Role = Role.LISTENER
    mouth: str = "neutral"

    @property
    def color(self) -> str:
        return ROLE_COLOR[self.role]

    def to_dict(self) -> dict:
        return {"mode": self.mode.value, "gaze_bin": self.gaze_bin, "color": self.color, "mouth": self.mouth}


@dataclass
class Resolution:
    estimated: AddresseeLabel
    confidence: float
    resolved: str                     # person id or ROBOT
    correction: Correction = Correction.NONE
    explored_bin: str | None = None
    explanation: object = None        # VerbalCue or None

    def to_dict(self) -> dict:
        return {"estimated": self.estimated.name, "confidence": round(float(self.confidence), 6),
                "resolved": self.resolved, "correction": self.correction.value,
                "explored_bin": self.explored_bin,
                "explanation": None if self.explanation is None else {
                    "region": self.explanation.region, "sentence": self.explanation.sentence,
                    "window_avg": round(float(self.explanation.window_avg), 6),
                    "threshold_used": round(float(self.explanation.threshold_used), 6)}}


def memory_update(memory: SpatialMemory, event: SimEvent, hidden: dict | None = None) -> SpatialMemory:
    """Apply a perception event to ``memory`` in place and return it.

    UTTERANCE_END registers the speaker; ``hidden`` collects PERSON_HIDDEN entries.
    """
    d = event.data
    if event.kind == "PERSON_APPEARS":
        if d["id"] in memory:
            e = memory.entries[d["id"]]
            e.bin, e.last_seen = d["bin"], event.tick
        else:
            memory.entries[d["id"]] = PersonEntry(d["bin"], Role.NONE, event.tick)
        if hidden is not None:
            hidden.pop(d["id"], None)
    elif event.kind == "PERSON_MOVES":
        if d["id"] not in memory:
            raise SimulationError(f"tick {event.tick}: PERSON_MOVES for unknown person {d['id']!r}")
        e = memory.entries[d["id"]]
        e.bin, e.last_seen = d["bin"], event.tick
    elif event.kind == "PERSON_HIDDEN":
        if hidden is not None:
            hidden[d["id"]] = d["bin"]
    elif event.kind == "UTTERANCE_END":
        if d["speaker"] not in memory:
            raise SimulationError(f"tick {event.tick}: speaker {d['speaker']!r} is not in spatial memory")
        memory.set_speaker(d["speaker"])
        memory.entries[d["speaker"]].last_seen = event.tick
    return memory


def resolve_addressee(estimated, confidence: float, memory: SpatialMemory, hidden: dict | None = None,
                      tick: int = 0, explanation=None) -> Resolution:
    """Map a robot-centric estimate onto a person, exploring an empty bin if needed.

    A person found in ``hidden`` during exploration is added to memory.
    """
    speaker = memory.speaker
    if speaker is None:
        raise SimulationError("cannot resolve an addressee without a registered speaker")
    est = AddresseeLabel.coerce(estimated)
    if est == AddresseeLabel.ROBOT:
        return Resolution(est, confidence, ROBOT, explanation=explanation)
    b = est.name
    occupants = [p for p in memory.in_bin(b) if p != speaker]
    if occupants:
        # most recently seen occupant; ties go to the smallest id
        pid = min(occupants, key=lambda p: (-memory.entries[p].last_seen, p))
        return Resolution(est, confidence, pid, explanation=explanation)
    found = sorted(p for p, hb in (hidden or {}).items() if hb == b)
    if found:
        pid = found[0]
        hidden.pop(pid)
        memory.entries[pid] = PersonEntry(b, Role.NONE, tick)
        return Resolution(est, confidence, pid, Correction.DISCOVERED_NEW, b, explanation)
    return Resolution(est, confidence, ROBOT, Correction.INFERRED_ROBOT, b, explanation)


# -- estimators -------------------------------------------------------------------------

class OracleStub:
    """Scripted estimator: the event's ``estimate`` if given, else the true addressee's bin.

    Optional ``confidence`` and ``times`` fields pass through; ``times`` yields a
    verbal cue with the run's threshold and window.
    """

    def estimate(self, event: SimEvent, memory: SpatialMemory, hidden: dict, config, rng):
        from .explain import verbal_cue
        d = event.data
        if "estimate" in d:
            est = AddresseeLabel.coerce(d["estimate"])
        else:
            est = _true_label(d["addressee"], memory, hidden)
        cue = None
        if "times" in d:
            c = np.asarray(d["times"], dtype=np.float64)
            cue = verbal_cue(c, config.cue_theta, min(config.cue_window, c.size))
        return est, float(d.get("confidence", 1.0)), cue


def _true_label(addressee: str, memory: SpatialMemory, hidden: dict) -> AddresseeLabel:
    if addressee == ROBOT:
        return AddresseeLabel.ROBOT
    b = memory.get(addressee).bin if addressee in memory else (hidden or {}).get(addressee)
    if b not in ("LEFT", "RIGHT"):
        raise SimulationError(f"addressee {addressee!r} must sit in the LEFT or RIGHT bin, found {b}")
    return AddresseeLabel[b]


BIN_DEG = {"LEFT": -35.0, "FRONT": 0.0, "RIGHT": 35.0}


class ModelEstimator:
    """Wraps a fitted AddresseeEstimator; renders a synthetic utterance for each event."""

    def __init__(self, model, synth_config=None):
        from .data import SynthConfig
        self.model = model
        self.synth = synth_config or SynthConfig(k=getattr(model, "n_frames_", 10))

    def estimate(self, event: SimEvent, memory: SpatialMemory, hidden: dict, config, rng):
        from .data import gaze_yaw, render_utterance, _person_pos, UtteranceSequence
        d = event.data
        spk_deg = BIN_DEG[memory.get(d["speaker"]).bin]
        if d["addressee"] == ROBOT:
            target = np.zeros(2)
        else:
            b = memory.get(d["addressee"]).bin if d["addressee"] in memory else hidden[d["addressee"]]
            target = _person_pos(BIN_DEG[b], self.synth.distance)
        yaw = gaze_yaw(_person_pos(spk_deg, self.synth.distance), target)
        _, faces, poses = render_utterance(spk_deg, yaw, (0.8, 0.6, 0.5), (0.2, 0.15, 0.1), (0.5, 0.5, 0.5),
                                           rng, self.synth)
        seq = UtteranceSequence(faces, poses, AddresseeLabel.ROBOT, "sim")
        bundle = self.model.explain([seq], theta=config.cue_theta, window=config.cue_window)[0]
        return bundle.prediction, bundle.confidence, bundle.cue


# -- episode loop -----------------------------------------------------------------------

def run_episode(script, model=None, config=None, seed: int = 0) -> list[dict]:
    """Replay ``script`` and return one transcript record per event.

    ``model`` is an object with ``estimate(event, memory, hidden, config, rng)``,
    a fitted AddresseeEstimator, or None for the oracle stub.
    """
    from .training import RunConfig
    config = config or RunConfig.tiny_xae()
    if model is None:
        model = OracleStub()
    elif not hasattr(model, "estimate"):
        model = ModelEstimator(model)
    events = [e if isinstance(e, SimEvent) else SimEvent.from_dict(e) for e in script]
    validate_script(events)
    rng = np.random.default_rng(seed)
    memory, hidden, state = SpatialMemory(), {}, RobotState()
    bus = deque(events)            # perception -> controller message queue
    transcript = []
    while bus:
        ev = bus.popleft()
        rec = {"tick": ev.tick, "event": ev.to_dict()}
        if ev.kind == "SOUND_DETECTED":
            memory.reset_roles()
            state.mode, state.gaze_bin, state.role = Mode.LISTEN, ev.data["direction"], Role.LISTENER
        elif ev.kind == "UTTERANCE_END":
            memory_update(memory, ev, hidden)
            est, conf, cue = model.estimate(ev, memory, hidden, config, rng)
            res = resolve_addressee(est, conf, memory, hidden, ev.tick, cue)
            if res.correction != Correction.NONE:
                transcript.append({"tick": ev.tick, "event": {"kind": "EXPLORE", "bin": res.explored_bin},
                                   "state": RobotState(Mode.EXPLORE, res.explored_bin, Role.LISTENER,
                                                       state.mouth).to_dict(),
                                   "memory": memory.snapshot()})
            state.mouth = "happy" if conf > HAPPY_CONFIDENCE else "neutral"
            if res.resolved == ROBOT:
                state.mode, state.role = Mode.SPEAK, Role.ADDRESSEE
                state.gaze_bin = memory.get(memory.speaker).bin
            else:
                memory.entries[res.resolved].role = Role.ADDRESSEE
                state.mode, state.role = Mode.LISTEN, Role.LISTENER
                state.gaze_bin = memory.get(memory.speaker).bin
            rec["resolution"] = res.to_dict()
        else:
            memory_update(memory, ev, hidden)
        rec["state"] = state.to_dict()
        rec["memory"] = memory.snapshot()
        transcript.append(rec)
    return transcript


def dump_transcript(records) -> str:
    return "".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n" for r in records)


def write_transcript(path, records) -> None:
    Path(path).write_text(dump_transcript(records))


def compare_transcript(records, golden_path) -> tuple[bool, str]:
    """Byte comparison against a golden file; returns (match, first differing line or '')."""
    got = dump_transcript(records)
    want = Path(golden_path).read_text()
    if got == want:
        return True, ""
    g, w = got.splitlines(), want.splitlines()
    for i in range(max(len(g), len(w))):
        a = g[i] if i < len(g) else "<missing>"
        b = w[i] if i < len(w) else "<missing>"
        if a != b:
            return False, f"line {i + 1}:\n  got:    {a}\n  golden: {b}"
    return False, "trailing bytes differ"
