"""Slot ontology, dialogue transcripts, and the fixed-size dialogue state memory.

The dialogue state is a fixed-size memory with one entry per ontology slot.
Unset slots hold ``None`` (rendered as the ``[NULL]`` token when the state is
serialized for the encoder). State transitions are expressed as per-slot
:class:`SlotDecision` values and applied with :func:`apply_decisions`; all
types are immutable, so they are safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Mapping, Sequence


def normalize_value(value: str) -> str:
    """Canonical form used for value comparison: lowercase, collapsed spaces."""
    return " ".join(value.split()).lower()


@dataclass(frozen=True)
class Ontology:
    """Fixed, ordered slot list plus the special values appended to the input.

    Slot index is a stable identity for the lifetime of a model; models and
    corpora are only compatible when their ontologies match exactly.
    """

    slots: tuple[str, ...]
    appendix_values: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.slots:
            raise ValueError("ontology needs at least one slot")
        if any(not s for s in self.slots):
            raise ValueError("slot names must be non-empty")
        if len(set(self.slots)) != len(self.slots):
            raise ValueError(f"duplicate slot name in {self.slots}")
        if len(set(self.appendix_values)) != len(self.appendix_values):
            raise ValueError(f"duplicate appendix value in {self.appendix_values}")

    @property
    def num_slots(self) -> int:
        return len(self.slots)

    @property
    def num_appendix(self) -> int:
        return len(self.appendix_values)

    def slot_index(self, name: str) -> int:
        return self.slots.index(name)


def new_ontology(slots: Sequence[str], appendix: Sequence[str] = ()) -> Ontology:
    """Build an ontology, preserving the given orderings exactly."""
    return Ontology(tuple(slots), tuple(appendix))


@dataclass(frozen=True)
class DialogueState:
    """Value per slot, in ontology order; ``None`` marks an unset slot."""

    values: tuple[str | None, ...]

    def __len__(self) -> int:
        return len(self.values)

    def get(self, slot: int) -> str | None:
        return self.values[slot]

    def replace(self, slot: int, value: str | None) -> "DialogueState":
        vals = list(self.values)
        vals[slot] = value
        return DialogueState(tuple(vals))

    def as_dict(self, ontology: Ontology) -> dict[str, str | None]:
        return dict(zip(ontology.slots, self.values))


def empty_state(ontology: Ontology) -> DialogueState:
    return DialogueState((None,) * ontology.num_slots)


def states_equal(a: DialogueState, b: DialogueState) -> bool:
    """Exact-match comparison after whitespace/case normalization.

    Raises ``ValueError`` when the states differ in size (ontology mismatch).
    """
    if len(a) != len(b):
        raise ValueError(f"state sizes differ: {len(a)} vs {len(b)}")
    for va, vb in zip(a.values, b.values):
        if (va is None) != (vb is None):
            return False
        if va is not None and normalize_value(va) != normalize_value(vb):
            return False
    return True


DecisionKind = Literal["update", "carryover", "corefer", "appendix", "no_op"]


@dataclass(frozen=True)
class SlotDecision:
    """Decoded per-slot action for one turn.

    ``update`` carries the extracted value plus its token range in the
    serialized input; ``corefer`` names the source slot whose previous value
    is copied; ``appendix`` carries one of the ontology's special values.
    ``carryover`` and ``no_op`` both leave the slot untouched (they are kept
    distinct because only carryover counts as a successful pointer hit).
    """

    kind: DecisionKind
    value: str | None = None
    source_slot: int | None = None
    start: int | None = None
    length: int | None = None

    @staticmethod
    def update(value: str, start: int, length: int) -> "SlotDecision":
        return SlotDecision("update", value=value, start=start, length=length)

    @staticmethod
    def carryover() -> "SlotDecision":
        return SlotDecision("carryover")

    @staticmethod
    def corefer(source_slot: int) -> "SlotDecision":
        return SlotDecision("corefer", source_slot=source_slot)

    @staticmethod
    def appendix(value: str) -> "SlotDecision":
        return SlotDecision("appendix", value=value)

    @staticmethod
    def no_op() -> "SlotDecision":
        return SlotDecision("no_op")


def apply_decisions(prev: DialogueState, decisions: Sequence[SlotDecision]) -> DialogueState:
    """Apply one decision per slot against the previous state.

    Coreference always reads the *previous* state, never the partially
    updated one, so the result is independent of slot processing order.
    """
    if len(decisions) != len(prev):
        raise ValueError(f"expected {len(prev)} decisions, got {len(decisions)}")
    new_values: list[str | None] = []
    for n, dec in enumerate(decisions):
        if dec.kind == "update":
            new_values.append(dec.value)
        elif dec.kind == "appendix":
            new_values.append(dec.value)
        elif dec.kind == "corefer":
            if dec.source_slot is None or not (0 <= dec.source_slot < len(prev)):
                raise ValueError(f"corefer target {dec.source_slot} out of range for slot {n}")
            new_values.append(prev.get(dec.source_slot))
        elif dec.kind in ("carryover", "no_op"):
            new_values.append(prev.get(n))
        else:  # pragma: no cover - dataclass restricts kinds
            raise ValueError(f"unknown decision kind {dec.kind!r}")
    return DialogueState(tuple(new_values))


@dataclass(frozen=True)
class SpanAnnotation:
    """Token span of a value mention inside one side of a turn.

    ``start``/``length`` are offsets into the tokenized utterance of the
    given side; ``value`` must equal the covered tokens joined with single
    spaces.
    """

    slot: int
    side: Literal["system", "user"]
    start: int
    length: int
    value: str


@dataclass(frozen=True)
class Turn:
    """One system/user exchange; ``coref`` marks slot -> source-slot by name."""

    system: str
    user: str
    coref: Mapping[str, str] = field(default_factory=dict)


@dataclass
class Dialogue:
    """Turns with aligned per-turn gold states and span annotations."""

    dialogue_id: str
    turns: list[Turn]
    states: list[DialogueState]
    spans: list[list[SpanAnnotation]]

    def __post_init__(self):
        if len(self.states) != len(self.turns):
            raise ValueError(
                f"dialogue {self.dialogue_id}: {len(self.turns)} turns but "
                f"{len(self.states)} gold states"
            )
        if len(self.spans) != len(self.turns):
            raise ValueError(
                f"dialogue {self.dialogue_id}: {len(self.turns)} turns but "
                f"{len(self.spans)} span lists"
            )

    @property
    def num_turns(self) -> int:
        return len(self.turns)
