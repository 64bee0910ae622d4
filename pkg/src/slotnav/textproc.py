"""Tokenization, vocabulary, encoder-input serialization, and gold labels.

The encoder input for one turn is a single token sequence::

    [CLS]  history... [SEP] system ; user [SEP]   [SLOT] name - value ...   [APPD] special ...
           <-------- dialogue content -------->   <--- state memory --->    <-- appendix -->

Every [SLOT] / [APPD] token is an anchor the per-slot pointer can hit.
:func:`build_gold_labels` derives the per-token IOB targets over the dialogue
content and the per-slot pointer targets from the gold state transition.
All functions are pure; randomized corruptions take an explicit numpy
``Generator``.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .schema import DialogueState, Ontology, SpanAnnotation, Turn, normalize_value

PAD = "[PAD]"
UNK = "[UNK]"
CLS = "[CLS]"
SEP = "[SEP]"
SLOT = "[SLOT]"
APPD = "[APPD]"
NULL = "[NULL]"
SEMI = ";"
DASH = "-"

RESERVED_TOKENS = (PAD, UNK, CLS, SEP, SLOT, APPD, NULL, SEMI, DASH)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")

O_LABEL = 0


def tokenize(text: str) -> list[str]:
    """Lowercase word-level tokenizer splitting on whitespace and punctuation.

    Space-joining the output yields the normalized text, so extracted values
    compare cleanly against normalized gold values.
    """
    return _TOKEN_RE.findall(text.lower())


def b_label(slot: int) -> int:
    return 1 + 2 * slot


def i_label(slot: int) -> int:
    return 2 + 2 * slot


def label_slot(label: int) -> int:
    """Slot index owning a -B or -I label."""
    return (label - 1) // 2


def num_iob_labels(num_slots: int) -> int:
    return 2 * num_slots + 1


UNK_ID = RESERVED_TOKENS.index(UNK)


class Vocab:
    """Token -> dense id map with the reserved specials at fixed leading ids."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[: len(RESERVED_TOKENS)]) != RESERVED_TOKENS:
            raise ValueError(f"vocab must start with the reserved tokens {RESERVED_TOKENS}")
        self.id_to_token: tuple[str, ...] = tuple(tokens)
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(tokens)}
        if len(self.token_to_id) != len(tokens):
            raise ValueError("duplicate token in vocab")
        self.unk_id = UNK_ID

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, self.unk_id)

    def lookup_all(self, tokens: Iterable[str]) -> tuple[int, ...]:
        get = self.token_to_id.get
        unk = self.unk_id
        return tuple(get(t, unk) for t in tokens)


def build_vocab(
    texts: Iterable[str],
    min_freq: int = 1,
    extra_tokens: Sequence[str] = (),
) -> Vocab:
    """Count tokens over ``texts`` and keep those with frequency >= min_freq.

    ``extra_tokens`` (slot names, appendix values) are always included since
    they appear in every serialized input regardless of corpus frequency.
    """
    counts: Counter[str] = Counter()
    saw_text = False
    for text in texts:
        saw_text = True
        counts.update(tokenize(text))
    if not saw_text:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    tokens = list(RESERVED_TOKENS)
    seen = set(tokens)
    for extra in extra_tokens:
        for tok in tokenize(extra):
            if tok not in seen:
                seen.add(tok)
                tokens.append(tok)
    for tok in sorted(counts):
        if counts[tok] >= min_freq and tok not in seen:
            seen.add(tok)
            tokens.append(tok)
    return Vocab(tokens)


@dataclass(frozen=True)
class SerializedInput:
    """One encoder input with its section index maps.

    ``dial_range`` is a half-open interval covering the dialogue content
    (history, separators, current turn). ``sys_positions``/``user_positions``
    map each token of the current turn's utterances to its absolute position
    in the sequence, with -1 for tokens lost to truncation.
    """

    tokens: tuple[str, ...]
    token_ids: tuple[int, ...]
    segment_ids: tuple[int, ...]
    dial_range: tuple[int, int]
    slot_anchors: tuple[int, ...]
    appd_anchors: tuple[int, ...]
    sys_positions: tuple[int, ...]
    user_positions: tuple[int, ...]
    history_length_used: int

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def dial_length(self) -> int:
        return self.dial_range[1] - self.dial_range[0]

    def in_dial_range(self, index: int) -> bool:
        return self.dial_range[0] <= index < self.dial_range[1]


def _slot_block(name: str, value: str | None) -> list[str]:
    block = [SLOT, *tokenize(name), DASH]
    block.extend([NULL] if value is None else tokenize(value))
    return block


def serialize_input(
    ontology: Ontology,
    prev_state: DialogueState,
    history: Sequence[Turn],
    system_utt: str,
    user_utt: str,
    vocab: Vocab,
    history_len: int = 1,
    max_len: int = 128,
    use_prev_state: bool = True,
    use_appendix: bool = True,
) -> SerializedInput:
    """Serialize one turn into the encoder input layout.

    Truncation drops history turns oldest-first, then cuts the dialogue
    content from the left; the state and appendix sections are never
    truncated (their presence is what the pointer navigates to).
    """
    if len(prev_state) != ontology.num_slots:
        raise ValueError("previous state does not match the ontology")
    if history_len < 0:
        raise ValueError("history length must be >= 0")

    slot_anchor_offsets: list[int] = []
    slot_tokens: list[str] = []
    if use_prev_state:
        for name, value in zip(ontology.slots, prev_state.values):
            slot_anchor_offsets.append(len(slot_tokens))
            slot_tokens.extend(_slot_block(name, value))

    appd_anchor_offsets: list[int] = []
    appd_tokens: list[str] = []
    if use_appendix:
        for value in ontology.appendix_values:
            appd_anchor_offsets.append(len(appd_tokens))
            appd_tokens.append(APPD)
            appd_tokens.extend(tokenize(value))

    fixed = 1 + len(slot_tokens) + len(appd_tokens)
    if fixed > max_len:
        raise ValueError(
            f"state+appendix sections need {fixed} tokens but max_len={max_len}"
        )
    budget = max_len - fixed

    sys_toks = tokenize(system_utt)
    user_toks = tokenize(user_utt)

    # (token, segment, side, side_offset): side is "s"/"u" for current-turn
    # utterance tokens, "" otherwise.
    def build_content(kept: int) -> list[tuple[str, int, str, int]]:
        content: list[tuple[str, int, str, int]] = []
        for turn in history[len(history) - kept:] if kept else []:
            for tok in tokenize(turn.system):
                content.append((tok, 0, "", -1))
            content.append((SEMI, 0, "", -1))
            for tok in tokenize(turn.user):
                content.append((tok, 0, "", -1))
        content.append((SEP, 1, "", -1))
        for i, tok in enumerate(sys_toks):
            content.append((tok, 1, "s", i))
        content.append((SEMI, 1, "", -1))
        for i, tok in enumerate(user_toks):
            content.append((tok, 1, "u", i))
        content.append((SEP, 1, "", -1))
        return content

    kept = min(history_len, len(history))
    content = build_content(kept)
    while len(content) > budget and kept > 0:
        kept -= 1
        content = build_content(kept)
    if len(content) > budget:
        content = content[len(content) - budget:]

    tokens: list[str] = [CLS]
    segments: list[int] = [1]
    sys_positions = [-1] * len(sys_toks)
    user_positions = [-1] * len(user_toks)
    for tok, seg, side, off in content:
        if side == "s":
            sys_positions[off] = len(tokens)
        elif side == "u":
            user_positions[off] = len(tokens)
        tokens.append(tok)
        segments.append(seg)
    dial_range = (1, len(tokens))

    base = len(tokens)
    tokens.extend(slot_tokens)
    segments.extend([1] * len(slot_tokens))
    slot_anchors = tuple(base + off for off in slot_anchor_offsets)

    base = len(tokens)
    tokens.extend(appd_tokens)
    segments.extend([1] * len(appd_tokens))
    appd_anchors = tuple(base + off for off in appd_anchor_offsets)

    return SerializedInput(
        tokens=tuple(tokens),
        token_ids=vocab.lookup_all(tokens),
        segment_ids=tuple(segments),
        dial_range=dial_range,
        slot_anchors=slot_anchors,
        appd_anchors=appd_anchors,
        sys_positions=tuple(sys_positions),
        user_positions=tuple(user_positions),
        history_length_used=kept,
    )


def reconstruct_turn(
    serialized: SerializedInput, ontology: Ontology
) -> tuple[str, str, DialogueState]:
    """Parse a (non-truncated) serialized input back into its parts.

    Inverse of :func:`serialize_input` up to text normalization. Assumes the
    current-turn utterances contain no ";" token, which is what makes the
    system/user boundary unambiguous.
    """
    tokens = serialized.tokens
    d0, d1 = serialized.dial_range
    dial = list(tokens[d0:d1])
    first_sep = dial.index(SEP)
    current = dial[first_sep + 1: -1]  # between the two [SEP]s
    semi = current.index(SEMI)
    system_utt = " ".join(current[:semi])
    user_utt = " ".join(current[semi + 1:])

    values: list[str | None] = []
    anchors = serialized.slot_anchors
    if anchors:
        state_end = serialized.appd_anchors[0] if serialized.appd_anchors else len(tokens)
        for n, anchor in enumerate(anchors):
            block_end = anchors[n + 1] if n + 1 < len(anchors) else state_end
            name_len = len(tokenize(ontology.slots[n]))
            value_toks = list(tokens[anchor + 1 + name_len + 1: block_end])
            if value_toks == [NULL]:
                values.append(None)
            else:
                values.append(" ".join(value_toks))
    else:
        values = [None] * ontology.num_slots
    return system_utt, user_utt, DialogueState(tuple(values))


@dataclass(frozen=True)
class GoldLabels:
    """Training targets for one serialized turn.

    ``iob``/``iob_mask`` run over the dialogue-content tokens only.
    ``value_position`` holds one absolute index per slot; ``resolvable``
    says whether that index is a real supervision target (it points at a
    -B token, a [SLOT] anchor, or an [APPD] anchor) or a placeholder.
    """

    iob: tuple[int, ...]
    iob_mask: tuple[bool, ...]
    value_position: tuple[int, ...]
    resolvable: tuple[bool, ...]


def _span_positions(serialized: SerializedInput, span: SpanAnnotation) -> list[int] | None:
    """Absolute positions of a span's tokens, or None if any were truncated."""
    side = serialized.sys_positions if span.side == "system" else serialized.user_positions
    if span.start < 0 or span.start + span.length > len(side):
        return None
    positions = list(side[span.start: span.start + span.length])
    if any(p < 0 for p in positions):
        return None
    return positions


def build_gold_labels(
    serialized: SerializedInput,
    spans: Sequence[SpanAnnotation],
    prev_gold: DialogueState,
    curr_gold: DialogueState,
    coref_marks: Mapping[int, int] | None = None,
) -> GoldLabels:
    """Derive IOB and pointer targets for one gold state transition.

    Pointer target precedence per slot: unchanged value -> own [SLOT] anchor;
    appendix value -> its [APPD] anchor; explicit coreference mark -> source
    anchor; value annotated in the surviving dialogue content -> the -B token
    of its rightmost occurrence; value equal to another slot's previous value
    -> that slot's anchor; otherwise unresolvable (placeholder target, masked
    out of the position loss).
    """
    coref_marks = coref_marks or {}
    num_slots = len(prev_gold)
    if len(curr_gold) != num_slots:
        raise ValueError("state sizes differ")

    d0, d1 = serialized.dial_range
    iob = [O_LABEL] * (d1 - d0)
    appd_values = _appendix_value_map(serialized)

    for span in spans:
        if not (0 <= span.slot < num_slots):
            raise ValueError(f"span references unknown slot {span.slot}")
        positions = _span_positions(serialized, span)
        if positions is None:
            continue
        iob[positions[0] - d0] = b_label(span.slot)
        for p in positions[1:]:
            iob[p - d0] = i_label(span.slot)

    anchors = serialized.slot_anchors
    fallback = anchors if anchors else (d0,) * num_slots

    value_position: list[int] = []
    resolvable: list[bool] = []
    for n in range(num_slots):
        prev_v, curr_v = prev_gold.get(n), curr_gold.get(n)
        target, ok = _position_target(
            serialized, spans, n, prev_v, curr_v, prev_gold,
            coref_marks, appd_values, fallback,
        )
        value_position.append(target)
        resolvable.append(ok)

    return GoldLabels(
        iob=tuple(iob),
        iob_mask=(True,) * len(iob),
        value_position=tuple(value_position),
        resolvable=tuple(resolvable),
    )


def _appendix_value_map(serialized: SerializedInput) -> dict[str, int]:
    """Normalized appendix value -> its [APPD] anchor position."""
    out: dict[str, int] = {}
    anchors = serialized.appd_anchors
    for j, anchor in enumerate(anchors):
        end = anchors[j + 1] if j + 1 < len(anchors) else len(serialized.tokens)
        value = " ".join(serialized.tokens[anchor + 1: end])
        out[normalize_value(value)] = anchor
    return out


def _values_same(a: str | None, b: str | None) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return normalize_value(a) == normalize_value(b)


def _position_target(
    serialized: SerializedInput,
    spans: Sequence[SpanAnnotation],
    slot: int,
    prev_v: str | None,
    curr_v: str | None,
    prev_gold: DialogueState,
    coref_marks: Mapping[int, int],
    appd_values: dict[str, int],
    fallback: Sequence[int],
) -> tuple[int, bool]:
    anchors = serialized.slot_anchors
    if _values_same(prev_v, curr_v):
        return fallback[slot], bool(anchors)
    if curr_v is None:
        return fallback[slot], False
    key = normalize_value(curr_v)
    if key in appd_values:
        return appd_values[key], True
    if slot in coref_marks and anchors:
        return anchors[coref_marks[slot]], True
    best: int | None = None
    for span in spans:
        if span.slot != slot or not _values_same(span.value, curr_v):
            continue
        positions = _span_positions(serialized, span)
        if positions is None:
            continue
        if best is None or positions[0] > best:
            best = positions[0]
    if best is not None:
        return best, True
    if anchors:
        for m, other_prev in enumerate(prev_gold.values):
            if m != slot and other_prev is not None and _values_same(other_prev, curr_v):
                return anchors[m], True
    return fallback[slot], False


def apply_word_dropout(
    serialized: SerializedInput, p: float, rng: np.random.Generator
) -> SerializedInput:
    """Replace each non-special dialogue-content token id with [UNK] w.p. ``p``.

    Only the ids change; surface tokens, anchors, segments, and length are
    untouched.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"dropout probability {p} outside [0, 1]")
    if p == 0.0:
        return serialized
    d0, d1 = serialized.dial_range
    ids = list(serialized.token_ids)
    for i in range(d0, d1):
        if serialized.tokens[i] in (SEP, SEMI, CLS):
            continue
        if rng.random() < p:
            ids[i] = UNK_ID
    return replace(serialized, token_ids=tuple(ids))


def apply_value_dropout(
    serialized: SerializedInput,
    spans: Sequence[SpanAnnotation],
    p: float,
    rng: np.random.Generator,
) -> SerializedInput:
    """Replace whole annotated value spans with [UNK], one draw per span."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"dropout probability {p} outside [0, 1]")
    if p == 0.0 or not spans:
        return serialized
    ids = list(serialized.token_ids)
    for span in spans:
        if rng.random() >= p:
            continue
        positions = _span_positions(serialized, span)
        if positions is None:
            continue
        for pos in positions:
            ids[pos] = UNK_ID
    return replace(serialized, token_ids=tuple(ids))
