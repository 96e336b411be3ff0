"""Prompt segmentation: words outside quotes, one grapheme per span inside them."""

from __future__ import annotations

from dataclasses import dataclass

import regex

DEFAULT_QUOTE_PAIRS = {'"': '"', "“": "”", "「": "」", "『": "』"}

WORD, CHAR, QUOTE_MARK = "word", "char", "quote_mark"

_GRAPHEME = regex.compile(r"\X")


@dataclass(frozen=True)
class TokenSpan:
    """A segment of the prompt.

    ``byte_range`` is the half-open UTF-8 byte interval of ``text`` in the prompt.
    ``space_before`` holds the whitespace between the previous span and this one
    (or the start of the prompt); the final span also keeps any trailing
    whitespace in ``space_after``.
    """

    text: str
    kind: str
    byte_range: tuple
    space_before: str = ""
    space_after: str = ""

    def to_dict(self):
        return {"text": self.text, "kind": self.kind, "byte_range": list(self.byte_range)}


def _graphemes(s):
    return _GRAPHEME.findall(s)


def segment_prompt(prompt, quote_pairs=None):
    """Split ``prompt`` into :class:`TokenSpan` objects.

    An opening quote only counts when its closing partner appears later; an
    unmatched quote stays inside the surrounding word. Whitespace outside
    quotes separates words and is recorded on the neighbouring spans.
    """
    pairs = DEFAULT_QUOTE_PAIRS if quote_pairs is None else quote_pairs
    # work on grapheme clusters so combining marks never split from their base
    gs = _graphemes(prompt)
    offsets, acc = [], 0
    for g in gs:
        offsets.append(acc)
        acc += len(g.encode("utf-8"))
    offsets.append(acc)

    raw = []  # (start_idx, end_idx, kind)
    i, n = 0, len(gs)
    word_start = None

    def close_word(end):
        nonlocal word_start
        if word_start is not None:
            raw.append((word_start, end, WORD))
            word_start = None

    while i < n:
        g = gs[i]
        closer = pairs.get(g)
        j = gs.index(closer, i + 1) if closer is not None and closer in gs[i + 1:] else -1
        if j >= 0:
            close_word(i)
            raw.append((i, i + 1, QUOTE_MARK))
            raw.extend((k, k + 1, CHAR) for k in range(i + 1, j))
            raw.append((j, j + 1, QUOTE_MARK))
            i = j + 1
        elif g.isspace():
            close_word(i)
            i += 1
        else:
            if word_start is None:
                word_start = i
            i += 1
    close_word(n)

    spans, prev = [], 0
    for s, e, kind in raw:
        spans.append(TokenSpan("".join(gs[s:e]), kind, (offsets[s], offsets[e]), "".join(gs[prev:s])))
        prev = e
    if spans and prev < n:
        last = spans[-1]
        spans[-1] = TokenSpan(last.text, last.kind, last.byte_range, last.space_before, "".join(gs[prev:]))
    return spans


def join_spans(spans):
    """Inverse of :func:`segment_prompt` (exact for any prompt with at least one span)."""
    return "".join(s.space_before + s.text + s.space_after for s in spans)
