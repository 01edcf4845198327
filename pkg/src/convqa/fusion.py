"""Combined-sequence construction and text/visual fusion.

A combined sequence is `<sos> question <sep> classifier-hints <sep>
generative-hint x10 <eos>`. Each classifier hint is repeated
floor(probability * 100 / 2) times, hints ordered by descending
probability and space-joined inside one segment (no separators between
individual hints). Over-length sequences are truncated from the tail of
the hint region only; the question is never cut and the final `<eos>`
is always kept.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .vocab import EOS, SEP, SOS, normalize, tokenize

MAX_CLASSIFIER_HINTS = 5
GENERATIVE_REPEAT = 10

SEGMENTS = ("sos", "question", "sep", "classifier_hint", "generative_hint", "eos")


@dataclass
class HintSet:
    """Up to 5 (text, probability) classifier hints plus one generative hint."""

    classifier_hints: list = field(default_factory=list)
    generative_hint: str = None

    def __post_init__(self):
        if len(self.classifier_hints) > MAX_CLASSIFIER_HINTS:
            raise ValueError(
                f"{len(self.classifier_hints)} classifier hints, limit is {MAX_CLASSIFIER_HINTS}"
            )
        probs = [p for _, p in self.classifier_hints]
        for p in probs:
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"hint probability {p} outside [0, 1]")
        if any(a < b for a, b in zip(probs, probs[1:])):
            raise ValueError("classifier hints must be sorted by descending probability")


@dataclass
class CombinedSequence:
    ids: list
    labels: list
    tokens: list

    def __post_init__(self):
        if len(self.ids) != len(self.labels) or len(self.ids) != len(self.tokens):
            raise ValueError("ids, labels, and tokens must be equally long")
        for lab in self.labels:
            if lab not in SEGMENTS:
                raise ValueError(f"unknown segment label {lab!r}")

    def __len__(self):
        return len(self.ids)

    def text(self):
        return " ".join(self.tokens)


def repeat_count(probability):
    """floor(probability * 100 / 2); how often a classifier hint is repeated."""
    if not 0.0 <= probability <= 1.0:
        raise ValueError(f"probability {probability} outside [0, 1]")
    # epsilon absorbs decimal-origin float error: 0.06*50 evaluates below 3.0
    return int(math.floor(probability * 50.0 + 1e-9))


def _hint_tokens(text, language):
    return tokenize(normalize(text), language).tokens


def build_combined_sequence(question, hints, vocab, generative_repeat=GENERATIVE_REPEAT,
                            max_len=256):
    """Assemble `<sos> question <sep> hints <sep> generative x N <eos>` token ids.

    `question` is a TokenizedText; `hints` is a HintSet or None. Hint text
    runs through the shared normalize/tokenize pipeline. Raises ValueError
    if the question alone cannot fit max_len.
    """
    if not question.tokens:
        raise ValueError("question is empty")
    tokens = [SOS] + list(question.tokens)
    labels = ["sos"] + ["question"] * len(question.tokens)
    if len(tokens) + 1 > max_len:
        raise ValueError(
            f"question of {len(question.tokens)} tokens exceeds max_len {max_len}"
        )

    hint_tokens = []
    hint_labels = []
    if hints is not None:
        classifier = []
        for text, prob in hints.classifier_hints:
            words = _hint_tokens(text, question.language)
            classifier.extend(words * repeat_count(prob))
        if classifier:
            hint_tokens.append(SEP)
            hint_labels.append("sep")
            hint_tokens.extend(classifier)
            hint_labels.extend(["classifier_hint"] * len(classifier))
        if hints.generative_hint:
            words = _hint_tokens(hints.generative_hint, question.language)
            if words:
                hint_tokens.append(SEP)
                hint_labels.append("sep")
                hint_tokens.extend(words * generative_repeat)
                hint_labels.extend(["generative_hint"] * len(words) * generative_repeat)

    budget = max_len - len(tokens) - 1
    if len(hint_tokens) > budget:
        hint_tokens = hint_tokens[:budget]
        hint_labels = hint_labels[:budget]
        # a cut can leave a separator opening an empty segment; drop it
        while hint_tokens and hint_tokens[-1] == SEP:
            hint_tokens.pop()
            hint_labels.pop()
    tokens += hint_tokens + [EOS]
    labels += hint_labels + ["eos"]

    return CombinedSequence(vocab.encode(tokens), labels, tokens)


def strip_cls(raw):
    """Drop the row-0 [CLS] vector from a (P+1) x D feature matrix."""
    raw = np.asarray(raw)
    if raw.ndim != 2 or raw.shape[0] < 2:
        raise ValueError(f"expected at least 2 rows of features, got shape {raw.shape}")
    return raw[1:]


def fuse(embedded_text, visual=None):
    """Concatenate text embeddings and visual patches along the sequence axis.

    Returns (matrix, position_ids): text rows keep positions 1..L and the
    patches continue at L+1..L+P. With no visual input this is the identity
    on the text (positions 1..L).
    """
    embedded_text = np.asarray(embedded_text)
    length = embedded_text.shape[0]
    if visual is None:
        return embedded_text, np.arange(1, length + 1)
    visual = np.asarray(visual)
    if embedded_text.shape[1] != visual.shape[1]:
        raise ValueError(
            f"text dim {embedded_text.shape[1]} != visual dim {visual.shape[1]}"
        )
    fused = np.concatenate([embedded_text, visual], axis=0)
    return fused, np.arange(1, length + visual.shape[0] + 1)
