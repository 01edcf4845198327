"""Text normalization, word tokenization, and vocabulary management.

The same normalizer is applied uniformly across languages: lowercase,
then replace every character outside {letters, digits, underscore} with a
space and collapse runs. Underscore survives because pre-segmented
Vietnamese/Japanese input marks multi-word segments with it (segmentation
itself happens upstream). Vocabularies assign ids by descending frequency,
ties broken lexicographically, so identical corpora always produce
bit-identical vocabulary files.
"""

from collections import Counter
from dataclasses import dataclass

PAD, SOS, EOS, SEP, UNK = "<pad>", "<sos>", "<eos>", "<sep>", "<unk>"
RESERVED = (PAD, SOS, EOS, SEP, UNK)
PAD_ID, SOS_ID, EOS_ID, SEP_ID, UNK_ID = 0, 1, 2, 3, 4

LANGUAGES = ("en", "vi", "ja", "synthetic")


def normalize(text):
    """Lowercase, strip everything but letters/digits/underscore, collapse spaces."""
    chars = []
    for ch in text.lower():
        if ch.isalnum() or ch == "_":
            chars.append(ch)
        else:
            chars.append(" ")
    return " ".join("".join(chars).split())


@dataclass
class TokenizedText:
    tokens: list
    language: str = "synthetic"

    def __post_init__(self):
        if self.language not in LANGUAGES:
            raise ValueError(f"unknown language tag {self.language!r}")
        for tok in self.tokens:
            if not tok or any(c.isspace() for c in tok):
                raise ValueError(f"bad token {tok!r}: empty or contains whitespace")


def tokenize(text, language="synthetic"):
    """Whitespace-split normalized text. Pre-segmented vi/ja input splits the same way."""
    return TokenizedText(text.split(), language)


class Vocabulary:
    """token<->id bijection with fixed reserved ids 0..4."""

    def __init__(self, tokens=()):
        self._id_to_token = list(RESERVED)
        self._token_to_id = {t: i for i, t in enumerate(RESERVED)}
        for tok in tokens:
            if tok in self._token_to_id:
                raise ValueError(f"duplicate token {tok!r}")
            self._token_to_id[tok] = len(self._id_to_token)
            self._id_to_token.append(tok)

    def __len__(self):
        return len(self._id_to_token)

    def __contains__(self, token):
        return token in self._token_to_id

    def token_id(self, token):
        return self._token_to_id.get(token, UNK_ID)

    def token(self, idx):
        if not 0 <= idx < len(self._id_to_token):
            raise IndexError(f"id {idx} out of range for vocabulary of size {len(self)}")
        return self._id_to_token[idx]

    def encode(self, tokens):
        """Map tokens to ids; out-of-vocabulary tokens become <unk>."""
        return [self._token_to_id.get(t, UNK_ID) for t in tokens]

    def decode(self, ids, stop_at_eos=False):
        """Map ids back to tokens, skipping <pad> and <sos>.

        With stop_at_eos, decoding stops before the first <eos>. Raises
        IndexError on out-of-range ids.
        """
        out = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self._id_to_token):
                raise IndexError(f"id {i} out of range for vocabulary of size {len(self)}")
            if i == PAD_ID or i == SOS_ID:
                continue
            if i == EOS_ID and stop_at_eos:
                break
            out.append(self._id_to_token[i])
        return out

    def save(self, path):
        lines = [f"{tok}\t{i}" for i, tok in enumerate(self._id_to_token)]
        from .data import atomic_write_text

        atomic_write_text(path, "\n".join(lines) + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            rows = [line.rstrip("\n") for line in fh if line.strip()]
        tokens = []
        for lineno, row in enumerate(rows):
            try:
                tok, idx = row.split("\t")
                idx = int(idx)
            except ValueError:
                raise ValueError(f"{path}:{lineno + 1}: malformed vocabulary row {row!r}")
            if idx != lineno:
                raise ValueError(f"{path}:{lineno + 1}: id {idx} out of order")
            tokens.append(tok)
        if tuple(tokens[:5]) != RESERVED:
            raise ValueError(f"{path}: reserved rows missing or reordered")
        return cls(tokens[5:])


def build_vocab(corpus, min_freq=1):
    """Build a Vocabulary from tokenized texts.

    Tokens with frequency >= min_freq get ids in descending-frequency order,
    ties broken lexicographically.
    """
    counts = Counter()
    for item in corpus:
        counts.update(getattr(item, "tokens", item))
    kept = [t for t, c in counts.items() if c >= min_freq]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(kept)
