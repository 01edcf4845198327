"""Dataset, hint, and visual-feature file IO plus the synthetic generator.

Datasets, hints, and predictions are line-delimited JSON with documented
keys. Visual features use the binary "VFEA" container: magic, version
u32, rows u32, cols u32, then rows*cols little-endian float32 values in
row-major order. Every writer goes through a temp-file-and-rename so
readers never observe partial files.

The synthetic generator builds scenes (category, color, count, slot) in
up to three disjoint pseudo-language lexicons, asks templated questions
whose answers are attribute words that cannot be inferred from the
question text alone, and plays oracle hint provider: the classifier hint
list contains the gold keyword with probability drawn from [0.1, 0.5)
plus lower-probability distractors, and the generative hint is the gold
keyword corrupted at a configurable rate.
"""

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .fusion import HintSet, build_combined_sequence, strip_cls
from .vocab import EOS_ID, SOS_ID, normalize, tokenize

VFEA_MAGIC = b"VFEA"
VFEA_VERSION = 1

HINT_MODES = ("none", "classifier", "generative", "both")


class FormatError(ValueError):
    """Raised for malformed dataset, hint, or feature files."""


def atomic_write_text(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def atomic_write_bytes(path, data):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


@dataclass
class QASample:
    sample_id: str
    image_id: str
    language: str
    question: str
    answer: str


@dataclass
class EncodedSample:
    sample_id: str
    language: str
    src_ids: list
    tgt_ids: list
    visual: np.ndarray
    gold_tokens: list


def _jsonl(records):
    return "".join(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n" for r in records)


def _read_jsonl(path):
    try:
        fh = open(path, encoding="utf-8")
    except FileNotFoundError:
        raise FileNotFoundError(f"input file not found: {path}")
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON ({exc})")


def save_dataset(path, samples):
    rows = [{"sample_id": s.sample_id, "image_id": s.image_id, "language": s.language,
             "question": s.question, "answer": s.answer} for s in samples]
    atomic_write_text(path, _jsonl(rows))


def load_dataset(path):
    """Read QASamples from line-delimited JSON, sorted by sample_id."""
    samples = []
    seen = set()
    required = ("sample_id", "image_id", "language", "question", "answer")
    for lineno, row in _read_jsonl(path):
        missing = [k for k in required if k not in row]
        if missing:
            raise FormatError(f"{path}:{lineno}: missing fields {missing}")
        if not row["question"] or not row["answer"]:
            raise FormatError(f"{path}:{lineno}: empty question or answer")
        if row["sample_id"] in seen:
            raise FormatError(f"{path}:{lineno}: duplicate sample_id {row['sample_id']!r}")
        seen.add(row["sample_id"])
        samples.append(QASample(**{k: row[k] for k in required}))
    samples.sort(key=lambda s: s.sample_id)
    return samples


def save_hints(path, hints_by_id):
    rows = []
    for sid in sorted(hints_by_id):
        h = hints_by_id[sid]
        rows.append({
            "sample_id": sid,
            "classifier": [{"text": t, "prob": p} for t, p in h.classifier_hints],
            "generative": h.generative_hint,
        })
    atomic_write_text(path, _jsonl(rows))


def load_hints(path):
    hints = {}
    for lineno, row in _read_jsonl(path):
        if "sample_id" not in row:
            raise FormatError(f"{path}:{lineno}: missing sample_id")
        try:
            hints[row["sample_id"]] = HintSet(
                classifier_hints=[(h["text"], h["prob"]) for h in row.get("classifier", [])],
                generative_hint=row.get("generative"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}:{lineno}: bad hint record ({exc})")
    return hints


def save_predictions(path, predictions):
    rows = [{"sample_id": sid, "answer": " ".join(tokens)} for sid, tokens in predictions]
    atomic_write_text(path, _jsonl(rows))


def load_predictions(path):
    out = {}
    for lineno, row in _read_jsonl(path):
        if "sample_id" not in row or "answer" not in row:
            raise FormatError(f"{path}:{lineno}: predictions need sample_id and answer")
        if row["sample_id"] in out:
            raise FormatError(f"{path}:{lineno}: duplicate sample_id {row['sample_id']!r}")
        out[row["sample_id"]] = row["answer"]
    return out


def write_features(path, matrix):
    """Write one feature matrix to the binary VFEA container."""
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    if matrix.ndim != 2:
        raise ValueError(f"feature matrix must be 2-D, got shape {matrix.shape}")
    header = VFEA_MAGIC + struct.pack("<III", VFEA_VERSION, *matrix.shape)
    atomic_write_bytes(path, header + matrix.tobytes())


def read_features(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != VFEA_MAGIC:
        raise FormatError(f"{path}: bad magic, not a VFEA feature file")
    if len(blob) < 16:
        raise FormatError(f"{path}: truncated header")
    version, rows, cols = struct.unpack("<III", blob[4:16])
    if version != VFEA_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = 16 + 4 * rows * cols
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(blob)}")
    return np.frombuffer(blob, dtype="<f4", offset=16).reshape(rows, cols).copy()


# -- synthetic scenes ---------------------------------------------------

LEXICONS = {
    "en": {
        "category": ["box", "ball", "cup", "book"],
        "color": ["red", "blue", "green", "yellow"],
        "count": ["one", "two", "three", "four"],
        "slot": ["left", "right", "center", "corner"],
        "templates": {
            "color": "what color is the {category} on the {slot}",
            "count": "how many {category} are on the {slot}",
            "category": "what object is on the {slot}",
        },
    },
    "vi": {
        "category": ["hop", "bong", "coc", "sach"],
        "color": ["do", "xanh", "vang", "tim"],
        "count": ["mot", "hai", "ba", "bon"],
        "slot": ["trai", "phai", "giua", "goc_trai"],
        "templates": {
            "color": "mau gi cai {category} o ben {slot}",
            "count": "bao nhieu {category} o ben {slot}",
            "category": "vat gi o ben {slot}",
        },
    },
    "ja": {
        "category": ["hako", "tama", "koppu", "hon"],
        "color": ["aka", "ao", "midori", "kiiro"],
        "count": ["ichi", "ni", "san", "yon"],
        "slot": ["hidari", "migi", "naka", "sumi"],
        "templates": {
            "color": "nani iro no {category} ga {slot} ni aru",
            "count": "ikutsu no {category} ga {slot} ni aru",
            "category": "nani ga {slot} ni aru",
        },
    },
}

ATTRIBUTES = ("category", "color", "count", "slot")


@dataclass
class SyntheticScene:
    language: str
    category: int
    color: int
    count: int
    slot: int

    def word(self, attribute):
        return LEXICONS[self.language][attribute][getattr(self, attribute)]

    def project(self, patches, dim, noise=0.0, rng=None):
        """Deterministic (patches+1) x dim features; row 0 is the [CLS] slot.

        Injective on attribute tuples at noise 0: patch 0 encodes the raw
        attribute indices, later patches carry fixed per-value vectors.
        """
        indices = [getattr(self, a) for a in ATTRIBUTES]
        rows = np.zeros((patches, dim), dtype=np.float64)
        rows[0, :4] = [0.1 * (i + 1) for i in indices]
        for k in range(1, patches):
            attr = (k - 1) % len(ATTRIBUTES)
            vec_rng = np.random.default_rng([713, attr, indices[attr], k])
            rows[k] = 0.5 * vec_rng.standard_normal(dim)
        if noise and rng is not None:
            rows = rows + noise * rng.standard_normal(rows.shape)
        cls = rows.mean(axis=0, keepdims=True)
        return np.concatenate([cls, rows], axis=0).astype(np.float32)


@dataclass
class SyntheticConfig:
    n_samples: int
    languages: tuple = ("en", "vi", "ja")
    seed: int = 0
    noise: float = 0.05
    corruption: float = 0.1
    patches: int = 8
    dim: int = 32
    hint_low: float = 0.1
    hint_high: float = 0.5

    def __post_init__(self):
        unknown = [l for l in self.languages if l not in LEXICONS]
        if unknown:
            raise ValueError(f"no lexicon for languages {unknown}")
        if not 0.0 <= self.corruption <= 1.0:
            raise ValueError("corruption must be in [0, 1]")
        # probabilities below 0.5 keep every repeat count at 25 or less
        if not 0.0 <= self.hint_low <= self.hint_high <= 0.5:
            raise ValueError("hint probabilities must satisfy 0 <= low <= high <= 0.5")


def generate_synthetic(config, out_dir):
    """Write dataset.jsonl, hints.jsonl, and features/*.vfea under out_dir."""
    rng = np.random.default_rng(config.seed)
    feature_dir = os.path.join(out_dir, "features")
    os.makedirs(feature_dir, exist_ok=True)
    samples = []
    hints = {}
    kinds = ("color", "count", "category")
    for i in range(config.n_samples):
        language = config.languages[int(rng.integers(len(config.languages)))]
        lex = LEXICONS[language]
        scene = SyntheticScene(
            language,
            *(int(rng.integers(len(lex[a]))) for a in ATTRIBUTES),
        )
        kind = kinds[int(rng.integers(len(kinds)))]
        question = lex["templates"][kind].format(
            category=scene.word("category"), slot=scene.word("slot")
        )
        keyword = scene.word(kind)
        answer = keyword
        if kind == "color" and rng.random() < 0.3:
            answer = f"{keyword} {scene.word('category')}"

        gold_p = float(rng.uniform(config.hint_low, config.hint_high))
        classifier = [(keyword, gold_p)]
        others = [w for w in lex[kind] if w != keyword]
        n_distract = int(rng.integers(0, min(4, len(others)) + 1))
        p = gold_p
        for w in rng.permutation(others)[:n_distract]:
            p *= float(rng.uniform(0.3, 0.9))
            classifier.append((str(w), p))
        generative = keyword
        if rng.random() < config.corruption:
            generative = str(others[int(rng.integers(len(others)))])

        sample_id = f"s{i:05d}"
        image_id = f"img{i:05d}"
        samples.append(QASample(sample_id, image_id, language, question, answer))
        hints[sample_id] = HintSet(classifier, generative)
        write_features(
            os.path.join(feature_dir, f"{image_id}.vfea"),
            scene.project(config.patches, config.dim, config.noise, rng),
        )
    save_dataset(os.path.join(out_dir, "dataset.jsonl"), samples)
    save_hints(os.path.join(out_dir, "hints.jsonl"), hints)
    return samples, hints


# -- sample preparation -------------------------------------------------


def restrict_hints(hint_set, mode):
    """Apply an ablation mode to one HintSet; 'none' drops hints entirely."""
    if mode not in HINT_MODES:
        raise ValueError(f"hint mode {mode!r} not one of {HINT_MODES}")
    if hint_set is None or mode == "none":
        return None
    if mode == "classifier":
        return HintSet(hint_set.classifier_hints, None)
    if mode == "generative":
        return HintSet([], hint_set.generative_hint)
    return hint_set


def prepare_samples(samples, hints_by_id, vocab, feature_dir=None,
                    hint_mode="both", max_len=256, generative_repeat=10):
    """Encode QASamples into model-ready EncodedSamples.

    feature_dir None disables visual input; otherwise each sample's
    {image_id}.vfea is read and its [CLS] row stripped.
    """
    out = []
    for s in samples:
        question = tokenize(normalize(s.question), s.language)
        combined = build_combined_sequence(
            question, restrict_hints(hints_by_id.get(s.sample_id), hint_mode),
            vocab, generative_repeat=generative_repeat, max_len=max_len,
        )
        gold = tokenize(normalize(s.answer), s.language).tokens
        visual = None
        if feature_dir is not None:
            raw = read_features(os.path.join(feature_dir, f"{s.image_id}.vfea"))
            visual = strip_cls(raw)
        out.append(EncodedSample(
            sample_id=s.sample_id,
            language=s.language,
            src_ids=combined.ids,
            tgt_ids=[SOS_ID] + vocab.encode(gold) + [EOS_ID],
            visual=visual,
            gold_tokens=gold,
        ))
    return out


def train_dev_split(samples, dev_fraction=0.1, seed=0):
    """Deterministic shuffled split; at least one sample lands in each side."""
    samples = list(samples)
    if len(samples) < 2:
        raise ValueError("need at least 2 samples to split")
    order = np.random.default_rng(seed).permutation(len(samples))
    n_dev = max(1, int(round(len(samples) * dev_fraction)))
    dev_idx = set(int(i) for i in order[:n_dev])
    train = [s for i, s in enumerate(samples) if i not in dev_idx]
    dev = [s for i, s in enumerate(samples) if i in dev_idx]
    return train, dev
