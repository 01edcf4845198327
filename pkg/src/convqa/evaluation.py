"""Token-F1, BLEU, quantitative statistics, and score histograms.

F1 is per-sample multiset token overlap (harmonic mean of precision and
recall) averaged over the corpus. BLEU is corpus-level: clipped n-gram
counts pooled over sentence pairs, brevity penalty from corpus lengths,
no smoothing. The reported BLEU score is the arithmetic mean of
BLEU-1..4. Per-sample sentence BLEU (histograms only) applies add-one
smoothing to orders above 1 so short answers do not degenerate to zero.
"""

import json
import math
from collections import Counter
from dataclasses import dataclass, field

N_BINS = 5
BIN_WIDTH = 0.2


def token_f1(pred, gold):
    """Multiset token F1. Both empty -> 1, exactly one empty -> 0."""
    pred = list(getattr(pred, "tokens", pred))
    gold = list(getattr(gold, "tokens", gold))
    if not pred and not gold:
        return 1.0
    if not pred or not gold:
        return 0.0
    overlap = sum((Counter(pred) & Counter(gold)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred)
    recall = overlap / len(gold)
    return 2.0 * precision * recall / (precision + recall)


def corpus_f1(preds, golds):
    if len(preds) != len(golds):
        raise ValueError(f"{len(preds)} predictions vs {len(golds)} references")
    if not preds:
        raise ValueError("empty corpus")
    return sum(token_f1(p, g) for p, g in zip(preds, golds)) / len(preds)


def _ngram_counts(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates, references, max_n=4):
    """Corpus BLEU-1..max_n plus their mean.

    Returns a dict {"bleu_1": .., .., "average": ..}. Any zero pooled
    precision zeroes every BLEU-n that includes it.
    """
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates vs {len(references)} references")
    candidates = [list(getattr(c, "tokens", c)) for c in candidates]
    references = [list(getattr(r, "tokens", r)) for r in references]
    clipped = [0] * max_n
    totals = [0] * max_n
    for cand, ref in zip(candidates, references):
        for k in range(1, max_n + 1):
            cg = _ngram_counts(cand, k)
            rg = _ngram_counts(ref, k)
            clipped[k - 1] += sum((cg & rg).values())
            totals[k - 1] += sum(cg.values())
    c_len = sum(len(c) for c in candidates)
    r_len = sum(len(r) for r in references)
    bp = 0.0 if c_len == 0 else min(1.0, math.exp(1.0 - r_len / c_len))
    out = {}
    scores = []
    for n in range(1, max_n + 1):
        if c_len == 0 or any(clipped[k] == 0 or totals[k] == 0 for k in range(n)):
            score = 0.0
        else:
            log_sum = sum(math.log(clipped[k] / totals[k]) for k in range(n))
            score = bp * math.exp(log_sum / n)
        out[f"bleu_{n}"] = score
        scores.append(score)
    out["average"] = sum(scores) / max_n
    return out


def sentence_bleu(candidate, reference, max_n=4):
    """Per-pair BLEU-1..max_n mean, add-one smoothed on orders above 1."""
    candidate = list(getattr(candidate, "tokens", candidate))
    reference = list(getattr(reference, "tokens", reference))
    if not candidate:
        return 0.0
    precisions = []
    for k in range(1, max_n + 1):
        cg = _ngram_counts(candidate, k)
        rg = _ngram_counts(reference, k)
        hit = sum((cg & rg).values())
        total = sum(cg.values())
        if k == 1:
            precisions.append(hit / total if total else 0.0)
        else:
            precisions.append((hit + 1.0) / (total + 1.0))
    bp = min(1.0, math.exp(1.0 - len(reference) / len(candidate)))
    scores = []
    for n in range(1, max_n + 1):
        if any(p == 0.0 for p in precisions[:n]):
            scores.append(0.0)
        else:
            scores.append(bp * math.exp(sum(math.log(p) for p in precisions[:n]) / n))
    return sum(scores) / max_n


@dataclass
class EvalReport:
    f1: float
    bleu: dict
    per_language: dict = field(default_factory=dict)
    per_sample: list = field(default_factory=list)

    def to_dict(self):
        return {
            "f1": self.f1,
            "bleu": dict(self.bleu),
            "per_language": {k: dict(v) for k, v in sorted(self.per_language.items())},
            "per_sample": [dict(row) for row in self.per_sample],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def evaluate(sample_ids, pred_tokens, gold_tokens, languages=None):
    """Full report: corpus F1, corpus BLEU, per-language splits, per-sample rows."""
    if not (len(sample_ids) == len(pred_tokens) == len(gold_tokens)):
        raise ValueError("sample_ids, predictions, and references must align")
    languages = list(languages) if languages is not None else ["synthetic"] * len(sample_ids)
    report = EvalReport(
        f1=corpus_f1(pred_tokens, gold_tokens),
        bleu=bleu(pred_tokens, gold_tokens),
    )
    for sid, pred, gold in zip(sample_ids, pred_tokens, gold_tokens):
        report.per_sample.append({
            "sample_id": sid,
            "f1": token_f1(pred, gold),
            "sentence_bleu": sentence_bleu(pred, gold),
        })
    for lang in sorted(set(languages)):
        idx = [i for i, tag in enumerate(languages) if tag == lang]
        report.per_language[lang] = {
            "f1": corpus_f1([pred_tokens[i] for i in idx], [gold_tokens[i] for i in idx]),
            "bleu": bleu([pred_tokens[i] for i in idx], [gold_tokens[i] for i in idx]),
            "count": len(idx),
        }
    return report


def quantitative_stats(gold_tokens, pred_tokens, languages):
    """Average answer length and distinct-token count, per language and overall."""
    if not (len(gold_tokens) == len(pred_tokens) == len(languages)):
        raise ValueError("inputs must align")

    def block(indices, rows):
        toks = [list(getattr(rows[i], "tokens", rows[i])) for i in indices]
        total = sum(len(t) for t in toks)
        return {
            "avg_length": total / len(toks) if toks else 0.0,
            "vocab_size": len({w for t in toks for w in t}),
        }

    stats = {"overall": {}, "per_language": {}}
    everything = list(range(len(gold_tokens)))
    stats["overall"]["gold"] = block(everything, gold_tokens)
    stats["overall"]["predicted"] = block(everything, pred_tokens)
    for lang in sorted(set(languages)):
        idx = [i for i, tag in enumerate(languages) if tag == lang]
        stats["per_language"][lang] = {
            "gold": block(idx, gold_tokens),
            "predicted": block(idx, pred_tokens),
        }
    return stats


def score_histogram(per_sample_scores, languages=None, bin_width=BIN_WIDTH):
    """Bin scores into [0,0.2)..[0.8,1.0], last bin closed, per language."""
    n_bins = int(round(1.0 / bin_width))
    languages = list(languages) if languages is not None else ["synthetic"] * len(per_sample_scores)
    if len(languages) != len(per_sample_scores):
        raise ValueError("scores and languages must align")
    hist = {}
    for score, lang in zip(per_sample_scores, languages):
        if not 0.0 <= score <= 1.0:
            raise ValueError(f"score {score} outside [0, 1]")
        bins = hist.setdefault(lang, [0] * n_bins)
        bins[min(int(score / bin_width), n_bins - 1)] += 1
    return {lang: hist[lang] for lang in sorted(hist)}
