"""Convolutional encoder-decoder with GLU gates and multi-step attention.

Encoder: token + learned position embeddings (visual patch rows are
appended to the token embeddings and share the position sequence), then
stacked width-k convolutions with GLU activations and sqrt(0.5)-scaled
residuals. Attention keys/values are kv = z + e where e is the input
embedding matrix. Decoder layers use causal convolutions (left pad k-1)
and re-attend at every layer: d = W h + b + g with g the target
embedding, scores d z^T, context a kv scaled by sqrt(S) with S the
per-sample non-pad source length.

Pad positions are zeroed before every encoder convolution and masked out
of attention scores, so appending pad columns never changes any real
activation.
"""

import json
import math
import os
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .vocab import EOS_ID, PAD_ID, SOS_ID

SQRT_HALF = math.sqrt(0.5)
CHECKPOINT_MAGIC = b"CS2S"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Raised for malformed, truncated, or mismatched checkpoint files."""


@dataclass
class ModelConfig:
    src_vocab: int
    tgt_vocab: int
    embed_dim: int = 768
    hidden_units: int = 512
    kernel_width: int = 3
    encoder_layers: int = 4
    decoder_layers: int = 4
    dropout_keep: float = 0.5
    max_positions: int = 512
    max_decode_len: int = 32

    def __post_init__(self):
        if self.kernel_width < 1 or self.kernel_width % 2 == 0:
            raise ValueError(f"kernel_width must be odd and positive, got {self.kernel_width}")
        if self.hidden_units % 2:
            raise ValueError(f"hidden_units must be even for the GLU split, got {self.hidden_units}")
        if self.max_decode_len < 1:
            raise ValueError("max_decode_len must be at least 1")
        for name in ("src_vocab", "tgt_vocab", "embed_dim", "hidden_units", "max_positions"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.dropout_keep <= 1.0:
            raise ValueError(f"dropout_keep must be in (0, 1], got {self.dropout_keep}")


@dataclass
class EncoderState:
    z: ag.Tensor
    kv: ag.Tensor
    mask: np.ndarray
    lengths: np.ndarray
    text_len: int


@dataclass
class DecodedAnswer:
    token_ids: list
    log_probs: list
    attention: list
    source_len: int

    def __post_init__(self):
        if len(self.token_ids) != len(self.log_probs):
            raise ValueError("one log-probability per generated token")


@dataclass
class AttentionMap:
    weights: np.ndarray
    src_labels: list
    tgt_labels: list


class ConvS2S:
    """The trainable model: owns parameters, encode/decode, greedy search."""

    def __init__(self, config, dtype=np.float32, seed=0):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.params = {}
        c = config

        def embed(name, rows, cols):
            self._add(name, rng.normal(0.0, 0.1, (rows, cols)))

        def linear(name, n_in, n_out):
            self._add(f"{name}.W", rng.normal(0.0, 0.1 / math.sqrt(n_in), (n_in, n_out)))
            self._add(f"{name}.b", np.zeros(n_out))

        def conv(name, n_out, n_in, k):
            self._add(f"{name}.W", rng.normal(0.0, 0.1 / math.sqrt(n_in * k), (n_out, n_in, k)))
            self._add(f"{name}.b", np.zeros(n_out))

        embed("src_embed", c.src_vocab, c.embed_dim)
        embed("tgt_embed", c.tgt_vocab, c.embed_dim)
        # position id 0 is reserved for padding; usable positions start at 1
        embed("src_pos", c.max_positions + 1, c.embed_dim)
        embed("tgt_pos", c.max_positions + 1, c.embed_dim)
        linear("enc_in", c.embed_dim, c.hidden_units)
        for i in range(c.encoder_layers):
            conv(f"enc{i}.conv", 2 * c.hidden_units, c.hidden_units, c.kernel_width)
        linear("enc_out", c.hidden_units, c.embed_dim)
        linear("dec_in", c.embed_dim, c.hidden_units)
        for i in range(c.decoder_layers):
            conv(f"dec{i}.conv", 2 * c.hidden_units, c.hidden_units, c.kernel_width)
            linear(f"dec{i}.attn_in", c.hidden_units, c.embed_dim)
            linear(f"dec{i}.attn_out", c.embed_dim, c.hidden_units)
        linear("dec_out", c.hidden_units, c.embed_dim)
        linear("proj", c.embed_dim, c.tgt_vocab)

    def _add(self, name, values):
        self.params[name] = ag.Tensor(values.astype(self.dtype), requires_grad=True)

    def _p(self, name):
        return self.params[name]

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def parameter_count(self):
        return sum(p.size for p in self.params.values())

    # -- encoder -------------------------------------------------------

    def _positions(self, lengths, text_cols, patches):
        batch = len(lengths)
        pos = np.zeros((batch, text_cols + patches), dtype=np.int64)
        for b, n in enumerate(lengths):
            pos[b, :n] = np.arange(1, n + 1)
            if patches:
                pos[b, text_cols:] = np.arange(n + 1, n + patches + 1)
        return pos

    def encode(self, src_ids, visual=None, training=False, rng=None):
        """Run the encoder. src_ids [B, S] int; visual [B, P, embed_dim] or None."""
        c = self.config
        src_ids = np.asarray(src_ids, dtype=np.int64)
        if src_ids.ndim != 2:
            raise ag.ShapeError(f"src_ids must be [batch, len], got {src_ids.shape}")
        text_mask = (src_ids != PAD_ID).astype(self.dtype)
        text_lengths = text_mask.sum(axis=1).astype(np.int64)
        patches = 0 if visual is None else int(np.asarray(visual).shape[1])
        if int(text_lengths.max(initial=0)) + patches > c.max_positions:
            raise ValueError(
                f"source length {int(text_lengths.max())} + {patches} patches exceeds "
                f"max_positions {c.max_positions}"
            )

        tok = ag.embedding_lookup(self._p("src_embed"), src_ids)
        if visual is None:
            mask = text_mask
        else:
            visual = np.asarray(visual, dtype=self.dtype)
            if visual.shape[2] != c.embed_dim:
                raise ag.ShapeError(
                    f"visual dim {visual.shape[2]} != embed_dim {c.embed_dim}"
                )
            tok = ag.concat([tok, ag.Tensor(visual)], axis=1)
            mask = np.concatenate(
                [text_mask, np.ones((len(src_ids), patches), dtype=self.dtype)], axis=1
            )
        pos_ids = self._positions(text_lengths, src_ids.shape[1], patches)
        e = tok + ag.embedding_lookup(self._p("src_pos"), pos_ids)
        e = ag.dropout(e, c.dropout_keep, training, rng)
        e = e * mask[:, :, None]

        x = e @ self._p("enc_in.W") + self._p("enc_in.b")
        x = x.transpose(0, 2, 1)
        half = (c.kernel_width - 1) // 2
        for i in range(c.encoder_layers):
            residual = x
            x = ag.dropout(x, c.dropout_keep, training, rng)
            x = x * mask[:, None, :]
            x = ag.conv1d(x, self._p(f"enc{i}.conv.W"), self._p(f"enc{i}.conv.b"),
                          pad_left=half, pad_right=half)
            x = ag.glu(x, axis=1)
            x = (x + residual) * SQRT_HALF
        z = x.transpose(0, 2, 1) @ self._p("enc_out.W") + self._p("enc_out.b")
        kv = z + e
        lengths = text_lengths + patches
        return EncoderState(z, kv, mask, lengths, src_ids.shape[1])

    # -- decoder -------------------------------------------------------

    def decode_train(self, encoder, tgt_ids, training=False, rng=None, need_attention=True):
        """Teacher-forced decoder pass. tgt_ids [B, T] must begin with <sos>.

        Returns (logits [B, T, tgt_vocab], attention maps per layer [B, T, S]).
        """
        c = self.config
        tgt_ids = np.asarray(tgt_ids, dtype=np.int64)
        if tgt_ids.ndim != 2 or tgt_ids.shape[1] == 0:
            raise ValueError(f"tgt_ids must be a non-empty [batch, len] matrix, got {tgt_ids.shape}")
        if not (tgt_ids[:, 0] == SOS_ID).all():
            raise ValueError("every target must begin with <sos>")
        if tgt_ids.shape[1] > c.max_positions:
            raise ValueError(f"target length {tgt_ids.shape[1]} exceeds max_positions")

        tgt_mask = (tgt_ids != PAD_ID).astype(self.dtype)
        tgt_lengths = tgt_mask.sum(axis=1).astype(np.int64)
        pos_ids = self._positions(tgt_lengths, tgt_ids.shape[1], 0)
        g = ag.embedding_lookup(self._p("tgt_embed"), tgt_ids)
        g = g + ag.embedding_lookup(self._p("tgt_pos"), pos_ids)
        g = ag.dropout(g, c.dropout_keep, training, rng)

        x = g @ self._p("dec_in.W") + self._p("dec_in.b")
        x = x.transpose(0, 2, 1)
        # additive mask sends scores at pad source positions to -1e9
        score_mask = (encoder.mask[:, None, :] - 1.0) * 1e9
        scale = np.sqrt(encoder.lengths.astype(self.dtype))[:, None, None]
        z_t = encoder.z.transpose(0, 2, 1)
        attentions = []
        for i in range(c.decoder_layers):
            residual = x
            x = ag.dropout(x, c.dropout_keep, training, rng)
            x = ag.conv1d(x, self._p(f"dec{i}.conv.W"), self._p(f"dec{i}.conv.b"),
                          pad_left=c.kernel_width - 1, pad_right=0)
            x = ag.glu(x, axis=1)
            h = x.transpose(0, 2, 1)
            d = h @ self._p(f"dec{i}.attn_in.W") + self._p(f"dec{i}.attn_in.b") + g
            scores = d @ z_t + score_mask
            a = ag.softmax(scores, axis=-1)
            context = (a @ encoder.kv) * scale
            context = context @ self._p(f"dec{i}.attn_out.W") + self._p(f"dec{i}.attn_out.b")
            h = (h + context) * SQRT_HALF
            x = (h.transpose(0, 2, 1) + residual) * SQRT_HALF
            if need_attention:
                attentions.append(a.data.copy())
        out = x.transpose(0, 2, 1) @ self._p("dec_out.W") + self._p("dec_out.b")
        logits = out @ self._p("proj.W") + self._p("proj.b")
        return logits, attentions

    def loss(self, encoder, tgt_ids, training=False, rng=None):
        """Teacher-forcing cross entropy: inputs tgt[:-1], labels tgt[1:], pads ignored."""
        tgt_ids = np.asarray(tgt_ids, dtype=np.int64)
        logits, _ = self.decode_train(encoder, tgt_ids[:, :-1], training=training,
                                      rng=rng, need_attention=False)
        labels = tgt_ids[:, 1:].reshape(-1)
        flat = logits.reshape((-1, self.config.tgt_vocab))
        return ag.cross_entropy(flat, labels, ignore_index=PAD_ID)

    # -- generation ----------------------------------------------------

    def greedy_decode(self, encoder):
        """Greedy search from <sos>; ties take the lowest id; stops at <eos> or cap.

        Runs in evaluation mode. Returns one DecodedAnswer per batch row;
        attention rows come from one final full-prefix pass (prefix
        consistency keeps them equal to the stepwise rows).
        """
        c = self.config
        batch = len(encoder.lengths)
        prefix = np.full((batch, 1), SOS_ID, dtype=np.int64)
        finished = np.zeros(batch, dtype=bool)
        log_probs = [[] for _ in range(batch)]
        for _ in range(c.max_decode_len):
            logits, _ = self.decode_train(encoder, prefix, training=False, need_attention=False)
            last = logits.data[:, -1, :]
            shifted = last - last.max(axis=1, keepdims=True)
            logz = np.log(np.exp(shifted).sum(axis=1))
            chosen = last.argmax(axis=1)
            for b in range(batch):
                if not finished[b]:
                    log_probs[b].append(float(shifted[b, chosen[b]] - logz[b]))
            chosen = np.where(finished, PAD_ID, chosen)
            finished |= chosen == EOS_ID
            prefix = np.concatenate([prefix, chosen[:, None]], axis=1)
            if finished.all():
                break
        _, attentions = self.decode_train(encoder, prefix, training=False)
        answers = []
        for b in range(batch):
            ids = []
            for t in prefix[b, 1:]:
                if t == EOS_ID or t == PAD_ID:
                    break
                ids.append(int(t))
            n = len(ids)
            per_layer = [a[b, :n, :] for a in attentions]
            answers.append(DecodedAnswer(ids, log_probs[b][:n], per_layer,
                                         int(encoder.lengths[b])))
        return answers

    def export_attention(self, decoded, src_tokens, tgt_tokens, layer):
        """Label one decoded sample's attention matrix for plotting.

        src_tokens are the combined-sequence tokens; patch rows get
        synthetic <patch_i> labels. Raises IndexError for a bad layer.
        """
        if not 0 <= layer < len(decoded.attention):
            raise IndexError(
                f"layer {layer} out of range for {len(decoded.attention)} decoder layers"
            )
        weights = decoded.attention[layer]
        n_src = weights.shape[1]
        labels = list(src_tokens)
        labels += [f"<patch_{i}>" for i in range(n_src - len(labels))]
        return AttentionMap(weights, labels[:n_src], list(tgt_tokens))


# -- checkpoint io -----------------------------------------------------


def save_checkpoint(model, path):
    """Write magic, version, config JSON, then named f32 parameter records."""
    header = {"config": asdict(model.config), "dtype": model.dtype.name}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(model.params)))
        for name, p in model.params.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", p.ndim))
            fh.write(struct.pack(f"<{p.ndim}I", *p.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    os.replace(tmp, path)


def _read_exact(fh, n, path, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"{path}: truncated while reading {what}")
    return buf


def load_checkpoint(path, expected_config=None):
    """Read a checkpoint back into a ConvS2S. Rejects bad magic/version/config."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, path, "magic") != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, path, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (blob_len,) = struct.unpack("<I", _read_exact(fh, 4, path, "header length"))
        header = json.loads(_read_exact(fh, blob_len, path, "header"))
        config = ModelConfig(**header["config"])
        if expected_config is not None and asdict(expected_config) != asdict(config):
            raise CheckpointError(f"{path}: checkpoint config does not match runtime config")
        model = ConvS2S(config, dtype=header.get("dtype", "float32"), seed=0)
        (n_params,) = struct.unpack("<I", _read_exact(fh, 4, path, "parameter count"))
        if n_params != len(model.params):
            raise CheckpointError(
                f"{path}: {n_params} parameter records, expected {len(model.params)}"
            )
        for _ in range(n_params):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, path, "name length"))
            name = _read_exact(fh, name_len, path, "name").decode("utf-8")
            if name not in model.params:
                raise CheckpointError(f"{path}: unknown parameter {name!r}")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, path, "rank"))
            shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, path, "shape"))
            expected = model.params[name].shape
            if shape != expected:
                raise CheckpointError(
                    f"{path}: parameter {name!r} has shape {shape}, expected {expected}"
                )
            count = int(np.prod(shape, dtype=np.int64)) if rank else 1
            raw = _read_exact(fh, 4 * count, path, f"data of {name!r}")
            values = np.frombuffer(raw, dtype="<f4").reshape(shape)
            model.params[name].data = values.astype(model.dtype)
        trailing = fh.read(1)
        if trailing:
            raise CheckpointError(f"{path}: trailing bytes after last parameter")
    return model
