"""Attentional encoder-decoder with optional image-initialised decoder.

Encoder: stacked bidirectional LSTM over shared embeddings.  Decoder:
one LSTM layer with input feeding (previous attention context is
concatenated to the input embedding), additive attention over the top
encoder layer, and an attentional output layer.

The decoder's initial hidden state is

    tanh(W_e [h_fwd; h_bwd] + W_img h_img + b)

where the image term exists only when ``image_feature_dim > 0``.

Everything is batched: row ``b`` of each matrix is one sentence.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .bpe import PAD
from .errors import CheckpointError, ConfigError, DataError, ShapeError
from .tensor import Graph, Tensor, constant, parameter

# regime tags stored in checkpoints; INIT marks an untrained model
REGIMES = ("INIT", "CE", "SS", "RL", "MNMT")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embed_dim: int = 500
    hidden_dim: int = 500
    encoder_layers: int = 2
    image_feature_dim: int = 0
    dropout_rate: float = 0.1
    seed: int = 0
    attention_dim: int = 0  # 0 means "same as hidden_dim"
    max_src_len: int = 100
    max_tgt_len: int = 100
    init_scale: float = 0.1

    def __post_init__(self):
        for name in ("vocab_size", "embed_dim", "hidden_dim", "encoder_layers", "max_src_len", "max_tgt_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.image_feature_dim < 0 or self.attention_dim < 0:
            raise ConfigError("image_feature_dim and attention_dim must be >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def attn_dim(self) -> int:
        return self.attention_dim or self.hidden_dim


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    V, E, H, A = cfg.vocab_size, cfg.embed_dim, cfg.hidden_dim, cfg.attn_dim
    shapes: dict[str, tuple[int, ...]] = {"embedding": (V, E)}
    for layer in range(cfg.encoder_layers):
        n_in = E if layer == 0 else 2 * H
        for d in ("fwd", "bwd"):
            shapes[f"enc.{layer}.{d}.W"] = (n_in + H, 4 * H)
            shapes[f"enc.{layer}.{d}.b"] = (4 * H,)
    shapes["init.W_e"] = (H, 2 * H)
    shapes["init.b"] = (H,)
    if cfg.image_feature_dim:
        shapes["init.W_img"] = (H, cfg.image_feature_dim)
    shapes["attn.W_q"] = (H, A)
    shapes["attn.W_k"] = (2 * H, A)
    shapes["attn.v"] = (A,)
    shapes["dec.W"] = (E + 2 * H + H, 4 * H)
    shapes["dec.b"] = (4 * H,)
    shapes["out.W_c"] = (3 * H, H)
    shapes["out.b_c"] = (H,)
    shapes["out.W"] = (V, H)
    shapes["out.b"] = (V,)
    return shapes


def init_params(cfg: ModelConfig) -> dict[str, Tensor]:
    rng = np.random.default_rng(cfg.seed)
    s = cfg.init_scale
    return {name: parameter(rng.uniform(-s, s, size=shape), name=name) for name, shape in param_shapes(cfg).items()}


def pad_batch(seqs, pad: int = PAD) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    out = np.full((len(seqs), int(lengths.max()) if len(seqs) else 0), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lengths


@dataclass
class EncoderOutput:
    annotations: Tensor  # [B, S, 2H]
    keys: Tensor  # [B, S, A], attention projection of the annotations
    mask: np.ndarray  # [B, S] bool, False on padding
    final_fwd: Tensor  # [B, H]
    final_bwd: Tensor  # [B, H]

    @property
    def batch_size(self) -> int:
        return self.mask.shape[0]

    def take(self, rows) -> "EncoderOutput":
        """Row-selected copy without gradient tracking (decoding only)."""
        rows = np.asarray(rows, dtype=np.int64)
        return EncoderOutput(
            constant(self.annotations.data[rows]),
            constant(self.keys.data[rows]),
            self.mask[rows],
            constant(self.final_fwd.data[rows]),
            constant(self.final_bwd.data[rows]),
        )


@dataclass
class DecoderState:
    h: Tensor
    c: Tensor
    context: Tensor  # previous attention context, fed into the next step
    step: int = 0

    def take(self, rows) -> "DecoderState":
        rows = np.asarray(rows, dtype=np.int64)
        return DecoderState(
            constant(self.h.data[rows]), constant(self.c.data[rows]), constant(self.context.data[rows]), self.step
        )


def _dropout(g: Graph, x: Tensor, rate: float, rng) -> Tensor:
    if rng is None or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return g.mul(x, constant(keep))


class Seq2Seq:
    """Parameters plus the forward computations that read them."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None,
                 vocab_hash: str = "", regime: str = "INIT", meta: dict | None = None):
        self.config = config
        self.params = params if params is not None else init_params(config)
        self.vocab_hash = vocab_hash
        self.regime = regime
        self.meta = dict(meta or {})
        if regime not in REGIMES:
            raise ConfigError(f"unknown regime tag {regime!r}")
        expected = param_shapes(config)
        if set(expected) != set(self.params):
            raise ShapeError(f"parameter names do not match config: {sorted(set(expected) ^ set(self.params))}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {self.params[name].shape}")

    @property
    def multimodal(self) -> bool:
        return self.config.image_feature_dim > 0

    def copy(self) -> "Seq2Seq":
        params = {k: parameter(v.data.copy(), name=k) for k, v in self.params.items()}
        return Seq2Seq(self.config, params, self.vocab_hash, self.regime, self.meta)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in arrays.items():
            self.params[k].data = v.copy()

    # -- encoder -----------------------------------------------------------

    def _lstm_cell(self, g: Graph, prefix: str, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        H = self.config.hidden_dim
        W, b = self.params[prefix + ".W"], self.params[prefix + ".b"]
        z = g.add(g.matmul(g.concat([x, h]), W), g.tile_rows(b, x.shape[0]))
        i = g.sigmoid(g.slice_last(z, 0, H))
        f = g.sigmoid(g.slice_last(z, H, 2 * H))
        o = g.sigmoid(g.slice_last(z, 2 * H, 3 * H))
        cand = g.tanh(g.slice_last(z, 3 * H, 4 * H))
        c_new = g.add(g.mul(f, c), g.mul(i, cand))
        h_new = g.mul(o, g.tanh(c_new))
        return h_new, c_new

    def _run_direction(self, g: Graph, prefix: str, inputs: list[Tensor], mask: np.ndarray, reverse: bool):
        B = mask.shape[0]
        H = self.config.hidden_dim
        h = c = constant(np.zeros((B, H)))
        outs: list[Tensor | None] = [None] * len(inputs)
        order = range(len(inputs) - 1, -1, -1) if reverse else range(len(inputs))
        for t in order:
            h_new, c_new = self._lstm_cell(g, prefix, inputs[t], h, c)
            m = mask[:, t]
            if m.all():
                h, c = h_new, c_new
            else:
                # padded rows keep their previous state
                m = m[:, None].astype(np.float64)
                h, c = g.blend(m, h_new, h), g.blend(m, c_new, c)
            outs[t] = h
        return outs, h

    def encode(self, g: Graph, src, lengths=None, dropout_rng=None) -> EncoderOutput:
        """Encode a batch of source id rows.

        ``src`` is either a padded ``[B, S]`` id matrix with ``lengths`` or
        a list of id sequences.
        """
        if lengths is None:
            src, lengths = pad_batch(src)
        src = np.asarray(src, dtype=np.int64)
        lengths = np.asarray(lengths, dtype=np.int64)
        if src.ndim != 2 or src.shape[1] == 0 or (lengths < 1).any():
            raise DataError("cannot encode an empty source sequence")
        if src.shape[1] > self.config.max_src_len:
            raise DataError(f"source length {src.shape[1]} exceeds max_src_len {self.config.max_src_len}")
        cfg = self.config
        B, S = src.shape
        mask = np.arange(S)[None, :] < lengths[:, None]
        emb = self.params["embedding"]
        inputs = [_dropout(g, g.gather_rows(emb, src[:, t]), cfg.dropout_rate, dropout_rng) for t in range(S)]
        for layer in range(cfg.encoder_layers):
            fwd, h_fwd = self._run_direction(g, f"enc.{layer}.fwd", inputs, mask, reverse=False)
            bwd, h_bwd = self._run_direction(g, f"enc.{layer}.bwd", inputs, mask, reverse=True)
            outs = [g.concat([fwd[t], bwd[t]]) for t in range(S)]
            if layer < cfg.encoder_layers - 1:
                inputs = [_dropout(g, o, cfg.dropout_rate, dropout_rng) for o in outs]
        ann = g.stack_mid(outs)
        A = cfg.attn_dim
        flat = g.reshape(ann, (B * S, 2 * cfg.hidden_dim))
        keys = g.reshape(g.matmul(flat, self.params["attn.W_k"]), (B, S, A))
        return EncoderOutput(ann, keys, mask, h_fwd, h_bwd)

    # -- decoder -----------------------------------------------------------

    def init_decoder(self, g: Graph, enc: EncoderOutput, img=None) -> DecoderState:
        cfg = self.config
        B = enc.batch_size
        p = self.params
        joint = g.concat([enc.final_fwd, enc.final_bwd])
        pre = g.add(g.matmul(joint, g.transpose(p["init.W_e"])), g.tile_rows(p["init.b"], B))
        if cfg.image_feature_dim:
            if img is None:
                raise ShapeError("multimodal model needs an image feature vector")
            img_t = img if isinstance(img, Tensor) else constant(np.atleast_2d(np.asarray(img, dtype=np.float64)))
            if img_t.shape != (B, cfg.image_feature_dim):
                raise ShapeError(f"image features: expected shape {(B, cfg.image_feature_dim)}, got {img_t.shape}")
            pre = g.add(pre, g.matmul(img_t, g.transpose(p["init.W_img"])))
        elif img is not None:
            raise ShapeError("text-only model was given image features")
        h = g.tanh(pre)
        zeros_h = constant(np.zeros((B, cfg.hidden_dim)))
        zeros_ctx = constant(np.zeros((B, 2 * cfg.hidden_dim)))
        return DecoderState(h, zeros_h, zeros_ctx, 0)

    def decode_step(self, g: Graph, state: DecoderState, prev_tokens, enc: EncoderOutput, dropout_rng=None):
        """Advance one target position; returns ``(logits, new_state, attention)``."""
        cfg = self.config
        p = self.params
        prev_tokens = np.asarray(prev_tokens, dtype=np.int64)
        B, S = enc.mask.shape
        emb = _dropout(g, g.gather_rows(p["embedding"], prev_tokens), cfg.dropout_rate, dropout_rng)
        h, c = self._lstm_cell(g, "dec", g.concat([emb, state.context]), state.h, state.c)

        q = g.matmul(h, p["attn.W_q"])
        e = g.tanh(g.add(enc.keys, g.expand_mid(q, S)))
        A = cfg.attn_dim
        scores = g.reshape(g.matmul(g.reshape(e, (B * S, A)), g.reshape(p["attn.v"], (A, 1))), (B, S))
        alpha = g.softmax(scores, mask=enc.mask)
        context = g.weighted_sum(alpha, enc.annotations)

        att_h = g.tanh(g.add(g.matmul(g.concat([h, context]), p["out.W_c"]), g.tile_rows(p["out.b_c"], B)))
        logits = g.add(g.matmul(att_h, g.transpose(p["out.W"])), g.tile_rows(p["out.b"], B))
        return logits, DecoderState(h, c, context, state.step + 1), alpha


# -- checkpoints ----------------------------------------------------------------

MAGIC = b"ENSMTCKP"
FORMAT_VERSION = 1


def save_checkpoint(model: Seq2Seq, path: str | Path) -> None:
    """Write magic, version, config JSON, vocab hash, then named float64 blocks."""
    header = {
        "config": asdict(model.config),
        "regime": model.regime,
        "meta": model.meta,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    vocab_hash = model.vocab_hash.encode("ascii")
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(blob)), blob,
             struct.pack("<H", len(vocab_hash)), vocab_hash, struct.pack("<I", len(model.params))]
    for name in sorted(model.params):
        arr = model.params[name].data
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def read(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))


def load_checkpoint(path: str | Path, expected_vocab_hash: str | None = None) -> Seq2Seq:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(buf, path)
    if r.read(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    (n,) = r.unpack("<I")
    try:
        header = json.loads(r.read(n).decode("utf-8"))
        config = ModelConfig(**header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt config block: {exc}") from exc
    (n,) = r.unpack("<H")
    vocab_hash = r.read(n).decode("ascii")
    if expected_vocab_hash is not None and vocab_hash != expected_vocab_hash:
        raise CheckpointError(f"{path}: vocabulary hash {vocab_hash[:12]} != expected {expected_vocab_hash[:12]}")
    (count,) = r.unpack("<I")
    params = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.read(n).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(r.read(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        params[name] = parameter(data, name=name)
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - r.pos} trailing bytes")
    try:
        return Seq2Seq(config, params, vocab_hash, header.get("regime", "CE"), header.get("meta"))
    except (ShapeError, ConfigError) as exc:
        raise CheckpointError(f"{path}: {exc}") from exc


def with_image_input(model: Seq2Seq, image_feature_dim: int) -> Seq2Seq:
    """Copy of a text-only model extended with a zero image projection."""
    cfg = replace(model.config, image_feature_dim=image_feature_dim)
    params = {k: parameter(v.data.copy(), name=k) for k, v in model.params.items()}
    params["init.W_img"] = parameter(np.zeros((cfg.hidden_dim, image_feature_dim)), name="init.W_img")
    return Seq2Seq(cfg, params, model.vocab_hash, model.regime, model.meta)
