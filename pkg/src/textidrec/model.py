"""Small trainable encoder-decoder sequence model with exact reverse-mode
gradients, instantiated both as the ID generator and as the base recommender.

Pre-norm transformer blocks, learned positional embeddings, and an output
projection tied to the token embedding table. All math is float64; the same
forward code runs training (trainable parameter wrappers) and inference
(frozen wrappers, no graph construction).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autograd import Tensor, concat
from .tokenizer import EOS_ID, PAD_ID


class SequenceTooLong(ValueError):
    """Input length exceeds the configured positional table."""


class ShapeMismatch(ValueError):
    """Gradient shapes do not match the parameters they update."""


class VocabularyMismatch(ValueError):
    """A checkpoint was trained against a different vocabulary."""


CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    layers: int = 2
    heads: int = 4
    ff_dim: int = 128
    max_src_len: int = 256
    max_tgt_len: int = 24
    seed: int = 0

    def __post_init__(self) -> None:
        if self.d_model % self.heads != 0:
            raise ValueError("d_model must be divisible by heads")
        for name in ("vocab_size", "d_model", "layers", "heads", "ff_dim", "max_src_len", "max_tgt_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class EncoderState:
    """Per-position context vectors for one source sequence (no padding)."""

    ctx: Tensor

    @property
    def length(self) -> int:
        return self.ctx.data.shape[0]


def _attention_names(prefix: str) -> list[str]:
    return [f"{prefix}_w{x}" for x in ("q", "k", "v", "o")]


def _param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, ff = cfg.d_model, cfg.ff_dim
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("tok_emb", (cfg.vocab_size, d)),
        ("src_pos", (cfg.max_src_len, d)),
        ("tgt_pos", (cfg.max_tgt_len, d)),
    ]
    for i in range(cfg.layers):
        shapes += [(f"enc{i}_ln1_g", (d,)), (f"enc{i}_ln1_b", (d,))]
        shapes += [(name, (d, d)) for name in _attention_names(f"enc{i}_self")]
        shapes += [(f"enc{i}_ln2_g", (d,)), (f"enc{i}_ln2_b", (d,))]
        shapes += [(f"enc{i}_ff_w1", (d, ff)), (f"enc{i}_ff_b1", (ff,)),
                   (f"enc{i}_ff_w2", (ff, d)), (f"enc{i}_ff_b2", (d,))]
    shapes += [("enc_ln_g", (d,)), ("enc_ln_b", (d,))]
    for i in range(cfg.layers):
        shapes += [(f"dec{i}_ln1_g", (d,)), (f"dec{i}_ln1_b", (d,))]
        shapes += [(name, (d, d)) for name in _attention_names(f"dec{i}_self")]
        shapes += [(f"dec{i}_ln2_g", (d,)), (f"dec{i}_ln2_b", (d,))]
        shapes += [(name, (d, d)) for name in _attention_names(f"dec{i}_cross")]
        shapes += [(f"dec{i}_ln3_g", (d,)), (f"dec{i}_ln3_b", (d,))]
        shapes += [(f"dec{i}_ff_w1", (d, ff)), (f"dec{i}_ff_b1", (ff,)),
                   (f"dec{i}_ff_w2", (ff, d)), (f"dec{i}_ff_b2", (d,))]
    shapes += [("dec_ln_g", (d,)), ("dec_ln_b", (d,))]
    return shapes


def _layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    centered = x - x.mean(axis=-1, keepdims=True)
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / ((var + eps) ** 0.5) * gain + bias


def _attention(pt: dict[str, Tensor], prefix: str, q_in: Tensor, kv_in: Tensor,
               heads: int, mask: np.ndarray | None = None) -> Tensor:
    q = q_in @ pt[f"{prefix}_wq"]
    k = kv_in @ pt[f"{prefix}_wk"]
    v = kv_in @ pt[f"{prefix}_wv"]
    dh = q.data.shape[-1] // heads
    scale = 1.0 / math.sqrt(dh)
    outs = []
    for h in range(heads):
        cols = slice(h * dh, (h + 1) * dh)
        scores = (q[:, cols] @ k[:, cols].T) * scale
        if mask is not None:
            scores = scores + mask
        outs.append(scores.softmax(axis=-1) @ v[:, cols])
    return concat(outs, axis=1) @ pt[f"{prefix}_wo"]


def _feed_forward(pt: dict[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    return (x @ pt[f"{prefix}_w1"] + pt[f"{prefix}_b1"]).gelu() @ pt[f"{prefix}_w2"] + pt[f"{prefix}_b2"]


def _causal_mask(length: int) -> np.ndarray:
    return np.triu(np.full((length, length), -1e30), k=1)


class SequenceModel:
    """Encoder-decoder over a shared vocabulary; parameters in a flat dict."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params
        self._frozen: dict[str, Tensor] | None = None

    @classmethod
    def init(cls, config: ModelConfig) -> "SequenceModel":
        """Deterministic init from the config seed: every parameter uniform
        in (-1/sqrt(d_model), 1/sqrt(d_model))."""
        rng = np.random.default_rng(config.seed)
        bound = 1.0 / math.sqrt(config.d_model)
        params = {name: rng.uniform(-bound, bound, size=shape) for name, shape in _param_shapes(config)}
        return cls(config, params)

    def clone(self) -> "SequenceModel":
        return SequenceModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def param_hash(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self.params):
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(self.params[name]).tobytes())
        return digest.hexdigest()

    def frozen(self) -> dict[str, Tensor]:
        """Cached no-grad wrappers; they view the live arrays, so in-place
        optimizer updates stay visible."""
        if self._frozen is None:
            self._frozen = {name: Tensor(arr) for name, arr in self.params.items()}
        return self._frozen

    def trainable(self) -> dict[str, Tensor]:
        return {name: Tensor(arr, requires_grad=True) for name, arr in self.params.items()}

    # -- forward -------------------------------------------------------------

    def _encoder_core(self, x: Tensor, pt: dict[str, Tensor]) -> EncoderState:
        cfg = self.config
        for i in range(cfg.layers):
            h = _layernorm(x, pt[f"enc{i}_ln1_g"], pt[f"enc{i}_ln1_b"])
            x = x + _attention(pt, f"enc{i}_self", h, h, cfg.heads)
            h = _layernorm(x, pt[f"enc{i}_ln2_g"], pt[f"enc{i}_ln2_b"])
            x = x + _feed_forward(pt, f"enc{i}_ff", h)
        return EncoderState(ctx=_layernorm(x, pt["enc_ln_g"], pt["enc_ln_b"]))

    def encode(self, src_ids, params: dict[str, Tensor] | None = None) -> EncoderState:
        """Token embeddings plus positional embeddings through the encoder."""
        pt = params if params is not None else self.frozen()
        ids = [int(t) for t in src_ids]
        if len(ids) > self.config.max_src_len:
            raise SequenceTooLong(f"source length {len(ids)} > max_src_len {self.config.max_src_len}")
        if not ids:
            return EncoderState(ctx=Tensor(np.zeros((0, self.config.d_model))))
        x = pt["tok_emb"][np.array(ids)] + pt["src_pos"][: len(ids)]
        return self._encoder_core(x, pt)

    def encode_embeddings(self, src_embs, params: dict[str, Tensor] | None = None) -> EncoderState:
        """Same as `encode` but the token-embedding lookup is bypassed;
        positional embeddings are still added."""
        pt = params if params is not None else self.frozen()
        x = src_embs if isinstance(src_embs, Tensor) else Tensor(np.asarray(src_embs, dtype=np.float64))
        length = x.data.shape[0]
        if x.data.ndim != 2 or x.data.shape[1] != self.config.d_model:
            raise ShapeMismatch(f"expected (*, {self.config.d_model}) embeddings, got {x.data.shape}")
        if length > self.config.max_src_len:
            raise SequenceTooLong(f"source length {length} > max_src_len {self.config.max_src_len}")
        if length == 0:
            return EncoderState(ctx=Tensor(np.zeros((0, self.config.d_model))))
        return self._encoder_core(x + pt["src_pos"][:length], pt)

    def decoder_all_logits(self, state: EncoderState, dec_input_ids,
                           params: dict[str, Tensor] | None = None) -> Tensor:
        """Next-token logits at every decoder position, causally masked.

        `dec_input_ids` is the shifted target: start symbol (PAD) followed by
        the previous gold tokens.
        """
        pt = params if params is not None else self.frozen()
        cfg = self.config
        ids = [int(t) for t in dec_input_ids]
        if len(ids) > cfg.max_tgt_len:
            raise SequenceTooLong(f"target length {len(ids)} > max_tgt_len {cfg.max_tgt_len}")
        x = pt["tok_emb"][np.array(ids)] + pt["tgt_pos"][: len(ids)]
        mask = _causal_mask(len(ids))
        for i in range(cfg.layers):
            h = _layernorm(x, pt[f"dec{i}_ln1_g"], pt[f"dec{i}_ln1_b"])
            x = x + _attention(pt, f"dec{i}_self", h, h, cfg.heads, mask=mask)
            if state.length > 0:
                h = _layernorm(x, pt[f"dec{i}_ln2_g"], pt[f"dec{i}_ln2_b"])
                x = x + _attention(pt, f"dec{i}_cross", h, state.ctx, cfg.heads)
            h = _layernorm(x, pt[f"dec{i}_ln3_g"], pt[f"dec{i}_ln3_b"])
            x = x + _feed_forward(pt, f"dec{i}_ff", h)
        x = _layernorm(x, pt["dec_ln_g"], pt["dec_ln_b"])
        return x @ pt["tok_emb"].T

    def decoder_logits(self, state: EncoderState, prefix,
                       params: dict[str, Tensor] | None = None) -> Tensor:
        """Logits for the next token after `prefix` (teacher-forced)."""
        prefix = list(prefix)
        if len(prefix) >= self.config.max_tgt_len:
            raise SequenceTooLong(f"prefix length {len(prefix)} >= max_tgt_len {self.config.max_tgt_len}")
        rows = self.decoder_all_logits(state, [PAD_ID] + prefix, params=params)
        return rows[len(prefix)]

    def sequence_nll(self, state: EncoderState, target_ids,
                     params: dict[str, Tensor] | None = None) -> Tensor:
        """Teacher-forced negative log-likelihood summed over the target.

        The target must end with EOS; every position is conditioned on the
        gold previous tokens.
        """
        target = [int(t) for t in target_ids]
        if not target or target[-1] != EOS_ID:
            raise ValueError("target must be non-empty and end with EOS")
        if len(target) > self.config.max_tgt_len:
            raise SequenceTooLong(f"target length {len(target)} > max_tgt_len {self.config.max_tgt_len}")
        rows = self.decoder_all_logits(state, [PAD_ID] + target[:-1], params=params)
        logp = rows.log_softmax(axis=-1)
        picked = logp[(np.arange(len(target)), np.array(target))]
        return -picked.sum()

    def next_token_logprobs(self, state: EncoderState, prefix) -> np.ndarray:
        """Log-softmax over the vocabulary for the next token (inference path)."""
        logits = self.decoder_logits(state, prefix).data
        z = logits - logits.max()
        return z - math.log(np.exp(z).sum())


def expected_embedding(logits: Tensor, emb: Tensor) -> Tensor:
    """softmax(logits) . emb: the probability-weighted average embedding row,
    differentiable w.r.t. the logits."""
    probs = logits.reshape(1, -1).softmax(axis=-1)
    return (probs @ emb).reshape(-1)


# -- optimizer -----------------------------------------------------------------


class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    def __init__(self) -> None:
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0


def apply_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray | None],
                 state: AdamState, lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One in-place Adam step; absent gradients count as zero."""
    state.step += 1
    t = state.step
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(param)
        if grad.shape != param.shape:
            raise ShapeMismatch(f"gradient for {name!r} has shape {grad.shape}, expected {param.shape}")
        m = state.m.setdefault(name, np.zeros_like(param))
        v = state.v.setdefault(name, np.zeros_like(param))
        m *= beta1
        m += (1 - beta1) * grad
        v *= beta2
        v += (1 - beta2) * grad * grad
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        param -= lr * m_hat / (np.sqrt(v_hat) + eps)


# -- checkpoints -----------------------------------------------------------------


def save_checkpoint(model: SequenceModel, opt: AdamState, vocab_hash: str, path: str | Path) -> None:
    """Versioned binary container: config, parameters, optimizer state, and
    the hash of the vocabulary the model was trained against."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "vocab_hash": vocab_hash,
        "adam_step": opt.step,
    }
    arrays = {f"p:{k}": v for k, v in model.params.items()}
    arrays.update({f"m:{k}": v for k, v in opt.m.items()})
    arrays.update({f"v:{k}": v for k, v in opt.v.items()})
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8), **arrays)


def load_checkpoint(path: str | Path,
                    expected_vocab_hash: str | None = None) -> tuple[SequenceModel, AdamState, str]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']} in {path}")
        vocab_hash = meta["vocab_hash"]
        if expected_vocab_hash is not None and vocab_hash != expected_vocab_hash:
            raise VocabularyMismatch(
                f"checkpoint {path} was trained against vocabulary {vocab_hash[:12]}..., "
                f"expected {expected_vocab_hash[:12]}..."
            )
        params, opt = {}, AdamState()
        opt.step = meta["adam_step"]
        for key in data.files:
            if key == "__meta__":
                continue
            kind, name = key.split(":", 1)
            {"p": params, "m": opt.m, "v": opt.v}[kind][name] = data[key].astype(np.float64)
    model = SequenceModel(ModelConfig(**meta["config"]), params)
    return model, opt, vocab_hash
