"""Toy transformer encoder with a masked-language-model head.

Parameters live in an ordered ``dict`` whose insertion order is the canonical
flattening order: token embedding, positional embedding, layers in depth order
(attention, FFN, norms), final norm, output head.  Gradient vectors returned
by :func:`sentence_gradient` follow that order.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .corpus import TokenSequence, Vocabulary
from .transformer import init_layers, stack_forward


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    max_seq_len: int = 32
    num_layers: int = 2
    hidden_size: int = 64
    num_heads: int = 4
    ffn_multiplier: int = 4
    dropout: float = 0.1
    init_std: float = 0.02
    sentence_loss: str = "mean"

    def __post_init__(self):
        if self.hidden_size % self.num_heads:
            raise ValueError("hidden_size must be divisible by num_heads")
        if self.sentence_loss not in ("mean", "sum"):
            raise ValueError("sentence_loss must be 'mean' or 'sum'")
        if self.vocab_size <= Vocabulary.num_reserved:
            raise ValueError("vocabulary has no usable tokens")

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "toy": dict(max_seq_len=32, num_layers=2, hidden_size=64, num_heads=4, ffn_multiplier=4),
    "paper-base": dict(max_seq_len=512, num_layers=12, hidden_size=768, num_heads=12, ffn_multiplier=4),
}


def preset(name: str, vocab_size: int, **overrides) -> EncoderConfig:
    return EncoderConfig(vocab_size=vocab_size, **{**PRESETS[name], **overrides})


class EncoderParams:
    """Encoder weights; ``tensors["token_embedding"]`` is the shared table."""

    def __init__(self, config: EncoderConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    @classmethod
    def init(cls, config: EncoderConfig, rng: np.random.Generator) -> "EncoderParams":
        H, V, std = config.hidden_size, config.vocab_size, config.init_std
        t: dict[str, Tensor] = {}
        t["token_embedding"] = Tensor(rng.normal(0.0, std, (V, H)), True, "token_embedding")
        t["position_embedding"] = Tensor(rng.normal(0.0, std, (config.max_seq_len, H)), True, "position_embedding")
        t.update(init_layers(rng, config.num_layers, H, H * config.ffn_multiplier, std))
        t["final_ln.gamma"] = Tensor(np.ones(H), True, "final_ln.gamma")
        t["final_ln.beta"] = Tensor(np.zeros(H), True, "final_ln.beta")
        t["head.weight"] = Tensor(rng.normal(0.0, std, (H, V)), True, "head.weight")
        t["head.bias"] = Tensor(np.zeros(V), True, "head.bias")
        return cls(config, t)

    @property
    def token_embedding(self) -> Tensor:
        return self.tensors["token_embedding"]

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.tensors.values())

    def flatten(self) -> np.ndarray:
        return np.concatenate([p.data.reshape(-1) for p in self.tensors.values()])


@dataclass(frozen=True)
class PositionLoss:
    position: int
    loss: float
    entropy: float


def _positions(plan) -> np.ndarray:
    pos = getattr(plan, "positions", plan)
    return np.asarray(pos, dtype=np.int64).reshape(-1)


def hidden_states(params: EncoderParams, tokens: np.ndarray, lengths: np.ndarray, dropout_rng=None) -> Tensor:
    cfg = params.config
    t = params.tensors
    batch, width = tokens.shape
    if width > cfg.max_seq_len:
        raise IndexError(f"sequence length {width} exceeds max_seq_len {cfg.max_seq_len}")
    h = ad.embedding_gather(t["token_embedding"], tokens)
    pos = ad.embedding_gather(t["position_embedding"], np.broadcast_to(np.arange(width), (batch, width)))
    h = ad.dropout(ad.add(h, pos), cfg.dropout, dropout_rng)
    h = stack_forward(t, h, lengths, cfg.num_layers, cfg.num_heads, cfg.dropout, dropout_rng)
    return ad.layernorm(h, t["final_ln.gamma"], t["final_ln.beta"])


def batch_position_logits(
    params: EncoderParams,
    tokens: np.ndarray,
    lengths: np.ndarray,
    positions: list[np.ndarray],
    dropout_rng=None,
) -> Tensor:
    """Head logits at the masked positions of every sentence, stacked row-wise."""
    batch, width = tokens.shape
    for b, pos in enumerate(positions):
        if pos.size and (pos.min() < 0 or pos.max() >= lengths[b]):
            raise IndexError(f"masked position out of range for sentence {b} of length {lengths[b]}")
    h = hidden_states(params, tokens, lengths, dropout_rng)
    flat = np.concatenate([b * width + np.asarray(p, dtype=np.int64) for b, p in enumerate(positions)] or [np.zeros(0, np.int64)])
    picked = ad.embedding_gather(ad.reshape(h, (batch * width, h.shape[-1])), flat)
    t = params.tensors
    return ad.linear(picked, t["head.weight"], t["head.bias"])


def batch_position_losses(
    params: EncoderParams,
    tokens: np.ndarray,
    lengths: np.ndarray,
    positions: list[np.ndarray],
    targets: np.ndarray,
    dropout_rng=None,
) -> Tensor:
    """Per-position cross-entropies, concatenated over sentences in batch order."""
    logits = batch_position_logits(params, tokens, lengths, positions, dropout_rng)
    return ad.cross_entropy(logits, targets)


def segment_matrix(positions: list[np.ndarray], how: str = "mean") -> np.ndarray:
    """Constant (B, M) matrix mapping stacked position losses to sentence losses."""
    counts = [len(p) for p in positions]
    seg = np.zeros((len(positions), sum(counts)))
    start = 0
    for b, c in enumerate(counts):
        if c:
            seg[b, start : start + c] = 1.0 / c if how == "mean" else 1.0
        start += c
    return seg


def sentence_losses(params: EncoderParams, tokens, lengths, positions, targets, dropout_rng=None) -> Tensor:
    """Sentence losses (B,) from a padded batch; a sentence with no masked positions scores 0."""
    per_pos = batch_position_losses(params, tokens, lengths, positions, targets, dropout_rng)
    seg = segment_matrix(positions, params.config.sentence_loss)
    if seg.shape[1] == 0:
        return Tensor(np.zeros(len(positions)))
    return ad.reshape(ad.matmul(Tensor(seg), ad.reshape(per_pos, (-1, 1))), (len(positions),))


def forward_mlm(params: EncoderParams, masked: TokenSequence, plan, original: TokenSequence) -> list[PositionLoss]:
    """One :class:`PositionLoss` per masked position (eval mode, no dropout)."""
    pos = _positions(plan)
    n = len(original)
    if pos.size and (pos.min() < 0 or pos.max() >= n):
        raise IndexError(f"masked position out of range for sentence of length {n}")
    if pos.size == 0:
        return []
    logits = batch_position_logits(params, masked.tokens[None, :], np.array([n]), [pos]).data
    targets = original.tokens[pos]
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    ent = -(np.exp(logp) * logp).sum(axis=1)
    return [
        PositionLoss(int(p), float(-logp[k, targets[k]]), float(ent[k])) for k, p in enumerate(pos)
    ]


def sentence_loss(position_losses: list[PositionLoss], how: str = "mean") -> float:
    if not position_losses:
        return 0.0
    total = sum(pl.loss for pl in position_losses)
    return total / len(position_losses) if how == "mean" else total


def sentence_gradient(
    params: EncoderParams, masked: TokenSequence, plan, original: TokenSequence, weight: float = 1.0
) -> tuple[np.ndarray, float]:
    """Flattened gradient of ``weight * sentence loss`` and its Euclidean norm."""
    pos = _positions(plan)
    n = len(original)
    if pos.size and (pos.min() < 0 or pos.max() >= n):
        raise IndexError(f"masked position out of range for sentence of length {n}")
    plist = params.parameters()
    if pos.size == 0 or weight == 0.0:
        return np.zeros(params.num_parameters()), 0.0
    with Tape() as tape:
        losses = sentence_losses(params, masked.tokens[None, :], np.array([n]), [pos], original.tokens[pos])
        obj = ad.scale(ad.tsum(losses), weight)
    tape.backward(obj)
    g = np.concatenate([tape.grad(p).reshape(-1) for p in plist])
    return g, float(np.sqrt(g @ g))


def mask_only(x: TokenSequence, positions) -> TokenSequence:
    """``x`` with ``positions`` replaced by ``[MASK]`` (no 80/10/10 randomness)."""
    tokens = x.tokens.copy()
    tokens[np.asarray(positions, dtype=np.int64)] = Vocabulary.mask_id
    return x.replace_tokens(tokens)


def position_loss_and_norm_table(params: EncoderParams, x: TokenSequence) -> np.ndarray:
    """Rows ``(loss, grad_norm)`` for masking each single position of ``x``."""
    if len(x) < 1:
        raise ValueError("sentence must be non-empty")
    rows = np.zeros((len(x), 2))
    for i in range(len(x)):
        masked = mask_only(x, [i])
        rows[i, 0] = forward_mlm(params, masked, [i], x)[0].loss
        rows[i, 1] = sentence_gradient(params, masked, [i], x)[1]
    return rows
