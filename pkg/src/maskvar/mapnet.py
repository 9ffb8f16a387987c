"""Mask proposal network: a half-width encoder scoring every position.

The network reads the unmasked sentence, projects the shared token
embeddings down to its own width, runs its transformer stack and emits one
score per position.  A softmax over real (non-padding) positions gives the
proposal; positions are drawn from it sequentially without replacement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .corpus import TokenSequence
from .encoder import EncoderConfig, EncoderParams, PositionLoss
from .transformer import NEG_BIAS, init_layers, stack_forward

UNIFORM, PROPOSAL = "uniform", "proposal"


@dataclass(frozen=True)
class MapNetConfig:
    hidden_size: int
    num_heads: int
    num_layers: int
    ffn_multiplier: int
    max_seq_len: int
    embed_size: int
    init_std: float = 0.02

    @classmethod
    def half_of(cls, enc: EncoderConfig) -> "MapNetConfig":
        if enc.hidden_size % 2:
            raise ValueError("encoder hidden size must be even to halve it")
        heads = max(1, enc.num_heads // 2)
        if (enc.hidden_size // 2) % heads:
            raise ValueError("halved hidden size must be divisible by halved head count")
        return cls(
            hidden_size=enc.hidden_size // 2,
            num_heads=heads,
            num_layers=enc.num_layers,
            ffn_multiplier=enc.ffn_multiplier,
            max_seq_len=enc.max_seq_len,
            embed_size=enc.hidden_size,
            init_std=enc.init_std,
        )


class MapNetParams:
    """MAP-Net weights; the token embedding is the encoder's tensor, by reference."""

    def __init__(self, config: MapNetConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    @classmethod
    def init(cls, config: MapNetConfig, shared_embedding: Tensor, rng: np.random.Generator) -> "MapNetParams":
        H, E, std = config.hidden_size, config.embed_size, config.init_std
        if shared_embedding.shape[1] != E:
            raise ValueError("shared embedding width does not match MapNetConfig.embed_size")
        t: dict[str, Tensor] = {"token_embedding": shared_embedding}
        t["input_proj.weight"] = Tensor(rng.normal(0.0, std, (E, H)), True, "input_proj.weight")
        t["input_proj.bias"] = Tensor(np.zeros(H), True, "input_proj.bias")
        t["position_embedding"] = Tensor(rng.normal(0.0, std, (config.max_seq_len, H)), True, "position_embedding")
        t.update(init_layers(rng, config.num_layers, H, H * config.ffn_multiplier, std))
        t["final_ln.gamma"] = Tensor(np.ones(H), True, "final_ln.gamma")
        t["final_ln.beta"] = Tensor(np.zeros(H), True, "final_ln.beta")
        t["score.weight"] = Tensor(rng.normal(0.0, std, (H, 1)), True, "score.weight")
        t["score.bias"] = Tensor(np.zeros(1), True, "score.bias")
        return cls(config, t)

    @classmethod
    def for_encoder(cls, enc: EncoderParams, rng: np.random.Generator) -> "MapNetParams":
        return cls.init(MapNetConfig.half_of(enc.config), enc.token_embedding, rng)

    @property
    def token_embedding(self) -> Tensor:
        return self.tensors["token_embedding"]

    def own_parameters(self) -> dict[str, Tensor]:
        """Everything except the shared embedding."""
        return {k: v for k, v in self.tensors.items() if k != "token_embedding"}


@dataclass
class ProposalDistribution:
    probs: np.ndarray
    log_probs: Tensor | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.probs)


@dataclass
class MaskPlan:
    """Where a sentence is masked, how, and with what importance weight."""

    positions: np.ndarray
    probs: np.ndarray
    ratio: float = 1.0
    ratio_clipped: float = 1.0
    source: str = UNIFORM
    actions: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.int64)
        self.probs = np.asarray(self.probs, dtype=np.float64)

    @property
    def K(self) -> int:
        return int(self.positions.size)

    def to_dict(self) -> dict:
        return {
            "positions": [int(p) for p in self.positions],
            "probs": [float(p) for p in self.probs],
            "actions": None if self.actions is None else [ACTION_NAMES[int(a)] for a in self.actions],
            "ratio": float(self.ratio),
            "ratio_clipped": float(self.ratio_clipped),
            "source": self.source,
        }


ACTION_NAMES = ("mask", "random", "keep")


def num_masked(n: int, mask_rate: float) -> int:
    """``max(1, round_half_up(mask_rate * n))`` capped at ``n``."""
    return min(n, max(1, int(math.floor(mask_rate * n + 0.5))))


def proposal_log_probs(params: MapNetParams, tokens: np.ndarray, lengths: np.ndarray) -> Tensor:
    """Log proposal over positions, shape (B, T); padding gets ~-1e9."""
    cfg = params.config
    t = params.tensors
    batch, width = tokens.shape
    if width > cfg.max_seq_len:
        raise IndexError(f"sequence length {width} exceeds max_seq_len {cfg.max_seq_len}")
    h = ad.embedding_gather(t["token_embedding"], tokens)
    h = ad.linear(h, t["input_proj.weight"], t["input_proj.bias"])
    pos = ad.embedding_gather(t["position_embedding"], np.broadcast_to(np.arange(width), (batch, width)))
    h = stack_forward(t, ad.add(h, pos), lengths, cfg.num_layers, cfg.num_heads)
    h = ad.layernorm(h, t["final_ln.gamma"], t["final_ln.beta"])
    scores = ad.reshape(ad.linear(h, t["score.weight"], t["score.bias"]), (batch, width))
    valid = np.arange(width)[None, :] < np.asarray(lengths)[:, None]
    return ad.log_softmax(ad.add_constant(scores, np.where(valid, 0.0, NEG_BIAS)), axis=-1)


def propose(params: MapNetParams, x: TokenSequence) -> ProposalDistribution:
    n = len(x)
    if n < 1:
        raise ValueError("sentence must be non-empty")
    logp = proposal_log_probs(params, x.tokens[None, :], np.array([n]))
    row = logp.data[0]
    p = np.exp(row - row.max())
    return ProposalDistribution(p / p.sum(), ad.reshape(logp, (n,)) if logp.requires_grad else None)


def sample_positions(dist: ProposalDistribution | np.ndarray, K: int, rng: np.random.Generator):
    """K distinct positions drawn sequentially, renormalizing after each draw.

    Returns ``(positions, raw_probs)``; ``raw_probs`` are the original
    (un-renormalized) probabilities of the drawn positions.
    """
    probs = np.asarray(getattr(dist, "probs", dist), dtype=np.float64)
    n = probs.size
    if K > n:
        raise ValueError(f"cannot draw {K} distinct positions from {n}")
    if K < 0:
        raise ValueError("K must be non-negative")
    remaining = probs.copy()
    positions = np.empty(K, dtype=np.int64)
    for k in range(K):
        cdf = np.cumsum(remaining)
        u = rng.random() * cdf[-1]
        i = int(np.searchsorted(cdf, u, side="right"))
        i = min(i, n - 1)
        while remaining[i] == 0.0:
            i -= 1
        positions[k] = i
        remaining[i] = 0.0
    return positions, probs[positions]


def importance_ratio(raw_probs, n: int, K: int, eps: float) -> tuple[float, float]:
    """``r = (1/n)^K / prod(raw_probs)`` and ``clip(r, 1-eps, 1+eps)``."""
    raw = np.asarray(raw_probs, dtype=np.float64)
    if raw.size != K:
        raise ValueError("need one raw probability per masked position")
    if np.any(raw <= 0.0):
        raise FloatingPointError("proposal probabilities must be positive")
    log_r = -K * math.log(n) - float(np.log(raw).sum())
    r = math.exp(min(log_r, 700.0))
    return r, min(max(r, 1.0 - eps), 1.0 + eps)


def reinforce_coefficients(losses) -> np.ndarray:
    """Per-position ``loss - mean(loss)``; exactly zero when all losses agree."""
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        raise ValueError("mapnet objective needs at least one masked position")
    return losses - losses.sum() / losses.size


def mapnet_loss(dist: ProposalDistribution, plan: MaskPlan, position_losses: list[PositionLoss]) -> Tensor:
    """``sum_k -log p(pos_k) * (loss_k - baseline)`` with losses held constant."""
    if plan.K == 0:
        raise ValueError("mapnet objective needs at least one masked position")
    if len(position_losses) != plan.K or any(
        pl.position != int(p) for pl, p in zip(position_losses, plan.positions)
    ):
        raise ValueError("position losses must align with plan positions")
    coeff = reinforce_coefficients([pl.loss for pl in position_losses])
    logp = dist.log_probs if dist.log_probs is not None else Tensor(np.log(dist.probs))
    picked = ad.take(logp, plan.positions)
    return ad.scale(ad.tsum(ad.mul(picked, Tensor(coeff))), -1.0)


def mapnet_gradients(params: MapNetParams, x: TokenSequence, plan: MaskPlan, position_losses) -> tuple[float, dict[str, np.ndarray]]:
    """Value of :func:`mapnet_loss` and its gradient for every MAP-Net tensor."""
    with Tape() as tape:
        dist = propose(params, x)
        obj = mapnet_loss(dist, plan, position_losses)
    tape.backward(obj)
    return float(obj.data), {k: tape.grad(v) for k, v in params.tensors.items()}
