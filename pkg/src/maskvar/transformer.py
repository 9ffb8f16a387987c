"""Pre-LayerNorm transformer blocks shared by the encoder and the MAP-Net."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# Large-but-finite additive bias for padded keys; keeps every tensor finite.
NEG_BIAS = -1e9

LAYER_PARAM_SUFFIXES = (
    "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo",
    "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
    "ln1.gamma", "ln1.beta", "ln2.gamma", "ln2.beta",
)


def init_layers(rng: np.random.Generator, num_layers: int, hidden: int, ffn: int, std: float) -> dict[str, Tensor]:
    """Parameters for ``num_layers`` blocks, attention then FFN then norms per layer."""
    out: dict[str, Tensor] = {}
    for layer in range(num_layers):
        shapes = {
            "attn.wq": (hidden, hidden), "attn.bq": (hidden,),
            "attn.wk": (hidden, hidden), "attn.bk": (hidden,),
            "attn.wv": (hidden, hidden), "attn.bv": (hidden,),
            "attn.wo": (hidden, hidden), "attn.bo": (hidden,),
            "ffn.w1": (hidden, ffn), "ffn.b1": (ffn,),
            "ffn.w2": (ffn, hidden), "ffn.b2": (hidden,),
            "ln1.gamma": (hidden,), "ln1.beta": (hidden,),
            "ln2.gamma": (hidden,), "ln2.beta": (hidden,),
        }
        for suffix in LAYER_PARAM_SUFFIXES:
            shape = shapes[suffix]
            name = f"layer{layer}.{suffix}"
            if suffix.endswith("gamma"):
                data = np.ones(shape)
            elif len(shape) == 1:
                data = np.zeros(shape)
            else:
                data = rng.normal(0.0, std, size=shape)
            out[name] = Tensor(data, requires_grad=True, name=name)
    return out


def key_padding_bias(lengths: np.ndarray, width: int) -> np.ndarray:
    valid = np.arange(width)[None, :] < np.asarray(lengths)[:, None]
    return np.where(valid, 0.0, NEG_BIAS)[:, None, None, :]


def attention(p: dict[str, Tensor], prefix: str, x: Tensor, bias: np.ndarray, num_heads: int) -> Tensor:
    batch, width, hidden = x.shape
    d = hidden // num_heads

    def heads(w, b):
        y = ad.linear(x, p[prefix + w], p[prefix + b])
        return ad.transpose(ad.reshape(y, (batch, width, num_heads, d)), (0, 2, 1, 3))

    q = heads("attn.wq", "attn.bq")
    k = heads("attn.wk", "attn.bk")
    v = heads("attn.wv", "attn.bv")
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(d))
    probs = ad.softmax(ad.add_constant(scores, bias), axis=-1)
    ctx = ad.reshape(ad.transpose(ad.matmul(probs, v), (0, 2, 1, 3)), (batch, width, hidden))
    return ad.linear(ctx, p[prefix + "attn.wo"], p[prefix + "attn.bo"])


def stack_forward(
    p: dict[str, Tensor],
    h: Tensor,
    lengths: np.ndarray,
    num_layers: int,
    num_heads: int,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    bias = key_padding_bias(lengths, h.shape[1])
    for layer in range(num_layers):
        pre = f"layer{layer}."
        a = attention(p, pre, ad.layernorm(h, p[pre + "ln1.gamma"], p[pre + "ln1.beta"]), bias, num_heads)
        h = ad.add(h, ad.dropout(a, dropout, rng))
        z = ad.layernorm(h, p[pre + "ln2.gamma"], p[pre + "ln2.beta"])
        z = ad.linear(z, p[pre + "ffn.w1"], p[pre + "ffn.b1"])
        z = ad.linear(ad.gelu(z), p[pre + "ffn.w2"], p[pre + "ffn.b2"])
        h = ad.add(h, ad.dropout(z, dropout, rng))
    return h
