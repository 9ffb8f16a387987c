"""Joint training of the encoder and the mask proposal network.

Each step draws a batch, decides per sentence between uniform masking and
MAP-Net sampling, corrupts the chosen positions, and then

* updates the encoder on the mean of ``r_clip * sentence_loss``;
* updates the MAP-Net on its baseline-centred score-function objective over
  the proposal-branch sentences, scaled by ``lam``.

Randomness is split into named streams (``data``, ``mask``, ``corruption``,
``dropout``, ``init``) so an ablation can change exactly one source.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .checkpoint import CheckpointError, read_container, write_container
from .corpus import Batch, TokenSequence
from .encoder import EncoderConfig, EncoderParams, batch_position_logits, segment_matrix, sentence_losses
from .mapnet import (
    PROPOSAL,
    UNIFORM,
    MapNetConfig,
    MapNetParams,
    proposal_log_probs,
    reinforce_coefficients,
)
from .masking import (
    ExplorationSchedule,
    choose_branch,
    corrupt,
    explore_p,
    proposal_mask,
    rand_mask,
)

STREAMS = ("data", "mask", "corruption", "dropout", "init")
JOINT, UNIFORM_ONLY = "joint", "uniform"


@dataclass
class TrainConfig:
    batch_size: int = 32
    total_steps: int = 10_000
    peak_lr: float = 3e-4
    warmup_steps: int = 400
    adam_betas: tuple[float, float] = (0.9, 0.98)
    adam_eps: float = 1e-6
    weight_decay: float = 0.01
    dropout: float = 0.1
    lam: float = 1e-2
    clip_eps: float = 0.2
    mask_rate: float = 0.15
    explore_start: float = 1.0
    explore_end: float = 0.33
    explore_end_step: int | None = None
    seed: int = 0
    eval_interval: int = 200
    checkpoint_interval: int = 0
    mode: str = JOINT
    lambda_on: str = "mapnet"
    mapnet_offpolicy: bool = False
    freeze_shared_from_mapnet: bool = False
    sample_with_replacement: bool = False

    def __post_init__(self):
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        if self.total_steps > 0 and not self.warmup_steps < self.total_steps:
            raise ValueError("warmup_steps must be smaller than total_steps")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if not 0.0 < self.mask_rate < 1.0:
            raise ValueError("mask_rate must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.mode not in (JOINT, UNIFORM_ONLY):
            raise ValueError(f"mode must be {JOINT!r} or {UNIFORM_ONLY!r}")
        if self.lambda_on not in ("mapnet", "encoder"):
            raise ValueError("lambda_on must be 'mapnet' or 'encoder'")
        if self.clip_eps < 0:
            raise ValueError("clip_eps must be non-negative")

    @property
    def schedule(self) -> ExplorationSchedule:
        if self.mode == UNIFORM_ONLY:
            return ExplorationSchedule.pinned(1.0)
        end = self.total_steps if self.explore_end_step is None else self.explore_end_step
        return ExplorationSchedule(self.explore_start, self.explore_end, end)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


TRAIN_PRESETS = {
    "toy": {},
    "paper-base": dict(
        batch_size=256, total_steps=1_000_000, peak_lr=1e-4, warmup_steps=10_000,
        eval_interval=10_000, explore_end_step=1_000_000,
    ),
}


def lr_at(config: TrainConfig, step: int) -> float:
    """Linear warm-up to ``peak_lr`` then linear decay to zero at ``total_steps``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if config.warmup_steps > 0 and step < config.warmup_steps:
        return config.peak_lr * step / config.warmup_steps
    span = config.total_steps - config.warmup_steps
    if span <= 0:
        return 0.0
    return config.peak_lr * max(0.0, (config.total_steps - step) / span)


@dataclass
class AdamMoments:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, arr: np.ndarray) -> "AdamMoments":
        return cls(np.zeros_like(arr), np.zeros_like(arr), 0)


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    moments: dict[str, AdamMoments],
    lr: float,
    betas: tuple[float, float],
    eps: float,
    weight_decay: float,
) -> None:
    """In-place Adam with bias correction and decoupled weight decay.

    Only parameters present in ``grads`` are touched; each keeps its own step
    count, so a network that sat out a step is left exactly as it was.
    """
    b1, b2 = betas
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ad.DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        mom = moments.get(name)
        if mom is None:
            mom = moments[name] = AdamMoments.zeros_like(p.data)
        if mom.m.shape != p.shape:
            raise ad.DimensionError(f"moments for {name} do not match the parameter shape")
        mom.t += 1
        mom.m *= b1
        mom.m += (1.0 - b1) * g
        mom.v *= b2
        mom.v += (1.0 - b2) * (g * g)
        mhat = mom.m / (1.0 - b1**mom.t)
        vhat = mom.v / (1.0 - b2**mom.t)
        if weight_decay:
            p.data -= lr * weight_decay * p.data
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _rng_from_state(state: dict) -> np.random.Generator:
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = state
    return rng


def make_streams(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(child) for name, child in zip(STREAMS, children)}


@dataclass
class TrainState:
    encoder: EncoderParams
    mapnet: MapNetParams
    moments: dict[str, AdamMoments] = field(default_factory=dict)
    step: int = 0
    rngs: dict[str, np.random.Generator] = field(default_factory=dict)
    order: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    cursor: int = 0

    def named_parameters(self) -> dict[str, Tensor]:
        """Every distinct tensor once; the shared embedding lives under ``shared/``."""
        out = {"shared/token_embedding": self.encoder.token_embedding}
        out.update({f"encoder/{k}": v for k, v in self.encoder.tensors.items() if k != "token_embedding"})
        out.update({f"mapnet/{k}": v for k, v in self.mapnet.own_parameters().items()})
        return out


def init_state(encoder_config: EncoderConfig, config: TrainConfig) -> TrainState:
    rngs = make_streams(config.seed)
    init = rngs["init"]
    encoder = EncoderParams.init(replace(encoder_config, dropout=config.dropout), init)
    mapnet = MapNetParams.for_encoder(encoder, init)
    return TrainState(encoder, mapnet, {}, 0, rngs)


def next_batch(state: TrainState, corpus: Sequence[TokenSequence], config: TrainConfig) -> list[TokenSequence]:
    rng = state.rngs["data"]
    n = len(corpus)
    if n == 0:
        raise ValueError("empty corpus")
    if config.sample_with_replacement:
        return [corpus[i] for i in rng.integers(n, size=config.batch_size)]
    picked = []
    while len(picked) < config.batch_size:
        if state.cursor >= len(state.order):
            state.order = rng.permutation(n)
            state.cursor = 0
        take = min(config.batch_size - len(picked), len(state.order) - state.cursor)
        picked.extend(int(i) for i in state.order[state.cursor : state.cursor + take])
        state.cursor += take
    return [corpus[i] for i in picked]


@dataclass
class StepMetrics:
    step: int
    encoder_loss: float
    raw_mlm_loss: float
    mapnet_loss: float
    mean_ratio: float
    clip_active_fraction: float
    explore_p: float
    lr: float
    encoder_grad_norm: float
    mapnet_grad_norm: float
    eval_loss: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _grad_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def train_step(state: TrainState, batch: Sequence[TokenSequence], config: TrainConfig) -> tuple[TrainState, StepMetrics]:
    if not batch:
        raise ValueError("batch must be non-empty")
    rng_mask, rng_corrupt, rng_drop = state.rngs["mask"], state.rngs["corruption"], state.rngs["dropout"]
    step = state.step
    p_explore = explore_p(config.schedule, step)
    branches = [choose_branch(p_explore, rng_mask) for _ in batch]

    # MAP-Net forward over the sentences whose masks it proposes (or all, off-policy).
    map_rows = [b for b, br in enumerate(branches) if br == PROPOSAL]
    learn_rows = list(range(len(batch))) if (config.mapnet_offpolicy and map_rows) else map_rows
    need_map = config.mode == "joint" and bool(learn_rows)
    map_tape = Tape()
    logp = None
    row_of = {}
    if need_map:
        sub = Batch([batch[b] for b in learn_rows])
        with map_tape:
            logp = proposal_log_probs(state.mapnet, sub.tokens, sub.lengths)
        row_of = {b: r for r, b in enumerate(learn_rows)}

    plans = []
    for b, x in enumerate(batch):
        if branches[b] == UNIFORM:
            plans.append(rand_mask(x, config.mask_rate, rng_mask))
        else:
            row = logp.data[row_of[b], : len(x)]
            probs = np.exp(row - row.max())
            probs /= probs.sum()
            plans.append(proposal_mask(x, probs, config.mask_rate, config.clip_eps, rng_mask))

    vocab_size = state.encoder.config.vocab_size
    masked = []
    for x, plan in zip(batch, plans):
        mx, plan.actions = corrupt(x, plan.positions, rng_corrupt, vocab_size, return_actions=True)
        masked.append(mx)

    enc = state.encoder
    mbatch = Batch(masked)
    positions = [pl.positions for pl in plans]
    targets = np.concatenate([x.tokens[pl.positions] for x, pl in zip(batch, plans)])
    weights = np.array([pl.ratio_clipped for pl in plans])
    enc_scale = config.lam if config.lambda_on == "encoder" else 1.0
    with Tape() as enc_tape:
        logits = batch_position_logits(enc, mbatch.tokens, mbatch.lengths, positions, rng_drop)
        per_pos = ad.cross_entropy(logits, targets)
        seg = segment_matrix(positions, enc.config.sentence_loss)
        sent = ad.reshape(ad.matmul(Tensor(seg), ad.reshape(per_pos, (-1, 1))), (len(batch),))
        enc_obj = ad.scale(ad.tsum(ad.mul(sent, Tensor(weights))), enc_scale / len(batch))
    enc_tape.backward(enc_obj)
    raw_loss = float(sent.data.mean())

    # Score-function objective for the MAP-Net; losses enter as constants.
    map_scale = config.lam if config.lambda_on == "mapnet" else 1.0
    map_value = 0.0
    map_grads: dict[str, np.ndarray] = {}
    if need_map and map_scale != 0.0:
        starts = np.concatenate([[0], np.cumsum([pl.K for pl in plans])])
        width = logp.shape[1]
        flat_idx, coeffs = [], []
        for b in learn_rows:
            flat_idx.append(row_of[b] * width + plans[b].positions)
            coeffs.append(reinforce_coefficients(per_pos.data[starts[b] : starts[b + 1]]))
        with map_tape:
            picked = ad.take(logp, np.concatenate(flat_idx))
            map_obj = ad.scale(ad.tsum(ad.mul(picked, Tensor(np.concatenate(coeffs)))), -map_scale / len(learn_rows))
        map_tape.backward(map_obj)
        map_value = float(map_obj.data) / map_scale
        map_grads = {
            f"mapnet/{k}": map_tape.grad(v) for k, v in state.mapnet.own_parameters().items()
        }

    named = state.named_parameters()
    grads = {"shared/token_embedding": enc_tape.grad(enc.token_embedding)}
    grads.update({f"encoder/{k}": enc_tape.grad(v) for k, v in enc.tensors.items() if k != "token_embedding"})
    enc_norm = _grad_norm(grads)
    if map_grads:
        shared_from_map = map_tape.grad(state.mapnet.token_embedding)
        map_norm = math.sqrt(_grad_norm(map_grads) ** 2 + float(np.vdot(shared_from_map, shared_from_map)))
        if not config.freeze_shared_from_mapnet:
            grads["shared/token_embedding"] = grads["shared/token_embedding"] + shared_from_map
        grads.update(map_grads)
    else:
        map_norm = 0.0

    lr = lr_at(config, step)
    adam_step(named, grads, state.moments, lr, config.adam_betas, config.adam_eps, config.weight_decay)
    state.step += 1

    metrics = StepMetrics(
        step=state.step,
        encoder_loss=float(enc_obj.data) / enc_scale if enc_scale else float(np.mean(weights * sent.data)),
        raw_mlm_loss=raw_loss,
        mapnet_loss=map_value,
        mean_ratio=float(weights.mean()),
        clip_active_fraction=float(np.mean([pl.ratio != pl.ratio_clipped for pl in plans])),
        explore_p=float(p_explore),
        lr=float(lr),
        encoder_grad_norm=enc_norm,
        mapnet_grad_norm=map_norm,
    )
    return state, metrics


@dataclass
class EvalSet:
    """Held-out sentences with fixed uniform masks and fixed corruption."""

    batches: list[tuple[Batch, list[np.ndarray], np.ndarray]]

    @classmethod
    def build(cls, corpus: Sequence[TokenSequence], mask_rate: float, vocab_size: int, seed: int, batch_size: int = 64):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE7A1]))
        batches = []
        for start in range(0, len(corpus), batch_size):
            chunk = list(corpus[start : start + batch_size])
            plans = [rand_mask(x, mask_rate, rng) for x in chunk]
            masked = [corrupt(x, pl.positions, rng, vocab_size) for x, pl in zip(chunk, plans)]
            targets = np.concatenate([x.tokens[pl.positions] for x, pl in zip(chunk, plans)])
            batches.append((Batch(masked), [pl.positions for pl in plans], targets))
        return cls(batches)

    def loss(self, encoder: EncoderParams) -> float:
        """Mean sentence loss, eval mode."""
        total, count = 0.0, 0
        for mb, positions, targets in self.batches:
            s = sentence_losses(encoder, mb.tokens, mb.lengths, positions, targets)
            total += float(s.data.sum())
            count += len(positions)
        return total / count if count else float("nan")


def train(
    config: TrainConfig,
    corpus: Sequence[TokenSequence],
    encoder_config: EncoderConfig | None = None,
    eval_corpus: Sequence[TokenSequence] | None = None,
    state: TrainState | None = None,
    output_dir: str | Path | None = None,
    stop_at: int | None = None,
) -> tuple[TrainState, list[StepMetrics]]:
    """Run until ``config.total_steps`` (or ``stop_at``) updates have been made.

    With ``output_dir`` set, metrics are appended to ``metrics.jsonl`` (one
    JSON object per step) and checkpoints written every
    ``checkpoint_interval`` steps to ``checkpoints/step_XXXXXXX.mvar``.
    """
    if state is None:
        if encoder_config is None:
            raise ValueError("encoder_config is required to initialise a fresh run")
        state = init_state(encoder_config, config)
    evalset = None
    if eval_corpus:
        evalset = EvalSet.build(eval_corpus, config.mask_rate, state.encoder.config.vocab_size, config.seed)
    out = Path(output_dir) if output_dir is not None else None
    log = None
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            log = open(out / "metrics.jsonl", "a" if state.step else "w", encoding="utf-8")
        except OSError as err:
            raise OSError(f"cannot open metrics log under {out}: {err}") from err
    history: list[StepMetrics] = []
    end = config.total_steps if stop_at is None else min(stop_at, config.total_steps)
    try:
        while state.step < end:
            batch = next_batch(state, corpus, config)
            state, m = train_step(state, batch, config)
            if evalset is not None and config.eval_interval and (
                state.step % config.eval_interval == 0 or state.step == config.total_steps
            ):
                m.eval_loss = evalset.loss(state.encoder)
            history.append(m)
            if log is not None:
                log.write(m.to_json() + "\n")
            if out is not None and config.checkpoint_interval and state.step % config.checkpoint_interval == 0:
                save_checkpoint(out / "checkpoints" / f"step_{state.step:07d}.mvar", state, config)
    finally:
        if log is not None:
            log.close()
    return state, history


def steps_to_threshold(history: Sequence[StepMetrics], tau: float) -> int | None:
    """First logged step whose eval loss is at or below ``tau``."""
    for m in history:
        if m.eval_loss is not None and m.eval_loss <= tau:
            return m.step
    return None


def eval_curve(history: Sequence[StepMetrics]) -> list[tuple[int, float]]:
    return [(m.step, m.eval_loss) for m in history if m.eval_loss is not None]


# -- persistence --------------------------------------------------------------


def model_tensors(encoder: EncoderParams, mapnet: MapNetParams | None) -> dict[str, np.ndarray]:
    out = {"shared/token_embedding": encoder.token_embedding.data}
    out.update({f"encoder/{k}": v.data for k, v in encoder.tensors.items() if k != "token_embedding"})
    if mapnet is not None:
        out.update({f"mapnet/{k}": v.data for k, v in mapnet.own_parameters().items()})
    return out


def save_checkpoint(path: str | Path, state: TrainState, config: TrainConfig | None = None) -> None:
    """Models, Adam moments, RNG streams and data order in one container."""
    tensors = model_tensors(state.encoder, state.mapnet)
    for name, mom in state.moments.items():
        tensors[f"adam_m/{name}"] = mom.m
        tensors[f"adam_v/{name}"] = mom.v
    header = {
        "kind": "train_state",
        "encoder_config": state.encoder.config.to_dict(),
        "mapnet_config": asdict(state.mapnet.config),
        "shared": ["shared/token_embedding"],
        "step": state.step,
        "adam_t": {k: m.t for k, m in state.moments.items()},
        "rng": {k: _rng_state(r) for k, r in state.rngs.items()},
        "data_order": {"order": [int(i) for i in state.order], "cursor": state.cursor},
        "train_config": None if config is None else config.to_dict(),
    }
    write_container(path, header, tensors)


def save_models(path: str | Path, encoder: EncoderParams, mapnet: MapNetParams | None = None) -> None:
    header = {
        "kind": "models",
        "encoder_config": encoder.config.to_dict(),
        "mapnet_config": None if mapnet is None else asdict(mapnet.config),
        "shared": ["shared/token_embedding"],
    }
    write_container(path, header, model_tensors(encoder, mapnet))


def _models_from(header: dict, tensors: dict[str, np.ndarray]) -> tuple[EncoderParams, MapNetParams | None]:
    try:
        enc_cfg = EncoderConfig(**header["encoder_config"])
        emb = Tensor(tensors["shared/token_embedding"], True, "token_embedding")
        enc_t = {"token_embedding": emb}
        prefix = "encoder/"
        enc_t.update({k[len(prefix):]: Tensor(v, True, k[len(prefix):]) for k, v in tensors.items() if k.startswith(prefix)})
        encoder = EncoderParams(enc_cfg, enc_t)
        mapnet = None
        if header.get("mapnet_config"):
            m_cfg = MapNetConfig(**header["mapnet_config"])
            m_t = {"token_embedding": emb}
            prefix = "mapnet/"
            m_t.update({k[len(prefix):]: Tensor(v, True, k[len(prefix):]) for k, v in tensors.items() if k.startswith(prefix)})
            mapnet = MapNetParams(m_cfg, m_t)
    except (KeyError, TypeError) as err:
        raise CheckpointError(f"checkpoint is missing model data: {err}") from err
    return encoder, mapnet


def load_models(path: str | Path) -> tuple[EncoderParams, MapNetParams | None]:
    header, tensors = read_container(path)
    return _models_from(header, tensors)


def load_checkpoint(path: str | Path) -> tuple[TrainState, TrainConfig | None]:
    header, tensors = read_container(path)
    if header.get("kind") != "train_state":
        raise CheckpointError(f"{path} holds models only, not a resumable training state")
    encoder, mapnet = _models_from(header, tensors)
    moments = {}
    for name, t in header["adam_t"].items():
        moments[name] = AdamMoments(tensors[f"adam_m/{name}"], tensors[f"adam_v/{name}"], int(t))
    rngs = {k: _rng_from_state(v) for k, v in header["rng"].items()}
    order = np.array(header["data_order"]["order"], dtype=np.int64)
    state = TrainState(encoder, mapnet, moments, int(header["step"]), rngs, order, int(header["data_order"]["cursor"]))
    cfg = header.get("train_config")
    return state, (TrainConfig.from_dict(cfg) if cfg else None)
